//! Simulated phone inference: the computer baseline, the gallery path
//! (quantized model on a stored image) and the real-time camera path
//! (frame cover, square crop, float model).

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deploy::{DeployError, DeployableModel, Provenance};
use crate::image_ops::{center_crop, resize_bilinear, ImageBuffer, ImageError};
use crate::nn::{predict, NnError, TrainedModel};

#[derive(Debug, thiserror::Error)]
pub enum DeviceSimError {
    #[error("label order differs: model {model:?}, container {deployable:?}")]
    LabelOrderMismatch {
        model: Vec<String>,
        deployable: Vec<String>,
    },
    #[error("empty test set")]
    EmptyTestSet,
    #[error(transparent)]
    Deploy(#[from] DeployError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Camera frame and the square crop taken from its center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameGeometry {
    pub frame_width: usize,
    pub frame_height: usize,
    pub crop: usize,
}

impl Default for FrameGeometry {
    fn default() -> Self {
        Self {
            frame_width: 480,
            frame_height: 640,
            crop: 480,
        }
    }
}

impl FrameGeometry {
    /// What the model sees of `img` held up to the camera: scaled uniformly
    /// to cover the frame, center-cropped to the frame, then to the square.
    pub fn capture(&self, img: &ImageBuffer) -> Result<ImageBuffer, ImageError> {
        let (w, h) = (img.width() as f64, img.height() as f64);
        let (fw, fh) = (self.frame_width, self.frame_height);
        let s = (fw as f64 / w).max(fh as f64 / h);
        let sw = ((w * s).round() as usize).max(fw);
        let sh = ((h * s).round() as usize).max(fh);
        let covered = resize_bilinear(img, sw, sh)?;
        let frame = center_crop(&covered, fw, fh)?;
        center_crop(&frame, self.crop, self.crop)
    }
}

/// Baseline: float model, direct resize to the input size.
pub fn computer_path(model: &TrainedModel, img: &ImageBuffer) -> Result<usize, DeviceSimError> {
    Ok(predict(model, img)?)
}

/// Quantized model on a stored image.
pub fn gallery_path(deployable: &DeployableModel, img: &ImageBuffer) -> Result<usize, DeviceSimError> {
    if !deployable.is_quantized() {
        return Err(DeployError::NotQuantized.into());
    }
    Ok(predict(&deployable.to_trained_model(), img)?)
}

/// Float model on the camera view of `img`.
pub fn realtime_path(
    model: &TrainedModel,
    img: &ImageBuffer,
    geom: &FrameGeometry,
) -> Result<usize, DeviceSimError> {
    Ok(predict(model, &geom.capture(img)?)?)
}

#[derive(Debug, Clone)]
pub struct TestItem {
    pub name: String,
    pub image: ImageBuffer,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemPrediction {
    pub item: String,
    pub truth: usize,
    pub computer: usize,
    pub gallery: usize,
    pub realtime: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub model_id: String,
    pub test_set_id: String,
    pub items: usize,
    pub computer: f64,
    pub gallery: f64,
    pub realtime: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(skip)]
    pub predictions: Vec<ItemPrediction>,
}

impl GapReport {
    /// Accuracies of (computer, gallery, realtime) from per-item predictions.
    pub fn accuracies(predictions: &[ItemPrediction]) -> (f64, f64, f64) {
        let n = predictions.len().max(1) as f64;
        let acc = |f: fn(&ItemPrediction) -> usize| {
            predictions.iter().filter(|p| f(p) == p.truth).count() as f64 / n
        };
        (acc(|p| p.computer), acc(|p| p.gallery), acc(|p| p.realtime))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        if let Some(p) = &self.provenance {
            writeln!(s, "# seed={} config_hash={}", p.seed, p.config_hash).unwrap();
        }
        s.push_str("item,truth,computer_pred,gallery_pred,realtime_pred\n");
        for p in &self.predictions {
            writeln!(s, "{},{},{},{},{}", p.item, p.truth, p.computer, p.gallery, p.realtime).unwrap();
        }
        s
    }

    /// Writes `gap_report.csv` and `gap_report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), DeviceSimError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("gap_report.csv"), self.to_csv())?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(dir.join("gap_report.json"), json)?;
        Ok(())
    }
}

/// Parses the per-item rows of a `gap_report.csv`.
pub fn read_predictions_csv(text: &str) -> Option<Vec<ItemPrediction>> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.rsplitn(5, ',').collect();
            if f.len() != 5 {
                return None;
            }
            Some(ItemPrediction {
                item: f[4].to_string(),
                truth: f[3].parse().ok()?,
                computer: f[2].parse().ok()?,
                gallery: f[1].parse().ok()?,
                realtime: f[0].parse().ok()?,
            })
        })
        .collect()
}

/// Runs every item through all three paths on the current rayon pool.
pub fn compare_paths(
    model: &TrainedModel,
    deployable: &DeployableModel,
    test_set: &[TestItem],
    geom: &FrameGeometry,
    model_id: &str,
    test_set_id: &str,
) -> Result<GapReport, DeviceSimError> {
    if model.labels != deployable.labels {
        return Err(DeviceSimError::LabelOrderMismatch {
            model: model.labels.clone(),
            deployable: deployable.labels.clone(),
        });
    }
    if test_set.is_empty() {
        return Err(DeviceSimError::EmptyTestSet);
    }
    if !deployable.is_quantized() {
        return Err(DeployError::NotQuantized.into());
    }
    let gallery_model = deployable.to_trained_model();
    let predictions = test_set
        .par_iter()
        .map(|t| {
            Ok(ItemPrediction {
                item: t.name.clone(),
                truth: t.label,
                computer: computer_path(model, &t.image)?,
                gallery: predict(&gallery_model, &t.image)?,
                realtime: realtime_path(model, &t.image, geom)?,
            })
        })
        .collect::<Result<Vec<_>, DeviceSimError>>()?;
    let (computer, gallery, realtime) = GapReport::accuracies(&predictions);
    Ok(GapReport {
        model_id: model_id.to_string(),
        test_set_id: test_set_id.to_string(),
        items: predictions.len(),
        computer,
        gallery,
        realtime,
        provenance: deployable.provenance.clone(),
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deploy::{package, ModelMetadata};
    use crate::nn::{init_weights, preset};

    fn zero_model(size: usize) -> TrainedModel {
        let arch = preset("d1m1@2x3", size, 3, 2).unwrap();
        let mut m = init_weights(&arch, 0).unwrap();
        for w in &mut m.weights {
            w.data_mut().fill(0.0);
        }
        m.labels = vec!["a".into(), "b".into()];
        m
    }

    fn ramp(w: usize, h: usize) -> ImageBuffer {
        let data = (0..w * h * 3).map(|i| ((i * 7) % 256) as f32).collect();
        ImageBuffer::new(w, h, 3, data).unwrap()
    }

    #[test]
    fn default_geometry_crops_bands() {
        let g = FrameGeometry::default();
        assert_eq!((g.frame_height - g.crop) / 2, 80);
        // A 480x640 frame is only cropped.
        let img = ramp(480, 640);
        let cap = g.capture(&img).unwrap();
        assert_eq!(cap, center_crop(&img, 480, 480).unwrap());
        // A square image loses 12.5% on every side, so a dark 6-px border
        // of a 64-px image never reaches the crop.
        let mut sq = ImageBuffer::filled(64, 64, 3, 0.0);
        for y in 6..58 {
            for x in 6..58 {
                for c in 0..3 {
                    let i = sq.index(x, y, c);
                    sq.data_mut()[i] = 255.0;
                }
            }
        }
        let cap = g.capture(&sq).unwrap();
        assert_eq!((cap.width(), cap.height()), (480, 480));
        assert!(cap.data().iter().all(|&v| v == 255.0));
    }

    #[test]
    fn identity_geometry_matches_computer_path() {
        let model = zero_model(12);
        let img = ramp(12, 12);
        let g = FrameGeometry {
            frame_width: 12,
            frame_height: 12,
            crop: 12,
        };
        assert_eq!(g.capture(&img).unwrap(), img);
        assert_eq!(realtime_path(&model, &img, &g).unwrap(), computer_path(&model, &img).unwrap());
    }

    #[test]
    fn zero_model_paths_agree_on_class_zero() {
        let model = zero_model(10);
        let meta = ModelMetadata::for_model(&model, "z", "v1", "X");
        let d = package(&model, meta.clone(), true, None).unwrap();
        let img = ImageBuffer::filled(10, 10, 3, 90.0);
        assert_eq!(computer_path(&model, &img).unwrap(), 0);
        assert_eq!(gallery_path(&d, &img).unwrap(), 0);
        let float = package(&model, meta, false, None).unwrap();
        assert!(matches!(
            gallery_path(&float, &img),
            Err(DeviceSimError::Deploy(DeployError::NotQuantized))
        ));
    }

    #[test]
    fn report_csv_recomputes_accuracies() {
        let model = zero_model(10);
        let meta = ModelMetadata::for_model(&model, "z", "v1", "X");
        let d = package(&model, meta, true, None).unwrap();
        let items: Vec<TestItem> = (0..4)
            .map(|i| TestItem {
                name: format!("x/{i}.png"),
                image: ramp(20, 20),
                label: i % 2,
            })
            .collect();
        let report = compare_paths(&model, &d, &items, &FrameGeometry::default(), "m", "t").unwrap();
        assert_eq!((report.computer, report.gallery, report.realtime), (0.5, 0.5, 0.5));
        let parsed = read_predictions_csv(&report.to_csv()).unwrap();
        assert_eq!(parsed, report.predictions);
        assert_eq!(GapReport::accuracies(&parsed), (0.5, 0.5, 0.5));

        let mut swapped = d.clone();
        swapped.labels.reverse();
        assert!(matches!(
            compare_paths(&model, &swapped, &items, &FrameGeometry::default(), "m", "t"),
            Err(DeviceSimError::LabelOrderMismatch { .. })
        ));
    }
}
