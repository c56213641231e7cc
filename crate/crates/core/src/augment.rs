//! Training-time augmentation: the four generator presets and the
//! transforms they sample.
//!
//! A generator applies, in order: affine geometry (rotation, shear, zoom,
//! shift) with nearest-neighbor sampling and nearest-edge fill, flips,
//! brightness scaling of the raw values, featurewise centering and scaling,
//! and finally the rescale factor. Evaluation never samples; it only applies
//! the deterministic tail of that chain (see [`eval_normalization`]).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image_ops::{normalize_per_channel, ImageBuffer};
use crate::nn::Normalization;
use crate::tensor::Tensor;

pub const STD_EPSILON: f32 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("unknown generator preset {0:?} (expected G1..G4)")]
    UnknownPreset(String),
    #[error("cannot fit featurewise statistics on an empty training set")]
    EmptyTrainingSet,
    #[error("featurewise normalization requested but no statistics were fitted")]
    MissingStats,
    #[error("zoom factors must be positive")]
    InvalidZoom,
    #[error("images have mismatched channel counts")]
    ChannelMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GeneratorId {
    G1,
    G2,
    G3,
    G4,
}

impl GeneratorId {
    pub const ALL: [GeneratorId; 4] = [Self::G1, Self::G2, Self::G3, Self::G4];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for GeneratorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "G{}", self.index() + 1)
    }
}

impl FromStr for GeneratorId {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "G1" => Ok(Self::G1),
            "G2" => Ok(Self::G2),
            "G3" => Ok(Self::G3),
            "G4" => Ok(Self::G4),
            _ => Err(AugmentError::UnknownPreset(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    NearestEdge,
}

/// Augmentation settings. A disabled range is `0.0`; a disabled rescale or
/// brightness range is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentorSpec {
    pub rescale: Option<f64>,
    pub rotation_range: f32,
    pub brightness_range: Option<(f32, f32)>,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub fill_mode: Option<FillMode>,
    pub featurewise_center: bool,
    pub featurewise_std_normalization: bool,
    pub zoom_range: f32,
    /// Shear intensity, interpreted as degrees.
    pub shear_range: f32,
    pub width_shift_range: f32,
    pub height_shift_range: f32,
}

impl AugmentorSpec {
    /// Rescale only, no stochastic transform.
    pub fn identity() -> Self {
        Self {
            rescale: Some(1.0 / 255.0),
            rotation_range: 0.0,
            brightness_range: None,
            horizontal_flip: false,
            vertical_flip: false,
            fill_mode: None,
            featurewise_center: false,
            featurewise_std_normalization: false,
            zoom_range: 0.0,
            shear_range: 0.0,
            width_shift_range: 0.0,
            height_shift_range: 0.0,
        }
    }

    pub fn needs_stats(&self) -> bool {
        self.featurewise_center || self.featurewise_std_normalization
    }

    fn rescale_factor(&self) -> f64 {
        self.rescale.unwrap_or(1.0)
    }
}

pub fn preset(id: GeneratorId) -> AugmentorSpec {
    let g1 = AugmentorSpec::identity();
    let g2 = AugmentorSpec {
        rotation_range: 40.0,
        brightness_range: Some((0.2, 1.0)),
        horizontal_flip: true,
        vertical_flip: true,
        fill_mode: Some(FillMode::NearestEdge),
        ..g1.clone()
    };
    let g3 = AugmentorSpec {
        featurewise_center: true,
        featurewise_std_normalization: true,
        ..g2.clone()
    };
    let g4 = AugmentorSpec {
        zoom_range: 0.2,
        shear_range: 0.2,
        width_shift_range: 0.2,
        height_shift_range: 0.2,
        ..g3.clone()
    };
    match id {
        GeneratorId::G1 => g1,
        GeneratorId::G2 => g2,
        GeneratorId::G3 => g3,
        GeneratorId::G4 => g4,
    }
}

/// Per-channel statistics of the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturewiseStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Population mean and std per channel over every pixel of every image,
/// accumulated in `f64`; std is floored at [`STD_EPSILON`].
pub fn fit_stats<'a, I>(train_images: I) -> Result<FeaturewiseStats, AugmentError>
where
    I: IntoIterator<Item = &'a ImageBuffer>,
{
    let mut iter = train_images.into_iter().peekable();
    let channels = iter.peek().ok_or(AugmentError::EmptyTrainingSet)?.channels();
    let mut count = 0u64;
    let mut sum = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    for img in iter {
        if img.channels() != channels {
            return Err(AugmentError::ChannelMismatch);
        }
        for px in img.data().chunks_exact(channels) {
            for (c, &v) in px.iter().enumerate() {
                sum[c] += v as f64;
                sq[c] += (v as f64) * (v as f64);
            }
        }
        count += (img.width() * img.height()) as u64;
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| ((q / n - m * m).max(0.0).sqrt() as f32).max(STD_EPSILON))
        .collect();
    Ok(FeaturewiseStats {
        mean: mean.into_iter().map(|m| m as f32).collect(),
        std,
    })
}

/// Maps output coordinates to source coordinates about the image center,
/// `src = A * (dst - center) + center + shift` with
/// `A = rotation * shear * zoom`, sampled nearest-neighbor with edge clamping.
pub fn affine_transform(
    img: &ImageBuffer,
    angle_deg: f32,
    shear_deg: f32,
    zoom: (f32, f32),
    tx: f32,
    ty: f32,
) -> Result<ImageBuffer, AugmentError> {
    if !(zoom.0 > 0.0 && zoom.1 > 0.0) {
        return Err(AugmentError::InvalidZoom);
    }
    if angle_deg == 0.0 && shear_deg == 0.0 && zoom == (1.0, 1.0) && tx == 0.0 && ty == 0.0 {
        return Ok(img.clone());
    }
    let (theta, shear) = ((angle_deg as f64).to_radians(), (shear_deg as f64).to_radians());
    let (cos, sin) = (theta.cos(), theta.sin());
    let rot = [[cos, -sin], [sin, cos]];
    let sh = [[1.0, -shear.sin()], [0.0, shear.cos()]];
    let zm = [[zoom.0 as f64, 0.0], [0.0, zoom.1 as f64]];
    let a = matmul(matmul(rot, sh), zm);

    let (w, h, c) = (img.width(), img.height(), img.channels());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut data = Vec::with_capacity(w * h * c);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = a[0][0] * dx + a[0][1] * dy + cx + tx as f64;
            let sy = a[1][0] * dx + a[1][1] * dy + cy + ty as f64;
            let px = sx.round().clamp(0.0, (w - 1) as f64) as usize;
            let py = sy.round().clamp(0.0, (h - 1) as f64) as usize;
            data.extend_from_slice(img.pixel(px, py));
        }
    }
    Ok(ImageBuffer::new(w, h, c, data).expect("same dimensions as input"))
}

fn matmul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

pub fn flip_horizontal(img: &ImageBuffer) -> ImageBuffer {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut data = Vec::with_capacity(img.data().len());
    for y in 0..h {
        for x in (0..w).rev() {
            data.extend_from_slice(img.pixel(x, y));
        }
    }
    ImageBuffer::new(w, h, c, data).expect("same dimensions")
}

pub fn flip_vertical(img: &ImageBuffer) -> ImageBuffer {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut data = Vec::with_capacity(img.data().len());
    for y in (0..h).rev() {
        let start = img.index(0, y, 0);
        data.extend_from_slice(&img.data()[start..start + w * c]);
    }
    ImageBuffer::new(w, h, c, data).expect("same dimensions")
}

fn symmetric<R: Rng>(rng: &mut R, range: f32) -> f32 {
    if range > 0.0 {
        rng.random_range(-range..=range)
    } else {
        0.0
    }
}

/// Sampled parameters of one augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Draw {
    pub angle: f32,
    pub shear: f32,
    pub zoom: (f32, f32),
    pub tx: f32,
    pub ty: f32,
    pub flip_h: bool,
    pub flip_v: bool,
    pub brightness: Option<f32>,
}

impl Draw {
    /// Samples in a fixed order so that a given generator state always
    /// produces the same draw.
    pub fn sample<R: Rng>(spec: &AugmentorSpec, width: usize, height: usize, rng: &mut R) -> Self {
        let angle = symmetric(rng, spec.rotation_range);
        let shear = symmetric(rng, spec.shear_range);
        let zoom = if spec.zoom_range > 0.0 {
            let lo = 1.0 - spec.zoom_range;
            let hi = 1.0 + spec.zoom_range;
            (rng.random_range(lo..=hi), rng.random_range(lo..=hi))
        } else {
            (1.0, 1.0)
        };
        let tx = symmetric(rng, spec.width_shift_range) * width as f32;
        let ty = symmetric(rng, spec.height_shift_range) * height as f32;
        let flip_h = spec.horizontal_flip && rng.random_bool(0.5);
        let flip_v = spec.vertical_flip && rng.random_bool(0.5);
        let brightness = spec
            .brightness_range
            .map(|(lo, hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo });
        Self {
            angle,
            shear,
            zoom,
            tx,
            ty,
            flip_h,
            flip_v,
            brightness,
        }
    }
}

/// Normalization applied on evaluation paths: featurewise statistics (when
/// fitted) folded together with the rescale factor.
pub fn eval_normalization(
    spec: &AugmentorSpec,
    stats: Option<&FeaturewiseStats>,
) -> Result<Normalization, AugmentError> {
    let k = spec.rescale_factor();
    let inv = (1.0 / k) as f32;
    if !spec.needs_stats() {
        return Ok(Normalization {
            mean: vec![0.0],
            std: vec![inv],
        });
    }
    let stats = stats.ok_or(AugmentError::MissingStats)?;
    let mean = if spec.featurewise_center {
        stats.mean.clone()
    } else {
        vec![0.0; stats.mean.len()]
    };
    let std = if spec.featurewise_std_normalization {
        stats.std.iter().map(|&s| (s as f64 / k) as f32).collect()
    } else {
        vec![inv; stats.std.len()]
    };
    Ok(Normalization { mean, std })
}

/// Samples and applies one augmentation, returning a `(h, w, c)` tensor.
pub fn apply<R: Rng>(
    spec: &AugmentorSpec,
    stats: Option<&FeaturewiseStats>,
    img: &ImageBuffer,
    rng: &mut R,
) -> Result<Tensor, AugmentError> {
    if spec.needs_stats() && stats.is_none() {
        return Err(AugmentError::MissingStats);
    }
    let draw = Draw::sample(spec, img.width(), img.height(), rng);
    apply_draw(spec, stats, img, &draw)
}

pub fn apply_draw(
    spec: &AugmentorSpec,
    stats: Option<&FeaturewiseStats>,
    img: &ImageBuffer,
    draw: &Draw,
) -> Result<Tensor, AugmentError> {
    let mut out = affine_transform(img, draw.angle, draw.shear, draw.zoom, draw.tx, draw.ty)?;
    if draw.flip_h {
        out = flip_horizontal(&out);
    }
    if draw.flip_v {
        out = flip_vertical(&out);
    }
    if let Some(b) = draw.brightness {
        for v in out.data_mut() {
            *v = (*v * b).clamp(0.0, 255.0);
        }
    }
    // featurewise center/std then rescale, folded into one affine map per channel
    let norm = eval_normalization(spec, stats)?;
    Ok(normalize_per_channel(&out, &norm.mean, &norm.std).expect("nonzero folded std"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_ops::normalize;
    use crate::rng::rng_from_seed;

    fn ramp(w: usize, h: usize, c: usize) -> ImageBuffer {
        let data = (0..w * h * c).map(|i| (i % 251) as f32).collect();
        ImageBuffer::new(w, h, c, data).unwrap()
    }

    #[test]
    fn preset_flag_matrix() {
        let flags = |s: &AugmentorSpec| {
            [
                s.rescale.is_some(),
                s.rotation_range > 0.0,
                s.brightness_range.is_some(),
                s.horizontal_flip,
                s.vertical_flip,
                s.fill_mode.is_some(),
                s.featurewise_std_normalization,
                s.featurewise_center,
                s.zoom_range > 0.0,
                s.shear_range > 0.0,
                s.width_shift_range > 0.0,
                s.height_shift_range > 0.0,
            ]
        };
        let count = |id| flags(&preset(id)).iter().filter(|&&f| f).count();
        assert_eq!(count(GeneratorId::G1), 1);
        assert_eq!(count(GeneratorId::G2), 6);
        assert_eq!(count(GeneratorId::G3), 8);
        assert_eq!(count(GeneratorId::G4), 12);
        let g4 = preset(GeneratorId::G4);
        assert_eq!(g4.rescale, Some(1.0 / 255.0));
        assert_eq!(g4.rotation_range, 40.0);
        assert_eq!(g4.brightness_range, Some((0.2, 1.0)));
        assert_eq!(g4.zoom_range, 0.2);
        assert_eq!(g4.shear_range, 0.2);
        assert_eq!(g4.width_shift_range, 0.2);
        assert_eq!(g4.height_shift_range, 0.2);
        // each preset extends the previous one
        let g3 = flags(&preset(GeneratorId::G3));
        let g2 = flags(&preset(GeneratorId::G2));
        assert!(g2.iter().zip(&g3).all(|(a, b)| !a || *b));
        assert!(!g3[8] && !g3[9] && !g3[10] && !g3[11]);
    }

    #[test]
    fn generator_ids_parse() {
        assert_eq!("g3".parse::<GeneratorId>().unwrap(), GeneratorId::G3);
        assert_eq!(GeneratorId::G4.to_string(), "G4");
        assert!(matches!("G5".parse::<GeneratorId>(), Err(AugmentError::UnknownPreset(_))));
    }

    #[test]
    fn stats_of_degenerate_inputs() {
        let zeros = ImageBuffer::filled(3, 3, 1, 0.0);
        let s = fit_stats([&zeros, &zeros]).unwrap();
        assert_eq!(s.mean, vec![0.0]);
        assert_eq!(s.std, vec![STD_EPSILON]);

        let a = ImageBuffer::filled(1, 1, 1, 0.0);
        let b = ImageBuffer::filled(1, 1, 1, 255.0);
        let s = fit_stats([&a, &b]).unwrap();
        assert_eq!(s.mean, vec![127.5]);
        assert_eq!(s.std, vec![127.5]);

        assert_eq!(
            fit_stats(std::iter::empty::<&ImageBuffer>()),
            Err(AugmentError::EmptyTrainingSet)
        );
    }

    #[test]
    fn identity_affine() {
        let img = ramp(5, 4, 3);
        assert_eq!(affine_transform(&img, 0.0, 0.0, (1.0, 1.0), 0.0, 0.0).unwrap(), img);
        assert_eq!(
            affine_transform(&img, 0.0, 0.0, (0.0, 1.0), 0.0, 0.0),
            Err(AugmentError::InvalidZoom)
        );
    }

    #[test]
    fn rotate_2x2_by_index_permutation() {
        // offsets from the center doubled to stay integral: d = 2p - 1
        let img = ImageBuffer::new(2, 2, 1, vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let out = affine_transform(&img, 90.0, 0.0, (1.0, 1.0), 0.0, 0.0).unwrap();
        for y in 0..2i32 {
            for x in 0..2i32 {
                let (dx, dy) = (2 * x - 1, 2 * y - 1);
                // cos 90 = 0, sin 90 = 1: src = (-dy, dx)
                let (sx, sy) = ((-dy + 1) / 2, (dx + 1) / 2);
                assert_eq!(
                    out.get(x as usize, y as usize, 0),
                    img.get(sx as usize, sy as usize, 0)
                );
            }
        }
    }

    #[test]
    fn rotation_fills_from_edges() {
        let img = ramp(10, 10, 1);
        let out = affine_transform(&img, 45.0, 0.0, (1.0, 1.0), 0.0, 0.0).unwrap();
        let c = 4.5f64;
        let t = 45f64.to_radians();
        for &(x, y) in &[(0usize, 0usize), (9, 0), (0, 9), (9, 9)] {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            let sx = (t.cos() * dx - t.sin() * dy + c).round().clamp(0.0, 9.0) as usize;
            let sy = (t.sin() * dx + t.cos() * dy + c).round().clamp(0.0, 9.0) as usize;
            assert!(sx == 0 || sx == 9 || sy == 0 || sy == 9);
            assert_eq!(out.get(x, y, 0), img.get(sx, sy, 0));
        }
        let source: std::collections::HashSet<u32> =
            img.data().iter().map(|v| v.to_bits()).collect();
        assert!(out.data().iter().all(|v| source.contains(&v.to_bits())));
    }

    #[test]
    fn flips_are_involutions() {
        let img = ramp(4, 3, 3);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
        assert_eq!(flip_vertical(&flip_vertical(&img)), img);
        assert_ne!(flip_horizontal(&img), img);
    }

    #[test]
    fn g1_on_white_is_one() {
        let img = ImageBuffer::filled(4, 4, 3, 255.0);
        let t = apply(&preset(GeneratorId::G1), None, &img, &mut rng_from_seed(0)).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_ranges_reduce_to_normalize() {
        let img = ramp(6, 5, 3);
        let t = apply(&AugmentorSpec::identity(), None, &img, &mut rng_from_seed(1)).unwrap();
        let expected = normalize(&img, 0.0, 255.0).unwrap();
        assert_eq!(t, expected);
    }

    #[test]
    fn g2_is_seed_deterministic() {
        let img = ramp(12, 9, 3);
        let spec = preset(GeneratorId::G2);
        let a = apply(&spec, None, &img, &mut rng_from_seed(77)).unwrap();
        let b = apply(&spec, None, &img, &mut rng_from_seed(77)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn featurewise_requires_stats() {
        let img = ramp(3, 3, 1);
        assert_eq!(
            apply(&preset(GeneratorId::G3), None, &img, &mut rng_from_seed(0)),
            Err(AugmentError::MissingStats)
        );
    }

    #[test]
    fn eval_normalization_matches_training_tail() {
        let img = ramp(5, 5, 3);
        let stats = fit_stats([&img]).unwrap();
        let spec = AugmentorSpec {
            featurewise_center: true,
            featurewise_std_normalization: true,
            ..AugmentorSpec::identity()
        };
        let t = apply(&spec, Some(&stats), &img, &mut rng_from_seed(3)).unwrap();
        let norm = eval_normalization(&spec, Some(&stats)).unwrap();
        let e = crate::image_ops::normalize_per_channel(&img, &norm.mean, &norm.std).unwrap();
        for (a, b) in t.data().iter().zip(e.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert_eq!(
            eval_normalization(&preset(GeneratorId::G1), None).unwrap(),
            Normalization {
                mean: vec![0.0],
                std: vec![255.0]
            }
        );
    }

    proptest::proptest! {
        #[test]
        fn outputs_finite_and_bounded(seed in 0u64..500, g in 0usize..4) {
            let img = ramp(7, 6, 3);
            let id = GeneratorId::ALL[g];
            let spec = preset(id);
            let stats = fit_stats([&img]).unwrap();
            let t = apply(&spec, Some(&stats), &img, &mut rng_from_seed(seed)).unwrap();
            proptest::prop_assert!(t.data().iter().all(|v| v.is_finite()));
            if !spec.needs_stats() {
                proptest::prop_assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
