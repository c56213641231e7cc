//! Seeded synthetic datasets with known class evidence, used for desk-scale
//! end-to-end runs and for checking the simulated deployment paths.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::image_ops::{write_image, ImageBuffer, ImageError};
use crate::rng::derived_rng;

const BRIGHT: f32 = 200.0;
const DARK: f32 = 50.0;
const NOISE: f32 = 25.0;

/// Where the class-discriminating pixels live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Class 0 bright on the left half, class 1 on the right half. Survives
    /// any centered crop.
    LeftRight,
    /// Class 0 has a bright band in the top 10% of rows, class 1 in the
    /// bottom 10%; the rest is identical mid-gray noise.
    BorderBands,
}

impl Layout {
    pub fn class_names(self) -> [&'static str; 2] {
        match self {
            Layout::LeftRight => ["left", "right"],
            Layout::BorderBands => ["bottom", "top"],
        }
    }
}

/// A labeled synthetic sample set.
#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub classes: Vec<String>,
    pub items: Vec<(ImageBuffer, usize)>,
}

impl SyntheticSet {
    pub fn labeled(&self) -> Vec<(&ImageBuffer, usize)> {
        self.items.iter().map(|(img, l)| (img, *l)).collect()
    }

    /// Writes `<root>/<class>/<class>_<i>.png`.
    pub fn write(&self, root: &Path) -> Result<(), ImageError> {
        for class in &self.classes {
            fs::create_dir_all(root.join(class))?;
        }
        let mut per_class = vec![0usize; self.classes.len()];
        for (img, label) in &self.items {
            let name = &self.classes[*label];
            let path = root.join(name).join(format!("{name}_{:03}.png", per_class[*label]));
            per_class[*label] += 1;
            write_image(img, &path)?;
        }
        Ok(())
    }
}

fn sample_image<R: Rng>(layout: Layout, class: usize, size: usize, rng: &mut R) -> ImageBuffer {
    let band = (size / 10).max(1);
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let base = match layout {
                Layout::LeftRight => {
                    let left = x < size / 2;
                    if left == (class == 0) {
                        BRIGHT
                    } else {
                        DARK
                    }
                }
                Layout::BorderBands => {
                    let in_band = if class == 1 { y < band } else { y >= size - band };
                    if in_band {
                        BRIGHT + 40.0
                    } else {
                        (BRIGHT + DARK) / 2.0
                    }
                }
            };
            for _ in 0..3 {
                let v: f32 = base + rng.random_range(-NOISE..=NOISE);
                data.push(v.round().clamp(0.0, 255.0));
            }
        }
    }
    ImageBuffer::new(size, size, 3, data).expect("square rgb")
}

/// `per_class` images of each of the two classes, `size x size` RGB, with
/// integer pixel values. Items are ordered class by class.
pub fn generate(layout: Layout, per_class: usize, size: usize, seed: u64) -> SyntheticSet {
    let classes = layout.class_names().iter().map(|s| s.to_string()).collect();
    let items = (0..2)
        .flat_map(|class| (0..per_class).map(move |i| (class, i)))
        .map(|(class, i)| {
            let mut rng = derived_rng(seed, &[class as u64, i as u64]);
            (sample_image(layout, class, size, &mut rng), class)
        })
        .collect();
    SyntheticSet { classes, items }
}
