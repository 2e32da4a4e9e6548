//! Synthetic, linearly separable image corpora for smoke tests and demos.
//!
//! Real images are smooth noisy gray fields; fake images add a high-frequency
//! stripe pattern and a red cast.

use std::path::{Path, PathBuf};

use image::{DynamicImage, Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{DatasetIndex, Label, MemoryStore, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToySpec {
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub size: u32,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            train_per_class: 32,
            val_per_class: 8,
            test_per_class: 16,
            size: 32,
            seed: 0,
        }
    }
}

pub fn toy_image(label: Label, size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let base: i32 = rng.random_range(90..170);
    let phase: u32 = rng.random_range(0..2);
    RgbImage::from_fn(size, size, |x, _y| {
        let noise = |rng: &mut ChaCha8Rng| rng.random_range(-12..=12);
        let (mut r, mut g, mut b) = (base + noise(rng), base + noise(rng), base + noise(rng));
        if label == Label::Fake {
            let stripe = if (x + phase) % 2 == 0 { 45 } else { -45 };
            r += stripe + 40;
            g += stripe;
            b += stripe;
        }
        let c = |v: i32| v.clamp(0, 255) as u8;
        Rgb([c(r), c(g), c(b)])
    })
}

/// An in-memory corpus with the requested per-class split sizes.
pub fn toy_corpus(spec: &ToySpec) -> Result<(DatasetIndex, MemoryStore)> {
    let mut records = Vec::new();
    let mut store = MemoryStore::new();
    let splits = [
        (Split::Train, spec.train_per_class),
        (Split::Val, spec.val_per_class),
        (Split::Test, spec.test_per_class),
    ];
    for (si, (split, n)) in splits.into_iter().enumerate() {
        for label in [Label::Real, Label::Fake] {
            for i in 0..n {
                let id = format!("{}/{}/{i:05}", label.name(), split.name());
                let mut rng = rng_for(spec.seed, &[si as u64, label.as_u8() as u64, i as u64]);
                store.insert(id.clone(), DynamicImage::ImageRgb8(toy_image(label, spec.size, &mut rng)));
                records.push(SampleRecord {
                    path: PathBuf::from(format!("{id}.png")),
                    id,
                    label,
                    split,
                });
            }
        }
    }
    Ok((DatasetIndex::new(records)?, store))
}

/// Writes `per_class` PNGs into `dir/real` and `dir/fake`.
pub fn write_toy_corpus(dir: &Path, per_class: usize, size: u32, seed: u64) -> Result<()> {
    for label in [Label::Real, Label::Fake] {
        let sub = dir.join(label.name());
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for i in 0..per_class {
            let mut rng = rng_for(seed, &[label.as_u8() as u64, i as u64]);
            let path = sub.join(format!("{i:05}.png"));
            toy_image(label, size, &mut rng)
                .save(&path)
                .map_err(|e| Error::Decode {
                    id: path.display().to_string(),
                    reason: e.to_string(),
                })?;
        }
    }
    Ok(())
}
