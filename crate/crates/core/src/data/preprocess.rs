//! Resize, optional horizontal flip, and per-channel normalization.

use std::collections::HashMap;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{DynamicImage, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::record::SampleRecord;
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Per-channel statistics of the natural-image corpus the pretrained
/// backbones were published with.
pub const NATURAL_IMAGE_MEANS: [f32; 3] = [0.485, 0.456, 0.406];
pub const NATURAL_IMAGE_STDS: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Side of the square output, in pixels. Non-square inputs are stretched.
    pub target_size: u32,
    pub flip_probability: f64,
    pub channel_means: [f32; 3],
    pub channel_stds: [f32; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_size: 528,
            flip_probability: 0.5,
            channel_means: NATURAL_IMAGE_MEANS,
            channel_stds: NATURAL_IMAGE_STDS,
        }
    }
}

impl PreprocessConfig {
    pub fn with_size(target_size: u32) -> Self {
        Self {
            target_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_size < 32 {
            return Err(Error::Config(format!(
                "target_size must be at least 32, got {}",
                self.target_size
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config(format!(
                "flip_probability must lie in [0, 1], got {}",
                self.flip_probability
            )));
        }
        if self.channel_stds.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("channel_stds must be strictly positive".into()));
        }
        if self.channel_means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("channel_means must be finite".into()));
        }
        Ok(())
    }
}

/// What was done to produce an [`ImageTensor`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub sample_id: String,
    pub source_size: (u32, u32),
    pub source_channels: u8,
    pub flipped: bool,
}

/// A normalized 3 × size × size image in channel-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Vec<f32>,
    pub size: usize,
    pub provenance: Provenance,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.size + y) * self.size + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Source of decoded images for index records.
pub trait ImageStore: Sync {
    fn load(&self, record: &SampleRecord) -> Result<DynamicImage>;
}

/// Decodes records from their filesystem paths.
#[derive(Debug, Clone, Copy, Default)]
pub struct FileStore;

impl ImageStore for FileStore {
    fn load(&self, record: &SampleRecord) -> Result<DynamicImage> {
        decode_file(&record.id, &record.path)
    }
}

/// Images held in memory, keyed by sample id. Used for synthetic corpora.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    images: HashMap<String, DynamicImage>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, image: DynamicImage) {
        self.images.insert(id.into(), image);
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl ImageStore for MemoryStore {
    fn load(&self, record: &SampleRecord) -> Result<DynamicImage> {
        self.images.get(&record.id).cloned().ok_or_else(|| Error::Decode {
            id: record.id.clone(),
            reason: "not present in memory store".into(),
        })
    }
}

pub fn decode_file(id: &str, path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::Decode {
        id: id.to_string(),
        reason: e.to_string(),
    })
}

/// Decodes `record` from disk and preprocesses it.
pub fn load_and_preprocess(
    record: &SampleRecord,
    cfg: &PreprocessConfig,
    augment: bool,
    draw_seed: u64,
) -> Result<ImageTensor> {
    preprocess_from(&FileStore, record, cfg, augment, draw_seed)
}

pub fn preprocess_from(
    store: &dyn ImageStore,
    record: &SampleRecord,
    cfg: &PreprocessConfig,
    augment: bool,
    draw_seed: u64,
) -> Result<ImageTensor> {
    let image = store.load(record)?;
    preprocess_image(&record.id, &image, cfg, augment, draw_seed)
}

/// Whether the flip draw for `draw_seed` lands under `probability`.
pub fn flip_drawn(draw_seed: u64, probability: f64) -> bool {
    rng_for(draw_seed, &[crate::seed::STREAM_FLIP]).random::<f64>() < probability
}

pub fn preprocess_image(
    sample_id: &str,
    image: &DynamicImage,
    cfg: &PreprocessConfig,
    augment: bool,
    draw_seed: u64,
) -> Result<ImageTensor> {
    cfg.validate()?;
    let source_size = (image.width(), image.height());
    if source_size.0 == 0 || source_size.1 == 0 {
        return Err(Error::Decode {
            id: sample_id.to_string(),
            reason: "image has zero extent".into(),
        });
    }
    let source_channels = image.color().channel_count();
    // Grayscale is replicated across RGB, alpha is dropped.
    let rgb = image.to_rgb8();
    let side = cfg.target_size;
    let mut rgb: RgbImage = if rgb.dimensions() == (side, side) {
        rgb
    } else {
        imageops::resize(&rgb, side, side, FilterType::Triangle)
    };
    let flipped = augment && flip_drawn(draw_seed, cfg.flip_probability);
    if flipped {
        imageops::flip_horizontal_in_place(&mut rgb);
    }

    let size = side as usize;
    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] =
                (px[c] as f32 / 255.0 - cfg.channel_means[c]) / cfg.channel_stds[c];
        }
    }
    Ok(ImageTensor {
        data,
        size,
        provenance: Provenance {
            sample_id: sample_id.to_string(),
            source_size,
            source_channels,
            flipped,
        },
    })
}
