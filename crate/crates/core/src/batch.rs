//! Turning index records into model inputs.

use rayon::prelude::*;

use crate::data::{preprocess_from, ImageStore, Label, PreprocessConfig, SampleRecord};
use crate::error::Result;
use crate::models::{Model, ModelInput};
use crate::spectral::{spectral_stack, FrequencyInput};

#[derive(Debug, Clone)]
pub struct Batch {
    pub input: ModelInput,
    pub labels: Vec<Label>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn targets(&self) -> Vec<f32> {
        self.labels.iter().map(|l| l.as_target()).collect()
    }
}

/// Preprocesses `records` in parallel, preserving order. `draw_seed(i)` seeds
/// the augmentation of the i-th record. Spectra are computed when
/// `with_spectra` is set.
pub fn assemble_batch(
    records: &[&SampleRecord],
    store: &dyn ImageStore,
    cfg: &PreprocessConfig,
    augment: bool,
    draw_seed: impl Fn(usize) -> u64 + Sync,
    with_spectra: bool,
) -> Result<Batch> {
    let items: Vec<(crate::data::ImageTensor, Option<FrequencyInput>)> = records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let img = preprocess_from(store, rec, cfg, augment, draw_seed(i))?;
            let spec = if with_spectra {
                Some(spectral_stack(&img)?)
            } else {
                None
            };
            Ok((img, spec))
        })
        .collect::<Result<_>>()?;
    let (images, spectra): (Vec<_>, Vec<_>) = items.into_iter().unzip();
    let mut input = ModelInput::images(&images)?;
    if with_spectra {
        let spectra: Vec<FrequencyInput> = spectra.into_iter().flatten().collect();
        input = input.with_spectra(&spectra)?;
    }
    Ok(Batch {
        input,
        labels: records.iter().map(|r| r.label).collect(),
        ids: records.iter().map(|r| r.id.clone()).collect(),
    })
}

/// Evaluation-mode logits for `records`, in order, without augmentation.
pub fn infer_logits(
    model: &Model,
    records: &[&SampleRecord],
    store: &dyn ImageStore,
    cfg: &PreprocessConfig,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let batch = assemble_batch(chunk, store, cfg, false, |_| 0, model.is_hybrid())?;
        let logits = model.forward(&batch.input, &crate::models::ForwardMode::eval())?;
        out.extend(logits.flatten_all()?.to_vec1::<f32>()?.into_iter().map(f64::from));
    }
    Ok(out)
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}
