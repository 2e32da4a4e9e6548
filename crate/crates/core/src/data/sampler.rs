//! Class-balanced epoch planning.
//!
//! Each epoch draws `images_per_epoch / 2` samples from the real class and the
//! same number from the fake class, then deals them into batches that are
//! exactly half real, half fake. A class large enough to fill its half is
//! drawn without replacement; a smaller class falls back to drawing with
//! replacement.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::record::{DatasetIndex, Label, Split};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for, STREAM_PLAN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpochSpec {
    pub images_per_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EpochSpec {
    fn default() -> Self {
        Self {
            images_per_epoch: 25_600,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl EpochSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.images_per_epoch == 0 {
            return Err(Error::Config("batch_size and images_per_epoch must be positive".into()));
        }
        if self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch_size must be even to split real/fake evenly, got {}",
                self.batch_size
            )));
        }
        if self.images_per_epoch % self.batch_size != 0 {
            return Err(Error::Config(format!(
                "batch_size {} does not divide images_per_epoch {}",
                self.batch_size, self.images_per_epoch
            )));
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.images_per_epoch / self.batch_size
    }

    pub fn per_class(&self) -> usize {
        self.images_per_epoch / 2
    }
}

/// One batch: positions into `DatasetIndex::records()`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedBatch {
    pub members: Vec<usize>,
}

impl PlannedBatch {
    pub fn ids<'a>(&self, index: &'a DatasetIndex) -> Vec<&'a str> {
        self.members
            .iter()
            .map(|&p| index.records()[p].id.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub epoch_number: u64,
    pub epoch_seed: u64,
    pub real_with_replacement: bool,
    pub fake_with_replacement: bool,
    pub batches: Vec<PlannedBatch>,
}

/// Plans one epoch over the train split. The result is a pure function of
/// the index, `spec.seed` and `epoch_number`.
pub fn plan_epoch(index: &DatasetIndex, spec: &EpochSpec, epoch_number: u64) -> Result<EpochPlan> {
    spec.validate()?;
    let mut real = Vec::new();
    let mut fake = Vec::new();
    for (pos, r) in index.records().iter().enumerate() {
        if r.split != Split::Train {
            continue;
        }
        match r.label {
            Label::Real => real.push(pos),
            Label::Fake => fake.push(pos),
        }
    }
    if real.is_empty() {
        return Err(Error::EmptyClass("real"));
    }
    if fake.is_empty() {
        return Err(Error::EmptyClass("fake"));
    }

    let epoch_seed = derive_seed(spec.seed, &[STREAM_PLAN, epoch_number]);
    let k = spec.per_class();
    let (real_draw, real_repl) = draw(&real, k, epoch_seed, Label::Real);
    let (fake_draw, fake_repl) = draw(&fake, k, epoch_seed, Label::Fake);

    let half = spec.batch_size / 2;
    let mut shuffle_rng = rng_for(epoch_seed, &[u64::MAX]);
    let batches = real_draw
        .chunks(half)
        .zip(fake_draw.chunks(half))
        .map(|(r, f)| {
            let mut members: Vec<usize> = r.iter().chain(f).copied().collect();
            members.shuffle(&mut shuffle_rng);
            PlannedBatch { members }
        })
        .collect();

    Ok(EpochPlan {
        epoch_number,
        epoch_seed,
        real_with_replacement: real_repl,
        fake_with_replacement: fake_repl,
        batches,
    })
}

fn draw(pool: &[usize], k: usize, epoch_seed: u64, label: Label) -> (Vec<usize>, bool) {
    let mut rng = rng_for(epoch_seed, &[label.as_u8() as u64]);
    if pool.len() >= k {
        // `index::sample` returns the chosen indices in random order.
        let picked = index::sample(&mut rng, pool.len(), k);
        (picked.into_iter().map(|i| pool[i]).collect(), false)
    } else {
        log::debug!(
            "{label} class has {} train samples, fewer than {k}; drawing with replacement",
            pool.len()
        );
        ((0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect(), true)
    }
}
