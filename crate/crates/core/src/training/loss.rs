//! Binary cross-entropy on raw logits.
//!
//! Per sample: `max(z, 0) − z·y + ln(1 + e^{−|z|})`, which never exponentiates
//! a positive number. The tensor form writes `max(z, 0)` as `(z + |z|)/2` so
//! the autodiff gradient is `σ(z) − y` everywhere, including at `z = 0`.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

fn check(logits: &[f64], labels: &[f64]) -> Result<()> {
    if logits.len() != labels.len() {
        return Err(Error::LengthMismatch(logits.len(), labels.len()));
    }
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(i) = logits.iter().position(|z| z.is_nan()) {
        return Err(Error::NonFinite(format!("logit #{i}")));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Config("labels must be 0 or 1".into()));
    }
    Ok(())
}

fn per_sample(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Mean loss over the batch.
pub fn bce_with_logits(logits: &[f64], labels: &[f64]) -> Result<f64> {
    check(logits, labels)?;
    let sum: f64 = logits.iter().zip(labels).map(|(&z, &y)| per_sample(z, y)).sum();
    Ok(sum / logits.len() as f64)
}

/// Gradient of the mean loss with respect to each logit: `(σ(z) − y) / B`.
pub fn bce_with_logits_grad(logits: &[f64], labels: &[f64]) -> Result<Vec<f64>> {
    check(logits, labels)?;
    let b = logits.len() as f64;
    Ok(logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| (1.0 / (1.0 + (-z).exp()) - y) / b)
        .collect())
}

/// Differentiable mean loss; `logits` and `targets` share a shape. Computed
/// in f32 whatever the logits dtype.
pub fn bce_with_logits_tensor(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if logits.dims() != targets.dims() {
        return Err(Error::Shape {
            expected: format!("{:?}", logits.dims()),
            received: format!("{:?}", targets.dims()),
        });
    }
    let z = logits.to_dtype(DType::F32)?;
    let y = targets.to_dtype(DType::F32)?;
    let abs = z.abs()?;
    let positive_part = ((&z + &abs)? * 0.5)?;
    let softplus_tail = (abs.neg()?.exp()? + 1.0)?.log()?;
    let loss = ((positive_part - (&z * &y)?)? + softplus_tail)?;
    Ok(loss.mean_all()?)
}
