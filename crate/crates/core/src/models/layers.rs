//! Parameter storage and the handful of layers the classifiers need.
//!
//! Master weights are always f32 `Var`s. Layers cast them to the dtype of the
//! incoming activation, which is how reduced-precision forwards work: the
//! caller casts the input and every layer follows. Reductions (batch-norm
//! statistics, pooling) are computed in f32 regardless.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::Result;
use crate::seed::rng_for;

#[derive(Debug)]
pub struct Param {
    name: String,
    var: Var,
    trainable: AtomicBool,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn elem_count(&self) -> usize {
        self.var.elem_count()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable.load(Ordering::Relaxed)
    }

    pub fn set_trainable(&self, trainable: bool) {
        self.trainable.store(trainable, Ordering::Relaxed)
    }

    /// The weight in `dtype`; frozen parameters are detached from the graph.
    pub fn tensor(&self, dtype: DType) -> Result<Tensor> {
        let t = if self.is_trainable() {
            self.var.as_tensor().clone()
        } else {
            self.var.as_tensor().detach()
        };
        Ok(t.to_dtype(dtype)?)
    }
}

/// Non-trainable state saved alongside parameters (batch-norm running stats).
#[derive(Debug)]
pub struct Buffer {
    name: String,
    value: RwLock<Tensor>,
}

impl Buffer {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn get(&self) -> Tensor {
        self.value.read().expect("buffer lock poisoned").clone()
    }

    pub fn set(&self, t: Tensor) {
        *self.value.write().expect("buffer lock poisoned") = t;
    }
}

#[derive(Debug, Default)]
pub struct ParamStore {
    params: Vec<Arc<Param>>,
    buffers: Vec<Arc<Buffer>>,
}

impl ParamStore {
    pub fn params(&self) -> &[Arc<Param>] {
        &self.params
    }

    pub fn buffers(&self) -> &[Arc<Buffer>] {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Arc<Param>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn total_params(&self) -> usize {
        self.params.iter().map(|p| p.elem_count()).sum()
    }

    pub fn trainable_params(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.is_trainable())
            .map(|p| p.elem_count())
            .sum()
    }

    /// Freezes every parameter whose name starts with `prefix`; returns how many.
    pub fn freeze_prefix(&self, prefix: &str) -> usize {
        let mut n = 0;
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            p.set_trainable(false);
            n += 1;
        }
        n
    }

    pub(crate) fn add_param(&mut self, name: String, data: Vec<f32>, shape: &[usize]) -> Result<Arc<Param>> {
        let var = Var::from_vec(data, shape, &Device::Cpu)?;
        let p = Arc::new(Param {
            name,
            var,
            trainable: AtomicBool::new(true),
        });
        self.params.push(p.clone());
        Ok(p)
    }

    pub(crate) fn add_buffer(&mut self, name: String, value: Tensor) -> Arc<Buffer> {
        let b = Arc::new(Buffer {
            name,
            value: RwLock::new(value),
        });
        self.buffers.push(b.clone());
        b
    }
}

/// Weight-initialization source: a seeded generator plus a name prefix.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: rng_for(seed, &[]),
        }
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<f32> {
        let dist = Normal::new(0.0, std).expect("std is positive");
        (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect()
    }

    fn uniform(&mut self, n: usize, bound: f64) -> Vec<f32> {
        let dist = Uniform::new_inclusive(-bound, bound).expect("bound is finite");
        (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect()
    }
}

pub struct Conv2d {
    weight: Arc<Param>,
    bias: Option<Arc<Param>>,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl Conv2d {
    /// Kaiming-normal (fan-out) weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        init: &mut Init<'_>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_out = out_ch * kernel * kernel / groups;
        let n = out_ch * (in_ch / groups) * kernel * kernel;
        let data = init.normal(n, (2.0 / fan_out as f64).sqrt());
        let weight = init.store.add_param(
            format!("{name}.weight"),
            data,
            &[out_ch, in_ch / groups, kernel, kernel],
        )?;
        let bias = if bias {
            Some(init.store.add_param(format!("{name}.bias"), vec![0.0; out_ch], &[out_ch])?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: (kernel - 1) / 2,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.tensor(x.dtype())?;
        let y = x.conv2d(&w, self.padding, self.stride, 1, self.groups)?;
        match &self.bias {
            Some(b) => {
                let b = b.tensor(x.dtype())?.reshape((1, (), 1, 1))?;
                Ok(y.broadcast_add(&b)?)
            }
            None => Ok(y),
        }
    }
}

pub struct Linear {
    weight: Arc<Param>,
    bias: Arc<Param>,
}

impl Linear {
    /// Zero-mean uniform in `±1/√in` for weights and bias.
    pub(crate) fn new(init: &mut Init<'_>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = init.uniform(in_dim * out_dim, bound);
        let b = init.uniform(out_dim, bound);
        Ok(Self {
            weight: init.store.add_param(format!("{name}.weight"), w, &[out_dim, in_dim])?,
            bias: init.store.add_param(format!("{name}.bias"), b, &[out_dim])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.tensor(x.dtype())?;
        let b = self.bias.tensor(x.dtype())?;
        Ok(x.matmul(&w.t()?)?.broadcast_add(&b)?)
    }
}

pub struct BatchNorm2d {
    gamma: Arc<Param>,
    beta: Arc<Param>,
    running_mean: Arc<Buffer>,
    running_var: Arc<Buffer>,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub(crate) fn new(init: &mut Init<'_>, name: &str, channels: usize) -> Result<Self> {
        let gamma = init.store.add_param(format!("{name}.weight"), vec![1.0; channels], &[channels])?;
        let beta = init.store.add_param(format!("{name}.bias"), vec![0.0; channels], &[channels])?;
        let running_mean = init
            .store
            .add_buffer(format!("{name}.running_mean"), Tensor::zeros(channels, DType::F32, &Device::Cpu)?);
        let running_var = init
            .store
            .add_buffer(format!("{name}.running_var"), Tensor::ones(channels, DType::F32, &Device::Cpu)?);
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let dtype = x.dtype();
        let xf = x.to_dtype(DType::F32)?;
        let (b, c, h, w) = xf.dims4()?;
        let (mean, var) = if train {
            let mean = xf.mean_keepdim((0, 2, 3))?;
            let var = xf.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let rm = self.running_mean.get();
            let rv = self.running_var.get();
            self.running_mean
                .set(((rm * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?);
            self.running_var
                .set(((rv * (1.0 - m))? + (var.detach().flatten_all()? * (m * unbiased))?)?);
            (mean, var)
        } else {
            (
                self.running_mean.get().reshape((1, c, 1, 1))?,
                self.running_var.get().reshape((1, c, 1, 1))?,
            )
        };
        let gamma = self.gamma.tensor(DType::F32)?.reshape((1, c, 1, 1))?;
        let beta = self.beta.tensor(DType::F32)?.reshape((1, c, 1, 1))?;
        let y = xf
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&gamma)?
            .broadcast_add(&beta)?;
        Ok(y.to_dtype(dtype)?)
    }
}

/// Mean over the spatial dims in f32: (B, C, H, W) → (B, C).
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.to_dtype(DType::F32)?.mean(D::Minus1)?.mean(D::Minus1)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Inverted dropout with a mask drawn from `seed`.
pub fn dropout(x: &Tensor, rate: f64, seed: u64) -> Result<Tensor> {
    if rate <= 0.0 {
        return Ok(x.clone());
    }
    let mut rng = rng_for(seed, &[crate::seed::STREAM_DROPOUT]);
    let keep = 1.0 - rate;
    let scale = (1.0 / keep) as f32;
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.mul(&mask)?)
}
