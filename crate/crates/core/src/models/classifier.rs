use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::backbone::{load_pretrained, Backbone};
use super::config::ModelConfig;
use super::layers::{dropout, global_avg_pool, Conv2d, Init, Linear, ParamStore};
use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::spectral::FrequencyInput;

/// How a forward pass runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardMode {
    pub train: bool,
    /// Seeds the dropout mask; ignored in evaluation mode.
    pub dropout_seed: u64,
    /// Compute dtype for convolutions and matmuls. Master weights stay f32.
    pub dtype: DType,
}

impl ForwardMode {
    pub fn eval() -> Self {
        Self {
            train: false,
            dropout_seed: 0,
            dtype: DType::F32,
        }
    }

    pub fn train(dropout_seed: u64) -> Self {
        Self {
            train: true,
            dropout_seed,
            dtype: DType::F32,
        }
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }
}

/// A batch of model inputs. `spectra` is required by hybrid models only.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub images: Tensor,
    pub spectra: Option<Tensor>,
}

impl ModelInput {
    pub fn images(images: &[ImageTensor]) -> Result<Self> {
        let first = images.first().ok_or(Error::EmptyInput)?;
        let n = first.size;
        let mut data = Vec::with_capacity(images.len() * 3 * n * n);
        for img in images {
            if img.size != n {
                return Err(Error::Shape {
                    expected: format!("3x{n}x{n}"),
                    received: format!("3x{0}x{0}", img.size),
                });
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Self {
            images: Tensor::from_vec(data, (images.len(), 3, n, n), &Device::Cpu)?,
            spectra: None,
        })
    }

    pub fn with_spectra(mut self, spectra: &[FrequencyInput]) -> Result<Self> {
        let first = spectra.first().ok_or(Error::EmptyInput)?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(spectra.len() * 2 * h * w);
        for s in spectra {
            if (s.height, s.width) != (h, w) {
                return Err(Error::Shape {
                    expected: format!("2x{h}x{w}"),
                    received: format!("2x{}x{}", s.height, s.width),
                });
            }
            data.extend_from_slice(&s.data);
        }
        self.spectra = Some(Tensor::from_vec(data, (spectra.len(), 2, h, w), &Device::Cpu)?);
        Ok(self)
    }

    pub fn batch_size(&self) -> usize {
        self.images.dims().first().copied().unwrap_or(0)
    }
}

fn check_rank4(t: &Tensor, channels: usize, what: &str) -> Result<(usize, usize, usize)> {
    match t.dims() {
        &[b, c, h, w] if c == channels && b > 0 => Ok((b, h, w)),
        other => Err(Error::Shape {
            expected: format!("{what} of shape (B>0, {channels}, H, W)"),
            received: format!("{other:?}"),
        }),
    }
}

/// Dropout followed by a linear map to a single logit.
pub struct Head {
    linear: Linear,
    rate: f64,
}

impl Head {
    fn new(store: &mut ParamStore, in_dim: usize, rate: f64, seed: u64) -> Result<Self> {
        let mut init = Init::new(store, seed);
        Ok(Self {
            linear: Linear::new(&mut init, "head.linear", in_dim, 1)?,
            rate,
        })
    }

    /// (B, D) f32 features → (B, 1) f32 logits.
    pub fn forward(&self, features: &Tensor, mode: &ForwardMode) -> Result<Tensor> {
        let mut h = features.to_dtype(mode.dtype)?;
        if mode.train {
            h = dropout(&h, self.rate, mode.dropout_seed)?;
        }
        Ok(self.linear.forward(&h)?.to_dtype(DType::F32)?)
    }
}

/// Three stride-2 convolutions and global pooling over the 2-channel
/// amplitude/phase input. Bias-free, so a zero input yields zero features.
pub struct FrequencyBranch {
    convs: Vec<Conv2d>,
    feature_dim: usize,
}

impl FrequencyBranch {
    fn new(store: &mut ParamStore, feature_dim: usize, seed: u64) -> Result<Self> {
        let mut init = Init::new(store, derive_seed(seed, &[0xF5E0]));
        let chans = [2, 16, 32, feature_dim];
        let convs = chans
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(&mut init, &format!("frequency.conv{i}"), w[0], w[1], 3, 2, 1, false))
            .collect::<Result<_>>()?;
        Ok(Self { convs, feature_dim })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.relu()?;
        }
        global_avg_pool(&h)
    }
}

/// Backbone plus single-logit head.
pub struct Classifier {
    cfg: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    head: Head,
}

/// Backbone and frequency branch whose features are concatenated before the
/// single-logit head.
pub struct HybridClassifier {
    cfg: ModelConfig,
    store: ParamStore,
    spatial: Backbone,
    frequency: FrequencyBranch,
    head: Head,
}

pub enum Model {
    Plain(Classifier),
    Hybrid(HybridClassifier),
}

fn init_backbone(cfg: &ModelConfig, store: &mut ParamStore) -> Result<Backbone> {
    cfg.validate()?;
    let backbone = Backbone::build(cfg, store)?;
    if cfg.pretrained {
        load_pretrained(cfg, store, &cfg.resolved_weights_path())?;
    }
    Ok(backbone)
}

pub fn build_classifier(cfg: &ModelConfig) -> Result<Classifier> {
    let mut store = ParamStore::default();
    let backbone = init_backbone(cfg, &mut store)?;
    let head = Head::new(&mut store, backbone.feature_dim(), cfg.dropout_rate, cfg.head_seed)?;
    Ok(Classifier {
        cfg: cfg.clone(),
        store,
        backbone,
        head,
    })
}

pub fn build_hybrid(cfg: &ModelConfig) -> Result<HybridClassifier> {
    let fb = cfg
        .freq_branch
        .ok_or_else(|| Error::Config("hybrid model needs a freq_branch section".into()))?;
    let mut store = ParamStore::default();
    let spatial = init_backbone(cfg, &mut store)?;
    let frequency = FrequencyBranch::new(&mut store, fb.feature_dim, cfg.init_seed)?;
    let head = Head::new(
        &mut store,
        spatial.feature_dim() + fb.feature_dim,
        cfg.dropout_rate,
        cfg.head_seed,
    )?;
    Ok(HybridClassifier {
        cfg: cfg.clone(),
        store,
        spatial,
        frequency,
        head,
    })
}

/// Plain or hybrid, depending on whether `cfg.freq_branch` is set.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    Ok(if cfg.is_hybrid() {
        Model::Hybrid(build_hybrid(cfg)?)
    } else {
        Model::Plain(build_classifier(cfg)?)
    })
}

impl Classifier {
    pub fn spatial_features(&self, images: &Tensor, mode: &ForwardMode) -> Result<Tensor> {
        check_rank4(images, 3, "images")?;
        self.backbone.forward(&images.to_dtype(mode.dtype)?, mode.train)
    }

    pub fn forward(&self, input: &ModelInput, mode: &ForwardMode) -> Result<Tensor> {
        let f = self.spatial_features(&input.images, mode)?;
        self.head.forward(&f, mode)
    }
}

impl HybridClassifier {
    pub fn spatial_features(&self, images: &Tensor, mode: &ForwardMode) -> Result<Tensor> {
        check_rank4(images, 3, "images")?;
        self.spatial.forward(&images.to_dtype(mode.dtype)?, mode.train)
    }

    pub fn frequency_features(&self, spectra: &Tensor, mode: &ForwardMode) -> Result<Tensor> {
        check_rank4(spectra, 2, "frequency input")?;
        self.frequency.forward(&spectra.to_dtype(mode.dtype)?)
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn forward(&self, input: &ModelInput, mode: &ForwardMode) -> Result<Tensor> {
        let spectra = input.spectra.as_ref().ok_or_else(|| {
            Error::Wiring("hybrid model needs a frequency input paired with every image".into())
        })?;
        let (b, _, _) = check_rank4(&input.images, 3, "images")?;
        let (bs, _, _) = check_rank4(spectra, 2, "frequency input")?;
        if b != bs {
            return Err(Error::Shape {
                expected: format!("{b} frequency inputs"),
                received: format!("{bs}"),
            });
        }
        let s = self.spatial_features(&input.images, mode)?;
        let f = self.frequency_features(spectra, mode)?;
        let fused = Tensor::cat(&[&s, &f], 1)?;
        self.head.forward(&fused, mode)
    }
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::Plain(m) => &m.cfg,
            Model::Hybrid(m) => &m.cfg,
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Model::Plain(m) => &m.store,
            Model::Hybrid(m) => &m.store,
        }
    }

    pub fn is_hybrid(&self) -> bool {
        matches!(self, Model::Hybrid(_))
    }

    /// Raw (B, 1) logits; no sigmoid.
    pub fn forward(&self, input: &ModelInput, mode: &ForwardMode) -> Result<Tensor> {
        match self {
            Model::Plain(m) => m.forward(input, mode),
            Model::Hybrid(m) => m.forward(input, mode),
        }
    }

    /// Evaluation-mode probabilities of the real class.
    pub fn predict_proba(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let logits = self.forward(input, &ForwardMode::eval())?;
        Ok(logits
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|z| 1.0 / (1.0 + (-(z as f64)).exp()))
            .collect())
    }

    pub fn total_params(&self) -> usize {
        self.store().total_params()
    }

    /// SHA-256 over every parameter and buffer, in store order.
    pub fn weights_digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for p in self.store().params() {
            h.update(p.name().as_bytes());
            for v in p.var().as_tensor().flatten_all()?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        for b in self.store().buffers() {
            h.update(b.name().as_bytes());
            for v in b.get().flatten_all()?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(format!("{:x}", h.finalize()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGradient {
    pub block: String,
    pub params: usize,
    pub received_gradient: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total_params: usize,
    pub trainable_params: usize,
    pub blocks: Vec<BlockGradient>,
}

impl ParamReport {
    pub fn all_blocks_receive_gradients(&self) -> bool {
        self.blocks.iter().all(|b| b.received_gradient)
    }

    pub fn block(&self, name: &str) -> Option<&BlockGradient> {
        self.blocks.iter().find(|b| b.block == name)
    }
}

/// Runs one forward/backward pass with the summed logits as loss and records
/// which parameter blocks (layers) received gradients.
pub fn trainable_parameter_report(model: &Model, probe: &ModelInput) -> Result<ParamReport> {
    let logits = model.forward(probe, &ForwardMode::eval())?;
    let grads = logits.sum_all()?.backward()?;
    let mut blocks: BTreeMap<String, (usize, bool)> = BTreeMap::new();
    let mut order = Vec::new();
    for p in model.store().params() {
        let block = p.name().rsplit_once('.').map_or(p.name(), |(b, _)| b).to_string();
        let got = p.is_trainable()
            && grads
                .get(p.var().as_tensor())
                .is_some_and(|g| g.dims() == p.var().dims());
        let entry = blocks.entry(block.clone()).or_insert_with(|| {
            order.push(block);
            (0, true)
        });
        entry.0 += p.elem_count();
        entry.1 &= got;
    }
    Ok(ParamReport {
        total_params: model.store().total_params(),
        trainable_params: model.store().trainable_params(),
        blocks: order
            .into_iter()
            .map(|b| {
                let (params, received_gradient) = blocks[&b];
                BlockGradient {
                    block: b,
                    params,
                    received_gradient,
                }
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(b: usize, n: usize, _seed: u64) -> Tensor {
        Tensor::randn(0f32, 1.0, (b, 3, n, n), &Device::Cpu).unwrap()
    }

    fn spectra(b: usize, n: usize) -> Tensor {
        Tensor::randn(0f32, 1.0, (b, 2, n, n), &Device::Cpu).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap()
    }

    #[test]
    fn plain_logits_have_one_column() {
        let m = build_model(&ModelConfig::tiny()).unwrap();
        for b in [1, 4] {
            let input = ModelInput {
                images: images(b, 64, 0),
                spectra: None,
            };
            assert_eq!(m.forward(&input, &ForwardMode::eval()).unwrap().dims(), [b, 1]);
        }
    }

    #[test]
    fn hybrid_shapes_and_wiring() {
        let m = build_model(&ModelConfig::tiny().with_freq_branch(32)).unwrap();
        let input = ModelInput {
            images: images(4, 64, 0),
            spectra: Some(spectra(4, 64)),
        };
        assert_eq!(m.forward(&input, &ForwardMode::eval()).unwrap().dims(), [4, 1]);
        let missing = ModelInput {
            images: images(4, 64, 0),
            spectra: None,
        };
        assert!(matches!(m.forward(&missing, &ForwardMode::eval()), Err(Error::Wiring(_))));
        let short = ModelInput {
            images: images(4, 64, 0),
            spectra: Some(spectra(3, 64)),
        };
        assert!(matches!(m.forward(&short, &ForwardMode::eval()), Err(Error::Shape { .. })));
    }

    #[test]
    fn wrong_channel_count_names_both_shapes() {
        let m = build_model(&ModelConfig::tiny()).unwrap();
        let bad = ModelInput {
            images: Tensor::zeros((2, 1, 64, 64), DType::F32, &Device::Cpu).unwrap(),
            spectra: None,
        };
        let msg = m.forward(&bad, &ForwardMode::eval()).unwrap_err().to_string();
        assert!(msg.contains("(B>0, 3, H, W)") && msg.contains("[2, 1, 64, 64]"), "{msg}");
    }

    #[test]
    fn head_seed_fixes_head_weights() {
        let cfg = ModelConfig::tiny().with_seeds(3, 17);
        let a = build_model(&cfg).unwrap();
        let b = build_model(&cfg).unwrap();
        assert_eq!(a.weights_digest().unwrap(), b.weights_digest().unwrap());
        let c = build_model(&cfg.clone().with_seeds(3, 18)).unwrap();
        let w = |m: &Model| m.store().param("head.linear.weight").unwrap().var().as_tensor().clone();
        assert!(max_abs_diff(&w(&a), &w(&c)) > 0.0);
        assert_eq!(max_abs_diff(&w(&a), &w(&b)), 0.0);
    }

    #[test]
    fn eval_is_deterministic_and_train_uses_dropout() {
        let m = build_model(&ModelConfig::tiny().with_dropout(0.5)).unwrap();
        let input = ModelInput {
            images: images(8, 64, 0),
            spectra: None,
        };
        let a = m.forward(&input, &ForwardMode::eval()).unwrap();
        let b = m.forward(&input, &ForwardMode::eval()).unwrap();
        assert_eq!(max_abs_diff(&a, &b), 0.0);
        let t1 = m.forward(&input, &ForwardMode::train(1)).unwrap();
        let t2 = m.forward(&input, &ForwardMode::train(2)).unwrap();
        assert!(max_abs_diff(&t1, &t2) > 0.0);
        let t1_again = m.forward(&input, &ForwardMode::train(1)).unwrap();
        assert_eq!(max_abs_diff(&t1, &t1_again), 0.0);
    }

    #[test]
    fn zero_frequency_input_recomposes_through_the_head() {
        let Model::Hybrid(h) = build_model(&ModelConfig::tiny().with_freq_branch(32)).unwrap() else {
            unreachable!()
        };
        let imgs = images(3, 64, 0);
        let zeros = Tensor::zeros((3, 2, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let mode = ForwardMode::eval();
        let logits = h
            .forward(
                &ModelInput {
                    images: imgs.clone(),
                    spectra: Some(zeros),
                },
                &mode,
            )
            .unwrap();
        let s = h.spatial_features(&imgs, &mode).unwrap();
        let manual = h
            .head()
            .forward(&Tensor::cat(&[&s, &Tensor::zeros((3, 32), DType::F32, &Device::Cpu).unwrap()], 1).unwrap(), &mode)
            .unwrap();
        assert!(logits.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| v.is_finite()));
        assert_eq!(max_abs_diff(&logits, &manual), 0.0);
    }

    #[test]
    fn hybrid_is_a_strict_superset() {
        let plain = build_model(&ModelConfig::tiny()).unwrap();
        let hybrid = build_model(&ModelConfig::tiny().with_freq_branch(32)).unwrap();
        assert!(hybrid.total_params() > plain.total_params());
    }

    #[test]
    fn gradient_report_covers_every_block() {
        let plain = build_model(&ModelConfig::tiny()).unwrap();
        let probe = ModelInput {
            images: images(2, 64, 0),
            spectra: None,
        };
        let r = trainable_parameter_report(&plain, &probe).unwrap();
        assert_eq!(r.total_params, r.trainable_params);
        assert!(r.all_blocks_receive_gradients());
        assert_eq!(r.blocks.len(), 5);

        let hybrid = build_model(&ModelConfig::tiny().with_freq_branch(16)).unwrap();
        let probe = ModelInput {
            images: images(2, 64, 0),
            spectra: Some(spectra(2, 64)),
        };
        let r = trainable_parameter_report(&hybrid, &probe).unwrap();
        assert!(r.all_blocks_receive_gradients());
        assert!(r.block("frequency.conv2").is_some() && r.block("backbone.conv3").is_some());
    }

    #[test]
    fn frozen_block_is_reported() {
        let m = build_model(&ModelConfig::tiny()).unwrap();
        assert_eq!(m.store().freeze_prefix("backbone.conv1."), 2);
        let probe = ModelInput {
            images: images(2, 64, 0),
            spectra: None,
        };
        let r = trainable_parameter_report(&m, &probe).unwrap();
        assert!(r.trainable_params < r.total_params);
        assert!(!r.block("backbone.conv1").unwrap().received_gradient);
        assert!(r.block("backbone.conv2").unwrap().received_gradient);
    }

    #[test]
    fn unknown_pretrained_path_is_fatal() {
        let mut cfg = ModelConfig::new(crate::models::BackboneId::B0);
        cfg.pretrained_path = Some("/nonexistent/weights.safetensors".into());
        assert!(matches!(build_model(&cfg), Err(Error::PretrainedUnavailable { .. })));
    }
}
