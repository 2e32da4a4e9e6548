//! Spatial feature extractors: the EfficientNet family (B0/B3/B6) and a tiny
//! CNN for offline tests. Parameter names follow the torchvision state-dict
//! layout so converted checkpoints load without a renaming table.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use super::config::{BackboneId, ModelConfig};
use super::layers::{global_avg_pool, sigmoid, BatchNorm2d, Conv2d, Init, ParamStore};
use crate::error::{Error, Result};

pub(crate) const PREFIX: &str = "backbone";

pub enum Backbone {
    Tiny(TinyCnn),
    EfficientNet(EfficientNet),
}

impl Backbone {
    pub(crate) fn build(cfg: &ModelConfig, store: &mut ParamStore) -> Result<Self> {
        let mut init = Init::new(store, cfg.init_seed);
        Ok(match cfg.backbone {
            BackboneId::TinyTest => Backbone::Tiny(TinyCnn::new(&mut init)?),
            id => Backbone::EfficientNet(EfficientNet::new(&mut init, Scaling::of(id))?),
        })
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Backbone::Tiny(_) => TinyCnn::FEATURE_DIM,
            Backbone::EfficientNet(e) => e.feature_dim,
        }
    }

    /// (B, 3, H, W) → (B, D) in f32.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Backbone::Tiny(t) => t.forward(x),
            Backbone::EfficientNet(e) => e.forward(x, train),
        }
    }
}

pub struct TinyCnn {
    convs: Vec<Conv2d>,
}

impl TinyCnn {
    pub const FEATURE_DIM: usize = 64;
    const CHANNELS: [usize; 5] = [3, 16, 32, 64, 64];

    fn new(init: &mut Init<'_>) -> Result<Self> {
        let convs = Self::CHANNELS
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(init, &format!("{PREFIX}.conv{i}"), w[0], w[1], 3, 2, 1, true))
            .collect::<Result<_>>()?;
        Ok(Self { convs })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.relu()?;
        }
        global_avg_pool(&h)
    }
}

#[derive(Debug, Clone, Copy)]
struct Scaling {
    width: f64,
    depth: f64,
}

impl Scaling {
    fn of(id: BackboneId) -> Self {
        let (width, depth) = match id {
            BackboneId::B0 => (1.0, 1.0),
            BackboneId::B3 => (1.2, 1.4),
            BackboneId::B6 => (1.8, 2.6),
            BackboneId::TinyTest => unreachable!("tiny_test is not an EfficientNet"),
        };
        Self { width, depth }
    }

    fn filters(&self, channels: usize) -> usize {
        let v = channels as f64 * self.width;
        let mut rounded = (((v + 4.0) as usize) / 8 * 8).max(8);
        if (rounded as f64) < 0.9 * v {
            rounded += 8;
        }
        rounded
    }

    fn repeats(&self, n: usize) -> usize {
        (n as f64 * self.depth).ceil() as usize
    }
}

/// (expand ratio, kernel, stride, in, out, repeats) for the seven B0 stages.
const STAGES: [(usize, usize, usize, usize, usize, usize); 7] = [
    (1, 3, 1, 32, 16, 1),
    (6, 3, 2, 16, 24, 2),
    (6, 5, 2, 24, 40, 2),
    (6, 3, 2, 40, 80, 3),
    (6, 5, 1, 80, 112, 3),
    (6, 5, 2, 112, 192, 4),
    (6, 3, 1, 192, 320, 1),
];

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
    act: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(
        init: &mut Init<'_>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        act: bool,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(init, &format!("{name}.0"), in_ch, out_ch, kernel, stride, groups, false)?,
            bn: BatchNorm2d::new(init, &format!("{name}.1"), out_ch)?,
            act,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn.forward(&self.conv.forward(x)?, train)?;
        Ok(if self.act { y.silu()? } else { y })
    }
}

struct SqueezeExcite {
    fc1: Conv2d,
    fc2: Conv2d,
}

impl SqueezeExcite {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let s = global_avg_pool(x)?.to_dtype(x.dtype())?.reshape((b, c, 1, 1))?;
        let s = self.fc1.forward(&s)?.silu()?;
        let s = sigmoid(&self.fc2.forward(&s)?)?;
        Ok(x.broadcast_mul(&s)?)
    }
}

struct MbConv {
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    se: SqueezeExcite,
    project: ConvBn,
    residual: bool,
}

impl MbConv {
    fn new(
        init: &mut Init<'_>,
        name: &str,
        expand_ratio: usize,
        kernel: usize,
        stride: usize,
        in_ch: usize,
        out_ch: usize,
    ) -> Result<Self> {
        let expanded = in_ch * expand_ratio;
        let mut k = 0;
        let mut next = || {
            let n = format!("{name}.block.{k}");
            k += 1;
            n
        };
        let expand = if expand_ratio != 1 {
            Some(ConvBn::new(init, &next(), in_ch, expanded, 1, 1, 1, true)?)
        } else {
            None
        };
        let depthwise = ConvBn::new(init, &next(), expanded, expanded, kernel, stride, expanded, true)?;
        let se_name = next();
        let squeeze = (in_ch / 4).max(1);
        let se = SqueezeExcite {
            fc1: Conv2d::new(init, &format!("{se_name}.fc1"), expanded, squeeze, 1, 1, 1, true)?,
            fc2: Conv2d::new(init, &format!("{se_name}.fc2"), squeeze, expanded, 1, 1, 1, true)?,
        };
        let project = ConvBn::new(init, &next(), expanded, out_ch, 1, 1, 1, false)?;
        Ok(Self {
            expand,
            depthwise,
            se,
            project,
            residual: stride == 1 && in_ch == out_ch,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = match &self.expand {
            Some(e) => e.forward(x, train)?,
            None => x.clone(),
        };
        h = self.depthwise.forward(&h, train)?;
        h = self.se.forward(&h)?;
        h = self.project.forward(&h, train)?;
        Ok(if self.residual { (h + x)? } else { h })
    }
}

pub struct EfficientNet {
    stem: ConvBn,
    blocks: Vec<MbConv>,
    head: ConvBn,
    feature_dim: usize,
}

impl EfficientNet {
    fn new(init: &mut Init<'_>, scaling: Scaling) -> Result<Self> {
        let stem_out = scaling.filters(32);
        let stem = ConvBn::new(init, &format!("{PREFIX}.features.0"), 3, stem_out, 3, 2, 1, true)?;
        let mut blocks = Vec::new();
        let mut last = stem_out;
        for (s, &(expand, kernel, stride, cin, cout, reps)) in STAGES.iter().enumerate() {
            let cin = scaling.filters(cin);
            let cout = scaling.filters(cout);
            for j in 0..scaling.repeats(reps) {
                let (bin, bstride) = if j == 0 { (cin, stride) } else { (cout, 1) };
                let name = format!("{PREFIX}.features.{}.{j}", s + 1);
                blocks.push(MbConv::new(init, &name, expand, kernel, bstride, bin, cout)?);
            }
            last = cout;
        }
        let feature_dim = 4 * last;
        let head = ConvBn::new(init, &format!("{PREFIX}.features.8"), last, feature_dim, 1, 1, 1, true)?;
        Ok(Self {
            stem,
            blocks,
            head,
            feature_dim,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = self.stem.forward(x, train)?;
        for b in &self.blocks {
            h = b.forward(&h, train)?;
        }
        h = self.head.forward(&h, train)?;
        global_avg_pool(&h)
    }
}

/// Copies backbone tensors from a safetensors file into `store`. Keys are the
/// torchvision names without the `backbone.` prefix; classifier tensors in
/// the file are ignored.
pub(crate) fn load_pretrained(cfg: &ModelConfig, store: &ParamStore, path: &Path) -> Result<()> {
    let unavailable = |why: String| Error::PretrainedUnavailable {
        backbone: cfg.backbone.name().to_string(),
        path: path.to_path_buf(),
        guidance: why,
    };
    if !path.is_file() {
        return Err(unavailable(format!(
            "export the torchvision efficientnet_{} ImageNet state dict to safetensors at this path \
             (or set FAKESCOPE_WEIGHTS_DIR / model.pretrained_path) and retry, or set pretrained = false",
            cfg.backbone.name()
        )));
    }
    let tensors: HashMap<String, Tensor> = candle_core::safetensors::load(path, &Device::Cpu)
        .map_err(|e| unavailable(format!("could not read the file ({e}); re-export it and retry")))?;
    let lookup = |name: &str| -> Result<Tensor> {
        let key = name.strip_prefix(&format!("{PREFIX}.")).unwrap_or(name);
        tensors
            .get(key)
            .ok_or_else(|| unavailable(format!("tensor '{key}' is missing from the checkpoint")))?
            .to_dtype(DType::F32)
            .map_err(Error::from)
    };
    for p in store.params().iter().filter(|p| p.name().starts_with(PREFIX)) {
        let t = lookup(p.name())?;
        if t.dims() != p.var().dims() {
            return Err(unavailable(format!(
                "tensor '{}' has shape {:?}, expected {:?}",
                p.name(),
                t.dims(),
                p.var().dims()
            )));
        }
        p.var().set(&t)?;
    }
    for b in store.buffers().iter().filter(|b| b.name().starts_with(PREFIX)) {
        b.set(lookup(b.name())?);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_rounding_matches_published_widths() {
        let b6 = Scaling::of(BackboneId::B6);
        assert_eq!(b6.filters(32), 56);
        assert_eq!(b6.filters(320), 576);
        assert_eq!(b6.repeats(4), 11);
        let b3 = Scaling::of(BackboneId::B3);
        assert_eq!(b3.filters(320), 384);
        assert_eq!(b3.filters(32), 40);
    }

    #[test]
    fn b0_shapes_and_size() {
        let mut store = ParamStore::default();
        let bb = Backbone::build(&ModelConfig::new(BackboneId::B0).without_pretrained(), &mut store).unwrap();
        assert_eq!(bb.feature_dim(), 1280);
        // torchvision's efficientnet_b0 has 5,288,548 parameters, 1,281,000 of
        // which belong to the 1000-way classifier.
        assert_eq!(store.total_params(), 5_288_548 - 1_281_000);
        assert!(store.param("backbone.features.1.0.block.1.fc1.weight").is_some());
        assert!(store.param("backbone.features.2.0.block.3.1.weight").is_some());
        let x = Tensor::zeros((2, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(bb.forward(&x, false).unwrap().dims(), [2, 1280]);
    }

    #[test]
    fn missing_weights_give_guidance() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ModelConfig::new(BackboneId::B0);
        cfg.pretrained_path = Some(dir.path().join("absent.safetensors"));
        let mut store = ParamStore::default();
        Backbone::build(&cfg, &mut store).unwrap();
        let err = load_pretrained(&cfg, &store, &cfg.resolved_weights_path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("absent.safetensors") && msg.contains("retry"), "{msg}");
    }

    #[test]
    fn pretrained_round_trip_through_safetensors() {
        let cfg = ModelConfig::new(BackboneId::B0).without_pretrained().with_seeds(1, 0);
        let mut src = ParamStore::default();
        Backbone::build(&cfg, &mut src).unwrap();
        let mut map = HashMap::new();
        for p in src.params() {
            map.insert(p.name()["backbone.".len()..].to_string(), p.var().as_tensor().clone());
        }
        for b in src.buffers() {
            map.insert(b.name()["backbone.".len()..].to_string(), b.get());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b0.safetensors");
        candle_core::safetensors::save(&map, &path).unwrap();

        let other = cfg.clone().with_seeds(2, 0);
        let mut dst = ParamStore::default();
        Backbone::build(&other, &mut dst).unwrap();
        load_pretrained(&other, &dst, &path).unwrap();
        for (a, b) in src.params().iter().zip(dst.params()) {
            let d = (a.var().as_tensor() - b.var().as_tensor()).unwrap().abs().unwrap();
            assert_eq!(d.max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        }
    }
}
