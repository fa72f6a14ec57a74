//! Dense embedding networks mapping an image to one `C`-dimensional vector
//! per cell of a half-resolution grid.
//!
//! SmallNet: seven convolutions with 20, 48, 64, 80, 256, 256 and `C` output
//! channels. The first uses a 5x5 kernel and is followed by a 2x2 max pool;
//! the second to fourth are 3x3 convolutions dilated by 2, 4 and 2; the
//! final projection is 1x1. Every convolution but the last is followed by
//! batch norm and ReLU. SmallNet+ pools after each of the first three
//! convolutions. The hourglass variant is a single pre-activation stack.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dve::EmbeddingMap;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{BatchNorm2d, Conv2d, Hourglass, Layer, MaxPool2, Param, Relu, Residual, Sequential, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    #[serde(rename = "smallnet")]
    SmallNet,
    #[serde(rename = "smallnet_plus")]
    SmallNetPlus,
    Hourglass,
}

impl Arch {
    pub fn default_input_size(self) -> usize {
        match self {
            Arch::SmallNet => 70,
            Arch::SmallNetPlus => 64,
            Arch::Hourglass => 96,
        }
    }

    /// Input-to-output downsampling factor.
    pub fn stride(self) -> usize {
        match self {
            Arch::SmallNet | Arch::Hourglass => 2,
            Arch::SmallNetPlus => 8,
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smallnet" => Ok(Arch::SmallNet),
            "smallnet_plus" => Ok(Arch::SmallNetPlus),
            "hourglass" => Ok(Arch::Hourglass),
            other => Err(Error::Config(format!("unknown arch `{other}`"))),
        }
    }
}

pub const SMALLNET_WIDTHS: [usize; 6] = [20, 48, 64, 80, 256, 256];
pub const SMALLNET_DILATIONS: [usize; 6] = [1, 2, 4, 2, 1, 1];
pub const SMALLNET_KERNELS: [usize; 6] = [5, 3, 3, 3, 3, 3];
pub const HOURGLASS_CHANNELS: usize = 256;
pub const HOURGLASS_DEPTH: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderSpec {
    pub arch: Arch,
    pub out_dim: usize,
    pub input_size: usize,
    /// Multiplier on every internal channel width; 1.0 is the reference
    /// architecture.
    #[serde(default = "one")]
    pub width_mult: f64,
}

fn one() -> f64 {
    1.0
}

impl EmbedderSpec {
    pub fn new(arch: Arch, out_dim: usize) -> Self {
        Self { arch, out_dim, input_size: arch.default_input_size(), width_mult: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dim == 0 {
            return Err(Error::Config("out_dim must be at least 1".into()));
        }
        let stride = self.arch.stride();
        if self.input_size == 0 || self.input_size % stride != 0 {
            return Err(Error::Config(format!("input_size {} must be a positive multiple of {stride}", self.input_size)));
        }
        if self.arch == Arch::Hourglass && (self.input_size / 2) % (1 << HOURGLASS_DEPTH) != 0 {
            return Err(Error::Config(format!(
                "hourglass input_size must be a multiple of {}",
                2 << HOURGLASS_DEPTH
            )));
        }
        if !(self.width_mult > 0.0 && self.width_mult.is_finite()) {
            return Err(Error::Config("width_mult must be positive".into()));
        }
        Ok(())
    }

    pub fn output_size(&self) -> usize {
        self.input_size / self.arch.stride()
    }

    fn width(&self, base: usize) -> usize {
        ((base as f64 * self.width_mult).round() as usize).max(1)
    }
}

/// A dense embedding network together with its specification.
pub struct DenseEmbedder {
    pub spec: EmbedderSpec,
    pub seed: u64,
    net: Sequential,
}

impl std::fmt::Debug for DenseEmbedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DenseEmbedder").field("spec", &self.spec).field("seed", &self.seed).finish_non_exhaustive()
    }
}

pub fn build_embedder(spec: &EmbedderSpec, seed: u64) -> Result<DenseEmbedder> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = match spec.arch {
        Arch::SmallNet | Arch::SmallNetPlus => {
            let pools = if spec.arch == Arch::SmallNet { 1 } else { 3 };
            let mut net = Sequential::new();
            let mut cin = 3;
            for (i, &base) in SMALLNET_WIDTHS.iter().enumerate() {
                let cout = spec.width(base);
                let name = format!("conv{}", i + 1);
                net = net
                    .push(Conv2d::same(&name, cin, cout, SMALLNET_KERNELS[i], SMALLNET_DILATIONS[i], false, &mut rng))
                    .push(BatchNorm2d::new(&format!("bn{}", i + 1), cout))
                    .push(Relu::new());
                if i < pools {
                    net = net.push(MaxPool2::new());
                }
                cin = cout;
            }
            net.push(Conv2d::same("conv7", cin, spec.out_dim, 1, 1, true, &mut rng))
        }
        Arch::Hourglass => {
            let ch = spec.width(HOURGLASS_CHANNELS);
            let stem = spec.width(64);
            let mid = spec.width(128);
            Sequential::new()
                .push(Conv2d::new("stem.conv", 3, stem, 7, 2, 3, 1, false, &mut rng))
                .push(BatchNorm2d::new("stem.bn", stem))
                .push(Relu::new())
                .push(Residual::new("res1", stem, mid, &mut rng))
                .push(Residual::new("res2", mid, mid, &mut rng))
                .push(Residual::new("res3", mid, ch, &mut rng))
                .push(Hourglass::new("hg", HOURGLASS_DEPTH, ch, &mut rng))
                .push(Residual::new("post.res", ch, ch, &mut rng))
                .push(BatchNorm2d::new("post.bn", ch))
                .push(Relu::new())
                .push(Conv2d::same("post.conv", ch, ch, 1, 1, false, &mut rng))
                .push(BatchNorm2d::new("post.bn2", ch))
                .push(Relu::new())
                .push(Conv2d::same("head", ch, spec.out_dim, 1, 1, true, &mut rng))
        }
    };
    Ok(DenseEmbedder { spec: spec.clone(), seed, net })
}

/// Stack images into an `N x 3 x H x W` batch.
pub fn batch_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::Shape(format!("batch mixes {}x{} and {}x{} images", h, w, img.height, img.width)));
        }
        data.extend(img.to_chw());
    }
    Ok(Tensor::from_vec([images.len(), 3, h, w], data))
}

/// Split network output into per-image embedding maps.
pub fn tensor_to_maps(out: &Tensor) -> Vec<EmbeddingMap<f32>> {
    let (c, h, w) = (out.c(), out.h(), out.w());
    let hw = h * w;
    (0..out.n())
        .map(|i| {
            let item = out.item(i);
            let mut values = vec![0.0; c * hw];
            for ch in 0..c {
                for p in 0..hw {
                    values[p * c + ch] = item[ch * hw + p];
                }
            }
            EmbeddingMap { channels: c, height: h, width: w, values }
        })
        .collect()
}

/// Inverse of [`tensor_to_maps`] for gradient buffers.
pub fn grads_to_tensor(grads: &[Vec<f32>], channels: usize, height: usize, width: usize) -> Tensor {
    let hw = height * width;
    let mut t = Tensor::zeros([grads.len(), channels, height, width]);
    for (i, g) in grads.iter().enumerate() {
        let item = t.item_mut(i);
        for p in 0..hw {
            for ch in 0..channels {
                item[ch * hw + p] = g[p * channels + ch];
            }
        }
    }
    t
}

impl DenseEmbedder {
    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = self.spec.input_size;
        if x.c() != 3 || x.h() != s || x.w() != s {
            return Err(Error::Shape(format!(
                "expected N x 3 x {s} x {s} input, got {}x{}x{}x{}",
                x.n(),
                x.c(),
                x.h(),
                x.w()
            )));
        }
        Ok(())
    }

    /// Evaluation-mode embedding; batch norm uses running statistics.
    pub fn embed_tensor(&self, x: &Tensor) -> Result<Vec<EmbeddingMap<f32>>> {
        self.check_input(x)?;
        Ok(tensor_to_maps(&self.net.infer(x)))
    }

    pub fn embed(&self, images: &[&Image]) -> Result<Vec<EmbeddingMap<f32>>> {
        self.embed_tensor(&batch_tensor(images)?)
    }

    /// Embed many images in chunks of `batch`.
    pub fn embed_all(&self, images: &[&Image], batch: usize) -> Result<Vec<EmbeddingMap<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            out.extend(self.embed(chunk)?);
        }
        Ok(out)
    }

    /// Training-mode forward pass returning the raw `N x C x h x w` output.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.net.forward(x))
    }

    pub fn backward(&mut self, grad: &Tensor) {
        self.net.backward(grad);
    }

    pub fn zero_grad(&mut self) {
        for p in self.net.params_mut() {
            p.zero_grad();
        }
    }

    pub fn clear_cache(&mut self) {
        self.net.clear_cache();
    }

    /// Parameters and buffers in a fixed order.
    pub fn params(&self) -> Vec<&Param> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.net.params_mut()
    }

    pub fn num_trainable(&self) -> usize {
        self.params().iter().filter(|p| p.trainable).map(|p| p.numel()).sum()
    }

    /// SHA-256 over names and values of the trainable parameters.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params().into_iter().filter(|p| p.trainable) {
            h.update(p.name.as_bytes());
            for v in &p.value {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    /// SHA-256 over every parameter and buffer.
    pub fn state_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            h.update(p.name.as_bytes());
            for v in &p.value {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_grid_is_half_resolution() {
        let m = build_embedder(&EmbedderSpec { input_size: 16, ..EmbedderSpec::new(Arch::SmallNet, 3) }, 0).unwrap();
        let img = Image::filled(16, 16, [0.3, 0.5, 0.7]);
        let out = m.embed(&[&img]).unwrap();
        assert_eq!((out[0].channels, out[0].height, out[0].width), (3, 8, 8));
        assert!(m.embed(&[&Image::new(18, 18)]).is_err());
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(build_embedder(&EmbedderSpec { out_dim: 0, ..EmbedderSpec::new(Arch::SmallNet, 3) }, 0).is_err());
        assert!(build_embedder(&EmbedderSpec { input_size: 71, ..EmbedderSpec::new(Arch::SmallNet, 3) }, 0).is_err());
        assert!("resnet".parse::<Arch>().is_err());
    }

    #[test]
    fn smallnet_plus_pools_three_times() {
        let spec = EmbedderSpec { width_mult: 0.25, ..EmbedderSpec::new(Arch::SmallNetPlus, 4) };
        let m = build_embedder(&spec, 1).unwrap();
        let out = m.embed(&[&Image::new(64, 64)]).unwrap();
        assert_eq!((out[0].height, out[0].width), (8, 8));
    }

    #[test]
    fn same_seed_same_weights() {
        let spec = EmbedderSpec { width_mult: 0.5, ..EmbedderSpec::new(Arch::SmallNet, 8) };
        let a = build_embedder(&spec, 42).unwrap();
        let b = build_embedder(&spec, 42).unwrap();
        let c = build_embedder(&spec, 43).unwrap();
        assert_eq!(a.state_hash(), b.state_hash());
        assert_ne!(a.param_hash(), c.param_hash());
    }

    #[test]
    fn map_tensor_round_trip() {
        let t = Tensor::from_vec([2, 3, 2, 2], (0..24).map(|v| v as f32).collect());
        let maps = tensor_to_maps(&t);
        assert_eq!(maps[1].vector(2), &[14.0, 18.0, 22.0]);
        let grads: Vec<Vec<f32>> = maps.iter().map(|m| m.values.clone()).collect();
        assert_eq!(grads_to_tensor(&grads, 3, 2, 2), t);
    }

    #[test]
    fn smallnet_parameter_count() {
        let convs = 5 * 5 * 3 * 20 + 9 * 20 * 48 + 9 * 48 * 64 + 9 * 64 * 80 + 9 * 80 * 256 + 9 * 256 * 256;
        let norms = 2 * (20 + 48 + 64 + 80 + 256 + 256);
        for c in [3, 16, 64] {
            let m = build_embedder(&EmbedderSpec::new(Arch::SmallNet, c), 0).unwrap();
            assert_eq!(m.num_trainable(), convs + norms + 256 * c + c);
        }
    }
}
