//! Siamese training over image pairs with known correspondence, optionally
//! exchanging descriptors through an in-batch auxiliary pool.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{ArmDataset, Dataset};
use crate::dve::{correspondence_loss_grad, dve_loss_grad, AuxiliarySet, LossOptions};
use crate::embedder::{batch_tensor, build_embedder, grads_to_tensor, tensor_to_maps, Arch, DenseEmbedder, EmbedderSpec};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Adam, AdamConfig};
use crate::warp::{downsample_warp, sample_warp, warp_image, WarpConfig, WarpField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
}

/// Where the second image of each pair and its correspondence come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// `x' = g x` for a random warp `g`.
    #[default]
    Warp,
    /// `x'` is another frame of the same object with ground-truth flow.
    Flow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub arch: Arch,
    /// Network input side; `None` uses the architecture default.
    pub input_size: Option<usize>,
    pub width_mult: f64,
    pub embed_dim: usize,
    pub pairs_per_batch: usize,
    pub aux_pool_size: usize,
    pub aux_per_pair: usize,
    pub epochs: usize,
    /// Batches per epoch; `None` covers the dataset once per epoch.
    pub batches_per_epoch: Option<usize>,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub adam: AdamConfig,
    pub use_dve: bool,
    pub identity_warp: bool,
    pub supervision: Supervision,
    pub warp: WarpConfig,
    pub seed: u64,
    pub row_block: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Arch::SmallNet,
            input_size: None,
            width_mult: 1.0,
            embed_dim: 64,
            pairs_per_batch: 16,
            aux_pool_size: 16,
            aux_per_pair: 5,
            epochs: 100,
            batches_per_epoch: None,
            lr: 1e-3,
            optimizer: Optimizer::Adam,
            adam: AdamConfig::default(),
            use_dve: true,
            identity_warp: false,
            supervision: Supervision::Warp,
            warp: WarpConfig::default(),
            seed: 0,
            row_block: LossOptions::default().row_block,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be a non-negative finite number, got {}", self.lr)));
        }
        if self.pairs_per_batch == 0 {
            return Err(Error::Config("pairs_per_batch must be at least 1".into()));
        }
        if self.use_dve && (self.aux_per_pair == 0 || self.aux_per_pair > self.aux_pool_size) {
            return Err(Error::Config(format!(
                "aux_per_pair ({}) must be in 1..=aux_pool_size ({})",
                self.aux_per_pair, self.aux_pool_size
            )));
        }
        if self.batches_per_epoch == Some(0) {
            return Err(Error::Config("batches_per_epoch must be at least 1".into()));
        }
        self.warp.validate()?;
        self.embedder_spec().validate()
    }

    pub fn embedder_spec(&self) -> EmbedderSpec {
        EmbedderSpec {
            arch: self.arch,
            out_dim: self.embed_dim,
            input_size: self.input_size.unwrap_or(self.arch.default_input_size()),
            width_mult: self.width_mult,
        }
    }

    fn pool_size(&self) -> usize {
        if self.use_dve {
            self.aux_pool_size
        } else {
            0
        }
    }

    fn batches(&self, len: usize) -> usize {
        self.batches_per_epoch.unwrap_or((len / self.pairs_per_batch).max(1))
    }
}

/// Images a training run can draw pairs from.
pub trait TrainingData {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn image(&self, i: usize) -> &Image;

    /// Pixels allowed to contribute to the loss, if restricted.
    fn foreground(&self, i: usize) -> Option<Vec<bool>>;

    /// Another image of the same object together with the correspondence
    /// from image `i` to it.
    fn partner(&self, _i: usize, _rng: &mut dyn RngCore) -> Option<Result<(usize, WarpField)>> {
        None
    }

    fn id(&self) -> String;
}

impl TrainingData for Dataset {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn image(&self, i: usize) -> &Image {
        &self.items[i].image
    }

    fn foreground(&self, i: usize) -> Option<Vec<bool>> {
        self.masks.as_ref().map(|m| m[i].clone())
    }

    fn id(&self) -> String {
        self.name.clone()
    }
}

impl TrainingData for ArmDataset {
    fn len(&self) -> usize {
        self.frames.len()
    }

    fn image(&self, i: usize) -> &Image {
        &self.frames[i].image
    }

    fn foreground(&self, i: usize) -> Option<Vec<bool>> {
        Some(self.frames[i].foreground())
    }

    fn partner(&self, i: usize, rng: &mut dyn RngCore) -> Option<Result<(usize, WarpField)>> {
        let inst = self.frames[i].instance;
        let n = self.config.frames_per_instance;
        let first = i - self.frames[i].frame;
        if n < 2 || self.frames.get(first + n - 1).is_none_or(|f| f.instance != inst) {
            return Some(Err(Error::Data(format!("instance {inst} has fewer than two frames"))));
        }
        let mut j = first + rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        Some(self.flow(i, j).map(|w| (j, w)))
    }

    fn id(&self) -> String {
        format!(
            "synth_arm(n={},f={},s={},seed={})",
            self.config.n_instances, self.config.frames_per_instance, self.config.image_size, self.config.seed
        )
    }
}

/// One training batch: `pairs` image pairs with image-resolution ground
/// truth, plus an auxiliary pool and per-pair auxiliary indices into it.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub sources: Vec<usize>,
    pub x: Vec<Image>,
    pub x_prime: Vec<Image>,
    pub gt: Vec<WarpField>,
    pub pool_sources: Vec<usize>,
    pub pool: Vec<Image>,
    pub aux: Vec<Vec<usize>>,
}

/// Sample one batch. Pair images and pool images are distinct dataset items.
pub fn assemble_batch<R: Rng>(data: &dyn TrainingData, cfg: &TrainConfig, rng: &mut R) -> Result<Batch> {
    let pairs = cfg.pairs_per_batch;
    let pool_n = cfg.pool_size();
    let demand = pairs + pool_n;
    if data.len() < demand {
        return Err(Error::Data(format!(
            "dataset `{}` has {} images but a batch needs {demand} distinct images",
            data.id(),
            data.len()
        )));
    }
    let picked = sample(rng, data.len(), demand).into_vec();
    let (sources, pool_sources) = picked.split_at(pairs);

    let mut batch = Batch {
        sources: sources.to_vec(),
        x: Vec::with_capacity(pairs),
        x_prime: Vec::with_capacity(pairs),
        gt: Vec::with_capacity(pairs),
        pool_sources: pool_sources.to_vec(),
        pool: Vec::with_capacity(pool_n),
        aux: Vec::with_capacity(pairs),
    };
    for &i in sources {
        let x = data.image(i).clone();
        let (h, w) = (x.height, x.width);
        let (x_prime, mut gt) = if cfg.identity_warp {
            (x.clone(), WarpField::identity(h, w))
        } else {
            match cfg.supervision {
                Supervision::Warp => {
                    let g = sample_warp(&cfg.warp, h, w, rng)?;
                    (warp_image(&x, &g)?, g)
                }
                Supervision::Flow => {
                    let (j, g) = data.partner(i, rng).ok_or_else(|| {
                        Error::Config(format!("dataset `{}` provides no flow; use warp supervision", data.id()))
                    })??;
                    (data.image(j).clone(), g)
                }
            }
        };
        if let Some(mask) = data.foreground(i) {
            gt.restrict(&mask)?;
        }
        batch.x.push(x);
        batch.x_prime.push(x_prime);
        batch.gt.push(gt);
    }
    for &i in pool_sources {
        let img = data.image(i);
        let aux = if cfg.supervision == Supervision::Warp && !cfg.identity_warp {
            let g = sample_warp(&cfg.warp, img.height, img.width, rng)?;
            warp_image(img, &g)?
        } else {
            img.clone()
        };
        batch.pool.push(aux);
    }
    for _ in 0..pairs {
        let chosen = if pool_n > 0 { sample(rng, pool_n, cfg.aux_per_pair).into_vec() } else { Vec::new() };
        batch.aux.push(chosen);
    }
    Ok(batch)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_time: f64,
}

/// Everything needed to continue a run.
#[derive(Debug)]
pub struct TrainState {
    pub model: DenseEmbedder,
    pub optimizer: Adam,
    pub epochs_done: usize,
    pub history: Vec<EpochStats>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model: build_embedder(&cfg.embedder_spec(), cfg.seed)?,
            optimizer: Adam::new(cfg.adam),
            epochs_done: 0,
            history: Vec::new(),
        })
    }

    /// Continue from an existing model with a fresh optimizer.
    pub fn warm_start(model: DenseEmbedder, cfg: &TrainConfig) -> Self {
        Self { model, optimizer: Adam::new(cfg.adam), epochs_done: 0, history: Vec::new() }
    }
}

/// Hooks invoked while training.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &LogRecord) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// The random stream used for epoch `epoch` (zero-based) of a run.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Loss of one batch and the gradients flowing into the network, or `None`
/// when every pair is fully masked.
fn batch_step(model: &mut DenseEmbedder, batch: &Batch, cfg: &TrainConfig) -> Result<Option<f64>> {
    let pairs = batch.x.len();
    let images: Vec<&Image> = batch.x.iter().chain(&batch.x_prime).chain(&batch.pool).collect();
    let out = model.forward_train(&batch_tensor(&images)?)?;
    let maps = tensor_to_maps(&out);
    let (c, h, w) = (out.c(), out.h(), out.w());
    let factor = batch.x[0].height / h;
    let opts = LossOptions { row_block: cfg.row_block };

    let mut grads = vec![vec![0.0f32; c * h * w]; images.len()];
    let mut total = 0.0;
    let mut used = 0usize;
    let mut per_pair = Vec::with_capacity(pairs);
    for p in 0..pairs {
        let gt = downsample_warp(&batch.gt[p], factor)?;
        let (src, tgt) = (&maps[p], &maps[pairs + p]);
        let result = if cfg.use_dve {
            let aux_maps: Vec<_> = batch.aux[p].iter().map(|&a| &maps[2 * pairs + a]).collect();
            dve_loss_grad(src, tgt, &AuxiliarySet::new(&aux_maps)?, &gt, opts)
        } else {
            correspondence_loss_grad(src, tgt, &gt, opts)
        };
        match result {
            Ok(g) => {
                total += g.loss as f64;
                used += 1;
                per_pair.push(Some(g));
            }
            Err(Error::AllMasked) => per_pair.push(None),
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        model.clear_cache();
        return Ok(None);
    }
    let scale = 1.0 / used as f32;
    for (p, g) in per_pair.into_iter().enumerate() {
        let Some(g) = g else { continue };
        for (d, v) in grads[p].iter_mut().zip(&g.d_src) {
            *d += v * scale;
        }
        for (d, v) in grads[pairs + p].iter_mut().zip(&g.d_tgt) {
            *d += v * scale;
        }
        for (&a, da) in batch.aux[p].iter().zip(&g.d_aux) {
            for (d, v) in grads[2 * pairs + a].iter_mut().zip(da) {
                *d += v * scale;
            }
        }
    }
    let loss = total / used as f64;
    if !loss.is_finite() {
        model.clear_cache();
        return Ok(Some(loss));
    }
    model.zero_grad();
    model.backward(&grads_to_tensor(&grads, c, h, w));
    model.clear_cache();
    Ok(Some(loss))
}

/// Run epochs `state.epochs_done .. until` and return the updated state.
pub fn train_until(
    mut state: TrainState,
    data: &dyn TrainingData,
    cfg: &TrainConfig,
    until: usize,
    observer: &mut dyn TrainObserver,
) -> Result<TrainState> {
    cfg.validate()?;
    let spec = &state.model.spec;
    if let Some(img) = (!data.is_empty()).then(|| data.image(0)) {
        if img.height != spec.input_size || img.width != spec.input_size {
            return Err(Error::Config(format!(
                "model expects {0}x{0} inputs but dataset `{1}` has {2}x{3} images",
                spec.input_size,
                data.id(),
                img.height,
                img.width
            )));
        }
    } else {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let start = Instant::now();
    let batches = cfg.batches(data.len());
    for epoch in state.epochs_done..until {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut losses = Vec::with_capacity(batches);
        for b in 0..batches {
            let batch = assemble_batch(data, cfg, &mut rng)?;
            let Some(loss) = batch_step(&mut state.model, &batch, cfg)? else { continue };
            if !loss.is_finite() {
                return Err(Error::NonFinite { epoch: epoch + 1, batch: b, loss });
            }
            let mut params = state.model.params_mut();
            state.optimizer.update(&mut params, cfg.lr);
            losses.push(loss);
            observer.on_step(&LogRecord {
                epoch: epoch + 1,
                step: epoch * batches + b + 1,
                loss,
                wall_time: start.elapsed().as_secs_f64(),
            })?;
        }
        let mean_loss =
            if losses.is_empty() { f64::NAN } else { crate::linalg::pairwise_sum(&losses) / losses.len() as f64 };
        state.epochs_done = epoch + 1;
        state.history.push(EpochStats { epoch: epoch + 1, mean_loss, wall_time: start.elapsed().as_secs_f64() });
        observer.on_epoch(&state)?;
    }
    Ok(state)
}

/// Train a fresh model for `cfg.epochs` epochs.
pub fn train(data: &dyn TrainingData, cfg: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<TrainState> {
    let state = TrainState::new(cfg)?;
    train_until(state, data, cfg, cfg.epochs, observer)
}

/// Continue optimizing `model` on `data` for `epochs` epochs with the same
/// objective. `cfg` supplies everything but the network.
pub fn finetune_unsupervised(
    model: DenseEmbedder,
    data: &dyn TrainingData,
    cfg: &TrainConfig,
    epochs: usize,
    observer: &mut dyn TrainObserver,
) -> Result<TrainState> {
    if let Some(img) = (!data.is_empty()).then(|| data.image(0)) {
        if img.height != model.spec.input_size || img.width != model.spec.input_size {
            return Err(Error::Config(format!(
                "checkpoint expects {0}x{0} inputs but dataset `{1}` has {2}x{3} images",
                model.spec.input_size,
                data.id(),
                img.height,
                img.width
            )));
        }
    }
    let state = TrainState::warm_start(model, cfg);
    if epochs == 0 {
        return Ok(state);
    }
    let cfg = TrainConfig {
        arch: state.model.spec.arch,
        input_size: Some(state.model.spec.input_size),
        width_mult: state.model.spec.width_mult,
        embed_dim: state.model.spec.out_dim,
        ..cfg.clone()
    };
    train_until(state, data, &cfg, epochs, observer)
}

/// Mean loss over `batches` fixed batches without updating the model.
pub fn evaluate_loss(model: &mut DenseEmbedder, data: &dyn TrainingData, cfg: &TrainConfig, batches: usize) -> Result<f64> {
    let mut rng = epoch_rng(cfg.seed ^ 0x5eed_e7a1, 0);
    let mut losses = Vec::new();
    for _ in 0..batches {
        let batch = assemble_batch(data, cfg, &mut rng)?;
        let images: Vec<&Image> = batch.x.iter().chain(&batch.x_prime).chain(&batch.pool).collect();
        let maps = model.embed(&images)?;
        let pairs = batch.x.len();
        let factor = batch.x[0].height / maps[0].height;
        for p in 0..pairs {
            let gt = downsample_warp(&batch.gt[p], factor)?;
            let opts = LossOptions { row_block: cfg.row_block };
            let r = if cfg.use_dve {
                let aux_maps: Vec<_> = batch.aux[p].iter().map(|&a| &maps[2 * pairs + a]).collect();
                dve_loss_grad(&maps[p], &maps[pairs + p], &AuxiliarySet::new(&aux_maps)?, &gt, opts)
            } else {
                correspondence_loss_grad(&maps[p], &maps[pairs + p], &gt, opts)
            };
            match r {
                Ok(g) => losses.push(g.loss as f64),
                Err(Error::AllMasked) => {}
                Err(e) => return Err(e),
            }
        }
    }
    if losses.is_empty() {
        return Err(Error::AllMasked);
    }
    Ok(crate::linalg::pairwise_sum(&losses) / losses.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synth_arm_generate, ArmGenConfig};

    fn arm(n: usize, f: usize) -> ArmDataset {
        synth_arm_generate(ArmGenConfig { n_instances: n, frames_per_instance: f, image_size: 32, seed: 4 }).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            input_size: Some(32),
            width_mult: 0.25,
            embed_dim: 3,
            pairs_per_batch: 4,
            aux_pool_size: 4,
            aux_per_pair: 2,
            epochs: 1,
            batches_per_epoch: Some(2),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn batch_shapes() {
        let data = arm(10, 4);
        let cfg = TrainConfig { pairs_per_batch: 16, aux_pool_size: 16, aux_per_pair: 5, ..tiny_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = assemble_batch(&data, &cfg, &mut rng).unwrap();
        assert_eq!((b.x.len(), b.x_prime.len(), b.pool.len()), (16, 16, 16));
        assert!(b.aux.iter().all(|a| a.len() == 5 && a.iter().all(|&i| i < 16)));
        for a in &b.aux {
            let mut s = a.clone();
            s.dedup();
            assert_eq!(s.len(), 5);
        }
        let mut all: Vec<_> = b.sources.iter().chain(&b.pool_sources).copied().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 32);
    }

    #[test]
    fn identity_warp_pairs() {
        let data = arm(4, 3);
        let cfg = TrainConfig { identity_warp: true, ..tiny_cfg() };
        let b = assemble_batch(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for p in 0..b.x.len() {
            assert_eq!(b.x[p].max_abs_diff(&b.x_prime[p]), 0.0);
            let id = WarpField::identity(32, 32);
            assert_eq!(b.gt[p].coords, id.coords);
        }
    }

    #[test]
    fn batches_are_deterministic() {
        let data = arm(4, 3);
        for supervision in [Supervision::Warp, Supervision::Flow] {
            let cfg = TrainConfig { supervision, ..tiny_cfg() };
            let a = assemble_batch(&data, &cfg, &mut epoch_rng(3, 0)).unwrap();
            let b = assemble_batch(&data, &cfg, &mut epoch_rng(3, 0)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn flow_pairs_share_instance() {
        let data = arm(4, 3);
        let cfg = TrainConfig { supervision: Supervision::Flow, ..tiny_cfg() };
        let b = assemble_batch(&data, &cfg, &mut epoch_rng(0, 0)).unwrap();
        for p in 0..b.x.len() {
            let inst = data.frames[b.sources[p]].instance;
            let partner = data.frames.iter().position(|f| f.image == b.x_prime[p]).unwrap();
            assert_eq!(data.frames[partner].instance, inst);
            assert_ne!(partner, b.sources[p]);
        }
    }

    #[test]
    fn too_small_dataset() {
        let data = arm(1, 5);
        let cfg = tiny_cfg();
        assert!(matches!(assemble_batch(&data, &cfg, &mut epoch_rng(0, 0)), Err(Error::Data(_))));
    }

    #[test]
    fn zero_lr_freezes_parameters() {
        let data = arm(4, 3);
        let cfg = TrainConfig { lr: 0.0, ..tiny_cfg() };
        let before = TrainState::new(&cfg).unwrap().model.param_hash();
        let after = train(&data, &cfg, &mut ()).unwrap();
        assert_eq!(after.model.param_hash(), before);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..tiny_cfg() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..tiny_cfg() }.validate().is_err());
        assert!(TrainConfig { aux_per_pair: 9, ..tiny_cfg() }.validate().is_err());
        assert!(TrainConfig { aux_per_pair: 9, use_dve: false, ..tiny_cfg() }.validate().is_ok());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = arm(4, 3);
        let cfg = TrainConfig { epochs: 2, batches_per_epoch: Some(1), ..tiny_cfg() };
        let full = train(&data, &cfg, &mut ()).unwrap();
        let half = train_until(TrainState::new(&cfg).unwrap(), &data, &cfg, 1, &mut ()).unwrap();
        let resumed = train_until(half, &data, &cfg, 2, &mut ()).unwrap();
        assert_eq!(full.model.state_hash(), resumed.model.state_hash());
        let losses = |s: &TrainState| s.history.iter().map(|e| (e.epoch, e.mean_loss)).collect::<Vec<_>>();
        assert_eq!(losses(&full), losses(&resumed));
    }

    #[test]
    fn finetune_zero_epochs_is_identity() {
        let data = arm(4, 3);
        let cfg = tiny_cfg();
        let state = TrainState::new(&cfg).unwrap();
        let h = state.model.state_hash();
        let out = finetune_unsupervised(state.model, &data, &cfg, 0, &mut ()).unwrap();
        assert_eq!(out.model.state_hash(), h);
        let wrong = TrainState::new(&TrainConfig { input_size: Some(48), ..cfg.clone() }).unwrap();
        assert!(matches!(finetune_unsupervised(wrong.model, &data, &cfg, 1, &mut ()), Err(Error::Config(_))));
    }
}
