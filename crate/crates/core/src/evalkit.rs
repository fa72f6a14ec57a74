//! Evaluation protocols: nearest-neighbour landmark matching, a frozen
//! softargmax regression probe, inter-ocular error and the
//! limited-annotation study.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, LandmarkSet};
use crate::dve::EmbeddingMap;
use crate::embedder::DenseEmbedder;
use crate::error::{Error, Result};
use crate::image::{to_normalized, to_pixel, Image, Point};
use crate::linalg::pairwise_sum;
use crate::nn::{Adam, AdamConfig, Param};
use crate::warp::{sample_warp, warp_image, warp_points, WarpConfig};

fn sample_map(map: &EmbeddingMap<f32>, p: Point) -> Vec<f64> {
    let (h, w, c) = (map.height, map.width, map.channels);
    let px = to_pixel(p.x, w).clamp(0.0, (w - 1) as f64);
    let py = to_pixel(p.y, h).clamp(0.0, (h - 1) as f64);
    let x0 = (px.floor() as usize).min(w.saturating_sub(2));
    let y0 = (py.floor() as usize).min(h.saturating_sub(2));
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (px - x0 as f64, py - y0 as f64);
    let mut out = vec![0.0; c];
    for (y, x, wt) in [(y0, x0, (1.0 - fx) * (1.0 - fy)), (y0, x1, fx * (1.0 - fy)), (y1, x0, (1.0 - fx) * fy), (y1, x1, fx * fy)] {
        if wt == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(map.vector(y * w + x)) {
            *o += wt * *v as f64;
        }
    }
    out
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Index of the target cell best matching each query, ties to the lowest
/// row-major index.
pub fn nn_match_indices(src: &EmbeddingMap<f32>, tgt: &EmbeddingMap<f32>, queries: &[Point], normalize: bool) -> Result<Vec<usize>> {
    if src.channels != tgt.channels {
        return Err(Error::Shape(format!("channel mismatch: {} vs {}", src.channels, tgt.channels)));
    }
    let c = tgt.channels;
    let mut targets: Vec<f64> = tgt.values.iter().map(|v| *v as f64).collect();
    if normalize {
        targets.chunks_mut(c).for_each(unit);
    }
    Ok(queries
        .iter()
        .map(|&q| {
            let mut d = sample_map(src, q);
            if normalize {
                unit(&mut d);
            }
            let mut best = (0, f64::NEG_INFINITY);
            for (i, t) in targets.chunks(c).enumerate() {
                let s: f64 = t.iter().zip(&d).map(|(a, b)| a * b).sum();
                if s > best.1 {
                    best = (i, s);
                }
            }
            best.0
        })
        .collect())
}

/// Normalized position of the best-matching target cell for every query.
pub fn nn_match(src: &EmbeddingMap<f32>, tgt: &EmbeddingMap<f32>, queries: &[Point], normalize: bool) -> Result<Vec<Point>> {
    Ok(nn_match_indices(src, tgt, queries, normalize)?.into_iter().map(|i| tgt.cell_position(i)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchProtocol {
    /// An image against a random warp of itself.
    SameIdentity,
    /// Two images of different identities, each with its own annotation.
    DifferentIdentity,
}

impl MatchProtocol {
    pub fn as_str(self) -> &'static str {
        match self {
            MatchProtocol::SameIdentity => "same_identity",
            MatchProtocol::DifferentIdentity => "different_identity",
        }
    }
}

/// One benchmark pair with landmarks in both images (normalized).
#[derive(Debug, Clone, PartialEq)]
pub struct MatchPair {
    pub src_id: String,
    pub tgt_id: String,
    pub src: Image,
    pub tgt: Image,
    pub src_points: Vec<Point>,
    pub tgt_points: Vec<Point>,
}

/// Draw the pairs used by [`matching_benchmark`].
pub fn plan_match_pairs<R: Rng>(
    dataset: &Dataset,
    n_pairs: usize,
    protocol: MatchProtocol,
    warp: &WarpConfig,
    rng: &mut R,
) -> Result<Vec<MatchPair>> {
    if n_pairs == 0 {
        return Ok(Vec::new());
    }
    if !dataset.has_landmarks() {
        return Err(Error::Data(format!("dataset `{}` has no landmark annotations", dataset.name)));
    }
    if protocol == MatchProtocol::DifferentIdentity
        && (dataset.distinct_identities() < 2 || dataset.items.iter().any(|a| a.identity.is_none()))
    {
        return Err(Error::Data(format!(
            "dataset `{}` needs at least two annotated identities for different-identity matching",
            dataset.name
        )));
    }
    let mut pairs = Vec::with_capacity(n_pairs);
    let n = dataset.len();
    while pairs.len() < n_pairs {
        let a = &dataset.items[rng.gen_range(0..n)];
        let la = a.landmarks.as_ref().unwrap();
        match protocol {
            MatchProtocol::SameIdentity => {
                let g = sample_warp(warp, a.image.height, a.image.width, rng)?;
                let moved = warp_points(&g, &la.points);
                let (mut sp, mut tp) = (Vec::new(), Vec::new());
                for (k, (q, ok)) in moved.into_iter().enumerate() {
                    if la.visible[k] && ok {
                        sp.push(la.points[k]);
                        tp.push(q);
                    }
                }
                if sp.is_empty() {
                    continue;
                }
                pairs.push(MatchPair {
                    src_id: a.id.clone(),
                    tgt_id: format!("{}@warp", a.id),
                    src: a.image.clone(),
                    tgt: warp_image(&a.image, &g)?,
                    src_points: sp,
                    tgt_points: tp,
                });
            }
            MatchProtocol::DifferentIdentity => {
                let b = &dataset.items[rng.gen_range(0..n)];
                if b.identity == a.identity {
                    continue;
                }
                let lb = b.landmarks.as_ref().unwrap();
                let (mut sp, mut tp) = (Vec::new(), Vec::new());
                for k in 0..la.len().min(lb.len()) {
                    if la.visible[k] && lb.visible[k] {
                        sp.push(la.points[k]);
                        tp.push(lb.points[k]);
                    }
                }
                if sp.is_empty() {
                    continue;
                }
                pairs.push(MatchPair {
                    src_id: a.id.clone(),
                    tgt_id: b.id.clone(),
                    src: a.image.clone(),
                    tgt: b.image.clone(),
                    src_points: sp,
                    tgt_points: tp,
                });
            }
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub src_id: String,
    pub tgt_id: String,
    /// Mean landmark error of the pair in pixels.
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub protocol: MatchProtocol,
    pub pairs: Vec<PairResult>,
    /// Arithmetic mean of the per-pair errors; `None` for an empty report.
    pub mean_error: Option<f64>,
    /// Size of the pixel frame errors are measured in.
    pub frame: (usize, usize),
}

impl MatchReport {
    pub fn errors(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.error).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["pair", "src_id", "tgt_id", "error_px"])?;
        for (i, p) in self.pairs.iter().enumerate() {
            w.write_record([i.to_string(), p.src_id.clone(), p.tgt_id.clone(), format!("{:.6}", p.error)])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Score pairs given the embeddings of their two images.
pub fn score_match_pairs(
    pairs: &[MatchPair],
    maps: &[(EmbeddingMap<f32>, EmbeddingMap<f32>)],
    protocol: MatchProtocol,
) -> Result<MatchReport> {
    let frame = pairs.first().map_or((0, 0), |p| (p.tgt.height, p.tgt.width));
    let mut results = Vec::with_capacity(pairs.len());
    for (pair, (ms, mt)) in pairs.iter().zip(maps) {
        let found = nn_match(ms, mt, &pair.src_points, true)?;
        let (h, w) = (pair.tgt.height, pair.tgt.width);
        let errs: Vec<f64> = found
            .iter()
            .zip(&pair.tgt_points)
            .map(|(f, g)| {
                let dx = to_pixel(f.x, w) - to_pixel(g.x, w);
                let dy = to_pixel(f.y, h) - to_pixel(g.y, h);
                dx.hypot(dy)
            })
            .collect();
        results.push(PairResult {
            src_id: pair.src_id.clone(),
            tgt_id: pair.tgt_id.clone(),
            error: pairwise_sum(&errs) / errs.len() as f64,
        });
    }
    let errors: Vec<f64> = results.iter().map(|r| r.error).collect();
    let mean_error = (!errors.is_empty()).then(|| pairwise_sum(&errors) / errors.len() as f64);
    Ok(MatchReport { protocol, pairs: results, mean_error, frame })
}

/// Nearest-neighbour landmark matching over `n_pairs` random pairs.
pub fn matching_benchmark<R: Rng>(
    model: &DenseEmbedder,
    dataset: &Dataset,
    n_pairs: usize,
    protocol: MatchProtocol,
    warp: &WarpConfig,
    rng: &mut R,
) -> Result<MatchReport> {
    let pairs = plan_match_pairs(dataset, n_pairs, protocol, warp, rng)?;
    let mut maps = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(16) {
        let images: Vec<&Image> = chunk.iter().flat_map(|p| [&p.src, &p.tgt]).collect();
        let mut out = model.embed(&images)?.into_iter();
        while let (Some(a), Some(b)) = (out.next(), out.next()) {
            maps.push((a, b));
        }
    }
    score_match_pairs(&pairs, &maps, protocol)
}

/// Grid-quantization bound of nearest-cell matching: half the diagonal of an
/// embedding cell, in pixels of an `image_size` frame.
pub fn quantization_bound(image_size: usize, grid: usize) -> f64 {
    let spacing = (image_size as f64 - 1.0) / (grid as f64 - 1.0);
    spacing * std::f64::consts::SQRT_2 / 2.0
}

/// Probability-weighted mean of the cell centres of an `h x w` heatmap after
/// a softmax at `temperature`.
pub fn softargmax(heatmap: &[f64], height: usize, width: usize, temperature: f64) -> Result<Point> {
    if heatmap.len() != height * width || heatmap.is_empty() {
        return Err(Error::Shape(format!("heatmap has {} cells, expected {height}x{width}", heatmap.len())));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config("softargmax temperature must be positive".into()));
    }
    let max = heatmap.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = heatmap.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let z = pairwise_sum(&weights);
    let (mut x, mut y) = (0.0, 0.0);
    for (i, wt) in weights.iter().enumerate() {
        x += wt * to_normalized((i % width) as f64, width);
        y += wt * to_normalized((i / width) as f64, height);
    }
    Ok(Point::new(x / z, y / z))
}

/// Mean landmark error as a percentage of the inter-ocular distance.
pub fn iod_error(pred: &LandmarkSet, gt: &LandmarkSet, left_eye: usize, right_eye: usize) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predicted vs {} ground-truth landmarks", pred.len(), gt.len())));
    }
    if left_eye >= gt.len() || right_eye >= gt.len() {
        return Err(Error::Config(format!("eye indices ({left_eye}, {right_eye}) out of range")));
    }
    let iod = gt.points[left_eye].dist(gt.points[right_eye]);
    if !(iod > 0.0) {
        return Err(Error::Data("inter-ocular distance is zero".into()));
    }
    let errs: Vec<f64> =
        (0..gt.len()).filter(|&k| gt.visible[k]).map(|k| pred.points[k].dist(gt.points[k]) / iod).collect();
    if errs.is_empty() {
        return Err(Error::Data("no visible landmarks".into()));
    }
    Ok(100.0 * pairwise_sum(&errs) / errs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub temperature: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { temperature: 0.5, epochs: 100, lr: 1e-3, batch_size: 16, seed: 0 }
    }
}

/// Number of 1x1 filters in a [`RegressionHead`].
pub const HEAD_FILTERS: usize = 50;

/// A bank of 1x1 filters whose softargmax locations are mapped linearly to
/// `K` landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionHead {
    pub channels: usize,
    pub num_landmarks: usize,
    pub temperature: f64,
    /// `n_filters x C`, row-major.
    pub filters: Param,
    /// `2K x 2F`, row-major; output `2k` is x, `2k+1` is y.
    pub linear: Param,
    pub bias: Param,
}

struct HeadCache {
    probs: Vec<Vec<f64>>,
    points: Vec<f64>,
}

impl RegressionHead {
    pub fn new(channels: usize, num_landmarks: usize, cfg: &HeadConfig) -> Result<Self> {
        if channels == 0 || num_landmarks == 0 {
            return Err(Error::Config("regression head needs channels and landmarks".into()));
        }
        if !(cfg.temperature > 0.0) {
            return Err(Error::Config("softargmax temperature must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let f = HEAD_FILTERS;
        let normal = Normal::new(0.0, 1.0 / (channels as f64).sqrt()).unwrap();
        let filters: Vec<f32> = (0..f * channels).map(|_| normal.sample(&mut rng) as f32).collect();
        let lin = Normal::new(0.0, 1.0 / (2.0 * f as f64).sqrt()).unwrap();
        let linear: Vec<f32> = (0..2 * num_landmarks * 2 * f).map(|_| lin.sample(&mut rng) as f32 * 0.1).collect();
        Ok(Self {
            channels,
            num_landmarks,
            temperature: cfg.temperature,
            filters: Param::new("head.filters", vec![f, channels], filters, true),
            linear: Param::new("head.linear", vec![2 * num_landmarks, 2 * f], linear, true),
            bias: Param::filled("head.bias", vec![2 * num_landmarks], 0.0, true),
        })
    }

    fn n_filters(&self) -> usize {
        self.filters.shape[0]
    }

    fn forward(&self, map: &EmbeddingMap<f32>) -> (Vec<f64>, HeadCache) {
        let f = self.n_filters();
        let (c, hw) = (self.channels, map.pixels());
        let mut probs = Vec::with_capacity(f);
        let mut points = vec![0.0; 2 * f];
        for k in 0..f {
            let wk = &self.filters.value[k * c..(k + 1) * c];
            let resp: Vec<f64> =
                (0..hw).map(|u| map.vector(u).iter().zip(wk).map(|(a, b)| (*a as f64) * (*b as f64)).sum()).collect();
            let max = resp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut p: Vec<f64> = resp.iter().map(|r| ((r - max) / self.temperature).exp()).collect();
            let z: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= z);
            for (u, pu) in p.iter().enumerate() {
                let pos = map.cell_position(u);
                points[2 * k] += pu * pos.x;
                points[2 * k + 1] += pu * pos.y;
            }
            probs.push(p);
        }
        let out_n = 2 * self.num_landmarks;
        let mut out = vec![0.0; out_n];
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.linear.value[o * 2 * f..(o + 1) * 2 * f];
            *out_v = self.bias.value[o] as f64 + row.iter().zip(&points).map(|(a, b)| *a as f64 * b).sum::<f64>();
        }
        (out, HeadCache { probs, points })
    }

    pub fn predict(&self, map: &EmbeddingMap<f32>) -> Result<LandmarkSet> {
        if map.channels != self.channels {
            return Err(Error::Shape(format!("head expects {} channels, got {}", self.channels, map.channels)));
        }
        let (out, _) = self.forward(map);
        Ok(LandmarkSet::new(out.chunks(2).map(|c| Point::new(c[0], c[1])).collect()))
    }

    /// Accumulate gradients of `sum_k vis_k ||y_k - gt_k||^2 * scale`; returns
    /// the unscaled loss.
    fn accumulate(&mut self, map: &EmbeddingMap<f32>, gt: &LandmarkSet, scale: f64) -> f64 {
        let f = self.n_filters();
        let c = self.channels;
        let (out, cache) = self.forward(map);
        let mut dy = vec![0.0; out.len()];
        let mut loss = 0.0;
        for k in 0..self.num_landmarks {
            if !gt.visible[k] {
                continue;
            }
            let (ex, ey) = (out[2 * k] - gt.points[k].x, out[2 * k + 1] - gt.points[k].y);
            loss += ex * ex + ey * ey;
            dy[2 * k] = 2.0 * ex * scale;
            dy[2 * k + 1] = 2.0 * ey * scale;
        }
        let mut dpts = vec![0.0; 2 * f];
        for (o, d) in dy.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            self.bias.grad[o] += *d as f32;
            let row = o * 2 * f;
            for j in 0..2 * f {
                self.linear.grad[row + j] += (*d * cache.points[j]) as f32;
                dpts[j] += *d * self.linear.value[row + j] as f64;
            }
        }
        for k in 0..f {
            let p = &cache.probs[k];
            let (gx, gy) = (dpts[2 * k], dpts[2 * k + 1]);
            let dp: Vec<f64> = (0..p.len())
                .map(|u| {
                    let pos = map.cell_position(u);
                    gx * pos.x + gy * pos.y
                })
                .collect();
            let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            let wg = &mut self.filters.grad[k * c..(k + 1) * c];
            for u in 0..p.len() {
                let dr = p[u] * (dp[u] - mean) / self.temperature;
                if dr == 0.0 {
                    continue;
                }
                for (g, v) in wg.iter_mut().zip(map.vector(u)) {
                    *g += (dr * *v as f64) as f32;
                }
            }
        }
        loss
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.filters, &mut self.linear, &mut self.bias]
    }
}

/// Fit a regression head on frozen embeddings.
pub fn train_head(maps: &[EmbeddingMap<f32>], targets: &[LandmarkSet], cfg: &HeadConfig) -> Result<RegressionHead> {
    if maps.is_empty() || maps.len() != targets.len() {
        return Err(Error::Data("regressor needs at least one annotated image".into()));
    }
    let k = targets[0].len();
    let mut head = RegressionHead::new(maps[0].channels, k, cfg)?;
    let mut opt = Adam::new(AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let bs = cfg.batch_size.max(1).min(maps.len());
    let mut order: Vec<usize> = (0..maps.len()).collect();
    for _ in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(bs) {
            for p in head.params_mut() {
                p.zero_grad();
            }
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                head.accumulate(&maps[i], &targets[i], scale);
            }
            opt.update(&mut head.params_mut(), cfg.lr);
        }
    }
    Ok(head)
}

/// Embed the annotated training images with the frozen model and fit a head.
/// The backbone is only read.
pub fn train_regressor(model: &DenseEmbedder, train: &Dataset, cfg: &HeadConfig) -> Result<RegressionHead> {
    if train.is_empty() {
        return Err(Error::Data("annotated training set is empty".into()));
    }
    let (maps, targets) = embed_annotated(model, train)?;
    train_head(&maps, &targets, cfg)
}

fn embed_annotated(model: &DenseEmbedder, data: &Dataset) -> Result<(Vec<EmbeddingMap<f32>>, Vec<LandmarkSet>)> {
    let mut targets = Vec::with_capacity(data.len());
    for item in &data.items {
        targets.push(
            item.landmarks.clone().ok_or_else(|| Error::Data(format!("image `{}` has no landmarks", item.id)))?,
        );
    }
    let images: Vec<&Image> = data.items.iter().map(|a| &a.image).collect();
    Ok((model.embed_all(&images, 16)?, targets))
}

/// Mean inter-ocular error of `head` over a test set of precomputed maps.
pub fn evaluate_head(
    head: &RegressionHead,
    maps: &[EmbeddingMap<f32>],
    targets: &[LandmarkSet],
    eyes: (usize, usize),
) -> Result<f64> {
    let mut errs = Vec::with_capacity(maps.len());
    for (m, t) in maps.iter().zip(targets) {
        errs.push(iod_error(&head.predict(m)?, t, eyes.0, eyes.1)?);
    }
    if errs.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    Ok(pairwise_sum(&errs) / errs.len() as f64)
}

/// Written as a number or the string `"all"` in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "CountRepr", into = "CountRepr")]
pub enum AnnotationCount {
    Count(usize),
    All,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CountRepr {
    Number(usize),
    Word(String),
}

impl TryFrom<CountRepr> for AnnotationCount {
    type Error = Error;

    fn try_from(r: CountRepr) -> Result<Self> {
        match r {
            CountRepr::Number(n) => Ok(AnnotationCount::Count(n)),
            CountRepr::Word(w) => w.parse(),
        }
    }
}

impl From<AnnotationCount> for CountRepr {
    fn from(c: AnnotationCount) -> Self {
        match c {
            AnnotationCount::Count(n) => CountRepr::Number(n),
            AnnotationCount::All => CountRepr::Word("all".into()),
        }
    }
}

impl std::fmt::Display for AnnotationCount {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AnnotationCount::Count(n) => write!(f, "{n}"),
            AnnotationCount::All => write!(f, "all"),
        }
    }
}

impl std::str::FromStr for AnnotationCount {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(AnnotationCount::All);
        }
        s.parse().map(AnnotationCount::Count).map_err(|_| Error::Config(format!("bad annotation count `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitedRow {
    pub count: AnnotationCount,
    pub errors: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Sampled training ids, one list per seed.
    pub samples: Vec<Vec<String>>,
}

/// Regress landmarks from `count` annotated images for each count and seed
/// and report the inter-ocular error on `test` as mean and (population)
/// standard deviation over seeds. The head initialization is shared across
/// seeds; only the sampled annotations vary.
pub fn limited_annotation_study(
    model: &DenseEmbedder,
    train: &Dataset,
    test: &Dataset,
    counts: &[AnnotationCount],
    n_seeds: usize,
    head: &HeadConfig,
    eyes: (usize, usize),
) -> Result<Vec<LimitedRow>> {
    if n_seeds == 0 {
        return Err(Error::Config("n_seeds must be at least 1".into()));
    }
    for c in counts {
        if let AnnotationCount::Count(n) = c {
            if *n == 0 || *n > train.len() {
                return Err(Error::Config(format!("annotation count {n} outside 1..={}", train.len())));
            }
        }
    }
    let (train_maps, train_targets) = embed_annotated(model, train)?;
    let (test_maps, test_targets) = embed_annotated(model, test)?;
    let mut rows = Vec::with_capacity(counts.len());
    for &count in counts {
        let mut errors = Vec::with_capacity(n_seeds);
        let mut samples = Vec::with_capacity(n_seeds);
        for seed in 0..n_seeds {
            let idx: Vec<usize> = match count {
                AnnotationCount::All => (0..train.len()).collect(),
                AnnotationCount::Count(n) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(head.seed ^ (seed as u64 + 1).wrapping_mul(0x9e37_79b9));
                    let mut v = sample(&mut rng, train.len(), n).into_vec();
                    v.sort_unstable();
                    v
                }
            };
            let maps: Vec<_> = idx.iter().map(|&i| train_maps[i].clone()).collect();
            let targets: Vec<_> = idx.iter().map(|&i| train_targets[i].clone()).collect();
            let fitted = train_head(&maps, &targets, head)?;
            errors.push(evaluate_head(&fitted, &test_maps, &test_targets, eyes)?);
            samples.push(idx.iter().map(|&i| train.items[i].id.clone()).collect());
        }
        let mean = pairwise_sum(&errors) / errors.len() as f64;
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / errors.len() as f64;
        rows.push(LimitedRow { count, errors, mean, std: var.sqrt(), samples });
    }
    Ok(rows)
}

/// Write one CSV row per count and one id list per `(count, seed)`.
pub fn write_limited_report(rows: &[LimitedRow], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("limited_annotation.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["count", "mean", "std", "n_seeds"])?;
    for r in rows {
        w.write_record([r.count.to_string(), format!("{:.6}", r.mean), format!("{:.6}", r.std), r.errors.len().to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let mut written = vec![csv_path];
    for r in rows {
        for (seed, ids) in r.samples.iter().enumerate() {
            let path = dir.join(format!("annotations_{}_seed{seed}.txt", r.count));
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            for id in ids {
                writeln!(f, "{id}").map_err(|e| Error::io(&path, e))?;
            }
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{AnnotatedImage, Split};

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> EmbeddingMap<f32> {
        let values = (0..c * h * w).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        EmbeddingMap::new(c, h, w, values).unwrap()
    }

    #[test]
    fn self_match_with_one_hot_codes() {
        let m = EmbeddingMap::<f32>::from_fn(16, 4, 4, |u| (0..16).map(|i| if i == u { 1.0 } else { 0.0 }).collect());
        for u in 0..16 {
            assert_eq!(nn_match_indices(&m, &m, &[m.cell_position(u)], true).unwrap(), vec![u]);
        }
    }

    #[test]
    fn shifted_target_shifts_matches() {
        let (h, w) = (4, 5);
        let code = |x: usize, y: usize| -> Vec<f32> { (0..h * w).map(|i| if i == y * w + x { 1.0 } else { 0.0 }).collect() };
        let src = EmbeddingMap::from_fn(h * w, h, w, |u| code(u % w, u / w));
        // Target content moved one cell to the right.
        let tgt = EmbeddingMap::from_fn(h * w, h, w, |u| if u % w == 0 { vec![0.0; h * w] } else { code(u % w - 1, u / w) });
        for y in 0..h {
            for x in 0..w - 1 {
                let got = nn_match_indices(&src, &tgt, &[src.cell_position(y * w + x)], true).unwrap();
                assert_eq!(got, vec![y * w + x + 1]);
            }
        }
    }

    #[test]
    fn brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let src = random_map(&mut rng, 3, 4, 4);
            let tgt = random_map(&mut rng, 3, 4, 4);
            let cell = rng.gen_range(0..16);
            let q = src.cell_position(cell);
            let norm = |v: &[f32]| {
                let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
                v.iter().map(|x| (x / n) as f64).collect::<Vec<_>>()
            };
            let qs = norm(src.vector(cell));
            let scores: Vec<f64> = (0..16).map(|v| norm(tgt.vector(v)).iter().zip(&qs).map(|(a, b)| a * b).sum()).collect();
            let best = (0..16).fold(0, |b, v| if scores[v] > scores[b] { v } else { b });
            assert_eq!(nn_match_indices(&src, &tgt, &[q], true).unwrap(), vec![best]);
        }
    }

    #[test]
    fn normalized_matching_ignores_vector_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = random_map(&mut rng, 4, 5, 5);
        let mut tgt = random_map(&mut rng, 4, 5, 5);
        let queries: Vec<Point> = (0..25).map(|u| src.cell_position(u)).collect();
        let before = nn_match_indices(&src, &tgt, &queries, true).unwrap();
        for v in &mut tgt.values[7 * 4..8 * 4] {
            *v *= 13.0;
        }
        assert_eq!(nn_match_indices(&src, &tgt, &queries, true).unwrap(), before);
    }

    #[test]
    fn softargmax_cases() {
        let mut delta = vec![0.0; 25];
        delta[7] = 100.0;
        let p = softargmax(&delta, 5, 5, 1.0).unwrap();
        let c = Point::new(to_normalized(2.0, 5), to_normalized(1.0, 5));
        assert!(p.dist(c) < 1e-4);
        let u = softargmax(&vec![0.3; 20], 4, 5, 0.5).unwrap();
        assert!(u.norm() < 1e-12);
        // Peaks at x = -0.5 and x = 0.5 on a 5-wide grid.
        let mut two = vec![0.0; 15];
        two[5 + 1] = 5.0;
        two[5 + 3] = 5.0;
        let t = softargmax(&two, 3, 5, 1.0).unwrap();
        assert!(t.norm() < 1e-12);
        assert!(softargmax(&two, 3, 5, 0.0).is_err());
    }

    #[test]
    fn iod_cases() {
        let gt = LandmarkSet::new(vec![
            Point::new(-0.4, -0.2),
            Point::new(0.4, -0.2),
            Point::new(0.0, 0.1),
            Point::new(-0.3, 0.4),
            Point::new(0.3, 0.4),
        ]);
        assert_eq!(iod_error(&gt, &gt, 0, 1).unwrap(), 0.0);
        let shifted = LandmarkSet::new(gt.points.iter().map(|p| p.add(Point::new(0.0, 0.8))).collect());
        assert!((iod_error(&shifted, &gt, 0, 1).unwrap() - 100.0).abs() < 1e-9);
        // Offsets of 0.08, 0, 0.06, 0.1 and 0 over an IOD of 0.8:
        // (10 + 0 + 7.5 + 12.5 + 0) / 5 = 6.
        let pred = LandmarkSet::new(vec![
            Point::new(-0.32, -0.2),
            Point::new(0.4, -0.2),
            Point::new(0.0, 0.16),
            Point::new(-0.36, 0.48),
            Point::new(0.3, 0.4),
        ]);
        assert!((iod_error(&pred, &gt, 0, 1).unwrap() - 6.0).abs() < 1e-9);
        let coincident = LandmarkSet::new(vec![Point::new(0.1, 0.1); 5]);
        assert!(iod_error(&coincident, &coincident, 0, 1).is_err());
    }

    #[test]
    fn empty_benchmark() {
        let ds = Dataset::new("empty", Vec::new());
        let pairs = plan_match_pairs(&ds, 0, MatchProtocol::SameIdentity, &WarpConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let r = score_match_pairs(&pairs, &[], MatchProtocol::SameIdentity).unwrap();
        assert!(r.pairs.is_empty() && r.mean_error.is_none());
    }

    #[test]
    fn different_identity_needs_two_identities() {
        let item = |i: usize| AnnotatedImage {
            id: format!("{i}"),
            image: Image::new(8, 8),
            landmarks: Some(LandmarkSet::new(vec![Point::new(0.0, 0.0)])),
            identity: Some(1),
            split: Split::Test,
        };
        let ds = Dataset::new("one", (0..4).map(item).collect());
        let r = plan_match_pairs(&ds, 3, MatchProtocol::DifferentIdentity, &WarpConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Data(_))));
    }

    /// Embeddings that place `(a_x, a_y, 1 - |a|^2)` at every cell, where `a`
    /// is the cell's own normalized position.
    fn coordinate_map(h: usize, w: usize, scale: f32) -> EmbeddingMap<f32> {
        EmbeddingMap::from_fn(3, h, w, |u| {
            let p = crate::dve::grid_position(u, h, w);
            vec![p.x as f32 * scale, p.y as f32 * scale, (1.0 - (p.x * p.x + p.y * p.y) as f32) * scale]
        })
    }

    #[test]
    fn head_fits_a_single_image() {
        let map = coordinate_map(8, 8, 4.0);
        let gt = LandmarkSet::new(vec![Point::new(-0.3, 0.2), Point::new(0.5, -0.4)]);
        let cfg = HeadConfig { epochs: 400, lr: 1e-2, ..HeadConfig::default() };
        let head = train_head(&[map.clone()], &[gt.clone()], &cfg).unwrap();
        let pred = head.predict(&map).unwrap();
        for (p, g) in pred.points.iter().zip(&gt.points) {
            assert!(p.dist(*g) < 1e-2, "{p:?} vs {g:?}");
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let map = random_map(&mut rng, 3, 4, 4);
        let gt = LandmarkSet::new(vec![Point::new(0.2, -0.1), Point::new(-0.5, 0.3)]);
        let mut head = RegressionHead::new(3, 2, &HeadConfig::default()).unwrap();
        for p in head.params_mut() {
            p.zero_grad();
        }
        head.accumulate(&map, &gt, 1.0);
        let grads: Vec<Vec<f32>> = head.params_mut().iter().map(|p| p.grad.clone()).collect();
        let h = 1e-3f32;
        for pi in 0..3 {
            for i in 0..grads[pi].len() {
                let loss = |head: &mut RegressionHead| {
                    let (out, _) = head.forward(&map);
                    (0..2).map(|k| (out[2 * k] - gt.points[k].x).powi(2) + (out[2 * k + 1] - gt.points[k].y).powi(2)).sum::<f64>()
                };
                head.params_mut()[pi].value[i] += h;
                let lp = loss(&mut head);
                head.params_mut()[pi].value[i] -= 2.0 * h;
                let lm = loss(&mut head);
                head.params_mut()[pi].value[i] += h;
                let fd = (lp - lm) / (2.0 * h as f64);
                let an = grads[pi][i] as f64;
                assert!((fd - an).abs() <= 2e-2 * (1.0 + fd.abs()), "param {pi}[{i}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn annotation_counts_parse() {
        assert_eq!("all".parse::<AnnotationCount>().unwrap(), AnnotationCount::All);
        assert_eq!("5".parse::<AnnotationCount>().unwrap(), AnnotationCount::Count(5));
        assert!("five".parse::<AnnotationCount>().is_err());
    }
}
