//! Matching probabilities, the correspondence loss and descriptor vector
//! exchange.
//!
//! For a source embedding `S` (one row per pixel) and a target `T`, the
//! matching probability is the row-wise softmax of the raw inner products
//! `S T^T`. The correspondence loss is the expected distance, under that
//! distribution, between the matched target cell and the ground-truth
//! location `g(u)`, averaged over the source pixels whose correspondence is
//! valid. Exchange replaces every source row by its softmax-weighted
//! reconstruction from a pool of auxiliary embeddings before matching.
//!
//! All coordinates are normalized to `[-1, 1]` on each grid. Integrals over
//! the image domain become sums over embedding cells.
//!
//! The plain functions ([`similarity_grid`], [`match_distribution`],
//! [`correspondence_loss`], [`dve_reconstruct`], [`dve_loss`]) compose the
//! loss step by step. [`correspondence_loss_grad`] and [`dve_loss_grad`]
//! compute the same value together with its gradient, streaming over blocks
//! of source rows so peak memory stays bounded.

use crate::error::{Error, Result};
use crate::image::{to_normalized, Point};
use crate::linalg::{softmax_in_place, Matrix, Real};
use crate::warp::WarpField;

/// Per-pixel `C`-dimensional embedding on a `height x width` grid, stored
/// pixel-major (`values[pixel * channels + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap<T = f32> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Real> EmbeddingMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "embedding buffer has {} values, expected {}x{}x{}",
                values.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Self { channels, height, width, values })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, values: vec![T::zero(); channels * height * width] }
    }

    /// Build from a function of the cell index.
    pub fn from_fn(channels: usize, height: usize, width: usize, f: impl Fn(usize) -> Vec<T>) -> Self {
        let mut values = Vec::with_capacity(channels * height * width);
        for i in 0..height * width {
            let v = f(i);
            assert_eq!(v.len(), channels);
            values.extend(v);
        }
        Self { channels, height, width, values }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn vector(&self, pixel: usize) -> &[T] {
        &self.values[pixel * self.channels..(pixel + 1) * self.channels]
    }

    /// Normalized position of cell `pixel`.
    pub fn cell_position(&self, pixel: usize) -> Point {
        grid_position(pixel, self.height, self.width)
    }

    pub fn scaled(&self, s: T) -> Self {
        Self { values: self.values.iter().map(|&v| v * s).collect(), ..self.clone() }
    }

    pub fn cast<U: Real>(&self) -> EmbeddingMap<U> {
        EmbeddingMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn as_matrix(&self) -> Matrix<T> {
        Matrix::from_vec(self.pixels(), self.channels, self.values.clone())
    }
}

pub fn grid_position(pixel: usize, height: usize, width: usize) -> Point {
    let (y, x) = (pixel / width, pixel % width);
    Point::new(to_normalized(x as f64, width), to_normalized(y as f64, height))
}

/// Raw inner products between every source and target cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGrid<T> {
    pub target_height: usize,
    pub target_width: usize,
    /// `source_pixels x target_pixels`.
    pub values: Matrix<T>,
}

/// Row-stochastic matching probabilities `p(v | u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchDistribution<T> {
    pub target_height: usize,
    pub target_width: usize,
    pub probs: Matrix<T>,
}

impl<T: Real> MatchDistribution<T> {
    pub fn source_pixels(&self) -> usize {
        self.probs.rows
    }

    pub fn target_pixels(&self) -> usize {
        self.probs.cols
    }

    /// Most likely target cell per source row; ties go to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.probs.rows)
            .map(|r| {
                let row = self.probs.row(r);
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Pool of auxiliary embeddings through which source vectors are exchanged.
/// Pixels of every map are concatenated into a single pool.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliarySet<T = f32> {
    pub channels: usize,
    /// Cell count of each member map, in pool order.
    pub sizes: Vec<usize>,
    pool: Matrix<T>,
}

impl<T: Real> AuxiliarySet<T> {
    pub fn new(maps: &[&EmbeddingMap<T>]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::Config("auxiliary set is empty".into()))?;
        let channels = first.channels;
        if let Some(m) = maps.iter().find(|m| m.channels != channels) {
            return Err(Error::Shape(format!("auxiliary maps mix {} and {} channels", channels, m.channels)));
        }
        let mut data = Vec::with_capacity(maps.iter().map(|m| m.values.len()).sum());
        for m in maps {
            data.extend_from_slice(&m.values);
        }
        let rows = data.len() / channels.max(1);
        Ok(Self { channels, sizes: maps.iter().map(|m| m.pixels()).collect(), pool: Matrix::from_vec(rows, channels, data) })
    }

    /// Number of member images, `|A|`.
    pub fn size(&self) -> usize {
        self.sizes.len()
    }

    pub fn pool_pixels(&self) -> usize {
        self.pool.rows
    }

    /// Pool with the rows reordered by `perm` (`new[i] = old[perm[i]]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.pool.data.len());
        for &p in perm {
            data.extend_from_slice(self.pool.row(p));
        }
        Self { channels: self.channels, sizes: vec![perm.len()], pool: Matrix::from_vec(perm.len(), self.channels, data) }
    }
}

pub fn similarity_grid<T: Real>(src: &EmbeddingMap<T>, tgt: &EmbeddingMap<T>) -> Result<SimilarityGrid<T>> {
    if src.channels != tgt.channels {
        return Err(Error::Shape(format!("source has {} channels, target {}", src.channels, tgt.channels)));
    }
    Ok(SimilarityGrid {
        target_height: tgt.height,
        target_width: tgt.width,
        values: src.as_matrix().mul_transpose(&tgt.as_matrix()),
    })
}

/// Row-wise softmax of a similarity grid.
pub fn match_distribution<T: Real>(sim: &SimilarityGrid<T>) -> MatchDistribution<T> {
    let mut probs = sim.values.clone();
    for r in 0..probs.rows {
        softmax_in_place(probs.row_mut(r));
    }
    MatchDistribution { target_height: sim.target_height, target_width: sim.target_width, probs }
}

fn valid_rows(gt: &WarpField) -> Result<Vec<usize>> {
    let rows: Vec<usize> = (0..gt.len()).filter(|&i| gt.valid[i]).collect();
    if rows.is_empty() {
        Err(Error::AllMasked)
    } else {
        Ok(rows)
    }
}

fn target_positions<T: Real>(height: usize, width: usize) -> Vec<(T, T)> {
    (0..height * width)
        .map(|i| {
            let p = grid_position(i, height, width);
            (T::lit(p.x), T::lit(p.y))
        })
        .collect()
}

/// Mean over valid source pixels of the expected match distance.
pub fn correspondence_loss<T: Real>(dist: &MatchDistribution<T>, gt: &WarpField) -> Result<T> {
    if dist.source_pixels() != gt.len() {
        return Err(Error::Shape(format!(
            "distribution has {} source rows but the correspondence field has {} cells",
            dist.source_pixels(),
            gt.len()
        )));
    }
    let rows = valid_rows(gt)?;
    let pos = target_positions::<T>(dist.target_height, dist.target_width);
    let mut total = T::zero();
    for &u in &rows {
        let g = gt.coord(u);
        let (gx, gy) = (T::lit(g.x), T::lit(g.y));
        let row = dist.probs.row(u);
        let mut acc = T::zero();
        for (p, &(vx, vy)) in row.iter().zip(&pos) {
            acc = acc + *p * ((vx - gx).powi(2) + (vy - gy).powi(2)).sqrt();
        }
        total = total + acc;
    }
    Ok(total / T::from_usize(rows.len()).unwrap())
}

/// Reconstruct every source vector as the softmax-weighted average of the
/// auxiliary pool.
pub fn dve_reconstruct<T: Real>(src: &EmbeddingMap<T>, aux: &AuxiliarySet<T>) -> Result<EmbeddingMap<T>> {
    if src.channels != aux.channels {
        return Err(Error::Shape(format!("source has {} channels, auxiliary set {}", src.channels, aux.channels)));
    }
    let mut weights = src.as_matrix().mul_transpose(&aux.pool);
    for r in 0..weights.rows {
        softmax_in_place(weights.row_mut(r));
    }
    let mut out = vec![T::zero(); src.values.len()];
    T::gemm(weights.rows, weights.cols, src.channels, T::one(), &weights.data, false, &aux.pool.data, false, T::zero(), &mut out);
    EmbeddingMap::new(src.channels, src.height, src.width, out)
}

/// Correspondence loss after exchanging the source through `aux`.
pub fn dve_loss<T: Real>(src: &EmbeddingMap<T>, tgt: &EmbeddingMap<T>, aux: &AuxiliarySet<T>, gt: &WarpField) -> Result<T> {
    let rec = dve_reconstruct(src, aux)?;
    correspondence_loss(&match_distribution(&similarity_grid(&rec, tgt)?), gt)
}

/// Knobs for the streaming loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    /// Source rows processed per block.
    pub row_block: usize,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self { row_block: 256 }
    }
}

/// Loss value and gradients with respect to every input embedding, each
/// laid out like the corresponding [`EmbeddingMap::values`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairGrad<T> {
    pub loss: T,
    pub d_src: Vec<T>,
    pub d_tgt: Vec<T>,
    /// One buffer per auxiliary map; empty without exchange.
    pub d_aux: Vec<Vec<T>>,
}

pub fn correspondence_loss_grad<T: Real>(
    src: &EmbeddingMap<T>,
    tgt: &EmbeddingMap<T>,
    gt: &WarpField,
    opts: LossOptions,
) -> Result<PairGrad<T>> {
    streamed_loss(src, tgt, None, gt, opts)
}

pub fn dve_loss_grad<T: Real>(
    src: &EmbeddingMap<T>,
    tgt: &EmbeddingMap<T>,
    aux: &AuxiliarySet<T>,
    gt: &WarpField,
    opts: LossOptions,
) -> Result<PairGrad<T>> {
    streamed_loss(src, tgt, Some(aux), gt, opts)
}

fn streamed_loss<T: Real>(
    src: &EmbeddingMap<T>,
    tgt: &EmbeddingMap<T>,
    aux: Option<&AuxiliarySet<T>>,
    gt: &WarpField,
    opts: LossOptions,
) -> Result<PairGrad<T>> {
    let c = src.channels;
    if tgt.channels != c || aux.is_some_and(|a| a.channels != c) {
        return Err(Error::Shape("source, target and auxiliary embeddings must share a channel count".into()));
    }
    if gt.len() != src.pixels() {
        return Err(Error::Shape(format!(
            "correspondence field has {} cells but the source embedding has {}",
            gt.len(),
            src.pixels()
        )));
    }
    let rows = valid_rows(gt)?;
    let m = tgt.pixels();
    let pos = target_positions::<T>(tgt.height, tgt.width);
    let inv_n = T::one() / T::from_usize(rows.len()).unwrap();
    let block = opts.row_block.max(1);

    let mut loss = T::zero();
    let mut d_src = vec![T::zero(); src.values.len()];
    let mut d_tgt = vec![T::zero(); tgt.values.len()];
    let mut d_pool = aux.map(|a| vec![T::zero(); a.pool.data.len()]);

    for chunk in rows.chunks(block) {
        let b = chunk.len();
        let mut s_blk = Vec::with_capacity(b * c);
        for &u in chunk {
            s_blk.extend_from_slice(src.vector(u));
        }

        // Exchange: q = softmax(S A^T), s_hat = q A.
        let (q_blk, s_hat) = match aux {
            Some(a) => {
                let k = a.pool.rows;
                let mut q = vec![T::zero(); b * k];
                T::gemm(b, c, k, T::one(), &s_blk, false, &a.pool.data, true, T::zero(), &mut q);
                for r in q.chunks_mut(k) {
                    softmax_in_place(r);
                }
                let mut sh = vec![T::zero(); b * c];
                T::gemm(b, k, c, T::one(), &q, false, &a.pool.data, false, T::zero(), &mut sh);
                (Some(q), sh)
            }
            None => (None, s_blk.clone()),
        };

        // p = softmax(s_hat T^T); loss rows and dL/dlogits.
        let mut p = vec![T::zero(); b * m];
        T::gemm(b, c, m, T::one(), &s_hat, false, &tgt.values, true, T::zero(), &mut p);
        for (r, &u) in chunk.iter().enumerate() {
            let row = &mut p[r * m..(r + 1) * m];
            softmax_in_place(row);
            let g = gt.coord(u);
            let (gx, gy) = (T::lit(g.x), T::lit(g.y));
            let mut expected = T::zero();
            let mut dists = Vec::with_capacity(m);
            for (pv, &(vx, vy)) in row.iter().zip(&pos) {
                let d = ((vx - gx).powi(2) + (vy - gy).powi(2)).sqrt();
                expected = expected + *pv * d;
                dists.push(d);
            }
            loss = loss + expected;
            for (pv, d) in row.iter_mut().zip(dists) {
                *pv = *pv * (d - expected) * inv_n;
            }
        }
        let dlogits = p;

        let mut d_shat = vec![T::zero(); b * c];
        T::gemm(b, m, c, T::one(), &dlogits, false, &tgt.values, false, T::zero(), &mut d_shat);
        T::gemm(m, b, c, T::one(), &dlogits, true, &s_hat, false, T::one(), &mut d_tgt);

        let d_s_blk = match (aux, q_blk, d_pool.as_mut()) {
            (Some(a), Some(q), Some(dp)) => {
                let k = a.pool.rows;
                // dA += q^T d_shat
                T::gemm(k, b, c, T::one(), &q, true, &d_shat, false, T::one(), dp);
                let mut dq = vec![T::zero(); b * k];
                T::gemm(b, c, k, T::one(), &d_shat, false, &a.pool.data, true, T::zero(), &mut dq);
                for (qr, dr) in q.chunks(k).zip(dq.chunks_mut(k)) {
                    let dot: T = qr.iter().zip(dr.iter()).map(|(a, b)| *a * *b).sum();
                    for (qv, dv) in qr.iter().zip(dr.iter_mut()) {
                        *dv = *qv * (*dv - dot);
                    }
                }
                let dm = dq;
                // dA += dm^T S, dS = dm A
                T::gemm(k, b, c, T::one(), &dm, true, &s_blk, false, T::one(), dp);
                let mut ds = vec![T::zero(); b * c];
                T::gemm(b, k, c, T::one(), &dm, false, &a.pool.data, false, T::zero(), &mut ds);
                ds
            }
            _ => d_shat,
        };
        for (r, &u) in chunk.iter().enumerate() {
            d_src[u * c..(u + 1) * c].copy_from_slice(&d_s_blk[r * c..(r + 1) * c]);
        }
    }

    let d_aux = match (aux, d_pool) {
        (Some(a), Some(dp)) => {
            let mut out = Vec::with_capacity(a.sizes.len());
            let mut off = 0;
            for &n in &a.sizes {
                out.push(dp[off * c..(off + n) * c].to_vec());
                off += n;
            }
            out
        }
        _ => Vec::new(),
    };
    Ok(PairGrad { loss: loss * inv_n, d_src, d_tgt, d_aux })
}
