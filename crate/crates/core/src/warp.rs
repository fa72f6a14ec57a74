//! Random thin-plate-spline warps and dense correspondence fields.
//!
//! A [`WarpField`] maps every pixel `u` of a grid to a normalized coordinate.
//! [`sample_warp`] produces the forward correspondence `u -> g(u)`; rendering
//! the warped image needs the inverse map, obtained with
//! [`WarpField::invert`] and consumed by [`apply_warp`] as a sampling grid.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{to_normalized, to_pixel, Image, Point};

/// Parameters of the random warp distribution.
///
/// Displacements and translations are fractions of the full image extent,
/// which spans two normalized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarpConfig {
    pub control_grid: (usize, usize),
    pub max_control_displacement: f64,
    pub rotation_range: f64,
    pub scale_range: (f64, f64),
    pub translation_range: f64,
    /// Compose the TPS with a random similarity transform. With this off the
    /// warp is the TPS alone.
    pub similarity: bool,
    pub seed: u64,
}

impl Default for WarpConfig {
    fn default() -> Self {
        Self {
            control_grid: (3, 3),
            max_control_displacement: 0.1,
            rotation_range: 0.2,
            scale_range: (0.9, 1.1),
            translation_range: 0.1,
            similarity: true,
            seed: 0,
        }
    }
}

impl WarpConfig {
    /// A configuration whose samples are all the identity.
    pub fn identity() -> Self {
        Self {
            max_control_displacement: 0.0,
            rotation_range: 0.0,
            scale_range: (1.0, 1.0),
            translation_range: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (gy, gx) = self.control_grid;
        if gy < 2 || gx < 2 {
            return Err(Error::Config(format!("control_grid must be at least 2x2, got {gy}x{gx}")));
        }
        if !(0.0..=0.5).contains(&self.max_control_displacement) {
            return Err(Error::Config(format!(
                "max_control_displacement must lie in [0, 0.5], got {}",
                self.max_control_displacement
            )));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("scale_range must satisfy 0 < lower <= upper, got ({lo}, {hi})")));
        }
        if !(self.rotation_range >= 0.0 && self.translation_range >= 0.0) {
            return Err(Error::Config("rotation_range and translation_range must be non-negative".into()));
        }
        Ok(())
    }
}

/// One concrete draw from the warp distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpParams {
    pub rotation: f64,
    pub scale: f64,
    /// Normalized units.
    pub translation: Point,
    pub control_points: Vec<Point>,
    /// Normalized units, one per control point.
    pub displacements: Vec<Point>,
}

/// Regular control lattice spanning `[-1, 1]^2`, row-major.
pub fn control_lattice(rows: usize, cols: usize) -> Vec<Point> {
    let mut pts = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            pts.push(Point::new(to_normalized(c as f64, cols), to_normalized(r as f64, rows)));
        }
    }
    pts
}

impl WarpParams {
    pub fn identity(control_grid: (usize, usize)) -> Self {
        let control_points = control_lattice(control_grid.0, control_grid.1);
        let displacements = vec![Point::default(); control_points.len()];
        Self { rotation: 0.0, scale: 1.0, translation: Point::default(), control_points, displacements }
    }

    pub fn translation(t: Point) -> Self {
        Self { translation: t, ..Self::identity((2, 2)) }
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &WarpConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut p = Self::identity(cfg.control_grid);
        // Always draw the same number of variates so streams stay aligned
        // when individual ranges are zero.
        let rot = symmetric(rng, cfg.rotation_range);
        let scale_u: f64 = rng.gen();
        let tx = symmetric(rng, cfg.translation_range * 2.0);
        let ty = symmetric(rng, cfg.translation_range * 2.0);
        if cfg.similarity {
            p.rotation = rot;
            p.scale = cfg.scale_range.0 + (cfg.scale_range.1 - cfg.scale_range.0) * scale_u;
            p.translation = Point::new(tx, ty);
        }
        let d = cfg.max_control_displacement * 2.0;
        for disp in p.displacements.iter_mut() {
            *disp = Point::new(symmetric(rng, d), symmetric(rng, d));
        }
        Ok(p)
    }

    fn similarity(&self, u: Point) -> Point {
        let (s, c) = self.rotation.sin_cos();
        Point::new(
            self.scale * (c * u.x - s * u.y) + self.translation.x,
            self.scale * (s * u.x + c * u.y) + self.translation.y,
        )
    }

    /// Build the evaluator for this warp.
    pub fn compile(&self) -> Result<CompiledWarp> {
        let tps = if self.displacements.iter().any(|d| d.x != 0.0 || d.y != 0.0) {
            Some(Tps::fit(&self.control_points, &self.displacements)?)
        } else {
            None
        };
        Ok(CompiledWarp { params: self.clone(), tps })
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, range: f64) -> f64 {
    let u: f64 = rng.gen();
    (2.0 * u - 1.0) * range
}

/// Thin-plate spline interpolating 2-D displacements at control points.
#[derive(Debug, Clone)]
pub struct Tps {
    centers: Vec<Point>,
    /// Kernel weights, one `(wx, wy)` pair per centre.
    weights: Vec<Point>,
    /// Affine part `[a0, ax, ay]` per output coordinate.
    affine: [[f64; 3]; 2],
}

fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

impl Tps {
    pub fn fit(centers: &[Point], values: &[Point]) -> Result<Self> {
        let n = centers.len();
        if n != values.len() || n < 3 {
            return Err(Error::Config("TPS needs at least 3 control points with matching values".into()));
        }
        let m = n + 3;
        let mut a = DMatrix::<f64>::zeros(m, m);
        for i in 0..n {
            for j in 0..n {
                let d = centers[i].sub(centers[j]);
                a[(i, j)] = tps_kernel(d.x * d.x + d.y * d.y);
            }
            let row = [1.0, centers[i].x, centers[i].y];
            for (k, v) in row.iter().enumerate() {
                a[(i, n + k)] = *v;
                a[(n + k, i)] = *v;
            }
        }
        let lu = a.lu();
        let mut sol = [DVector::<f64>::zeros(m), DVector::<f64>::zeros(m)];
        for (axis, s) in sol.iter_mut().enumerate() {
            let mut rhs = DVector::<f64>::zeros(m);
            for i in 0..n {
                rhs[i] = if axis == 0 { values[i].x } else { values[i].y };
            }
            *s = lu.solve(&rhs).ok_or_else(|| Error::Config("degenerate TPS control lattice".into()))?;
        }
        let weights = (0..n).map(|i| Point::new(sol[0][i], sol[1][i])).collect();
        let affine = [
            [sol[0][n], sol[0][n + 1], sol[0][n + 2]],
            [sol[1][n], sol[1][n + 1], sol[1][n + 2]],
        ];
        Ok(Self { centers: centers.to_vec(), weights, affine })
    }

    pub fn eval(&self, p: Point) -> Point {
        let mut out = Point::new(
            self.affine[0][0] + self.affine[0][1] * p.x + self.affine[0][2] * p.y,
            self.affine[1][0] + self.affine[1][1] * p.x + self.affine[1][2] * p.y,
        );
        for (c, w) in self.centers.iter().zip(&self.weights) {
            let d = p.sub(*c);
            let k = tps_kernel(d.x * d.x + d.y * d.y);
            out.x += w.x * k;
            out.y += w.y * k;
        }
        out
    }
}

/// A warp ready for dense evaluation.
#[derive(Debug, Clone)]
pub struct CompiledWarp {
    params: WarpParams,
    tps: Option<Tps>,
}

impl CompiledWarp {
    /// `g(u)`: similarity first, then the TPS displacement at the moved point.
    pub fn apply(&self, u: Point) -> Point {
        let s = self.params.similarity(u);
        match &self.tps {
            Some(t) => s.add(t.eval(s)),
            None => s,
        }
    }
}

/// Dense correspondence field on a `height x width` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpField {
    pub height: usize,
    pub width: usize,
    /// Normalized `(x, y)` per pixel, row-major.
    pub coords: Vec<[f32; 2]>,
    pub valid: Vec<bool>,
}

impl WarpField {
    pub fn from_fn(height: usize, width: usize, f: impl Fn(Point) -> Point) -> Self {
        let mut coords = Vec::with_capacity(height * width);
        let mut valid = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let u = Point::new(to_normalized(x as f64, width), to_normalized(y as f64, height));
                let g = f(u);
                coords.push([g.x as f32, g.y as f32]);
                valid.push(g.in_unit_box());
            }
        }
        Self { height, width, coords, valid }
    }

    pub fn identity(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |u| u)
    }

    pub fn from_params(params: &WarpParams, height: usize, width: usize) -> Result<Self> {
        let warp = params.compile()?;
        Ok(Self::from_fn(height, width, |u| warp.apply(u)))
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Normalized position of grid cell `index`.
    pub fn cell_position(&self, index: usize) -> Point {
        let (y, x) = (index / self.width, index % self.width);
        Point::new(to_normalized(x as f64, self.width), to_normalized(y as f64, self.height))
    }

    pub fn coord(&self, index: usize) -> Point {
        let c = self.coords[index];
        Point::new(c[0] as f64, c[1] as f64)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Restrict validity to pixels where `mask` is true.
    pub fn restrict(&mut self, mask: &[bool]) -> Result<()> {
        if mask.len() != self.valid.len() {
            return Err(Error::Shape(format!("mask has {} cells, field has {}", mask.len(), self.valid.len())));
        }
        for (v, m) in self.valid.iter_mut().zip(mask) {
            *v &= *m;
        }
        Ok(())
    }

    fn bilinear(&self, p: Point) -> (Point, [(usize, f64); 4]) {
        let px = to_pixel(p.x, self.width).clamp(0.0, (self.width - 1) as f64);
        let py = to_pixel(p.y, self.height).clamp(0.0, (self.height - 1) as f64);
        let x0 = (px.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (py.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = px - x0 as f64;
        let fy = py - y0 as f64;
        let taps = [
            (y0 * self.width + x0, (1.0 - fx) * (1.0 - fy)),
            (y0 * self.width + x1, fx * (1.0 - fy)),
            (y1 * self.width + x0, (1.0 - fx) * fy),
            (y1 * self.width + x1, fx * fy),
        ];
        let mut out = Point::default();
        for &(i, wgt) in &taps {
            out = out.add(self.coord(i).scale(wgt));
        }
        (out, taps)
    }

    /// Bilinear evaluation, clamping the query to the grid. The flag is false
    /// if the query was outside the domain, any contributing cell is invalid,
    /// or the result leaves `[-1, 1]^2`.
    pub fn eval_flagged(&self, p: Point) -> (Point, bool) {
        let inside = p.in_unit_box();
        let (g, taps) = self.bilinear(p);
        let taps_ok = taps.iter().all(|&(i, w)| w <= 1e-12 || self.valid[i]);
        (g, inside && taps_ok && g.in_unit_box())
    }

    /// Evaluation that continues the field past the border with unit slope,
    /// used by the fixed-point inversion.
    fn eval_extended(&self, p: Point) -> Point {
        let c = Point::new(p.x.clamp(-1.0, 1.0), p.y.clamp(-1.0, 1.0));
        let (g, _) = self.bilinear(c);
        g.add(p.sub(c))
    }

    /// Fixed-point inverse `v -> u` with `g(u) = v`, sampled on this grid.
    /// Cells whose preimage leaves the domain or fails to converge are invalid.
    pub fn invert(&self) -> WarpField {
        const ITERS: usize = 100;
        const TOL: f64 = 1e-7;
        let mut coords = Vec::with_capacity(self.len());
        let mut valid = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let v = self.cell_position(i);
            let mut u = v;
            let mut converged = false;
            for _ in 0..ITERS {
                let r = v.sub(self.eval_extended(u));
                u = u.add(r);
                if r.norm() < TOL {
                    converged = true;
                    break;
                }
            }
            let ok = converged && u.in_unit_box() && self.eval_flagged(u).1;
            coords.push([u.x as f32, u.y as f32]);
            valid.push(ok);
        }
        WarpField { height: self.height, width: self.width, coords, valid }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(WARP_MAGIC)?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        for axis in 0..2 {
            for c in &self.coords {
                w.write_all(&c[axis].to_le_bytes())?;
            }
        }
        let mask: Vec<u8> = self.valid.iter().map(|&v| v as u8).collect();
        w.write_all(&mask)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("malformed warp record: {m}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != WARP_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
        let height = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
        let width = u32::from_le_bytes(word) as usize;
        let n = height * width;
        let mut planes = vec![0u8; n * 8];
        r.read_exact(&mut planes).map_err(|_| bad("truncated coordinate planes"))?;
        let f = |i: usize| f32::from_le_bytes(planes[i * 4..i * 4 + 4].try_into().unwrap());
        let coords = (0..n).map(|i| [f(i), f(n + i)]).collect();
        let mut mask = vec![0u8; n];
        r.read_exact(&mut mask).map_err(|_| bad("truncated mask plane"))?;
        let valid = mask.iter().map(|&m| m != 0).collect();
        Ok(Self { height, width, coords, valid })
    }
}

const WARP_MAGIC: &[u8; 8] = b"DVEWARP1";

/// Draw a random warp on a `height x width` grid.
pub fn sample_warp<R: Rng + ?Sized>(cfg: &WarpConfig, height: usize, width: usize, rng: &mut R) -> Result<WarpField> {
    let params = WarpParams::sample(cfg, rng)?;
    WarpField::from_params(&params, height, width)
}

/// Resample `image` using `grid` as a sampling grid: output pixel `u` reads
/// the source at `grid.coords[u]`. Samples outside the source, or at invalid
/// grid cells, receive `fill`.
pub fn apply_warp_with_fill(image: &Image, grid: &WarpField, fill: [f32; 3]) -> Result<Image> {
    if image.height != grid.height || image.width != grid.width {
        return Err(Error::Shape(format!(
            "image is {}x{} but warp grid is {}x{}",
            image.height, image.width, grid.height, grid.width
        )));
    }
    let mut out = Image::filled(image.height, image.width, fill);
    for i in 0..grid.len() {
        if !grid.valid[i] {
            continue;
        }
        let c = grid.coord(i);
        let x = snap(to_pixel(c.x, image.width));
        let y = snap(to_pixel(c.y, image.height));
        if let Some(rgb) = image.sample(x, y) {
            out.set_pixel(i / image.width, i % image.width, rgb);
        }
    }
    Ok(out)
}

pub fn apply_warp(image: &Image, grid: &WarpField) -> Result<Image> {
    apply_warp_with_fill(image, grid, [0.0; 3])
}

/// Render `g x` for a forward correspondence field `g`.
pub fn warp_image(image: &Image, forward: &WarpField) -> Result<Image> {
    apply_warp(image, &forward.invert())
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-6 {
        r
    } else {
        v
    }
}

/// Map normalized points through the field.
pub fn warp_points(w: &WarpField, pts: &[Point]) -> Vec<(Point, bool)> {
    pts.iter().map(|&p| w.eval_flagged(p)).collect()
}

/// Subsample the field at the cell centres of a grid `factor` times coarser.
pub fn downsample_warp(w: &WarpField, factor: usize) -> Result<WarpField> {
    if factor == 0 || w.height % factor != 0 || w.width % factor != 0 {
        return Err(Error::Shape(format!(
            "factor {factor} does not divide warp grid {}x{}",
            w.height, w.width
        )));
    }
    let (h, wd) = (w.height / factor, w.width / factor);
    let mut coords = Vec::with_capacity(h * wd);
    let mut valid = Vec::with_capacity(h * wd);
    for y in 0..h {
        for x in 0..wd {
            let q = Point::new(to_normalized(x as f64, wd), to_normalized(y as f64, h));
            let (g, ok) = w.eval_flagged(q);
            coords.push([g.x as f32, g.y as f32]);
            valid.push(ok);
        }
    }
    Ok(WarpField { height: h, width: wd, coords, valid })
}
