use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, Dataset, LandmarkSet, Split};
use crate::error::{Error, Result};
use crate::image::{to_normalized, to_pixel, Image, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaceName {
    Celeba,
    Mafl,
    AflwM,
    AflwR,
    W300,
}

impl FaceName {
    pub const ALL: [FaceName; 5] = [FaceName::Celeba, FaceName::Mafl, FaceName::AflwM, FaceName::AflwR, FaceName::W300];

    pub fn as_str(self) -> &'static str {
        match self {
            FaceName::Celeba => "celeba",
            FaceName::Mafl => "mafl",
            FaceName::AflwM => "aflw_m",
            FaceName::AflwR => "aflw_r",
            FaceName::W300 => "w300",
        }
    }

    pub fn num_landmarks(self) -> usize {
        match self {
            FaceName::W300 => 68,
            _ => 5,
        }
    }

    /// Indices of the left and right eye landmarks.
    pub fn eye_indices(self) -> (usize, usize) {
        match self {
            FaceName::W300 => (36, 45),
            _ => (0, 1),
        }
    }
}

impl std::str::FromStr for FaceName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FaceName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown face dataset `{s}`")))
    }
}

/// Published split sizes, where known.
pub fn reference_split_size(name: FaceName, split: Split) -> Option<usize> {
    match (name, split) {
        (FaceName::Mafl, Split::Train) => Some(19_000),
        (FaceName::Mafl, Split::Test) => Some(1_000),
        (FaceName::AflwM, Split::Train) => Some(10_122),
        (FaceName::AflwM, Split::Test) => Some(2_995),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PreprocessStep {
    /// Window with top-left pixel `(top, left)`, padded with black outside.
    Crop { top: i64, left: i64, height: usize, width: usize },
    Resize { height: usize, width: usize },
}

/// A sequence of crops and resizes together with the per-axis affine map it
/// induces on pixel coordinates (pixel centres at integers).
#[derive(Debug, Clone, PartialEq)]
pub struct AffineChain {
    pub input: (usize, usize),
    pub steps: Vec<PreprocessStep>,
}

impl AffineChain {
    pub fn new(height: usize, width: usize) -> Self {
        Self { input: (height, width), steps: Vec::new() }
    }

    pub fn then(mut self, step: PreprocessStep) -> Self {
        self.steps.push(step);
        self
    }

    pub fn output_size(&self) -> (usize, usize) {
        self.steps.iter().fold(self.input, |_, s| match *s {
            PreprocessStep::Crop { height, width, .. } | PreprocessStep::Resize { height, width } => (height, width),
        })
    }

    /// `(sx, tx, sy, ty)` such that `x' = sx x + tx`, `y' = sy y + ty`.
    pub fn coefficients(&self) -> (f64, f64, f64, f64) {
        let (mut sx, mut tx, mut sy, mut ty) = (1.0, 0.0, 1.0, 0.0);
        let (mut h, mut w) = self.input;
        for step in &self.steps {
            match *step {
                PreprocessStep::Crop { top, left, height, width } => {
                    tx -= left as f64;
                    ty -= top as f64;
                    (h, w) = (height, width);
                }
                PreprocessStep::Resize { height, width } => {
                    let (kx, ky) = (width as f64 / w as f64, height as f64 / h as f64);
                    sx *= kx;
                    tx = (tx + 0.5) * kx - 0.5;
                    sy *= ky;
                    ty = (ty + 0.5) * ky - 0.5;
                    (h, w) = (height, width);
                }
            }
        }
        (sx, tx, sy, ty)
    }

    pub fn forward(&self, p: Point) -> Point {
        let (sx, tx, sy, ty) = self.coefficients();
        Point::new(sx * p.x + tx, sy * p.y + ty)
    }

    pub fn inverse(&self, p: Point) -> Point {
        let (sx, tx, sy, ty) = self.coefficients();
        Point::new((p.x - tx) / sx, (p.y - ty) / sy)
    }

    pub fn apply(&self, image: &Image) -> Result<Image> {
        if (image.height, image.width) != self.input {
            return Err(Error::Shape(format!(
                "preprocessing expects {}x{} images, got {}x{}",
                self.input.0, self.input.1, image.height, image.width
            )));
        }
        let mut out = image.clone();
        for step in &self.steps {
            out = match *step {
                PreprocessStep::Crop { top, left, height, width } => out.crop(top, left, height, width, [0.0; 3]),
                PreprocessStep::Resize { height, width } => out.resize(height, width),
            };
        }
        Ok(out)
    }
}

fn resize_side(input_size: usize) -> usize {
    match input_size {
        70 => 100,
        96 => 136,
        n => (n as f64 * 100.0 / 70.0).round() as usize,
    }
}

/// Preprocessing for one face image of size `height x width`. `landmarks`
/// (original pixel frame) are only consulted for 300-W, whose face box is
/// their bounding box.
pub fn preprocess_chain(
    name: FaceName,
    height: usize,
    width: usize,
    input_size: usize,
    landmarks: &[Point],
) -> Result<AffineChain> {
    let mut chain = AffineChain::new(height, width);
    match name {
        FaceName::Celeba | FaceName::Mafl => {
            if height <= 40 {
                return Err(Error::Data(format!("CelebA image of height {height} is too small to trim")));
            }
            chain = chain.then(PreprocessStep::Crop { top: 30, left: 0, height: height - 40, width });
        }
        FaceName::W300 => {
            if landmarks.is_empty() {
                return Err(Error::Data("300-W preprocessing needs landmarks to derive the face box".into()));
            }
            let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
            for p in landmarks {
                x0 = x0.min(p.x);
                x1 = x1.max(p.x);
                y0 = y0.min(p.y);
                y1 = y1.max(p.y);
            }
            let box_w = (x1 - x0).max(1.0);
            let side = (box_w / 0.52).round().max(1.0) as usize;
            let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
            let half = (side as f64 - 1.0) / 2.0;
            chain = chain.then(PreprocessStep::Crop {
                top: (cy - half).round() as i64,
                left: (cx - half).round() as i64,
                height: side,
                width: side,
            });
        }
        FaceName::AflwM | FaceName::AflwR => {}
    }
    let r = resize_side(input_size);
    if r < input_size {
        return Err(Error::Config(format!("input size {input_size} exceeds the resize side {r}")));
    }
    let off = ((r - input_size) / 2) as i64;
    Ok(chain.then(PreprocessStep::Resize { height: r, width: r }).then(PreprocessStep::Crop {
        top: off,
        left: off,
        height: input_size,
        width: input_size,
    }))
}

/// One annotation row: image path plus pixel-frame landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceEntry {
    pub id: String,
    pub path: PathBuf,
    pub landmarks: Vec<Option<Point>>,
    pub identity: Option<u64>,
}

/// A face benchmark split whose images are decoded on demand.
#[derive(Debug, Clone)]
pub struct FaceDataset {
    pub name: FaceName,
    pub split: Split,
    pub input_size: usize,
    pub entries: Vec<FaceEntry>,
}

/// Read `<root>/<name>/annotations/<split>.csv` and check that every listed
/// image exists under `<root>/<name>/images`.
pub fn load_face_dataset(name: FaceName, root: &Path, split: Split, input_size: usize) -> Result<FaceDataset> {
    let base = root.join(name.as_str());
    let csv_path = base.join("annotations").join(format!("{}.csv", split.as_str()));
    if !csv_path.is_file() {
        return Err(Error::MissingFiles(vec![csv_path]));
    }
    let mut reader = csv::Reader::from_path(&csv_path)?;
    let headers = reader.headers()?.clone();
    let col = |n: &str| headers.iter().position(|h| h.trim() == n);
    let path_col = col("path").ok_or_else(|| Error::Data(format!("{} has no `path` column", csv_path.display())))?;
    let identity_col = col("identity");
    let k = name.num_landmarks();
    let mut coord_cols = Vec::with_capacity(k);
    for i in 1..=k {
        match (col(&format!("x{i}")), col(&format!("y{i}"))) {
            (Some(x), Some(y)) => coord_cols.push((x, y)),
            _ => return Err(Error::Data(format!("{} lacks columns x{i},y{i}", csv_path.display()))),
        }
    }

    let mut entries = Vec::new();
    let mut missing = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let rel = record.get(path_col).unwrap_or("").trim().to_string();
        let path = base.join("images").join(&rel);
        if !path.is_file() {
            missing.push(path.clone());
        }
        let parse = |c: usize| -> Result<Option<f64>> {
            let s = record.get(c).unwrap_or("").trim();
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|_| Error::Data(format!("{} row {}: bad number `{s}`", csv_path.display(), line + 2)))
        };
        let mut landmarks = Vec::with_capacity(k);
        for &(cx, cy) in &coord_cols {
            landmarks.push(match (parse(cx)?, parse(cy)?) {
                (Some(x), Some(y)) => Some(Point::new(x, y)),
                _ => None,
            });
        }
        let identity = match identity_col {
            Some(c) => parse(c)?.map(|v| v as u64),
            None => None,
        };
        entries.push(FaceEntry { id: rel, path, landmarks, identity });
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    Ok(FaceDataset { name, split, input_size, entries })
}

impl FaceDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Whether the split has its published size, if one is known.
    pub fn matches_reference(&self) -> Option<bool> {
        reference_split_size(self.name, self.split).map(|n| n == self.len())
    }

    pub fn chain_for(&self, entry: &FaceEntry, height: usize, width: usize) -> Result<AffineChain> {
        let visible: Vec<Point> = entry.landmarks.iter().flatten().copied().collect();
        preprocess_chain(self.name, height, width, self.input_size, &visible)
    }

    /// Decode and preprocess entry `i`; landmarks are returned normalized to
    /// the preprocessed frame.
    pub fn load(&self, i: usize) -> Result<AnnotatedImage> {
        let entry = &self.entries[i];
        let raw = Image::load(&entry.path)?;
        let chain = self.chain_for(entry, raw.height, raw.width)?;
        let image = chain.apply(&raw)?;
        let s = self.input_size;
        let mut points = Vec::with_capacity(entry.landmarks.len());
        let mut visible = Vec::with_capacity(entry.landmarks.len());
        for lm in &entry.landmarks {
            match lm {
                Some(p) => {
                    let q = chain.forward(*p);
                    let n = Point::new(to_normalized(q.x, s), to_normalized(q.y, s));
                    visible.push(n.in_unit_box());
                    points.push(n);
                }
                None => {
                    points.push(Point::new(0.0, 0.0));
                    visible.push(false);
                }
            }
        }
        Ok(AnnotatedImage {
            id: entry.id.clone(),
            image,
            landmarks: Some(LandmarkSet { points, visible }),
            identity: entry.identity,
            split: self.split,
        })
    }

    pub fn load_all(&self) -> Result<Dataset> {
        let items = (0..self.len()).map(|i| self.load(i)).collect::<Result<Vec<_>>>()?;
        Ok(Dataset::new(format!("{}_{}", self.name.as_str(), self.split.as_str()), items))
    }

    /// Map a normalized landmark in the preprocessed frame of entry `i` back to
    /// the original pixel frame.
    pub fn to_original(&self, chain: &AffineChain, p: Point) -> Point {
        let s = self.input_size;
        chain.inverse(Point::new(to_pixel(p.x, s), to_pixel(p.y, s)))
    }
}
