use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, Dataset, LandmarkSet, Split};
use crate::error::{Error, Result};
use crate::image::{to_normalized, Image, Point};
use crate::warp::WarpField;

pub const ARM_SEGMENTS: usize = 3;

const BACKGROUND: [f32; 3] = [0.12, 0.12, 0.12];
const LENGTH_RANGES: [(f64, f64); ARM_SEGMENTS] = [(0.22, 0.30), (0.18, 0.26), (0.14, 0.20)];
const BASE_RANGE: (f64, f64) = (-std::f64::consts::FRAC_PI_2 - 1.0, -std::f64::consts::FRAC_PI_2 + 1.0);
const RELATIVE_RANGE: (f64, f64) = (-1.3, 1.3);

/// Geometry and appearance of one arm in one pose. Pixel units; the first
/// joint angle is absolute, the others are relative to the previous segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSceneSpec {
    pub num_segments: usize,
    pub segment_lengths: Vec<f64>,
    pub segment_colors: Vec<[f32; 3]>,
    pub joint_colors: Vec<[f32; 3]>,
    pub radius: f64,
    pub base: Point,
    pub joint_angles: Vec<f64>,
    pub image_size: usize,
    pub instance_id: usize,
}

impl ArmSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.num_segments;
        if n == 0
            || self.segment_lengths.len() != n
            || self.segment_colors.len() != n
            || self.joint_colors.len() != n
            || self.joint_angles.len() != n
        {
            return Err(Error::Config("arm spec lists must all have num_segments entries".into()));
        }
        if self.segment_lengths.iter().any(|l| !(*l > 0.0)) || !(self.radius > 0.0) {
            return Err(Error::Config("segment lengths and radius must be positive".into()));
        }
        if self.joint_angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::Config("joint angles must be finite".into()));
        }
        let in_unit = |c: &[f32; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !self.segment_colors.iter().chain(&self.joint_colors).all(in_unit) {
            return Err(Error::Config("colors must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// Absolute orientation of every segment.
    pub fn orientations(&self) -> Vec<f64> {
        self.joint_angles
            .iter()
            .scan(0.0, |acc, a| {
                *acc += a;
                Some(*acc)
            })
            .collect()
    }

    /// Joint positions: the base followed by the far end of every segment.
    pub fn joints(&self) -> Vec<Point> {
        let mut pts = vec![self.base];
        for (l, th) in self.segment_lengths.iter().zip(self.orientations()) {
            let last = *pts.last().unwrap();
            pts.push(Point::new(last.x + l * th.cos(), last.y + l * th.sin()));
        }
        pts
    }

    /// Segment centres in pixel coordinates.
    pub fn keypoints_px(&self) -> Vec<Point> {
        let j = self.joints();
        (0..self.num_segments).map(|k| j[k].add(j[k + 1]).scale(0.5)).collect()
    }

    /// Whether every capsule lies inside the image with a one-pixel margin.
    pub fn fits(&self) -> bool {
        let lo = self.radius + 1.0;
        let hi = self.image_size as f64 - 1.0 - lo;
        self.joints().iter().all(|p| p.x >= lo && p.x <= hi && p.y >= lo && p.y <= hi)
    }

    /// Segment owning the topmost primitive that contains `p`.
    fn owner(&self, p: Point, joints: &[Point]) -> Option<usize> {
        let blob = self.radius + 1.5;
        let mut owner = None;
        for k in 0..self.num_segments {
            if dist_to_segment(p, joints[k], joints[k + 1]) <= self.radius || p.dist(joints[k]) <= blob {
                owner = Some(k);
            }
        }
        owner
    }

    fn color_at(&self, p: Point, joints: &[Point]) -> [f32; 3] {
        let blob = self.radius + 1.5;
        let mut color = BACKGROUND;
        for k in 0..self.num_segments {
            if dist_to_segment(p, joints[k], joints[k + 1]) <= self.radius {
                color = self.segment_colors[k];
            }
            if p.dist(joints[k]) <= blob {
                color = self.joint_colors[k];
            }
        }
        color
    }
}

fn dist_to_segment(p: Point, a: Point, b: Point) -> f64 {
    let ab = b.sub(a);
    let len2 = ab.x * ab.x + ab.y * ab.y;
    let t = if len2 > 0.0 { ((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / len2 } else { 0.0 };
    p.dist(a.add(ab.scale(t.clamp(0.0, 1.0))))
}

/// Render the arm with 2x2 supersampling. Returns the image (quantized to
/// 8-bit levels) and the per-pixel owning segment, `None` on background.
pub fn render_arm(spec: &ArmSceneSpec) -> (Image, Vec<Option<usize>>) {
    let s = spec.image_size;
    let joints = spec.joints();
    let mut img = Image::new(s, s);
    let mut owners = Vec::with_capacity(s * s);
    const OFFS: [f64; 2] = [-0.25, 0.25];
    for y in 0..s {
        for x in 0..s {
            let mut acc = [0.0f32; 3];
            for dy in OFFS {
                for dx in OFFS {
                    let c = spec.color_at(Point::new(x as f64 + dx, y as f64 + dy), &joints);
                    for i in 0..3 {
                        acc[i] += c[i] / 4.0;
                    }
                }
            }
            img.set_pixel(y, x, acc.map(|v| (v * 255.0).round() / 255.0));
            owners.push(spec.owner(Point::new(x as f64, y as f64), &joints));
        }
    }
    (img, owners)
}

/// Rigid motion of a point attached to `segment` from pose `a` to pose `b`.
pub(crate) fn move_point(a: &ArmSceneSpec, b: &ArmSceneSpec, segment: usize, p: Point) -> Point {
    let (ja, jb) = (a.joints(), b.joints());
    let (ta, tb) = (a.orientations()[segment], b.orientations()[segment]);
    let d = p.sub(ja[segment]);
    let (s, c) = (-ta).sin_cos();
    let local = Point::new(c * d.x - s * d.y, s * d.x + c * d.y);
    let (s, c) = tb.sin_cos();
    jb[segment].add(Point::new(c * local.x - s * local.y, s * local.x + c * local.y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmGenConfig {
    pub n_instances: usize,
    pub frames_per_instance: usize,
    pub image_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmFrame {
    pub instance: usize,
    pub frame: usize,
    pub spec: ArmSceneSpec,
    pub image: Image,
    pub owners: Vec<Option<usize>>,
}

impl ArmFrame {
    pub fn id(&self) -> String {
        format!("inst{:04}_f{:03}", self.instance, self.frame)
    }

    /// Keypoints in normalized coordinates.
    pub fn keypoints(&self) -> Vec<Point> {
        let s = self.spec.image_size;
        self.spec.keypoints_px().into_iter().map(|p| Point::new(to_normalized(p.x, s), to_normalized(p.y, s))).collect()
    }

    pub fn foreground(&self) -> Vec<bool> {
        self.owners.iter().map(|o| o.is_some()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmDataset {
    pub config: ArmGenConfig,
    pub frames: Vec<ArmFrame>,
}

fn random_color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.gen_range(0.25..1.0), rng.gen_range(0.25..1.0), rng.gen_range(0.25..1.0)]
}

fn sample_pose<R: Rng>(spec: &mut ArmSceneSpec, rng: &mut R) {
    loop {
        spec.joint_angles[0] = rng.gen_range(BASE_RANGE.0..BASE_RANGE.1);
        for a in spec.joint_angles.iter_mut().skip(1) {
            *a = rng.gen_range(RELATIVE_RANGE.0..RELATIVE_RANGE.1);
        }
        if spec.fits() {
            return;
        }
    }
}

/// Procedurally render `n_instances` arms in `frames_per_instance` poses each.
/// Instances differ in segment lengths, thickness and colours; frames differ
/// in joint angles.
pub fn synth_arm_generate(config: ArmGenConfig) -> Result<ArmDataset> {
    if config.n_instances == 0 || config.frames_per_instance == 0 {
        return Err(Error::Config("arm dataset needs at least one instance and one frame".into()));
    }
    if config.image_size < 16 {
        return Err(Error::Config("arm image size must be at least 16".into()));
    }
    let s = config.image_size as f64;
    let mut frames = Vec::with_capacity(config.n_instances * config.frames_per_instance);
    for inst in 0..config.n_instances {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(inst as u64);
        let mut spec = ArmSceneSpec {
            num_segments: ARM_SEGMENTS,
            segment_lengths: LENGTH_RANGES.iter().map(|&(lo, hi)| rng.gen_range(lo..hi) * s).collect(),
            segment_colors: (0..ARM_SEGMENTS).map(|_| random_color(&mut rng)).collect(),
            joint_colors: (0..ARM_SEGMENTS).map(|_| random_color(&mut rng)).collect(),
            radius: rng.gen_range(0.045..0.065) * s,
            base: Point::new((s - 1.0) / 2.0, 0.86 * s),
            joint_angles: vec![0.0; ARM_SEGMENTS],
            image_size: config.image_size,
            instance_id: inst,
        };
        for frame in 0..config.frames_per_instance {
            sample_pose(&mut spec, &mut rng);
            let (image, owners) = render_arm(&spec);
            frames.push(ArmFrame { instance: inst, frame, spec: spec.clone(), image, owners });
        }
    }
    Ok(ArmDataset { config, frames })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmManifestFrame {
    pub file: String,
    pub instance: usize,
    pub frame: usize,
    pub spec: ArmSceneSpec,
    pub keypoints: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmManifest {
    pub dataset: String,
    pub config: ArmGenConfig,
    pub frames: Vec<ArmManifestFrame>,
    /// Flow record files between consecutive frames of each instance.
    pub flows: Vec<String>,
}

impl ArmDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Ground-truth correspondence from frame `a` to frame `b` (same instance)
    /// at image resolution. Background pixels keep zero flow and are invalid.
    pub fn flow(&self, a: usize, b: usize) -> Result<WarpField> {
        let (fa, fb) = (&self.frames[a], &self.frames[b]);
        if fa.instance != fb.instance {
            return Err(Error::Data(format!("frames {} and {} belong to different instances", fa.id(), fb.id())));
        }
        Ok(flow_between(fa, &fb.spec))
    }

    /// Indices of the frames belonging to each instance.
    pub fn instance_frames(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.config.n_instances];
        for (i, f) in self.frames.iter().enumerate() {
            out[f.instance].push(i);
        }
        out
    }

    pub fn to_dataset(&self, name: &str, split: Split) -> Dataset {
        let items = self
            .frames
            .iter()
            .map(|f| AnnotatedImage {
                id: f.id(),
                image: f.image.clone(),
                landmarks: Some(LandmarkSet::new(f.keypoints())),
                identity: Some(f.instance as u64),
                split,
            })
            .collect();
        Dataset { name: name.into(), items, masks: Some(self.frames.iter().map(|f| f.foreground()).collect()) }
    }

    /// Write `images/*.png`, `flows/*.warp` and `manifest.json` under `dir`.
    pub fn save(&self, dir: &Path, name: &str) -> Result<ArmManifest> {
        let images = dir.join("images");
        let flows = dir.join("flows");
        for d in [&images, &flows] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let mut frames = Vec::with_capacity(self.len());
        for f in &self.frames {
            let file = format!("images/{}.png", f.id());
            f.image.save_png(&dir.join(&file))?;
            frames.push(ArmManifestFrame {
                file,
                instance: f.instance,
                frame: f.frame,
                spec: f.spec.clone(),
                keypoints: f.keypoints(),
            });
        }
        let mut flow_files = Vec::new();
        for idx in self.instance_frames() {
            for w in idx.windows(2) {
                let file = format!("flows/{}_to_f{:03}.warp", self.frames[w[0]].id(), self.frames[w[1]].frame);
                let path = dir.join(&file);
                let out = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                self.flow(w[0], w[1])?.write_to(std::io::BufWriter::new(out)).map_err(|e| Error::io(&path, e))?;
                flow_files.push(file);
            }
        }
        let manifest = ArmManifest { dataset: name.into(), config: self.config, frames, flows: flow_files };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    /// Read a dataset written by [`ArmDataset::save`]. Images come from the
    /// PNG files; ownership masks and flows are recomputed from the poses.
    pub fn load(dir: &Path) -> Result<(ArmDataset, ArmManifest)> {
        let path = dir.join("manifest.json");
        if !path.is_file() {
            return Err(Error::MissingFiles(vec![path]));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: ArmManifest = serde_json::from_str(&text)?;
        let missing: Vec<_> = manifest.frames.iter().map(|f| dir.join(&f.file)).filter(|p| !p.is_file()).collect();
        if !missing.is_empty() {
            return Err(Error::MissingFiles(missing));
        }
        let mut frames = Vec::with_capacity(manifest.frames.len());
        for f in &manifest.frames {
            f.spec.validate()?;
            let image = Image::load(&dir.join(&f.file))?;
            if image.height != f.spec.image_size || image.width != f.spec.image_size {
                return Err(Error::Data(format!("{} does not match its recorded size", f.file)));
            }
            let (_, owners) = render_arm(&f.spec);
            frames.push(ArmFrame { instance: f.instance, frame: f.frame, spec: f.spec.clone(), image, owners });
        }
        Ok((ArmDataset { config: manifest.config, frames }, manifest))
    }
}

fn flow_between(fa: &ArmFrame, target: &ArmSceneSpec) -> WarpField {
    let s = fa.spec.image_size;
    let mut coords = Vec::with_capacity(s * s);
    let mut valid = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let u = Point::new(to_normalized(x as f64, s), to_normalized(y as f64, s));
            match fa.owners[y * s + x] {
                Some(k) => {
                    let p = move_point(&fa.spec, target, k, Point::new(x as f64, y as f64));
                    let n = Point::new(to_normalized(p.x, s), to_normalized(p.y, s));
                    coords.push([n.x as f32, n.y as f32]);
                    valid.push(n.in_unit_box());
                }
                None => {
                    coords.push([u.x as f32, u.y as f32]);
                    valid.push(false);
                }
            }
        }
    }
    WarpField { height: s, width: s, coords, valid }
}
