//! Annotated image collections: face benchmark loaders with their fixed
//! preprocessing chains, and a procedural articulated-arm dataset with
//! analytic ground-truth flow.

mod arm;
mod faces;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::image::{Image, Point};

pub use arm::{
    render_arm, synth_arm_generate, ArmDataset, ArmFrame, ArmGenConfig, ArmManifest, ArmManifestFrame, ArmSceneSpec,
    ARM_SEGMENTS,
};
pub use faces::{
    load_face_dataset, preprocess_chain, reference_split_size, AffineChain, FaceDataset, FaceEntry, FaceName,
    PreprocessStep,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(crate::Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// `K` keypoints in normalized coordinates with visibility flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<Point>,
    pub visible: Vec<bool>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>) -> Self {
        let visible = vec![true; points.len()];
        Self { points, visible }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    /// Stable identifier, unique within a dataset.
    pub id: String,
    pub image: Image,
    pub landmarks: Option<LandmarkSet>,
    /// Object identity (person, arm instance) when known.
    pub identity: Option<u64>,
    pub split: Split,
}

/// An in-memory collection of preprocessed images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub items: Vec<AnnotatedImage>,
    /// Optional per-image foreground masks at image resolution; pixels outside
    /// the foreground never contribute to the training loss.
    pub masks: Option<Vec<Vec<bool>>>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, items: Vec<AnnotatedImage>) -> Self {
        Self { name: name.into(), items, masks: None }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.items.first().map(|a| (a.image.height, a.image.width))
    }

    pub fn has_landmarks(&self) -> bool {
        !self.items.is_empty() && self.items.iter().all(|a| a.landmarks.is_some())
    }

    pub fn distinct_identities(&self) -> usize {
        self.items.iter().filter_map(|a| a.identity).collect::<HashSet<_>>().len()
    }

    /// Keep the items at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            masks: self.masks.as_ref().map(|m| indices.iter().map(|&i| m[i].clone()).collect()),
        }
    }
}

/// Remove from `train` every item whose id also appears in `test`.
/// Returns the filtered set and the number of removed items.
pub fn exclude_overlap<T: HasId + Clone>(train: &[T], test: &[T]) -> (Vec<T>, usize) {
    let banned: HashSet<&str> = test.iter().map(|t| t.id()).collect();
    let kept: Vec<T> = train.iter().filter(|t| !banned.contains(t.id())).cloned().collect();
    let removed = train.len() - kept.len();
    (kept, removed)
}

pub trait HasId {
    fn id(&self) -> &str;
}

impl HasId for AnnotatedImage {
    fn id(&self) -> &str {
        &self.id
    }
}

impl HasId for FaceEntry {
    fn id(&self) -> &str {
        &self.id
    }
}
