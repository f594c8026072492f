//! Joint taxonomy, score ranges and SvH aggregation.
//!
//! The schema is driven by a small JSON manifest. Only the counts are
//! fixed: 21 joint types of which 15 are scored for narrowing and 16 for
//! erosion on hands, 6 foot joints mapped onto dual-task types, and one
//! extra background class for the localization head.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::AnnotatedImage;

pub const NUM_JOINT_TYPES: usize = 21;
pub const NUM_FOOT_JOINTS: usize = 6;
pub const BACKGROUND_CLASS: usize = NUM_JOINT_TYPES;
pub const NUM_SEG_CLASSES: usize = NUM_JOINT_TYPES + 1;
pub const HAND_NARROWING_JOINTS: usize = 15;
pub const HAND_EROSION_JOINTS: usize = 16;

/// Number of narrowing classes (grades 0..=4).
pub const NARROWING_CLASSES: usize = 5;
/// Number of erosion classes seen by the network (grades 0..=5; feet are halved).
pub const EROSION_CLASSES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    Narrowing,
    Erosion,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Narrowing, Task::Erosion];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Narrowing => "narrowing",
            Task::Erosion => "erosion",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Limb {
    Hand,
    Foot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn flipped(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

/// The four radiographs taken per patient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ImageKey {
    LH,
    RH,
    LF,
    RF,
}

impl ImageKey {
    pub const ALL: [ImageKey; 4] = [ImageKey::LH, ImageKey::RH, ImageKey::LF, ImageKey::RF];

    pub fn limb(self) -> Limb {
        match self {
            ImageKey::LH | ImageKey::RH => Limb::Hand,
            ImageKey::LF | ImageKey::RF => Limb::Foot,
        }
    }

    pub fn side(self) -> Side {
        match self {
            ImageKey::LH | ImageKey::LF => Side::Left,
            ImageKey::RH | ImageKey::RF => Side::Right,
        }
    }

    pub fn from_parts(limb: Limb, side: Side) -> ImageKey {
        match (limb, side) {
            (Limb::Hand, Side::Left) => ImageKey::LH,
            (Limb::Hand, Side::Right) => ImageKey::RH,
            (Limb::Foot, Side::Left) => ImageKey::LF,
            (Limb::Foot, Side::Right) => ImageKey::RF,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ImageKey::LH => "LH",
            ImageKey::RH => "RH",
            ImageKey::LF => "LF",
            ImageKey::RF => "RF",
        }
    }

    pub fn parse(s: &str) -> Option<ImageKey> {
        ImageKey::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for ImageKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointType {
    pub id: usize,
    pub name: String,
    #[serde(rename = "narrowing")]
    pub has_narrowing: bool,
    #[serde(rename = "erosion")]
    pub has_erosion: bool,
}

impl JointType {
    pub fn scores(&self, task: Task) -> bool {
        match task {
            Task::Narrowing => self.has_narrowing,
            Task::Erosion => self.has_erosion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreRange {
    pub task: Task,
    pub limb: Limb,
    pub min: u32,
    pub max: u32,
}

impl ScoreRange {
    pub fn contains(&self, value: i64) -> bool {
        value >= i64::from(self.min) && value <= i64::from(self.max)
    }
}

/// Raw manifest as it appears on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    types: Vec<JointType>,
    foot_map: Vec<usize>,
}

/// Validated joint catalog. Types are stored sorted by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointSchema {
    types: Vec<JointType>,
    foot_map: Vec<usize>,
}

impl Default for JointSchema {
    /// J01-J10 score both tasks, J11-J15 narrowing only, J16-J21 erosion
    /// only; feet use J01-J06.
    fn default() -> Self {
        let types = (0..NUM_JOINT_TYPES)
            .map(|id| JointType {
                id,
                name: format!("J{:02}", id + 1),
                has_narrowing: id < 15,
                has_erosion: !(10..15).contains(&id),
            })
            .collect();
        JointSchema::from_parts(types, (0..NUM_FOOT_JOINTS).collect())
            .expect("built-in manifest is valid")
    }
}

impl JointSchema {
    pub fn from_parts(mut types: Vec<JointType>, foot_map: Vec<usize>) -> Result<Self> {
        let bad = |msg: String| Err(Error::MalformedManifest(msg));
        if types.len() != NUM_JOINT_TYPES {
            return bad(format!("expected {NUM_JOINT_TYPES} joint types, got {}", types.len()));
        }
        types.sort_by_key(|t| t.id);
        for (expected, t) in types.iter().enumerate() {
            if t.id != expected {
                return bad(format!(
                    "joint ids must be a permutation of 0..{}; found duplicate or out-of-range id {}",
                    NUM_JOINT_TYPES - 1,
                    t.id
                ));
            }
        }
        let narrowing = types.iter().filter(|t| t.has_narrowing).count();
        let erosion = types.iter().filter(|t| t.has_erosion).count();
        if narrowing != HAND_NARROWING_JOINTS {
            return bad(format!("expected {HAND_NARROWING_JOINTS} narrowing types, got {narrowing}"));
        }
        if erosion != HAND_EROSION_JOINTS {
            return bad(format!("expected {HAND_EROSION_JOINTS} erosion types, got {erosion}"));
        }
        if types.iter().any(|t| !t.has_narrowing && !t.has_erosion) {
            return bad("every joint type must be scored for at least one task".into());
        }
        if foot_map.len() != NUM_FOOT_JOINTS {
            return bad(format!("foot_map must list {NUM_FOOT_JOINTS} ids, got {}", foot_map.len()));
        }
        let mut seen = [false; NUM_JOINT_TYPES];
        for &id in &foot_map {
            let Some(t) = types.get(id) else {
                return bad(format!("foot_map id {id} is not a joint type"));
            };
            if seen[id] {
                return bad(format!("foot_map lists id {id} twice"));
            }
            seen[id] = true;
            if !(t.has_narrowing && t.has_erosion) {
                return bad(format!("foot_map id {id} ({}) is not scored for both tasks", t.name));
            }
        }
        Ok(JointSchema { types, foot_map })
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(bytes)
            .map_err(|e| Error::MalformedManifest(e.to_string()))?;
        JointSchema::from_parts(manifest.types, manifest.foot_map)
    }

    pub fn to_json(&self) -> String {
        let manifest = Manifest {
            types: self.types.clone(),
            foot_map: self.foot_map.clone(),
        };
        serde_json::to_string_pretty(&manifest).expect("manifest serializes")
    }

    pub fn types(&self) -> &[JointType] {
        &self.types
    }

    pub fn joint(&self, id: usize) -> Option<&JointType> {
        self.types.get(id)
    }

    pub fn foot_map(&self) -> &[usize] {
        &self.foot_map
    }

    pub fn background_class(&self) -> usize {
        BACKGROUND_CLASS
    }

    pub fn num_classes(&self) -> usize {
        NUM_SEG_CLASSES
    }

    /// Joint type ids present on an image of the given limb, in ascending order.
    pub fn joints_for(&self, limb: Limb) -> Vec<usize> {
        match limb {
            Limb::Hand => (0..NUM_JOINT_TYPES).collect(),
            Limb::Foot => {
                let mut ids = self.foot_map.clone();
                ids.sort_unstable();
                ids
            }
        }
    }

    /// Whether `task` is scored for joint `id` on `limb`.
    pub fn is_scored(&self, id: usize, limb: Limb, task: Task) -> bool {
        match limb {
            Limb::Hand => self.types.get(id).is_some_and(|t| t.scores(task)),
            Limb::Foot => self.foot_map.contains(&id),
        }
    }

    /// Maximum attainable `total_svh` for one patient.
    pub fn max_total_svh(&self) -> u32 {
        let mut total = 0;
        for key in ImageKey::ALL {
            let limb = key.limb();
            for id in self.joints_for(limb) {
                for task in Task::ALL {
                    if self.is_scored(id, limb, task) {
                        total += score_range(task, limb).max;
                    }
                }
            }
        }
        total
    }
}

/// Loads a manifest from `path`, or the built-in default when `path` is `None`.
pub fn load_manifest(path: Option<&Path>) -> Result<JointSchema> {
    match path {
        None => Ok(JointSchema::default()),
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            JointSchema::from_json(&bytes)
        }
    }
}

pub fn score_range(task: Task, limb: Limb) -> ScoreRange {
    let max = match (task, limb) {
        (Task::Narrowing, _) => 4,
        (Task::Erosion, Limb::Hand) => 5,
        (Task::Erosion, Limb::Foot) => 10,
    };
    ScoreRange {
        task,
        limb,
        min: 0,
        max,
    }
}

/// One patient: exactly the four annotated radiographs.
#[derive(Debug, Clone)]
pub struct PatientRecord {
    pub patient_id: String,
    pub images: BTreeMap<ImageKey, AnnotatedImage>,
}

impl PatientRecord {
    pub fn new(patient_id: impl Into<String>, images: BTreeMap<ImageKey, AnnotatedImage>) -> Result<Self> {
        let patient_id = patient_id.into();
        for key in ImageKey::ALL {
            let Some(img) = images.get(&key) else {
                return Err(Error::InvalidAnnotation(format!("patient {patient_id} lacks image {key}")));
            };
            if img.limb != key.limb() || img.side != key.side() {
                return Err(Error::InvalidAnnotation(format!(
                    "patient {patient_id}: image {key} is labelled {:?} {:?}",
                    img.side, img.limb
                )));
            }
        }
        Ok(PatientRecord { patient_id, images })
    }

    pub fn image(&self, key: ImageKey) -> &AnnotatedImage {
        &self.images[&key]
    }
}

/// Plain sum of every narrowing and erosion score over the four images.
pub fn total_svh(patient: &PatientRecord, schema: &JointSchema) -> Result<u32> {
    let mut total: u32 = 0;
    for img in patient.images.values() {
        for joint in &img.joints {
            for task in Task::ALL {
                let Some(value) = joint.score(task) else {
                    continue;
                };
                let range = score_range(task, img.limb);
                if !schema.is_scored(joint.type_id, img.limb, task) || !range.contains(value) {
                    return Err(Error::ScoreOutOfRange {
                        joint: joint.type_id,
                        task: task.as_str(),
                        value,
                        max: if schema.is_scored(joint.type_id, img.limb, task) { range.max } else { 0 },
                    });
                }
                total += value as u32;
            }
        }
    }
    Ok(total)
}
