//! Articulated hand models and forward kinematics.
//!
//! A [`HandModel`] is a tree of joints stored in topological order. Link 0 is
//! the wrist; link `k + 1` is the child link of joint `k`. Every pose returned
//! by [`HandModel::forward_kinematics`] is expressed in the wrist frame.

use nalgebra::{Isometry3, Point3, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rigid pose used throughout the crate.
pub type Pose = Isometry3<f64>;

/// Number of target vectors per hand: five fingertips plus five mid-finger keypoints.
pub const N_TARGET_VECTORS: usize = 10;

const AXIS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum KinematicsError {
    #[error("structural error in hand model: {0}")]
    Structure(String),
    #[error("invalid hand model: {0}")]
    Validation(String),
    #[error("expected {expected} joint angles, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("joint angle {index} is not finite")]
    NonFinite { index: usize },
    #[error("failed to parse hand model file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum JointKind {
    Revolute {
        axis: Vector3<f64>,
        lower: f64,
        upper: f64,
    },
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    /// Parent joint index, `None` when attached to the wrist.
    pub parent: Option<usize>,
    /// Translation from the parent link frame to this joint, in meters.
    pub offset: Vector3<f64>,
    pub kind: JointKind,
    /// Finger label used to group joints (`thumb`, `index`, ..., `wrist`).
    pub finger: String,
    /// Tendon coupling: this joint mirrors the named driver joint.
    pub mimic: Option<usize>,
}

/// A point attached to a link, used for contact and tactile sensing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub name: String,
    pub link: usize,
    pub offset: Vector3<f64>,
}

/// Unvalidated description of a hand, as read from a model file.
#[derive(Debug, Clone, PartialEq)]
pub struct HandSpec {
    pub name: String,
    pub joints: Vec<JointSpec>,
    pub fingertips: Vec<usize>,
    pub keypoints: Vec<usize>,
    pub sites: Vec<Site>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandModel {
    name: String,
    joints: Vec<JointSpec>,
    fingertips: [usize; 5],
    keypoints: [usize; 5],
    sites: Vec<Site>,
    /// Joint index of each degree of freedom.
    dof_joints: Vec<usize>,
    /// Degree-of-freedom index of each joint (`None` for fixed joints).
    joint_dofs: Vec<Option<usize>>,
}

/// Joint angles for one hand, ordered by revolute joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointAngles(pub Vec<f64>);

impl JointAngles {
    pub fn zeros(n: usize) -> Self {
        JointAngles(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for JointAngles {
    fn from(v: Vec<f64>) -> Self {
        JointAngles(v)
    }
}

/// The ten wrist-frame target vectors of a hand configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VectorSet(pub [Vector3<f64>; N_TARGET_VECTORS]);

impl VectorSet {
    pub fn squared_distance(&self, other: &VectorSet) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).norm_squared())
            .sum()
    }
}

/// Builds and validates a hand model from its description.
pub fn build_hand_model(spec: HandSpec) -> Result<HandModel, KinematicsError> {
    let n = spec.joints.len();
    for (k, joint) in spec.joints.iter().enumerate() {
        if let Some(p) = joint.parent {
            if p >= k {
                return Err(KinematicsError::Structure(format!(
                    "joint {k} ({}) has parent {p}, which is not earlier in the list",
                    joint.name
                )));
            }
        }
        if let Some(m) = joint.mimic {
            if m >= n || m == k {
                return Err(KinematicsError::Structure(format!(
                    "joint {k} mimics invalid joint {m}"
                )));
            }
        }
        if !joint.offset.iter().all(|v| v.is_finite()) {
            return Err(KinematicsError::Validation(format!(
                "joint {} has a non-finite offset",
                joint.name
            )));
        }
        if let JointKind::Revolute { axis, lower, upper } = joint.kind {
            if (axis.norm() - 1.0).abs() > AXIS_TOLERANCE {
                return Err(KinematicsError::Validation(format!(
                    "joint {} axis has norm {}",
                    joint.name,
                    axis.norm()
                )));
            }
            if !(lower <= upper) {
                return Err(KinematicsError::Validation(format!(
                    "joint {} has limits [{lower}, {upper}]",
                    joint.name
                )));
            }
        }
    }
    for (k, joint) in spec.joints.iter().enumerate() {
        if let Some(m) = joint.mimic {
            let both_revolute = matches!(joint.kind, JointKind::Revolute { .. })
                && matches!(spec.joints[m].kind, JointKind::Revolute { .. });
            if !both_revolute {
                return Err(KinematicsError::Validation(format!(
                    "joint {k} couples a fixed joint"
                )));
            }
        }
    }
    let check_links = |what: &str, links: &[usize]| -> Result<[usize; 5], KinematicsError> {
        if links.len() != 5 {
            return Err(KinematicsError::Validation(format!(
                "expected 5 {what}, got {}",
                links.len()
            )));
        }
        if let Some(&bad) = links.iter().find(|&&l| l > n) {
            return Err(KinematicsError::Structure(format!("{what} link {bad} out of range")));
        }
        Ok([links[0], links[1], links[2], links[3], links[4]])
    };
    let fingertips = check_links("fingertips", &spec.fingertips)?;
    let keypoints = check_links("segment keypoints", &spec.keypoints)?;
    for site in &spec.sites {
        if site.link > n {
            return Err(KinematicsError::Structure(format!(
                "site {} references link {}",
                site.name, site.link
            )));
        }
    }

    let mut dof_joints = Vec::new();
    let mut joint_dofs = Vec::with_capacity(n);
    for (k, joint) in spec.joints.iter().enumerate() {
        match joint.kind {
            JointKind::Revolute { .. } => {
                joint_dofs.push(Some(dof_joints.len()));
                dof_joints.push(k);
            }
            JointKind::Fixed => joint_dofs.push(None),
        }
    }

    Ok(HandModel {
        name: spec.name,
        joints: spec.joints,
        fingertips,
        keypoints,
        sites: spec.sites,
        dof_joints,
        joint_dofs,
    })
}

impl HandModel {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    pub fn n_dof(&self) -> usize {
        self.dof_joints.len()
    }

    /// Number of links including the wrist.
    pub fn n_links(&self) -> usize {
        self.joints.len() + 1
    }

    pub fn fingertip_links(&self) -> [usize; 5] {
        self.fingertips
    }

    pub fn segment_keypoints(&self) -> [usize; 5] {
        self.keypoints
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    /// Joint spec behind degree of freedom `dof`.
    pub fn dof_joint(&self, dof: usize) -> &JointSpec {
        &self.joints[self.dof_joints[dof]]
    }

    pub fn dof_name(&self, dof: usize) -> &str {
        &self.dof_joint(dof).name
    }

    pub fn dof_index(&self, name: &str) -> Option<usize> {
        self.joints
            .iter()
            .position(|j| j.name == name)
            .and_then(|k| self.joint_dofs[k])
    }

    /// Link index of a named joint's child link (`wrist` is link 0).
    pub fn link_index(&self, name: &str) -> Option<usize> {
        if name == "wrist" {
            return Some(0);
        }
        self.joints.iter().position(|j| j.name == name).map(|k| k + 1)
    }

    /// `(lower, upper)` limits per degree of freedom.
    pub fn limits(&self) -> Vec<(f64, f64)> {
        self.dof_joints
            .iter()
            .map(|&k| match self.joints[k].kind {
                JointKind::Revolute { lower, upper, .. } => (lower, upper),
                JointKind::Fixed => unreachable!("dof joints are revolute"),
            })
            .collect()
    }

    /// Degree-of-freedom index that each dof mirrors, if tendon-coupled.
    pub fn dof_mimic(&self, dof: usize) -> Option<usize> {
        self.dof_joint(dof).mimic.and_then(|m| self.joint_dofs[m])
    }

    /// Midpoint of every joint range.
    pub fn mid_configuration(&self) -> JointAngles {
        JointAngles(self.limits().iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect())
    }

    /// Zero angles clamped into the limits.
    pub fn rest_configuration(&self) -> JointAngles {
        JointAngles(self.limits().iter().map(|&(lo, hi)| 0.0f64.clamp(lo, hi)).collect())
    }

    fn check_dims(&self, q: &JointAngles) -> Result<(), KinematicsError> {
        if q.len() != self.n_dof() {
            return Err(KinematicsError::Dimension {
                expected: self.n_dof(),
                got: q.len(),
            });
        }
        Ok(())
    }

    /// Link poses in the wrist frame; entry 0 is the wrist itself.
    pub fn forward_kinematics(&self, q: &JointAngles) -> Result<Vec<Pose>, KinematicsError> {
        self.check_dims(q)?;
        Ok(self.fk_unchecked(&q.0))
    }

    pub(crate) fn fk_unchecked(&self, q: &[f64]) -> Vec<Pose> {
        let mut poses = Vec::with_capacity(self.joints.len() + 1);
        poses.push(Pose::identity());
        for (k, joint) in self.joints.iter().enumerate() {
            let parent = match joint.parent {
                Some(p) => poses[p + 1],
                None => poses[0],
            };
            let local = match joint.kind {
                JointKind::Revolute { axis, .. } => {
                    let angle = q[self.joint_dofs[k].expect("revolute joints own a dof")];
                    Pose::from_parts(
                        Translation3::from(joint.offset),
                        UnitQuaternion::from_axis_angle(&Unit::new_unchecked(axis), angle),
                    )
                }
                JointKind::Fixed => Pose::from_parts(
                    Translation3::from(joint.offset),
                    UnitQuaternion::identity(),
                ),
            };
            poses.push(parent * local);
        }
        poses
    }

    /// Wrist-frame vectors to the five fingertip and five keypoint link origins.
    pub fn target_vectors(&self, q: &JointAngles) -> Result<VectorSet, KinematicsError> {
        self.check_dims(q)?;
        Ok(self.target_vectors_unchecked(&q.0))
    }

    pub(crate) fn target_vectors_unchecked(&self, q: &[f64]) -> VectorSet {
        let poses = self.fk_unchecked(q);
        let mut out = [Vector3::zeros(); N_TARGET_VECTORS];
        for (i, &link) in self.fingertips.iter().chain(self.keypoints.iter()).enumerate() {
            out[i] = poses[link].translation.vector;
        }
        VectorSet(out)
    }

    /// Site positions in the wrist frame, in site order.
    pub fn site_positions(&self, poses: &[Pose]) -> Vec<Point3<f64>> {
        self.sites
            .iter()
            .map(|s| poses[s.link] * Point3::from(s.offset))
            .collect()
    }

    /// Elementwise projection onto the joint-limit box.
    pub fn clamp_to_limits(&self, q: &JointAngles) -> Result<JointAngles, KinematicsError> {
        self.check_dims(q)?;
        if let Some(index) = q.0.iter().position(|v| v.is_nan()) {
            return Err(KinematicsError::NonFinite { index });
        }
        Ok(JointAngles(
            q.0.iter()
                .zip(self.limits())
                .map(|(&v, (lo, hi))| v.clamp(lo, hi))
                .collect(),
        ))
    }

    pub fn within_limits(&self, q: &JointAngles) -> bool {
        q.len() == self.n_dof()
            && q.0
                .iter()
                .zip(self.limits())
                .all(|(&v, (lo, hi))| v >= lo && v <= hi)
    }

    /// Copy with every translation scaled by `factor`.
    pub fn scaled(&self, factor: f64, name: &str) -> HandModel {
        let mut out = self.clone();
        out.name = name.to_string();
        for j in &mut out.joints {
            j.offset *= factor;
        }
        for s in &mut out.sites {
            s.offset *= factor;
        }
        out
    }

    /// Mirror image across the wrist x-z plane (turns a right hand into a left hand).
    ///
    /// Offsets reflect as polar vectors and rotation axes as axial vectors, so
    /// joint angles keep their meaning (positive flexion still curls toward the palm).
    pub fn mirrored(&self, name: &str) -> HandModel {
        let mut out = self.clone();
        out.name = name.to_string();
        for j in &mut out.joints {
            j.offset.y = -j.offset.y;
            if let JointKind::Revolute { axis, .. } = &mut j.kind {
                axis.x = -axis.x;
                axis.z = -axis.z;
            }
        }
        for s in &mut out.sites {
            s.offset.y = -s.offset.y;
        }
        out
    }

    /// Revolute dofs grouped by finger label, in first-appearance order.
    pub fn finger_groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for dof in 0..self.n_dof() {
            let finger = &self.dof_joint(dof).finger;
            match groups.iter_mut().find(|(f, _)| f == finger) {
                Some((_, g)) => g.push(dof),
                None => groups.push((finger.clone(), vec![dof])),
            }
        }
        groups
    }

    /// Sum of all joint offset lengths, an upper bound on any wrist-relative distance.
    pub fn total_reach(&self) -> f64 {
        self.joints.iter().map(|j| j.offset.norm()).sum::<f64>()
            + self.sites.iter().map(|s| s.offset.norm()).fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Model files
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct FileJoint {
    name: String,
    parent: String,
    #[serde(default)]
    finger: String,
    offset: [f64; 3],
    kind: String,
    axis: Option<[f64; 3]>,
    limits: Option<[f64; 2]>,
    mimic: Option<String>,
}

#[derive(Debug, Deserialize)]
struct FileSite {
    name: String,
    link: String,
    offset: [f64; 3],
}

#[derive(Debug, Deserialize)]
struct FileHand {
    name: String,
    fingertips: Vec<String>,
    keypoints: Vec<String>,
    joints: Vec<FileJoint>,
    #[serde(default)]
    sites: Vec<FileSite>,
}

/// Parses a hand-model file (TOML) into an unvalidated [`HandSpec`].
///
/// Names are resolved against joints declared anywhere in the file, so a
/// forward parent reference surfaces as a structural error in
/// [`build_hand_model`] rather than a lookup failure.
pub fn parse_hand_spec(text: &str) -> Result<HandSpec, KinematicsError> {
    let file: FileHand = toml::from_str(text).map_err(|e| KinematicsError::Parse(e.to_string()))?;
    let index_of = |name: &str| -> Result<Option<usize>, KinematicsError> {
        if name == "wrist" {
            return Ok(None);
        }
        file.joints
            .iter()
            .position(|j| j.name == name)
            .map(Some)
            .ok_or_else(|| KinematicsError::Structure(format!("unknown joint `{name}`")))
    };
    let link_of = |name: &str| -> Result<usize, KinematicsError> {
        Ok(index_of(name)?.map_or(0, |k| k + 1))
    };

    let mut joints = Vec::with_capacity(file.joints.len());
    for j in &file.joints {
        let kind = match j.kind.as_str() {
            "fixed" => JointKind::Fixed,
            "revolute" => {
                let axis = j.axis.ok_or_else(|| {
                    KinematicsError::Parse(format!("revolute joint {} has no axis", j.name))
                })?;
                let limits = j.limits.ok_or_else(|| {
                    KinematicsError::Parse(format!("revolute joint {} has no limits", j.name))
                })?;
                JointKind::Revolute {
                    axis: Vector3::from(axis),
                    lower: limits[0],
                    upper: limits[1],
                }
            }
            other => {
                return Err(KinematicsError::Parse(format!(
                    "joint {} has unknown kind `{other}`",
                    j.name
                )))
            }
        };
        joints.push(JointSpec {
            name: j.name.clone(),
            parent: index_of(&j.parent)?,
            offset: Vector3::from(j.offset),
            kind,
            finger: j.finger.clone(),
            mimic: j.mimic.as_deref().map(index_of).transpose()?.flatten(),
        });
    }
    let fingertips = file.fingertips.iter().map(|n| link_of(n)).collect::<Result<_, _>>()?;
    let keypoints = file.keypoints.iter().map(|n| link_of(n)).collect::<Result<_, _>>()?;
    let sites = file
        .sites
        .iter()
        .map(|s| {
            Ok(Site {
                name: s.name.clone(),
                link: link_of(&s.link)?,
                offset: Vector3::from(s.offset),
            })
        })
        .collect::<Result<_, KinematicsError>>()?;
    Ok(HandSpec {
        name: file.name,
        joints,
        fingertips,
        keypoints,
        sites,
    })
}

pub fn load_hand_model(text: &str) -> Result<HandModel, KinematicsError> {
    build_hand_model(parse_hand_spec(text)?)
}

pub const ROBOT24_SPEC: &str = include_str!("../assets/hands/robot24.toml");
pub const HUMAN21_SPEC: &str = include_str!("../assets/hands/human21.toml");

/// Built-in 24-DoF right robot hand.
pub fn robot24() -> HandModel {
    load_hand_model(ROBOT24_SPEC).expect("built-in robot24 model is valid")
}

/// Built-in 21-DoF right human hand.
pub fn human21() -> HandModel {
    load_hand_model(HUMAN21_SPEC).expect("built-in human21 model is valid")
}

/// Resolves a built-in model name or reads a model file from disk.
pub fn resolve_hand_model(name_or_path: &str) -> Result<HandModel, KinematicsError> {
    match name_or_path {
        "robot24" => Ok(robot24()),
        "human21" => Ok(human21()),
        path => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| KinematicsError::Parse(format!("{path}: {e}")))?;
            load_hand_model(&text)
        }
    }
}
