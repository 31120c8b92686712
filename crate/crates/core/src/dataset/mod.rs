//! Aligned multimodal frames: stream alignment, preprocessing, object labels,
//! a synthetic generator and the on-disk format.

mod align;
mod store;
mod synth;

use nalgebra::{Quaternion, Translation3, UnitQuaternion, Vector3};
use ndarray::{Array1, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::Pose;
use crate::retarget::RetargetError;

pub use align::{align_streams, AlignedFrame, StreamSample};
pub use store::{load_dataset, read_array_file, save_dataset, write_array_file, ArrayEntry, Element, Manifest, MANIFEST_FILE};
pub use synth::{generate_synthetic_dataset, synthesize, BottleRanges, GeneratorConfig, CAMERA_SIZE_DEFAULT};

pub const N_TACTILE: usize = 40;
pub const N_ACTION: usize = 48;
/// Position 3, quaternion (w, x, y, z) 4, sizes 4.
pub const OBJECT_DIM: usize = 11;
/// Voltage above which a taxel counts as touched.
pub const TACTILE_THRESHOLD: f64 = 0.4;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{stream} stream is empty")]
    EmptyStream { stream: &'static str },
    #[error("{stream} timestamps are not strictly increasing at sample {index}")]
    NotIncreasing { stream: &'static str, index: usize },
    #[error("{stream} stream does not cover visual frames {frames:?}")]
    Coverage { stream: &'static str, frames: Vec<usize> },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid object label: {0}")]
    Label(String),
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Retarget(#[from] RetargetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pose given as raw numbers, so that non-unit quaternions can be rejected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawPose {
    pub position: [f64; 3],
    /// (w, x, y, z).
    pub quaternion: [f64; 4],
}

impl RawPose {
    pub fn from_pose(p: &Pose) -> Self {
        let t = p.translation.vector;
        let q = p.rotation.quaternion();
        RawPose {
            position: [t.x, t.y, t.z],
            quaternion: [q.w, q.i, q.j, q.k],
        }
    }

    fn to_pose(self, what: &str) -> Result<Pose, DatasetError> {
        let [w, x, y, z] = self.quaternion;
        let q = Quaternion::new(w, x, y, z);
        let norm = q.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-3 {
            return Err(DatasetError::Label(format!("{what} quaternion has norm {norm}")));
        }
        if self.position.iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::Label(format!("{what} position is not finite")));
        }
        Ok(Pose::from_parts(
            Translation3::from(Vector3::from(self.position)),
            UnitQuaternion::from_quaternion(q),
        ))
    }
}

/// Bottle pose in the camera frame plus its four sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectLabel {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    /// Body radius, body height, cap radius, cap height.
    pub sizes: [f64; 4],
}

impl ObjectLabel {
    pub fn to_array(&self) -> [f64; OBJECT_DIM] {
        let q = self.orientation.quaternion();
        let p = self.position;
        let s = self.sizes;
        [p.x, p.y, p.z, q.w, q.i, q.j, q.k, s[0], s[1], s[2], s[3]]
    }

    pub fn from_array(a: &[f64]) -> Self {
        ObjectLabel {
            position: Vector3::new(a[0], a[1], a[2]),
            orientation: UnitQuaternion::from_quaternion(Quaternion::new(a[3], a[4], a[5], a[6])),
            sizes: [a[7], a[8], a[9], a[10]],
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::from_parts(Translation3::from(self.position), self.orientation)
    }
}

/// Expresses the bottle pose in the camera frame.
pub fn make_object_label(bottle_world: &RawPose, camera_world: &RawPose, sizes: [f64; 4]) -> Result<ObjectLabel, DatasetError> {
    let bottle = bottle_world.to_pose("bottle")?;
    let camera = camera_world.to_pose("camera")?;
    if sizes.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(DatasetError::Label(format!("sizes must be positive, got {sizes:?}")));
    }
    if sizes[2] >= sizes[0] {
        return Err(DatasetError::Label("cap radius must be below body radius".into()));
    }
    let rel = camera.inverse() * bottle;
    Ok(ObjectLabel {
        position: rel.translation.vector,
        orientation: rel.rotation,
        sizes,
    })
}

/// Thresholds raw taxel voltages (strictly above 0.4 V is touched).
pub fn binarize_tactile(raw: &[f64]) -> Result<[u8; N_TACTILE], DatasetError> {
    if raw.len() != N_TACTILE {
        return Err(DatasetError::Dimension { expected: N_TACTILE, got: raw.len() });
    }
    let mut out = [0u8; N_TACTILE];
    for (i, &v) in raw.iter().enumerate() {
        if v.is_nan() {
            return Err(DatasetError::NonFinite(i));
        }
        out[i] = u8::from(v > TACTILE_THRESHOLD);
    }
    Ok(out)
}

/// One aligned sample, materialized from a [`Dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct VTAOFrame {
    /// `H x W x 3`, values in `[0, 1]`.
    pub image: Array3<f32>,
    pub tactile: [u8; N_TACTILE],
    /// Robot joint angles, 24 left then 24 right.
    pub action: [f32; N_ACTION],
    /// `p x 48`: actions of the next p visual frames.
    pub future_actions: Array2<f32>,
    pub object: ObjectLabel,
    pub timestamp: f64,
}

/// Column-stored frames. Images stay 8-bit; angles and labels are f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    /// `N x H x W x 3`.
    pub images: Array4<u8>,
    /// `N x 40`.
    pub tactile: Array2<u8>,
    /// `N x 48`.
    pub actions: Array2<f32>,
    /// `N x p x 48`.
    pub future_actions: Array3<f32>,
    /// `N x 11`.
    pub objects: Array2<f32>,
    pub timestamps: Array1<f64>,
    pub trajectory: Array1<u32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.tactile.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn horizon(&self) -> usize {
        self.future_actions.shape()[1]
    }

    pub fn frame(&self, i: usize) -> VTAOFrame {
        let image = self.images.index_axis(ndarray::Axis(0), i).mapv(|v| v as f32 / 255.0);
        let mut tactile = [0u8; N_TACTILE];
        tactile.copy_from_slice(self.tactile.row(i).as_slice().expect("contiguous"));
        let mut action = [0f32; N_ACTION];
        action.copy_from_slice(self.actions.row(i).as_slice().expect("contiguous"));
        let obj: Vec<f64> = self.objects.row(i).iter().map(|&v| v as f64).collect();
        VTAOFrame {
            image,
            tactile,
            action,
            future_actions: self.future_actions.index_axis(ndarray::Axis(0), i).to_owned(),
            object: ObjectLabel::from_array(&obj),
            timestamp: self.timestamps[i],
        }
    }

    /// Actions of one frame followed by its future window, `(1 + p) x 48`.
    pub fn action_stack(&self, i: usize) -> Array2<f32> {
        let p = self.horizon();
        let mut out = Array2::zeros((1 + p, N_ACTION));
        out.row_mut(0).assign(&self.actions.row(i));
        out.slice_mut(ndarray::s![1.., ..])
            .assign(&self.future_actions.index_axis(ndarray::Axis(0), i));
        out
    }

    /// Checks shapes against the manifest.
    pub fn check(&self) -> Result<(), DatasetError> {
        let n = self.manifest.frames;
        let s = self.manifest.image_size;
        let p = self.manifest.p;
        let checks: [(&str, Vec<usize>, Vec<usize>); 7] = [
            ("images", self.images.shape().to_vec(), vec![n, s, s, 3]),
            ("tactile", self.tactile.shape().to_vec(), vec![n, N_TACTILE]),
            ("actions", self.actions.shape().to_vec(), vec![n, N_ACTION]),
            ("future_actions", self.future_actions.shape().to_vec(), vec![n, p, N_ACTION]),
            ("objects", self.objects.shape().to_vec(), vec![n, OBJECT_DIM]),
            ("timestamps", self.timestamps.shape().to_vec(), vec![n]),
            ("trajectory", self.trajectory.shape().to_vec(), vec![n]),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(DatasetError::Integrity(format!("{name} has shape {got:?}, manifest implies {want:?}")));
            }
        }
        if self.tactile.iter().any(|&v| v > 1) {
            return Err(DatasetError::Integrity("tactile values must be 0 or 1".into()));
        }
        let finite = |v: &f32| v.is_finite();
        if !(self.actions.iter().all(finite) && self.future_actions.iter().all(finite) && self.objects.iter().all(finite)) {
            return Err(DatasetError::Integrity("actions and labels must be finite".into()));
        }
        Ok(())
    }
}
