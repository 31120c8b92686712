//! On-disk layout: `manifest.toml` plus one shape-prefixed little-endian
//! array file per column.
//!
//! Array file: magic `VARR`, version byte, dtype byte, ndim byte, one pad
//! byte, `ndim` u64 dimensions, then the raw elements.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synth::GeneratorConfig;
use super::{Dataset, DatasetError};

pub const MANIFEST_FILE: &str = "manifest.toml";
const FORMAT: &str = "vtao-dataset";
const VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"VARR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub frames: usize,
    pub trajectories: usize,
    pub frames_per_trajectory: usize,
    pub p: usize,
    pub image_size: usize,
    pub seed: u64,
    /// SHA-256 of the generator config's JSON form.
    pub config_hash: String,
    pub config: GeneratorConfig,
    #[serde(default)]
    pub arrays: Vec<ArrayEntry>,
}

impl Manifest {
    pub fn new(config: &GeneratorConfig, seed: u64, frames: usize) -> Self {
        Manifest {
            format: FORMAT.into(),
            version: VERSION,
            frames,
            trajectories: config.trajectories,
            frames_per_trajectory: config.frames_per_trajectory,
            p: config.p,
            image_size: config.image_size,
            seed,
            config_hash: config.hash(),
            config: config.clone(),
            arrays: Vec::new(),
        }
    }
}

/// Scalar types an array file can hold.
pub trait Element: Copy + Default {
    const CODE: u8;
    const NAME: &'static str;
    const SIZE: usize;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
}

macro_rules! element {
    ($t:ty, $code:expr, $name:expr) => {
        impl Element for $t {
            const CODE: u8 = $code;
            const NAME: &'static str = $name;
            const SIZE: usize = std::mem::size_of::<$t>();
            fn put(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn get(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

element!(u8, 0, "u8");
element!(u32, 1, "u32");
element!(f32, 2, "f32");
element!(f64, 3, "f64");

fn encode<T: Element>(shape: &[usize], data: impl Iterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, T::CODE, shape.len() as u8, 0]);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        v.put(&mut out);
    }
    out
}

fn decode<T: Element>(name: &str, bytes: &[u8]) -> Result<ArrayD<T>, DatasetError> {
    let bad = |msg: String| DatasetError::Integrity(format!("{name}: {msg}"));
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing array header".into()));
    }
    if bytes[4] != 1 {
        return Err(bad(format!("unsupported array version {}", bytes[4])));
    }
    if bytes[5] != T::CODE {
        return Err(bad(format!("dtype code {} where {} was expected", bytes[5], T::NAME)));
    }
    let ndim = bytes[6] as usize;
    let header = 8 + 8 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated header".into()));
    }
    let shape: Vec<usize> = (0..ndim)
        .map(|k| u64::from_le_bytes(bytes[8 + 8 * k..16 + 8 * k].try_into().unwrap()) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let want = header + count * T::SIZE;
    if bytes.len() != want {
        return Err(bad(format!("{} bytes where the header implies {want}", bytes.len())));
    }
    let data: Vec<T> = bytes[header..].chunks_exact(T::SIZE).map(T::get).collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&shape), data).expect("size checked"))
}

fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_array<T: Element>(
    dir: &Path,
    name: &str,
    shape: &[usize],
    data: impl Iterator<Item = T>,
) -> Result<ArrayEntry, DatasetError> {
    let bytes = encode(shape, data);
    let file = format!("{name}.varr");
    fs::write(dir.join(&file), &bytes)?;
    Ok(ArrayEntry {
        name: name.into(),
        file,
        dtype: T::NAME.into(),
        shape: shape.to_vec(),
        sha256: digest(&bytes),
    })
}

/// Writes one standalone array file.
pub fn write_array_file<T: Element>(path: &Path, array: &ArrayD<T>) -> Result<(), DatasetError> {
    fs::write(path, encode(array.shape(), array.iter().copied()))?;
    Ok(())
}

pub fn read_array_file<T: Element>(path: &Path) -> Result<ArrayD<T>, DatasetError> {
    let name = path.display().to_string();
    decode(&name, &fs::read(path)?)
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), DatasetError> {
    ds.check()?;
    fs::create_dir_all(dir)?;
    let arrays = vec![
        write_array(dir, "images", ds.images.shape(), ds.images.iter().copied())?,
        write_array(dir, "tactile", ds.tactile.shape(), ds.tactile.iter().copied())?,
        write_array(dir, "actions", ds.actions.shape(), ds.actions.iter().copied())?,
        write_array(dir, "future_actions", ds.future_actions.shape(), ds.future_actions.iter().copied())?,
        write_array(dir, "objects", ds.objects.shape(), ds.objects.iter().copied())?,
        write_array(dir, "timestamps", ds.timestamps.shape(), ds.timestamps.iter().copied())?,
        write_array(dir, "trajectory", ds.trajectory.shape(), ds.trajectory.iter().copied())?,
    ];
    let manifest = Manifest { arrays, ..ds.manifest.clone() };
    let text = toml::to_string(&manifest).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

fn read_array<T: Element, D: ndarray::Dimension>(
    dir: &Path,
    manifest: &Manifest,
    name: &str,
) -> Result<ndarray::Array<T, D>, DatasetError> {
    let entry = manifest
        .arrays
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| DatasetError::Integrity(format!("manifest lists no {name} array")))?;
    if entry.dtype != T::NAME {
        return Err(DatasetError::Integrity(format!("{name}: manifest dtype {} is not {}", entry.dtype, T::NAME)));
    }
    let bytes = fs::read(dir.join(&entry.file))?;
    let arr = decode::<T>(name, &bytes)?;
    if arr.shape() != entry.shape.as_slice() {
        return Err(DatasetError::Integrity(format!(
            "{name}: file shape {:?} differs from manifest {:?}",
            arr.shape(),
            entry.shape
        )));
    }
    if digest(&bytes) != entry.sha256 {
        return Err(DatasetError::Integrity(format!("{name}: checksum mismatch")));
    }
    arr.into_dimensionality::<D>()
        .map_err(|_| DatasetError::Integrity(format!("{name}: wrong rank")))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(DatasetError::Manifest(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.config.hash() != manifest.config_hash {
        return Err(DatasetError::Integrity("config hash does not match the stored config".into()));
    }
    let ds = Dataset {
        images: read_array(dir, &manifest, "images")?,
        tactile: read_array(dir, &manifest, "tactile")?,
        actions: read_array(dir, &manifest, "actions")?,
        future_actions: read_array(dir, &manifest, "future_actions")?,
        objects: read_array(dir, &manifest, "objects")?,
        timestamps: read_array(dir, &manifest, "timestamps")?,
        trajectory: read_array(dir, &manifest, "trajectory")?,
        manifest,
    };
    ds.check()?;
    Ok(ds)
}
