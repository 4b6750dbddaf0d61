//! Dataset directories: `manifest.json` plus one `obs_<index>.bin` per sample.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Task;
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, PoseSE2};
use crate::numerics::Grid;

const OBS_MAGIC: &[u8; 4] = b"OBS1";
pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

/// One recorded pick-and-place step.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    /// `h × w × 4` RGB-D raster.
    pub observation: Grid,
    pub pick: PoseSE2,
    pub place: PoseSE2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub pick: PoseSE2,
    pub place: PoseSE2,
    pub observation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub task: Task,
    pub camera: CameraModel,
    pub count: usize,
    pub samples: Vec<SampleEntry>,
}

pub fn encode_observation(obs: &Grid) -> Result<Vec<u8>> {
    let (h, w, c) = obs.hwc()?;
    let mut buf = Vec::with_capacity(16 + obs.len() * 4);
    buf.extend_from_slice(OBS_MAGIC);
    for e in [h, w, c] {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in obs.values() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_observation(bytes: &[u8]) -> Result<Grid> {
    if bytes.len() < 16 || &bytes[..4] != OBS_MAGIC {
        return Err(Error::Format(format!(
            "observation payload lacks the OBS1 header (got {:?})",
            String::from_utf8_lossy(&bytes[..bytes.len().min(4)])
        )));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let n = h * w * c;
    if bytes.len() != 16 + 4 * n {
        return Err(Error::Format(format!(
            "observation {h}×{w}×{c} needs {} payload bytes, found {}",
            4 * n,
            bytes.len() - 16
        )));
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Grid::new(&[h, w, c], values)
}

fn obs_name(i: usize) -> String {
    format!("obs_{i}.bin")
}

fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    let tmp = dir.join(format!("{MANIFEST}.tmp"));
    fs::write(&tmp, serde_json::to_vec_pretty(manifest)?)?;
    fs::rename(tmp, dir.join(MANIFEST))?;
    Ok(())
}

/// Writes `samples` into the directory `path`, creating it if needed.
pub fn save_dataset(path: impl AsRef<Path>, task: &Task, cam: &CameraModel, samples: &[Demonstration]) -> Result<()> {
    let dir = path.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = obs_name(i);
        fs::write(dir.join(&name), encode_observation(&s.observation)?)?;
        entries.push(SampleEntry {
            pick: s.pick,
            place: s.place,
            observation: name,
        });
    }
    write_manifest(
        dir,
        &DatasetManifest {
            version: MANIFEST_VERSION,
            task: task.clone(),
            camera: *cam,
            count: samples.len(),
            samples: entries,
        },
    )
}

/// Adds one sample to an existing dataset directory, or starts a new one.
pub fn append_to_dataset(
    path: impl AsRef<Path>,
    task: &Task,
    cam: &CameraModel,
    sample: &Demonstration,
) -> Result<usize> {
    let dir = path.as_ref();
    let mut manifest = if dir.join(MANIFEST).exists() {
        read_manifest(dir)?
    } else {
        fs::create_dir_all(dir)?;
        DatasetManifest {
            version: MANIFEST_VERSION,
            task: task.clone(),
            camera: *cam,
            count: 0,
            samples: Vec::new(),
        }
    };
    let name = obs_name(manifest.count);
    fs::write(dir.join(&name), encode_observation(&sample.observation)?)?;
    manifest.samples.push(SampleEntry {
        pick: sample.pick,
        place: sample.place,
        observation: name,
    });
    manifest.count += 1;
    write_manifest(dir, &manifest)?;
    Ok(manifest.count)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let raw = fs::read(dir.join(MANIFEST))?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&raw).map_err(|e| Error::Format(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {} (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    if manifest.count != manifest.samples.len() {
        return Err(Error::Format(format!(
            "manifest count {} disagrees with {} sample entries",
            manifest.count,
            manifest.samples.len()
        )));
    }
    Ok(manifest)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<Demonstration>)> {
    let dir = path.as_ref();
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.count);
    for e in &manifest.samples {
        let bytes = fs::read(dir.join(&e.observation))?;
        let observation =
            decode_observation(&bytes).map_err(|err| Error::Format(format!("{}: {err}", e.observation)))?;
        samples.push(Demonstration {
            observation,
            pick: e.pick,
            place: e.place,
        });
    }
    Ok((manifest, samples))
}
