//! On-disk dataset layout.
//!
//! ```text
//! <split>/manifest.json
//! <split>/<clip_id>/frames/0000.png ...
//! <split>/<clip_id>/audio.f32       [T, 20]
//! <split>/<clip_id>/factors.f32     [T, 28]
//! <split>/<clip_id>/keypoints.f32   [T, 8, 2]
//! ```
//!
//! Float arrays are little-endian `f32` preceded by a shape header
//! (`b"F32T"`, `u32` version, `u32` rank, `u32` dims). The manifest records a
//! SHA-256 for every file; reads verify all hashes before decoding anything.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::audio::AUDIO_DIM;
use super::clip::Clip;
use super::factors::{FactorVector, FACTOR_FLAT_DIM};
use super::render::{FRAME_SIZE, NUM_KEYPOINTS};
use crate::error::{Error, Result};
use crate::image::RgbImage;

pub const WORLD_VERSION: &str = "synthworld-1";
const TENSOR_MAGIC: &[u8; 4] = b"F32T";
const TENSOR_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub clip_id: String,
    pub identity_seed: u64,
    pub fps: u32,
    pub length: usize,
    /// Relative path → lowercase hex SHA-256.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub world_version: String,
    pub seed: u64,
    pub render_config_hash: String,
    pub clips: Vec<ClipEntry>,
}

pub fn render_config_hash() -> String {
    let desc = format!(
        "{WORLD_VERSION}|frame={FRAME_SIZE}|audio={AUDIO_DIM}|factors={FACTOR_FLAT_DIM}|kp={NUM_KEYPOINTS}"
    );
    hex(&Sha256::digest(desc.as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Encodes a float array with its shape header.
pub fn encode_f32_array(shape: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::Shape(format!(
            "shape {shape:?} holds {expected} values, got {}",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(12 + 4 * shape.len() + 4 * data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_f32_array(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let bad = |m: &str| Error::Data(format!("float array: {m}"));
    if bytes.len() < 12 || &bytes[..4] != TENSOR_MAGIC {
        return Err(bad("missing header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if word(4) != TENSOR_VERSION {
        return Err(bad("unsupported version"));
    }
    let rank = word(8) as usize;
    let body = 12 + 4 * rank;
    if bytes.len() < body {
        return Err(bad("truncated shape"));
    }
    let shape: Vec<usize> = (0..rank).map(|i| word(12 + 4 * i) as usize).collect();
    let count: usize = shape.iter().product();
    if bytes.len() != body + 4 * count {
        return Err(bad("payload size does not match shape"));
    }
    let data = bytes[body..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, data))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn clip_dir_name(clip_id: &str) -> Result<&str> {
    if clip_id.is_empty()
        || clip_id
            .chars()
            .any(|c| !(c.is_ascii_alphanumeric() || c == '-' || c == '_'))
    {
        return Err(Error::Data(format!("clip id `{clip_id}` is not a safe directory name")));
    }
    Ok(clip_id)
}

/// Writes one split to `dir`, returning the manifest that was stored.
pub fn write_dataset(clips: &[Clip], seed: u64, dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(clips.len());
    for clip in clips {
        clip.check_consistent()?;
        let name = clip_dir_name(&clip.clip_id)?;
        let mut files = BTreeMap::new();
        let mut put = |rel: String, bytes: Vec<u8>| -> Result<()> {
            write_file(&dir.join(&rel), &bytes)?;
            files.insert(rel, sha256_hex(&bytes));
            Ok(())
        };
        for (t, frame) in clip.frames.iter().enumerate() {
            put(format!("{name}/frames/{t:04}.png"), frame.encode_png()?)?;
        }
        let n = clip.len();
        let audio: Vec<f32> = clip.audio.iter().flatten().copied().collect();
        put(format!("{name}/audio.f32"), encode_f32_array(&[n, AUDIO_DIM], &audio)?)?;
        let factors: Vec<f32> = clip.factors.iter().flat_map(|f| f.to_flat()).collect();
        put(
            format!("{name}/factors.f32"),
            encode_f32_array(&[n, FACTOR_FLAT_DIM], &factors)?,
        )?;
        let kps: Vec<f32> = clip.keypoints.iter().flatten().flatten().copied().collect();
        put(
            format!("{name}/keypoints.f32"),
            encode_f32_array(&[n, NUM_KEYPOINTS, 2], &kps)?,
        )?;
        entries.push(ClipEntry {
            clip_id: clip.clip_id.clone(),
            identity_seed: clip.identity_seed(),
            fps: clip.fps,
            length: n,
            files,
        });
    }
    let manifest = DatasetManifest {
        world_version: WORLD_VERSION.to_string(),
        seed,
        render_config_hash: render_config_hash(),
        clips: entries,
    };
    let path = dir.join("manifest.json");
    write_file(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.world_version != WORLD_VERSION {
        return Err(Error::Version {
            expected: WORLD_VERSION.to_string(),
            found: manifest.world_version,
        });
    }
    let hash = render_config_hash();
    if manifest.render_config_hash != hash {
        return Err(Error::Version {
            expected: hash,
            found: manifest.render_config_hash,
        });
    }
    Ok(manifest)
}

/// Reads a split written by [`write_dataset`], verifying every file hash first.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Clip>)> {
    let manifest = read_manifest(dir)?;

    // Pass 1: integrity of every file before anything is decoded.
    let mut blobs: Vec<BTreeMap<String, Vec<u8>>> = Vec::with_capacity(manifest.clips.len());
    for entry in &manifest.clips {
        let integrity = |detail: String| Error::Integrity {
            clip: entry.clip_id.clone(),
            detail,
        };
        let mut loaded = BTreeMap::new();
        for (rel, digest) in &entry.files {
            let path: PathBuf = dir.join(rel);
            let bytes = std::fs::read(&path)
                .map_err(|e| integrity(format!("cannot read {}: {e}", path.display())))?;
            if &sha256_hex(&bytes) != digest {
                return Err(integrity(format!("hash mismatch for {rel}")));
            }
            loaded.insert(rel.clone(), bytes);
        }
        blobs.push(loaded);
    }

    // Pass 2: decode.
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for (entry, files) in manifest.clips.iter().zip(blobs) {
        let name = clip_dir_name(&entry.clip_id)?;
        let integrity = |detail: String| Error::Integrity {
            clip: entry.clip_id.clone(),
            detail,
        };
        let get = |rel: &str| {
            files
                .get(rel)
                .ok_or_else(|| integrity(format!("manifest does not list {rel}")))
        };
        let n = entry.length;
        let mut frames = Vec::with_capacity(n);
        for t in 0..n {
            frames.push(RgbImage::decode_png(get(&format!("{name}/frames/{t:04}.png"))?)?);
        }
        let (shape, audio) = decode_f32_array(get(&format!("{name}/audio.f32"))?)?;
        if shape != [n, AUDIO_DIM] {
            return Err(integrity(format!("audio shape {shape:?}")));
        }
        let (shape, factors) = decode_f32_array(get(&format!("{name}/factors.f32"))?)?;
        if shape != [n, FACTOR_FLAT_DIM] {
            return Err(integrity(format!("factor shape {shape:?}")));
        }
        let (shape, kps) = decode_f32_array(get(&format!("{name}/keypoints.f32"))?)?;
        if shape != [n, NUM_KEYPOINTS, 2] {
            return Err(integrity(format!("keypoint shape {shape:?}")));
        }
        let clip = Clip {
            clip_id: entry.clip_id.clone(),
            fps: entry.fps,
            frames,
            audio: audio
                .chunks_exact(AUDIO_DIM)
                .map(|c| c.try_into().unwrap())
                .collect(),
            factors: factors
                .chunks_exact(FACTOR_FLAT_DIM)
                .map(|c| FactorVector::from_flat(entry.identity_seed, c))
                .collect::<Result<_>>()?,
            keypoints: kps
                .chunks_exact(NUM_KEYPOINTS * 2)
                .map(|c| {
                    let mut k = [[0f32; 2]; NUM_KEYPOINTS];
                    for (i, p) in k.iter_mut().enumerate() {
                        *p = [c[2 * i], c[2 * i + 1]];
                    }
                    k
                })
                .collect(),
        };
        clip.check_consistent()?;
        clips.push(clip);
    }
    Ok((manifest, clips))
}
