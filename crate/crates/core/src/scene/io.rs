//! On-disk scene layout:
//!
//! ```text
//! <dir>/scene.json           manifest
//! <dir>/images/view_000.png  8-bit RGB
//! <dir>/depth/view_000.depth u32 width | u32 height | f64 * width * height (little-endian)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Image, Rgb, SceneDataset, Split};
use crate::error::{Error, Result};
use crate::geometry::Camera;

pub const MANIFEST_FILE: &str = "scene.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    pose: [f64; 12],
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    background: Rgb,
    near: f64,
    far: f64,
    cameras: Vec<CameraRecord>,
    images: Vec<String>,
    splits: Vec<Split>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    depths: Vec<Option<String>>,
    /// sha256 of every referenced file, keyed by relative path.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    checksums: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_png(path: &Path, image: &Image) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, image.width as u32, image.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
        let bytes: Vec<u8> = image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        writer.write_image_data(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<Image> {
    let bad = |e: png::DecodingError| Error::format(path, format!("cannot decode PNG: {e}"));
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::format(path, "PNG too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "only 8-bit PNG images are supported"));
    }
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::format(path, format!("unsupported PNG color type {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let data = buf[..w * h * channels]
        .chunks(channels)
        .flat_map(|px| [px[0], px[1], px[2]])
        .map(|b| b as f64 / 255.0)
        .collect();
    Image::new(w, h, data)
}

pub fn read_png(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(path, &bytes)
}

pub fn write_depth_sidecar(path: &Path, width: usize, height: usize, depth: &[f64]) -> Result<Vec<u8>> {
    if depth.len() != width * height {
        return Err(Error::Shape(format!("depth map has {} values for {width}x{height}", depth.len())));
    }
    let mut buf = Vec::with_capacity(8 + depth.len() * 8);
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    for v in depth {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn decode_depth(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    if bytes.len() < 8 {
        return Err(Error::format(path, "truncated depth header"));
    }
    let w = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != w * h * 8 {
        return Err(Error::format(path, format!("depth payload is {} bytes, expected {}", body.len(), w * h * 8)));
    }
    Ok((w, h, body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()))
}

pub fn read_depth_sidecar(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_depth(path, &bytes)
}

pub fn save_dataset(ds: &SceneDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    for sub in ["images", "depth"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut checksums = BTreeMap::new();
    let mut images = Vec::new();
    let mut depths = Vec::new();
    for (k, (img, depth)) in ds.images.iter().zip(&ds.depths).enumerate() {
        let rel = format!("images/view_{k:03}.png");
        let bytes = write_png(&dir.join(&rel), img)?;
        checksums.insert(rel.clone(), sha256_hex(&bytes));
        images.push(rel);
        depths.push(match depth {
            Some(d) => {
                let rel = format!("depth/view_{k:03}.depth");
                let bytes = write_depth_sidecar(&dir.join(&rel), img.width, img.height, d)?;
                checksums.insert(rel.clone(), sha256_hex(&bytes));
                Some(rel)
            }
            None => None,
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        background: ds.background,
        near: ds.near,
        far: ds.far,
        cameras: ds
            .cameras
            .iter()
            .map(|c| CameraRecord { fx: c.fx, fy: c.fy, cx: c.cx, cy: c.cy, width: c.width, height: c.height, pose: c.pose_rows() })
            .collect(),
        images,
        splits: ds.splits.clone(),
        depths,
        checksums,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

fn read_checked(dir: &Path, rel: &str, checksums: &BTreeMap<String, String>) -> Result<(PathBuf, Vec<u8>)> {
    let path = dir.join(rel);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if let Some(expected) = checksums.get(rel) {
        if !expected.eq_ignore_ascii_case(&sha256_hex(&bytes)) {
            return Err(Error::Checksum { path });
        }
    }
    Ok((path, bytes))
}

/// Loads a dataset directory. Checksums, when present in the manifest, are verified.
pub fn load_dataset(dir: &Path) -> Result<SceneDataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::format(&mpath, "missing format_version"))?;
    if version != MANIFEST_VERSION as u64 {
        return Err(Error::UnsupportedVersion { what: "scene manifest", found: version as u32, expected: MANIFEST_VERSION });
    }
    let m: Manifest = serde_json::from_value(value).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if m.images.len() != m.cameras.len() || m.splits.len() != m.cameras.len() {
        return Err(Error::format(&mpath, "cameras, images and splits must have equal length"));
    }
    if !m.depths.is_empty() && m.depths.len() != m.cameras.len() {
        return Err(Error::format(&mpath, "depths must be empty or match the camera count"));
    }
    let cameras = m
        .cameras
        .iter()
        .map(|c| Camera::from_pose_rows(c.fx, c.fy, c.cx, c.cy, &c.pose, c.width, c.height))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::format(&mpath, e.to_string()))?;
    let mut images = Vec::new();
    for rel in &m.images {
        let (path, bytes) = read_checked(dir, rel, &m.checksums)?;
        images.push(decode_png(&path, &bytes)?);
    }
    let mut depths = Vec::new();
    for (k, slot) in m.depths.iter().enumerate() {
        depths.push(match slot {
            Some(rel) => {
                let (path, bytes) = read_checked(dir, rel, &m.checksums)?;
                let (w, h, d) = decode_depth(&path, &bytes)?;
                if (w, h) != (cameras[k].width, cameras[k].height) {
                    return Err(Error::format(path, "depth extents do not match the camera"));
                }
                Some(d)
            }
            None => None,
        });
    }
    if depths.is_empty() {
        depths = vec![None; cameras.len()];
    }
    let ds = SceneDataset { cameras, images, depths, near: m.near, far: m.far, background: m.background, splits: m.splits };
    ds.validate().map_err(|e| Error::format(&mpath, e.to_string()))?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{make_scene, SceneSpec};

    fn small() -> SceneDataset {
        make_scene(&SceneSpec { oracle_samples: 32, ..SceneSpec::tri_sphere(6, 12, 2) }).unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn truncated_image_names_the_file() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let img = dir.path().join("images/view_001.png");
        let bytes = fs::read(&img).unwrap();
        fs::write(&img, &bytes[..bytes.len() / 2]).unwrap();
        // with the checksum the corruption is caught before decoding
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("view_001.png"), "{err}");
        // without it, decoding itself fails and still names the file
        let mpath = dir.path().join(MANIFEST_FILE);
        let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
        m.as_object_mut().unwrap().remove("checksums");
        fs::write(&mpath, m.to_string()).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("view_001.png"), "{err}");
    }

    #[test]
    fn missing_image_is_error() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        fs::remove_file(dir.path().join("images/view_000.png")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("view_000.png"), "{err}");
    }

    #[test]
    fn version_bump_is_rejected() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).unwrap().replace("\"format_version\": 1", "\"format_version\": 2");
        fs::write(&mpath, text).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::UnsupportedVersion { found: 2, .. })));
    }

    #[test]
    fn malformed_manifest_is_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{ not json").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    }
}
