//! `.vclip` files and `manifest.csv`.
//!
//! A `.vclip` is a 16-byte header (`b"VCLP"`, `u16` version, `u16` T, H, W,
//! C, two zero bytes) followed by `T*H*W*C` little-endian `f32` values in
//! `T, H, W, C` order.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{Split, VideoClip};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VCLP";
pub const VCLIP_VERSION: u16 = 1;
pub const MANIFEST_NAME: &str = "manifest.csv";

pub fn clip_file_name(scene_id: u64, viewpoint_deg: u32) -> String {
    format!("{scene_id}_{viewpoint_deg}.vclip")
}

pub fn write_vclip(path: &Path, clip: &VideoClip) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * clip.frames.len());
    buf.extend_from_slice(MAGIC);
    buf.write_u16::<LE>(VCLIP_VERSION).expect("vec write");
    for &d in &clip.dims {
        let d = u16::try_from(d).map_err(|_| Error::invalid(format!("clip dimension {d} exceeds u16")))?;
        buf.write_u16::<LE>(d).expect("vec write");
    }
    buf.extend_from_slice(&[0, 0]);
    for &v in &clip.frames {
        buf.write_f32::<LE>(v).expect("vec write");
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Raw frames and `(T, H, W, C)`.
pub fn read_vclip(path: &Path) -> Result<([usize; 4], Vec<f32>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "missing VCLP header"));
    }
    let mut r = &bytes[4..16];
    let version = r.read_u16::<LE>().expect("header");
    if version != VCLIP_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.read_u16::<LE>().expect("header") as usize;
    }
    let n: usize = dims.iter().product();
    if bytes.len() != 16 + 4 * n {
        return Err(Error::format(
            path,
            format!("expected {} data bytes for {dims:?}, found {}", 4 * n, bytes.len() - 16),
        ));
    }
    let mut data = &bytes[16..];
    let frames = (0..n).map(|_| data.read_f32::<LE>().expect("sized")).collect();
    Ok((dims, frames))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the dataset root.
    pub clip_path: String,
    pub class_id: usize,
    pub viewpoint_deg: u32,
    pub scene_id: u64,
    pub split: Split,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found")));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

/// Dataset root for a manifest inside `<root>/<split>/manifest.csv`.
pub fn dataset_root(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn load_clip(root: &Path, e: &ManifestEntry) -> Result<VideoClip> {
    let path = root.join(&e.clip_path);
    let (dims, frames) = read_vclip(&path)?;
    Ok(VideoClip {
        dims,
        frames,
        class_id: e.class_id,
        viewpoint_deg: e.viewpoint_deg,
        scene_id: e.scene_id,
        split: e.split,
    })
}

/// Reads a manifest and every clip it lists.
pub fn load_split(manifest: &Path) -> Result<(Vec<ManifestEntry>, Vec<VideoClip>)> {
    let entries = read_manifest(manifest)?;
    let root = dataset_root(manifest);
    let clips = entries.iter().map(|e| load_clip(&root, e)).collect::<Result<_>>()?;
    Ok((entries, clips))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vclip_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let clip = VideoClip {
            dims: [2, 3, 4, 3],
            frames: (0..72).map(|i| i as f32 / 71.0).collect(),
            class_id: 1,
            viewpoint_deg: 45,
            scene_id: 9,
            split: Split::Test,
        };
        let p = dir.path().join(clip_file_name(9, 45));
        write_vclip(&p, &clip).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"VCLP");
        assert_eq!(bytes.len(), 16 + 72 * 4);
        assert_eq!(&bytes[6..14], &[2, 0, 3, 0, 4, 0, 3, 0]);
        let (dims, frames) = read_vclip(&p).unwrap();
        assert_eq!(dims, clip.dims);
        assert_eq!(frames, clip.frames);
        std::fs::write(&p, &bytes[..20]).unwrap();
        assert!(read_vclip(&p).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_NAME);
        let rows = vec![ManifestEntry {
            clip_path: "pretrain/0_0.vclip".into(),
            class_id: 2,
            viewpoint_deg: 0,
            scene_id: 0,
            split: Split::Train,
        }];
        write_manifest(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("clip_path,class_id,viewpoint_deg,scene_id,split\n"));
        assert_eq!(read_manifest(&p).unwrap(), rows);
    }
}
