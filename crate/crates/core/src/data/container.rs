//! `BVALSMP1` frame files: 8-byte magic, little-endian `u64` header length,
//! a JSON header, then little-endian `f32` payloads in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SceneBox, SceneSample, POINT_DIM};
use crate::error::{Error, Result};
use crate::geometry::CameraRig;

pub const SAMPLE_MAGIC: &[u8; 8] = b"BVALSMP1";
pub const SAMPLE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    dataset_id: u32,
    frame_id: u64,
    point_count: usize,
    point_dim: usize,
    image_shape: [usize; 4],
    rig: CameraRig,
    capture_yaw_offsets: Vec<f64>,
    boxes: Vec<SceneBox>,
    /// Payload names in file order.
    payloads: Vec<String>,
}

pub fn write_sample(sample: &SceneSample, path: &Path) -> Result<()> {
    sample.validate()?;
    let header = Header {
        version: SAMPLE_VERSION,
        dataset_id: sample.dataset_id,
        frame_id: sample.frame_id,
        point_count: sample.point_count(),
        point_dim: POINT_DIM,
        image_shape: sample.image_shape,
        rig: sample.rig.clone(),
        capture_yaw_offsets: sample.capture_yaw_offsets.clone(),
        boxes: sample.boxes.clone(),
        payloads: vec!["points".into(), "images".into()],
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf =
        Vec::with_capacity(16 + json.len() + 4 * (sample.points.len() + sample.images.len()));
    buf.write_all(SAMPLE_MAGIC)?;
    buf.write_all(&(json.len() as u64).to_le_bytes())?;
    buf.write_all(&json)?;
    for v in sample.points.iter().chain(&sample.images) {
        buf.write_all(&v.to_le_bytes())?;
    }
    fs::write(path, buf)?;
    Ok(())
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("truncated sample: {what}")))?;
    let out = &bytes[*at..end];
    *at = end;
    Ok(out)
}

fn floats(raw: &[u8]) -> Vec<f32> {
    raw.chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn read_sample(path: &Path) -> Result<SceneSample> {
    let bytes = fs::read(path)?;
    let mut at = 0;
    if take(&bytes, &mut at, 8, "magic")? != SAMPLE_MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let len = u64::from_le_bytes(
        take(&bytes, &mut at, 8, "header length")?
            .try_into()
            .expect("8 bytes"),
    );
    let len = usize::try_from(len).map_err(|_| Error::Format("header length overflow".into()))?;
    let header: Header = serde_json::from_slice(take(&bytes, &mut at, len, "header")?)
        .map_err(|e| Error::Format(format!("malformed header: {e}")))?;
    if header.version != SAMPLE_VERSION {
        return Err(Error::Format(format!(
            "sample version {} (expected {SAMPLE_VERSION})",
            header.version
        )));
    }
    if header.point_dim != POINT_DIM || header.payloads != ["points", "images"] {
        return Err(Error::Format("unsupported payload layout".into()));
    }
    let n_points = header.point_count * POINT_DIM;
    let n_pixels: usize = header.image_shape.iter().product();
    let points = floats(take(&bytes, &mut at, 4 * n_points, "points")?);
    let images = floats(take(&bytes, &mut at, 4 * n_pixels, "images")?);
    if at != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - at
        )));
    }
    let sample = SceneSample {
        dataset_id: header.dataset_id,
        frame_id: header.frame_id,
        points,
        image_shape: header.image_shape,
        images,
        rig: header.rig,
        capture_yaw_offsets: header.capture_yaw_offsets,
        boxes: header.boxes,
    };
    sample.validate()?;
    Ok(sample)
}
