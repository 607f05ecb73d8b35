//! Raw volume container and slice export.
//!
//! Container layout, all little-endian: magic "RVOL", version u16, dtype
//! code u8 (0 = f32), rank u8, one u32 extent per axis, then the f32
//! payload in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, VoxError};
use crate::tensor::array::Array;

const MAGIC: &[u8; 4] = b"RVOL";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

pub fn save_raw(volume: &Array<f32>, path: &Path) -> Result<()> {
    if volume.shape().len() > u8::MAX as usize {
        return Err(VoxError::shape(format!(
            "rank {} exceeds container limit",
            volume.shape().len()
        )));
    }
    let mut buf: Vec<u8> =
        Vec::with_capacity(8 + 4 * volume.shape().len() + 4 * volume.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(DTYPE_F32);
    buf.push(volume.shape().len() as u8);
    for &e in volume.shape() {
        let e32 = u32::try_from(e)
            .map_err(|_| VoxError::shape(format!("extent {e} exceeds u32 range")))?;
        buf.extend_from_slice(&e32.to_le_bytes());
    }
    for v in volume.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_raw(path: &Path) -> Result<Array<f32>> {
    let bad = |reason: String| VoxError::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(bad(format!("file is {} bytes, header needs 8", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad(format!(
            "bad magic {:?} at offset 0, expected \"RVOL\"",
            &bytes[0..4]
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version} at offset 4")));
    }
    if bytes[6] != DTYPE_F32 {
        return Err(bad(format!("unsupported dtype code {} at offset 6", bytes[6])));
    }
    let rank = bytes[7] as usize;
    let hdr = 8 + 4 * rank;
    if bytes.len() < hdr {
        return Err(bad(format!(
            "truncated extent table: need {hdr} bytes, file has {}",
            bytes.len()
        )));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for a in 0..rank {
        let off = 8 + 4 * a;
        let e = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        numel = numel
            .checked_mul(e)
            .ok_or_else(|| bad(format!("extent product overflows at axis {a}")))?;
        shape.push(e);
    }
    let want = hdr + 4 * numel;
    if bytes.len() < want {
        return Err(bad(format!(
            "truncated payload: extents {shape:?} need {} values, file holds {}",
            numel,
            (bytes.len() - hdr) / 4
        )));
    }
    let data: Vec<f32> = bytes[hdr..want]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array::new(shape, data)
}

/// Min-max rescale to [0,1]; a constant volume maps to all zeros.
pub fn normalize_min_max(volume: &Array<f32>) -> Array<f32> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in volume.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    if range <= 0.0 {
        return Array::zeros(volume.shape().to_vec());
    }
    Array::new(
        volume.shape().to_vec(),
        volume.data().iter().map(|&v| (v - lo) / range).collect(),
    )
    .unwrap()
}

#[derive(Clone, Copy, Debug)]
pub enum SliceAxis {
    Axial,
    Sagittal,
}

/// Writes the mid-volume slice along the chosen axis as an 8-bit binary
/// portable graymap. Input values are clamped to [0,1].
pub fn save_pgm_mid_slice(volume: &Array<f32>, axis: SliceAxis, path: &Path) -> Result<()> {
    let sh = volume.shape();
    if sh.len() != 3 {
        return Err(VoxError::shape(format!(
            "slice export expects a rank-3 volume, got {sh:?}"
        )));
    }
    let (rows, cols, pick): (usize, usize, Box<dyn Fn(usize, usize) -> usize>) = match axis {
        SliceAxis::Axial => {
            let z = sh[0] / 2;
            let (h, w) = (sh[1], sh[2]);
            (h, w, Box::new(move |r, c| (z * h + r) * w + c))
        }
        SliceAxis::Sagittal => {
            let x = sh[2] / 2;
            let (d, h, w) = (sh[0], sh[1], sh[2]);
            (d, h, Box::new(move |r, c| (r * h + c) * w + x))
        }
    };
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for r in 0..rows {
        for c in 0..cols {
            let v = volume.data()[pick(r, c)].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("voxtrans-volume-test");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn raw_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let vol = Array::<f32>::from_fn(vec![8, 8, 8], |_| rng.random::<f32>());
        let path = tmp("rt.rvol");
        save_raw(&vol, &path).unwrap();
        let back = load_raw(&path).unwrap();
        assert_eq!(back.shape(), vol.shape());
        for (a, b) in vol.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bad_magic_names_the_offset() {
        let path = tmp("magic.rvol");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x03").unwrap();
        let err = load_raw(&path).unwrap_err().to_string();
        assert!(err.contains("offset 0"), "{err}");
    }

    #[test]
    fn truncated_payload_is_reported() {
        let vol = Array::<f32>::zeros(vec![4, 4, 4]);
        let path = tmp("trunc.rvol");
        save_raw(&vol, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_raw(&path).unwrap_err().to_string();
        assert!(err.contains("truncated payload"), "{err}");
        assert!(err.contains("63"), "{err}");
    }

    #[test]
    fn extent_overflow_is_rejected() {
        let path = tmp("overflow.rvol");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RVOL");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(0);
        bytes.push(4);
        for _ in 0..4 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        let err = load_raw(&path).unwrap_err().to_string();
        assert!(err.contains("overflow"), "{err}");
    }

    #[test]
    fn normalization_hits_unit_range() {
        let vol = Array::<f32>::from_fn(vec![2, 2, 2], |i| 3.0 + i as f32);
        let n = normalize_min_max(&vol);
        assert_eq!(n.data()[0], 0.0);
        assert_eq!(n.data()[7], 1.0);
        let flat = Array::<f32>::full(vec![2, 2, 2], 0.7);
        assert!(normalize_min_max(&flat).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pgm_export_writes_expected_header_and_size() {
        let vol = Array::<f32>::from_fn(vec![4, 6, 8], |i| (i % 11) as f32 / 10.0);
        let pa = tmp("ax.pgm");
        save_pgm_mid_slice(&vol, SliceAxis::Axial, &pa).unwrap();
        let bytes = std::fs::read(&pa).unwrap();
        assert!(bytes.starts_with(b"P5\n8 6\n255\n"));
        assert_eq!(bytes.len(), b"P5\n8 6\n255\n".len() + 48);
        let ps = tmp("sag.pgm");
        save_pgm_mid_slice(&vol, SliceAxis::Sagittal, &ps).unwrap();
        let bytes = std::fs::read(&ps).unwrap();
        assert!(bytes.starts_with(b"P5\n6 4\n255\n"));
    }
}
