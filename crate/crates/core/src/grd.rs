//! GRD1: a little-endian binary raster container.
//!
//! ```text
//! "GRD1" | version u8 = 1 | dtype u8 | has_georef u8 | space u8 | h u32 | w u32 | c u32
//! [zoom u8 | 3 zero bytes | tile_x u64 | tile_y u64]      if has_georef
//! payload, row-major (h, w, c): u32 counts (dtype 0) or binary32 (dtype 1)
//! ```
//!
//! Count-space rasters are written as u32 and must hold whole numbers.
//! Lognorm rasters are written as binary32, so values are rounded to single
//! precision; [`RasterImage::round_to_binary32`] makes that explicit.

use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{RasterImage, Space, TileCoord};

const MAGIC: &[u8; 4] = b"GRD1";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 20;
const GEOREF_LEN: usize = 20;

pub fn encode(img: &RasterImage) -> Result<Vec<u8>> {
    let n = img.h * img.w * img.c;
    if img.values.len() != n {
        return Err(Error::Contract(format!("{} values for a {}×{}×{} raster", img.values.len(), img.h, img.w, img.c)));
    }
    let dims: Vec<u32> = [img.h, img.w, img.c]
        .iter()
        .map(|&d| u32::try_from(d).map_err(|_| Error::Domain(format!("extent {d} exceeds u32"))))
        .collect::<Result<_>>()?;
    let mut buf = Vec::with_capacity(HEADER_LEN + GEOREF_LEN + 4 * n);
    buf.extend_from_slice(MAGIC);
    let dtype = match img.space {
        Space::Count => 0,
        Space::Lognorm => 1,
    };
    buf.extend_from_slice(&[VERSION, dtype, u8::from(img.georef.is_some()), dtype]);
    for d in dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    if let Some(g) = img.georef {
        buf.extend_from_slice(&[g.zoom, 0, 0, 0]);
        buf.extend_from_slice(&g.x.to_le_bytes());
        buf.extend_from_slice(&g.y.to_le_bytes());
    }
    match img.space {
        Space::Count => {
            for &v in &img.values {
                if !(v >= 0.0 && v <= f64::from(u32::MAX) && v.fract() == 0.0) {
                    return Err(Error::Domain(format!("count {v} is not a whole number in u32 range")));
                }
                buf.extend_from_slice(&(v as u32).to_le_bytes());
            }
        }
        Space::Lognorm => {
            for &v in &img.values {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(buf)
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

pub fn decode(bytes: &[u8]) -> Result<RasterImage> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format("magic", "bad magic"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format("header", format!("truncated header: {} bytes", bytes.len())));
    }
    if bytes[4] != VERSION {
        return Err(Error::format("version", format!("unsupported version {}", bytes[4])));
    }
    let dtype = bytes[5];
    if dtype > 1 {
        return Err(Error::format("dtype", format!("unsupported dtype {dtype}")));
    }
    let has_georef = match bytes[6] {
        0 => false,
        1 => true,
        v => return Err(Error::format("has_georef", format!("invalid flag {v}"))),
    };
    let space = match bytes[7] {
        0 => Space::Count,
        1 => Space::Lognorm,
        v => return Err(Error::format("space", format!("invalid space {v}"))),
    };
    if (dtype == 0) != (space == Space::Count) {
        return Err(Error::format("dtype", format!("dtype {dtype} does not match space {}", bytes[7])));
    }
    let (h, w, c) = (u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize, u32_at(bytes, 16) as usize);
    let mut at = HEADER_LEN;
    let georef = if has_georef {
        if bytes.len() < at + GEOREF_LEN {
            return Err(Error::format("georef", "truncated georeference block"));
        }
        if bytes[at + 1..at + 4] != [0, 0, 0] {
            return Err(Error::format("georef", "non-zero padding"));
        }
        let tile = TileCoord::new(bytes[at], u64_at(bytes, at + 4), u64_at(bytes, at + 12))
            .map_err(|e| Error::format("georef", e.to_string()))?;
        at += GEOREF_LEN;
        Some(tile)
    } else {
        None
    };
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::format("extents", "h·w·c overflows"))?;
    let payload = &bytes[at..];
    if payload.len() != 4 * n {
        return Err(Error::format("payload", format!("expected {} bytes, found {}", 4 * n, payload.len())));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| {
            let b: [u8; 4] = b.try_into().unwrap();
            if dtype == 0 {
                f64::from(u32::from_le_bytes(b))
            } else {
                f64::from(f32::from_le_bytes(b))
            }
        })
        .collect();
    Ok(RasterImage { h, w, c, values, georef, space })
}

pub fn write(img: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(img)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_count_raster_is_36_bytes() {
        let img = RasterImage::new(2, 2, 1, vec![0.0, 1.0, 2.0, 7.0], Space::Count).unwrap();
        let bytes = encode(&img).unwrap();
        assert_eq!(bytes.len(), 36);
        assert_eq!(&bytes[..8], b"GRD1\x01\x00\x00\x00");
        assert_eq!(u32_at(&bytes, 32), 7);
        assert_eq!(decode(&bytes).unwrap(), img);
    }

    #[test]
    fn georef_lognorm_roundtrip_is_bitwise() {
        let values: Vec<f64> = (0..128 * 128 * 12).map(|i| ((i * 7919) % 1000) as f64 / 137.0).collect();
        let img = RasterImage::new(128, 128, 12, values, Space::Lognorm)
            .unwrap()
            .with_georef(TileCoord::new(17, 20_971, 50_660).unwrap())
            .round_to_binary32();
        let bytes = encode(&img).unwrap();
        assert_eq!(bytes.len(), 40 + 4 * 128 * 128 * 12);
        let back = decode(&bytes).unwrap();
        assert!(back.values.iter().zip(&img.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back, img);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn format_errors_name_the_field() {
        let img = RasterImage::new(2, 2, 1, vec![1.0; 4], Space::Count).unwrap();
        let good = encode(&img).unwrap();
        let field = |b: &[u8]| match decode(b) {
            Err(Error::Format { field, reason }) => (field, reason),
            other => panic!("expected a format error, got {other:?}"),
        };

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert_eq!(field(&bad), ("magic", "bad magic".to_string()));

        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(field(&bad).0, "version");

        let mut bad = good.clone();
        bad[5] = 9;
        assert_eq!(field(&bad).0, "dtype");

        assert_eq!(field(&good[..good.len() - 1]).0, "payload");
        assert_eq!(field(&good[..10]).0, "header");
    }

    #[test]
    fn non_whole_counts_rejected() {
        let img = RasterImage::new(1, 1, 1, vec![0.5], Space::Count).unwrap();
        assert!(matches!(encode(&img), Err(Error::Domain(_))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.grd");
        let img = RasterImage::new(3, 2, 1, vec![1.0, 0.0, 4.0, 9.0, 0.0, 2.0], Space::Count).unwrap();
        write(&img, &path).unwrap();
        assert_eq!(read(&path).unwrap(), img);
        assert!(matches!(read(dir.path().join("missing.grd")), Err(Error::Io { .. })));
    }
}
