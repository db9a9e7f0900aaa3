//! Binary PPM (P6) images and 16-bit PGM (P5) depth maps.
//!
//! Depth is stored as `round(256 · meters)`, saturating at 65535; zero marks
//! a missing measurement. A sidecar text file next to every written depth
//! map records the scale.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use nwcrf_core::Tensor;

/// Depth-map units per meter.
pub const DEPTH_SCALE: f64 = 256.0;

#[derive(Debug, thiserror::Error)]
pub enum NetpbmError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

fn invalid(path: &Path, message: impl Into<String>) -> NetpbmError {
    NetpbmError::Invalid { path: path.display().to_string(), message: message.into() }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> NetpbmError + '_ {
    move |source| NetpbmError::Io { path: path.display().to_string(), source }
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header, NetpbmError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(invalid(path, format!("not a binary {} file", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let digits = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = digits.parse().map_err(|_| invalid(path, "malformed header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(invalid(path, "malformed header"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(invalid(path, format!("unsupported extents {width}×{height} or maxval {maxval}")));
    }
    Ok(Header { width, height, maxval, data_start: pos + 1 })
}

/// Reads an 8-bit P6 image as `H×W×3` values in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor, NetpbmError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let h = parse_header(&bytes, b"P6", path)?;
    if h.maxval > 255 {
        return Err(invalid(path, "only 8-bit PPM images are supported"));
    }
    let n = h.width * h.height * 3;
    let body = bytes.get(h.data_start..h.data_start + n).ok_or_else(|| invalid(path, "truncated pixel data"))?;
    let scale = h.maxval as f64;
    Tensor::new(&[h.height, h.width, 3], body.iter().map(|&b| b as f64 / scale).collect()).map_err(|e| invalid(path, e.to_string()))
}

/// Writes an `H×W×3` image with values in `[0, 1]` (clamped) as 8-bit P6.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<(), NetpbmError> {
    let [h, w, 3] = *image.extents() else {
        return Err(invalid(path, format!("image must be H×W×3, got {:?}", image.extents())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out).map_err(io_err(path))
}

/// Depth in meters to 16-bit units, with the number of saturated pixels.
pub fn encode_depth(depth: &[f64]) -> (Vec<u16>, usize) {
    let mut saturated = 0;
    let units = depth
        .iter()
        .map(|&d| {
            let u = (d * DEPTH_SCALE).round();
            if u > 65535.0 {
                saturated += 1;
                65535
            } else if u > 0.0 {
                u as u16
            } else {
                0
            }
        })
        .collect();
    (units, saturated)
}

/// Sidecar file recording the depth scale of `pgm`.
pub fn sidecar_path(pgm: &Path) -> PathBuf {
    let mut name = pgm.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".scale");
    pgm.with_file_name(name)
}

/// Writes an `H×W` depth map in meters as 16-bit P5 plus its scale sidecar
/// and returns the number of saturated pixels.
pub fn write_depth_pgm(path: &Path, depth: &Tensor) -> Result<usize, NetpbmError> {
    let [h, w] = *depth.extents() else {
        return Err(invalid(path, format!("depth must be H×W, got {:?}", depth.extents())));
    };
    let (units, saturated) = encode_depth(depth.data());
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for u in units {
        out.extend_from_slice(&u.to_be_bytes());
    }
    fs::write(path, out).map_err(io_err(path))?;
    let side = sidecar_path(path);
    fs::write(&side, format!("units_per_meter = {DEPTH_SCALE}\n")).map_err(io_err(&side))?;
    Ok(saturated)
}

/// Reads a P5 depth map in 256 units per meter (8- or 16-bit).
pub fn read_depth_pgm(path: &Path) -> Result<Tensor, NetpbmError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let h = parse_header(&bytes, b"P5", path)?;
    let n = h.width * h.height;
    let wide = h.maxval > 255;
    let len = if wide { 2 * n } else { n };
    let body = bytes.get(h.data_start..h.data_start + len).ok_or_else(|| invalid(path, "truncated pixel data"))?;
    let units: Vec<f64> = if wide {
        body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64).collect()
    } else {
        body.iter().map(|&b| b as f64).collect()
    };
    Tensor::new(&[h.height, h.width], units.into_iter().map(|u| u / DEPTH_SCALE).collect()).map_err(|e| invalid(path, e.to_string()))
}
