//! Portable Float Grid (PFG) files.
//!
//! ```text
//! PFG1
//! dims: 2 64 64
//! spacing: 1 1
//! channels: 1
//!
//! <channels * n1 * n2 little-endian f32, x fastest, channel-major>
//! ```
//!
//! Scalar grids use one channel, vector fields one channel per axis. 2D
//! binary (P5) PGM files are also accepted on input and rescaled to [0, 1].

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{parse_failure, Error, Result};
use crate::grid::{Geometry, Grid, VectorField};

const MAGIC: &str = "PFG1";

/// Raw contents of a PFG file.
#[derive(Debug, Clone, PartialEq)]
pub struct PfgData {
    pub geometry: Geometry,
    /// One flat array per channel.
    pub channels: Vec<Vec<f64>>,
}

pub fn encode(geometry: &Geometry, channels: &[&[f64]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * geometry.len() * channels.len());
    let fmt = |v: &[String]| v.join(" ");
    let dims: Vec<String> = geometry.dims().iter().map(|d| d.to_string()).collect();
    let spacing: Vec<String> = geometry.spacing().iter().map(|s| s.to_string()).collect();
    out.extend_from_slice(
        format!(
            "{MAGIC}\ndims: {} {}\nspacing: {}\nchannels: {}\n\n",
            geometry.ndim(),
            fmt(&dims),
            fmt(&spacing),
            channels.len()
        )
        .as_bytes(),
    );
    for ch in channels {
        for &v in ch.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<PfgData> {
    let bad = |reason: String| parse_failure(path, reason);
    let mut lines = Vec::new();
    let mut pos = 0;
    // Header: four lines then a blank line.
    while lines.len() < 5 {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| bad("header is not UTF-8".into()))?;
        lines.push(line.trim_end_matches('\r').to_string());
        pos += end + 1;
    }
    if lines[0] != MAGIC {
        return Err(bad(format!("bad magic {:?}", lines[0])));
    }
    let field = |line: &str, key: &str| -> Result<Vec<String>> {
        let rest = line
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(':'))
            .ok_or_else(|| bad(format!("expected `{key}:` line, got {line:?}")))?;
        Ok(rest.split_whitespace().map(str::to_string).collect())
    };
    let dims_tokens = field(&lines[1], "dims")?;
    let ndim: usize = dims_tokens
        .first()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("missing axis count".into()))?;
    if dims_tokens.len() != ndim + 1 {
        return Err(bad(format!("expected {ndim} dims")));
    }
    let dims = dims_tokens[1..]
        .iter()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| bad(format!("bad dims: {e}")))?;
    let spacing = field(&lines[2], "spacing")?
        .iter()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| bad(format!("bad spacing: {e}")))?;
    let channels: usize = field(&lines[3], "channels")?
        .first()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("bad channel count".into()))?;
    if !lines[4].is_empty() {
        return Err(bad("missing blank line after header".into()));
    }
    let geometry = Geometry::new(&dims, &spacing).map_err(|e| bad(e.to_string()))?;
    let n = geometry.len();
    let payload = &bytes[pos..];
    if payload.len() != 4 * n * channels {
        return Err(bad(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            4 * n * channels
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite sample".into()));
    }
    let channels = if n == 0 {
        vec![Vec::new(); channels]
    } else {
        values.chunks(n).map(<[f64]>::to_vec).collect()
    };
    Ok(PfgData { geometry, channels })
}

pub fn read(path: &Path) -> Result<PfgData> {
    let bytes = fs::read(path)?;
    decode(&bytes, path)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write(path: &Path, geometry: &Geometry, channels: &[&[f64]]) -> Result<()> {
    write_atomic(path, &encode(geometry, channels))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_grid(path: &Path, grid: &Grid) -> Result<()> {
    write(path, grid.geometry(), &[grid.data()])
}

pub fn write_field(path: &Path, field: &VectorField) -> Result<()> {
    let comps: Vec<&[f64]> = field.components().iter().map(Vec::as_slice).collect();
    write(path, field.geometry(), &comps)
}

/// Reads a single-channel PFG, or a binary PGM (by extension or magic).
pub fn read_grid(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P5") {
        return decode_pgm(&bytes, path);
    }
    let data = decode(&bytes, path)?;
    if data.channels.len() != 1 {
        return Err(parse_failure(
            path,
            format!("expected 1 channel, found {}", data.channels.len()),
        ));
    }
    let PfgData {
        geometry,
        mut channels,
    } = data;
    Grid::from_vec(geometry, channels.remove(0))
}

/// Reads a PFG with one channel per axis.
pub fn read_field(path: &Path) -> Result<VectorField> {
    let data = read(path)?;
    if data.channels.len() != data.geometry.ndim() {
        return Err(parse_failure(
            path,
            format!(
                "vector field needs {} channels, found {}",
                data.geometry.ndim(),
                data.channels.len()
            ),
        ));
    }
    VectorField::from_components(data.geometry, data.channels)
}

fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Grid> {
    let bad = |reason: &str| parse_failure(path, reason.to_string());
    // Header tokens: magic, width, height, maxval, with '#' comments.
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let parse = |t: &str| t.parse::<usize>().map_err(|_| bad("bad PGM header value"));
    let width = parse(&tokens[1])?;
    let height = parse(&tokens[2])?;
    let maxval = parse(&tokens[3])?;
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let pixels = bytes
        .get(pos..pos + width * height)
        .ok_or_else(|| bad("truncated PGM payload"))?;
    let geom = Geometry::isotropic(&[width, height]).map_err(|e| bad(&e.to_string()))?;
    let data = pixels.iter().map(|&p| p as f64 / maxval as f64).collect();
    Grid::from_vec(geom, data)
}

/// Error for a field file whose channel count does not match its geometry.
pub fn ensure_channels(data: &PfgData, expected: usize, path: &Path) -> Result<()> {
    if data.channels.len() != expected {
        return Err(Error::ParseFailure {
            path: path.to_path_buf(),
            reason: format!(
                "expected {expected} channels, found {}",
                data.channels.len()
            ),
        });
    }
    Ok(())
}
