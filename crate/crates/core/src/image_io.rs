//! 8-bit portable graymap/pixmap export and parsing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Dims, ImageGrid, RangeTag};

/// Byte for one value: model space `[-1, 1]` maps by `(v+1)/2·255`, memory
/// space `[0, 1]` by `v·255`, both rounded half up and clamped.
pub fn quantize(v: f64, range: RangeTag) -> u8 {
    let scaled = match range {
        RangeTag::Memory => v * 255.0,
        _ => (v + 1.0) / 2.0 * 255.0,
    };
    (scaled + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn dequantize(b: u8, range: RangeTag) -> f64 {
    match range {
        RangeTag::Memory => b as f64 / 255.0,
        _ => b as f64 / 255.0 * 2.0 - 1.0,
    }
}

/// Encodes a 1-channel grid as P5 or a 3-channel grid as P6, with an optional
/// comment line in the header.
pub fn encode(grid: &ImageGrid, comment: Option<&str>) -> Result<Vec<u8>> {
    let d = grid.dims();
    let magic = match d.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::InvalidArgument(format!("cannot export {c}-channel image"))),
    };
    let mut out = Vec::with_capacity(d.len() + 64);
    out.extend_from_slice(magic.as_bytes());
    out.push(b'\n');
    if let Some(c) = comment {
        for line in c.lines() {
            out.extend_from_slice(format!("# {line}\n").as_bytes());
        }
    }
    out.extend_from_slice(format!("{} {}\n255\n", d.width, d.height).as_bytes());
    out.extend(grid.values().iter().map(|&v| quantize(v, grid.range())));
    Ok(out)
}

pub fn export_image(grid: &ImageGrid, path: &Path, comment: Option<&str>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode(grid, comment)?)?;
    Ok(())
}

/// Parses a binary P5/P6 file back to a grid in `range`.
pub fn decode(bytes: &[u8], range: RangeTag) -> Result<ImageGrid> {
    let bad = |m: &str| Error::InvalidArgument(format!("portable pixmap: {m}"));
    let mut pos = 0usize;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?.to_string());
    }
    pos += 1;
    let channels = match tokens[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(bad(&format!("unsupported magic {m}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad number {s}")));
    let (width, height, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit maxval 255 is supported"));
    }
    let dims = Dims::new(height, width, channels);
    let data = bytes.get(pos..pos + dims.len()).ok_or_else(|| bad("truncated pixel data"))?;
    ImageGrid::new(dims, data.iter().map(|&b| dequantize(b, range)).collect(), range)
}

pub fn read_image(path: &Path, range: RangeTag) -> Result<ImageGrid> {
    decode(&fs::read(path)?, range)
}
