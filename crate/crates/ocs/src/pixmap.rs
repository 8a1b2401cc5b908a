//! Binary portable pixmap I/O: P5 (grayscale) and P6 (RGB), maxval 255.
//!
//! Round trips are bit-exact. P5 maps to 1-channel buffers, P6 to
//! 3-channel; nothing else is accepted.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::geometry::ImageBuffer;
use crate::{OcsError, Result};

/// Read a binary P5/P6 pixmap.
pub fn read_pixmap(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path).map_err(|e| OcsError::io(path.display().to_string(), e))?;
    parse_pixmap(&bytes).map_err(|msg| OcsError::format(path.display().to_string(), 0, msg))
}

/// Write `img` as P5 (1 channel) or P6 (3 channels).
pub fn write_pixmap(img: &ImageBuffer, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(img.data().len() + 32);
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    write!(out, "{magic}\n{} {}\n255\n", img.width(), img.height()).expect("vec write");
    out.extend_from_slice(img.data());
    fs::write(path, out).map_err(|e| OcsError::io(path.display().to_string(), e))
}

fn parse_pixmap(bytes: &[u8]) -> std::result::Result<ImageBuffer, String> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos).ok_or("missing magic number")?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format!("unsupported magic {other:?}, want P5 or P6")),
    };
    let width: usize = parse_header_int(bytes, &mut pos, "width")?;
    let height: usize = parse_header_int(bytes, &mut pos, "height")?;
    let maxval: usize = parse_header_int(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(format!("maxval must be 255, got {maxval}"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("missing whitespace after maxval".into());
    }
    pos += 1;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or("dimensions overflow")?;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(format!(
            "truncated payload: want {expected} bytes, have {}",
            payload.len()
        ));
    }
    if payload.len() > expected {
        return Err(format!(
            "trailing bytes after payload: want {expected}, have {}",
            payload.len()
        ));
    }
    ImageBuffer::from_vec(width, height, channels, payload.to_vec()).map_err(|e| e.to_string())
}

fn parse_header_int(
    bytes: &[u8],
    pos: &mut usize,
    what: &str,
) -> std::result::Result<usize, String> {
    let tok = next_token(bytes, pos).ok_or_else(|| format!("missing {what}"))?;
    tok.parse::<usize>()
        .map_err(|_| format!("bad {what} {tok:?}"))
}

/// Next whitespace-delimited header token, skipping `#` comment lines.
fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if *pos > start {
        Some(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    } else {
        None
    }
}
