//! Minimal image codecs: binary PGM (P5) read/write and 8-bit PNG reading.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit grayscale or RGB raster, row-major, interleaved channels.
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

pub fn read_image(path: &Path) -> Result<Raster> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => read_pgm(path),
        Some("png") => read_png(path),
        other => Err(Error::Data(format!(
            "unsupported image extension {:?} for {}",
            other,
            path.display()
        ))),
    }
}

pub fn read_pgm(path: &Path) -> Result<Raster> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data(format!("truncated pgm header in {}", path.display())));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token(&bytes)?;
    if magic != "P5" {
        return Err(Error::Data(format!(
            "{}: expected binary pgm magic P5, got '{magic}'",
            path.display()
        )));
    }
    let width: usize = token(&bytes)?
        .parse()
        .map_err(|_| Error::Data(format!("{}: bad width", path.display())))?;
    let height: usize = token(&bytes)?
        .parse()
        .map_err(|_| Error::Data(format!("{}: bad height", path.display())))?;
    let maxval: usize = token(&bytes)?
        .parse()
        .map_err(|_| Error::Data(format!("{}: bad maxval", path.display())))?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Data(format!("{}: only 8-bit pgm supported", path.display())));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(Error::Data(format!("{}: pixel data truncated", path.display())));
    }
    Ok(Raster {
        width,
        height,
        channels: 1,
        pixels: bytes[pos..pos + need].to_vec(),
    })
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(pixels)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Raster> {
    let decoder = png::Decoder::new(File::open(path)?);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Data(format!(
            "{}: only 8-bit png supported, got {:?}",
            path.display(),
            info.bit_depth
        )));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::Data(format!(
                "{}: unsupported png color type {other:?}",
                path.display()
            )))
        }
    };
    buf.truncate(info.buffer_size());
    Ok(Raster {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        pixels: buf,
    })
}
