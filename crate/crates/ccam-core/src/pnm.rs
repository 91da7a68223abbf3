//! Binary PNM codecs: P6 (RGB) for images, P5 (grayscale) for masks and CAM
//! dumps. Writers emit a fixed canonical header so identical pixel content
//! yields identical bytes.

use crate::error::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// row-major, 3 bytes per pixel
    pub pixels: Vec<u8>,
}

pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    debug_assert_eq!(img.pixels.len(), img.width * img.height * 3);
    let mut buf = Vec::with_capacity(img.pixels.len() + 32);
    write!(buf, "P6\n{} {}\n255\n", img.width, img.height).expect("vec write");
    buf.extend_from_slice(&img.pixels);
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    debug_assert_eq!(img.pixels.len(), img.width * img.height);
    let mut buf = Vec::with_capacity(img.pixels.len() + 32);
    write!(buf, "P5\n{} {}\n255\n", img.width, img.height).expect("vec write");
    buf.extend_from_slice(&img.pixels);
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, data) = parse_pnm(&bytes, b"P6", 3, path)?;
    Ok(RgbImage {
        width: w,
        height: h,
        pixels: data,
    })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, data) = parse_pnm(&bytes, b"P5", 1, path)?;
    Ok(GrayImage {
        width: w,
        height: h,
        pixels: data,
    })
}

fn parse_pnm(bytes: &[u8], magic: &[u8], channels: usize, path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0usize;
    let next_token = |pos: &mut usize| -> Result<Vec<u8>> {
        // skip whitespace and '#' comments
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
        if start == *pos {
            return Err(Error::Data(format!(
                "{}: truncated PNM header",
                path.display()
            )));
        }
        Ok(bytes[start..*pos].to_vec())
    };

    let tok = next_token(&mut pos)?;
    if tok != magic {
        return Err(Error::Data(format!(
            "{}: expected {} magic, found {:?}",
            path.display(),
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&tok)
        )));
    }
    let parse_num = |t: Vec<u8>| -> Result<usize> {
        String::from_utf8_lossy(&t)
            .parse::<usize>()
            .map_err(|_| Error::Data(format!("{}: bad PNM header number", path.display())))
    };
    let w = parse_num(next_token(&mut pos)?)?;
    let h = parse_num(next_token(&mut pos)?)?;
    let maxval = parse_num(next_token(&mut pos)?)?;
    if maxval != 255 {
        return Err(Error::Data(format!(
            "{}: unsupported maxval {maxval} (only 255)",
            path.display()
        )));
    }
    // exactly one whitespace byte separates header from raster
    pos += 1;
    let need = w * h * channels;
    if bytes.len() < pos || bytes.len() - pos < need {
        return Err(Error::Data(format!(
            "{}: truncated raster ({} bytes present, {} needed)",
            path.display(),
            bytes.len().saturating_sub(pos),
            need
        )));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let img = RgbImage {
            width: 3,
            height: 2,
            pixels: (0u8..18).collect(),
        };
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.width, 3);
        assert_eq!(back.height, 2);
        assert_eq!(back.pixels, img.pixels);
    }

    #[test]
    fn pgm_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let img = GrayImage {
            width: 4,
            height: 4,
            pixels: vec![255; 16],
        };
        write_pgm(&path, &img).unwrap();
        assert_eq!(read_pgm(&path).unwrap().pixels, img.pixels);

        // Chop off raster bytes: must surface a data error.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_pgm(&path), Err(Error::Data(_))));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        std::fs::write(&path, b"P6\n1 1\n255\nabc").unwrap();
        assert!(matches!(read_pgm(&path), Err(Error::Data(_))));
    }
}
