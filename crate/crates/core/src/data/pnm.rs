//! Binary netpbm images: P5 graymaps for masks and saliency maps, P6
//! pixmaps for RGB images. Only 8-bit data (maxval 255) is accepted.

use std::path::Path;

use crate::error::{Error, Result};
use crate::maps::{quantize, BinaryMask, Plane, SaliencyMap};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Gray,
    Rgb,
}

impl Kind {
    fn channels(self) -> usize {
        match self {
            Kind::Gray => 1,
            Kind::Rgb => 3,
        }
    }

    fn magic(self) -> &'static str {
        match self {
            Kind::Gray => "P5",
            Kind::Rgb => "P6",
        }
    }
}

/// Decoded image: interleaved 8-bit samples, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub kind: Kind,
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Parses a P5 or P6 file. `#` comments are accepted between header tokens.
pub fn parse(bytes: &[u8]) -> std::result::Result<Pnm, String> {
    let mut pos = 0;
    let token = |pos: &mut usize| -> std::result::Result<String, String> {
        loop {
            match bytes.get(*pos) {
                Some(b'#') => {
                    while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                        *pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => *pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = *pos;
        while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
            *pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let kind = match token(&mut pos)?.as_str() {
        "P5" => Kind::Gray,
        "P6" => Kind::Rgb,
        other => return Err(format!("unsupported magic `{other}`")),
    };
    let mut number = |what: &str| -> std::result::Result<usize, String> {
        let t = token(&mut pos)?;
        t.parse::<usize>()
            .map_err(|_| format!("bad {what} `{t}`"))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval} (only 255)"));
    }
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}×{height}"));
    }
    // exactly one whitespace byte separates the header from the payload
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err("missing separator after header".into());
    }
    pos += 1;
    let need = width * height * kind.channels();
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(format!("truncated payload: {} of {need} bytes", payload.len()));
    }
    Ok(Pnm {
        kind,
        width,
        height,
        data: payload[..need].to_vec(),
    })
}

pub fn encode(img: &Pnm) -> Vec<u8> {
    let mut out = format!("{}\n{} {}\n255\n", img.kind.magic(), img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn read(path: &Path, kind: Kind) -> Result<Pnm> {
    let bytes = std::fs::read(path)?;
    let img = parse(&bytes).map_err(|m| format_err(path, m))?;
    if img.kind != kind {
        return Err(format_err(path, format!("expected {}, found {}", kind.magic(), img.kind.magic())));
    }
    Ok(img)
}

pub fn write(path: &Path, img: &Pnm) -> Result<()> {
    std::fs::write(path, encode(img))?;
    Ok(())
}

/// Reads a graymap as a mask: bytes ≥ 128 are foreground.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = read(path, Kind::Gray)?;
    BinaryMask::new(img.height, img.width, img.data.iter().map(|&b| (b >= 128) as u8).collect())
}

pub fn write_mask(path: &Path, m: &BinaryMask) -> Result<()> {
    write_gray(path, m.height(), m.width(), m.data().iter().map(|&v| v * 255).collect())
}

/// Reads a graymap as a saliency map with values `byte / 255`.
pub fn read_saliency(path: &Path) -> Result<SaliencyMap> {
    let img = read(path, Kind::Gray)?;
    let data = img.data.iter().map(|&b| b as f64 / 255.0).collect();
    SaliencyMap::new(Plane::new(img.height, img.width, data)?)
}

/// Writes `round(255·v)` per pixel.
pub fn write_saliency(path: &Path, s: &SaliencyMap) -> Result<()> {
    let (h, w) = s.dims();
    write_gray(path, h, w, s.quantized())
}

pub fn write_gray(path: &Path, height: usize, width: usize, data: Vec<u8>) -> Result<()> {
    write(
        path,
        &Pnm {
            kind: Kind::Gray,
            width,
            height,
            data,
        },
    )
}

/// Reads a pixmap as a 3×H×W tensor in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor<f64>> {
    let img = read(path, Kind::Rgb)?;
    let plane = img.width * img.height;
    Ok(Tensor::from_fn([3, img.height, img.width], |i| {
        let (c, p) = (i / plane, i % plane);
        img.data[p * 3 + c] as f64 / 255.0
    }))
}

/// Writes a 3×H×W tensor in `[0, 1]` as a pixmap.
pub fn write_rgb(path: &Path, image: &Tensor<f64>) -> Result<()> {
    let &[3, height, width] = image.shape() else {
        return Err(Error::invalid("write_rgb", format!("expected 3×H×W, got {:?}", image.shape())));
    };
    let plane = height * width;
    let d = image.data();
    let data = (0..plane * 3).map(|i| quantize(d[(i % 3) * plane + i / 3])).collect();
    write(
        path,
        &Pnm {
            kind: Kind::Rgb,
            width,
            height,
            data,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comments_parses() {
        let mut bytes = b"P5\n# made by hand\n3 # width\n2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 1, 2, 3, 4, 5]);
        let img = parse(&bytes).unwrap();
        assert_eq!((img.width, img.height), (3, 2));
        assert_eq!(img.data, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(parse(b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0").unwrap_err().contains("maxval"));
        assert!(parse(b"P5\n2 2\n255\n\0\0\0").unwrap_err().contains("truncated"));
        assert!(parse(b"P3\n2 2\n255\n").unwrap_err().contains("magic"));
        assert!(parse(b"P5\n2").unwrap_err().contains("truncated"));
        assert!(parse(b"P5\nx 2\n255\n").unwrap_err().contains("width"));
    }
}
