//! IDX container reader/writer (big-endian, `0x0803` images, `0x0801` labels).

use std::fs;
use std::io;
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Raw contents of an image file: `count` images of `rows * cols` bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn truncated(what: &str) -> Error {
    Error::Io(io::Error::new(
        io::ErrorKind::UnexpectedEof,
        format!("{what} truncated"),
    ))
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| truncated(what))
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, "image header")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "image file magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "image header")? as usize;
    let rows = be_u32(bytes, 8, "image header")? as usize;
    let cols = be_u32(bytes, 12, "image header")? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(truncated("image data"));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body[..need].to_vec(),
    })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "label header")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!(
            "label file magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "label header")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(truncated("label data"));
    }
    Ok(body[..count].to_vec())
}

pub fn read_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    parse_images(&fs::read(path)?)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    parse_labels(&fs::read(path)?)
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGE_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_errors() {
        let imgs = IdxImages {
            count: 1,
            rows: 2,
            cols: 2,
            pixels: vec![0, 1, 2, 3],
        };
        let mut bytes = encode_images(&imgs);
        assert_eq!(parse_images(&bytes).unwrap(), imgs);

        bytes.pop();
        assert!(matches!(parse_images(&bytes), Err(Error::Io(_))));
        assert!(matches!(parse_images(&bytes[..6]), Err(Error::Io(_))));

        let labels = encode_labels(&[3, 4]);
        assert!(matches!(parse_images(&labels), Err(Error::Format(_))));
        assert!(matches!(parse_labels(&encode_images(&imgs)), Err(Error::Format(_))));
        assert!(matches!(parse_labels(&labels[..9]), Err(Error::Io(_))));
    }
}
