//! IDX image/label files (the MNIST container format).
//!
//! Images: big-endian magic `0x00000803`, then count, rows and cols as
//! big-endian u32, then `count * rows * cols` raw u8 pixels. Labels: magic
//! `0x00000801`, count, then `count` raw u8 labels.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, IdxError, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Raw contents of an image/label file pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxData {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

struct Cursor<'a> {
    file: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> std::result::Result<&'a [u8], IdxError> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(IdxError::Truncated {
                file: self.file,
                field,
            }),
        }
    }

    fn u32(&mut self, field: &'static str) -> std::result::Result<u32, IdxError> {
        Ok(u32::from_be_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: u32) -> std::result::Result<(), IdxError> {
        let found = self.u32("magic")?;
        if found != expected {
            return Err(IdxError::BadMagic {
                file: self.file,
                expected,
                found,
            });
        }
        Ok(())
    }

    fn finish(&self) -> std::result::Result<(), IdxError> {
        if self.pos != self.bytes.len() {
            return Err(IdxError::TrailingBytes {
                file: self.file,
                extra: self.bytes.len() - self.pos,
            });
        }
        Ok(())
    }
}

/// Returns `(rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), IdxError> {
    let mut c = Cursor {
        file: "images",
        bytes,
        pos: 0,
    };
    c.magic(IMAGE_MAGIC)?;
    let count = c.u32("image count")? as usize;
    let rows = c.u32("rows")? as usize;
    let cols = c.u32("cols")? as usize;
    let n = count.saturating_mul(rows).saturating_mul(cols);
    let pixels = c.take(n, "pixels")?.to_vec();
    c.finish()?;
    Ok((rows, cols, pixels))
}

pub fn parse_labels(bytes: &[u8]) -> std::result::Result<Vec<u8>, IdxError> {
    let mut c = Cursor {
        file: "labels",
        bytes,
        pos: 0,
    };
    c.magic(LABEL_MAGIC)?;
    let count = c.u32("label count")? as usize;
    let labels = c.take(count, "labels")?.to_vec();
    c.finish()?;
    Ok(labels)
}

pub fn parse_idx(images: &[u8], labels: &[u8]) -> std::result::Result<IdxData, IdxError> {
    let (rows, cols, pixels) = parse_images(images)?;
    let labels = parse_labels(labels)?;
    let image_count = pixels.len().checked_div(rows * cols).unwrap_or(0);
    if image_count != labels.len() {
        return Err(IdxError::CountMismatch {
            images: image_count,
            labels: labels.len(),
        });
    }
    Ok(IdxData {
        rows,
        cols,
        pixels,
        labels,
    })
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<IdxData> {
    let img = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lbl = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    Ok(parse_idx(&img, &lbl)?)
}

impl IdxData {
    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn encode_images(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.pixels.len());
        out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        out.extend_from_slice(&(self.count() as u32).to_be_bytes());
        out.extend_from_slice(&(self.rows as u32).to_be_bytes());
        out.extend_from_slice(&(self.cols as u32).to_be_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn encode_labels(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.labels.len());
        out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        out.extend_from_slice(&(self.count() as u32).to_be_bytes());
        out.extend_from_slice(&self.labels);
        out
    }

    /// Images as `[1, rows, cols]` samples with pixels scaled to `[0, 1]`.
    pub fn to_dataset(&self) -> Result<Dataset> {
        let features = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        let labels = self.labels.iter().map(|&l| l as usize).collect();
        Dataset::new(vec![1, self.rows, self.cols], features, labels)
    }
}

pub fn write_idx(data: &IdxData, images: &Path, labels: &Path) -> Result<()> {
    std::fs::write(images, data.encode_images()).map_err(|e| Error::io(images, e))?;
    std::fs::write(labels, data.encode_labels()).map_err(|e| Error::io(labels, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        images.extend_from_slice(&[0, 255, 51, 102, 255, 0, 0, 204]);
        let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        (images, labels)
    }

    #[test]
    fn constructed_pair_parses_exactly() {
        let (img, lbl) = fixture();
        let d = parse_idx(&img, &lbl).unwrap();
        assert_eq!((d.rows, d.cols, d.count()), (2, 2, 2));
        let ds = d.to_dataset().unwrap();
        assert_eq!(ds.sample_shape(), &[1, 2, 2]);
        assert_eq!(ds.labels(), &[7, 3]);
        assert_eq!(ds.features(), &[0.0, 1.0, 0.2, 0.4, 1.0, 0.0, 0.0, 0.8]);
    }

    #[test]
    fn re_encoding_is_byte_identical() {
        let (img, lbl) = fixture();
        let d = parse_idx(&img, &lbl).unwrap();
        assert_eq!(d.encode_images(), img);
        assert_eq!(d.encode_labels(), lbl);
    }

    #[test]
    fn errors_name_the_bad_field() {
        let (img, lbl) = fixture();
        assert_eq!(
            parse_images(&img[..img.len() - 1]),
            Err(IdxError::Truncated {
                file: "images",
                field: "pixels"
            })
        );
        assert_eq!(
            parse_images(&img[..10]),
            Err(IdxError::Truncated {
                file: "images",
                field: "rows"
            })
        );
        assert!(matches!(
            parse_images(&lbl),
            Err(IdxError::BadMagic {
                expected: IMAGE_MAGIC,
                found: LABEL_MAGIC,
                ..
            })
        ));
        assert!(matches!(parse_labels(&img), Err(IdxError::BadMagic { .. })));
        let short_labels = vec![0, 0, 8, 1, 0, 0, 0, 1, 7];
        assert_eq!(
            parse_idx(&img, &short_labels),
            Err(IdxError::CountMismatch { images: 2, labels: 1 })
        );
    }
}
