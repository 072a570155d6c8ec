//! IDX container (big-endian magic, big-endian u32 extents, raw u8 payload).

use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk =
            self.bytes.get(self.pos..end).ok_or_else(|| Error::Format(format!("truncated IDX header ({what})")))?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).ok_or_else(|| Error::Format("IDX size overflow".into()))?;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| {
            Error::Format(format!("truncated IDX payload: need {len} bytes, have {}", self.bytes.len() - self.pos))
        })?;
        self.pos = end;
        Ok(chunk)
    }
}

fn check_magic(found: u32, expected: u32) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(Error::Format(format!("bad IDX magic {found:#010x}, expected {expected:#010x}")))
    }
}

/// Parses an IDX image file into `[rows, cols]` tensors scaled by 1/255.
pub fn read_idx_images(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader { bytes, pos: 0 };
    check_magic(r.u32("magic")?, IMAGE_MAGIC)?;
    let count = r.u32("count")? as usize;
    let rows = r.u32("rows")? as usize;
    let cols = r.u32("cols")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Format("zero image extent".into()));
    }
    let payload = r.take(count * rows * cols)?;
    Ok(payload
        .chunks_exact(rows * cols)
        .map(|px| {
            let values = px.iter().map(|&b| f64::from(b) / 255.0).collect();
            Tensor::new(vec![rows, cols], values).expect("extent checked")
        })
        .collect())
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader { bytes, pos: 0 };
    check_magic(r.u32("magic")?, LABEL_MAGIC)?;
    let count = r.u32("count")? as usize;
    Ok(r.take(count)?.iter().map(|&b| b as usize).collect())
}

/// Loads an image/label IDX pair. The class count is one past the largest label.
pub fn load_idx(image_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = read_idx_images(&fs::read(image_path)?)?;
    let labels = read_idx_labels(&fs::read(label_path)?)?;
    if images.len() != labels.len() {
        return Err(Error::Format(format!("image count {} does not match label count {}", images.len(), labels.len())));
    }
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(images, labels, classes)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Serializes `[rows, cols]` (or flat, as a single row) images.
pub fn write_idx_images(images: &[Tensor]) -> Result<Vec<u8>> {
    let (rows, cols) = images.first().map_or((0, 0), |im| im.plane());
    if images.iter().any(|im| im.plane() != (rows, cols) || im.len() != rows * cols) {
        return Err(Error::invalid("IDX images must share a single 2-D plane"));
    }
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for word in [IMAGE_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    for im in images {
        out.extend(im.values().iter().map(|&v| quantize(v)));
    }
    Ok(out)
}

pub fn write_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    if labels.iter().any(|&l| l > u8::MAX as usize) {
        return Err(Error::invalid("IDX labels must fit in one byte"));
    }
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    Ok(out)
}

/// Writes a dataset as an IDX image/label pair.
pub fn write_idx(ds: &Dataset, image_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<()> {
    fs::write(image_path, write_idx_images(ds.images())?)?;
    fs::write(label_path, write_idx_labels(ds.labels())?)?;
    Ok(())
}
