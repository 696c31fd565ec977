//! IDX reader and writer (the MNIST container format).
//!
//! Layout: a big-endian magic word whose low byte is the rank, one
//! big-endian `u32` per dimension, then raw unsigned bytes.

use std::fs;
use std::path::Path;

use super::ImageDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_MAGIC_3: u32 = 0x0000_0803;
const IMAGE_MAGIC_4: u32 = 0x0000_0804;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Checks the magic and returns `(dims, payload)`.
fn split<'a>(bytes: &'a [u8], accepted: &[u32], what: &str) -> Result<(Vec<usize>, &'a [u8])> {
    let magic = read_u32(bytes, 0, what)?;
    if !accepted.contains(&magic) {
        return Err(Error::Format(format!(
            "{what}: bad magic 0x{magic:08x}"
        )));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|i| read_u32(bytes, 4 + 4 * i, what).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let payload = &bytes[4 + 4 * rank..];
    let expected: usize = dims.iter().product();
    if payload.len() < expected {
        return Err(Error::Format(format!(
            "{what}: truncated, expected {expected} data bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "{what}: {} trailing bytes",
            payload.len() - expected
        )));
    }
    Ok((dims, payload))
}

/// Parses an image file into `[N, C, H, W]`; rank-3 files get `C = 1`.
pub fn parse_images(bytes: &[u8]) -> Result<Tensor> {
    let (dims, payload) = split(bytes, &[IMAGE_MAGIC_3, IMAGE_MAGIC_4], "image file")?;
    let shape = match dims[..] {
        [n, h, w] => vec![n, 1, h, w],
        [n, c, h, w] => vec![n, c, h, w],
        _ => unreachable!("rank fixed by magic"),
    };
    let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(shape, data)
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (_, payload) = split(bytes, &[LABEL_MAGIC], "label file")?;
    Ok(payload.iter().map(|&b| b as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an image/label pair. The class count is `max(label) + 1`.
pub fn load_idx(image_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<ImageDataset> {
    let image_path = image_path.as_ref();
    let images = parse_images(&read(image_path)?)?;
    let labels = parse_labels(&read(label_path.as_ref())?)?;
    if labels.len() != images.shape()[0] {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            images.shape()[0],
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let name = image_path
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    ImageDataset::new(images, labels, classes, name)
}

fn header(magic: u32, dims: &[usize]) -> Result<Vec<u8>> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    Ok(out)
}

/// Single-channel datasets are written as rank 3, others as rank 4.
pub fn encode_images(ds: &ImageDataset) -> Result<Vec<u8>> {
    let [c, h, w] = ds.image_dims();
    let mut out = if c == 1 {
        header(IMAGE_MAGIC_3, &[ds.len(), h, w])?
    } else {
        header(IMAGE_MAGIC_4, &[ds.len(), c, h, w])?
    };
    out.extend(ds.images().data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

pub fn encode_labels(ds: &ImageDataset) -> Result<Vec<u8>> {
    let mut out = header(LABEL_MAGIC, &[ds.len()])?;
    for &l in ds.labels() {
        let b = u8::try_from(l).map_err(|_| Error::Format(format!("label {l} does not fit a byte")))?;
        out.push(b);
    }
    Ok(out)
}

pub fn write_idx(ds: &ImageDataset, image_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<()> {
    let (ip, lp) = (image_path.as_ref(), label_path.as_ref());
    let images = encode_images(ds)?;
    let labels = encode_labels(ds)?;
    fs::write(ip, images).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, labels).map_err(|e| Error::io(lp, e))
}
