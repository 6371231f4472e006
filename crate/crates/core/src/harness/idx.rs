//! IDX image/label files (optionally gzip-compressed).

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use sha2::{Digest, Sha256};

use super::data::{Dataset, Provenance, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw file bytes and their SHA-256; gzip streams are decompressed.
fn read_maybe_gz(path: &Path) -> Result<(Vec<u8>, String)> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = hex::encode(Sha256::digest(&raw));
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        return Ok((out, digest));
    }
    Ok((raw, digest))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], offset: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    bytes.get(offset..offset + len).ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        expected: offset + len,
        found: bytes.len(),
    })
}

/// Reads an image file and its label file. Pixels are scaled by `1/255`;
/// the class count is `max label + 1` (at least 2).
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let (img, img_digest) = read_maybe_gz(images_path)?;
    let (lab, lab_digest) = read_maybe_gz(labels_path)?;
    check_magic(&img, IMAGES_MAGIC, images_path)?;
    check_magic(&lab, LABELS_MAGIC, labels_path)?;
    let n_img = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let n_lab = be_u32(&lab, 4, labels_path)? as usize;
    if n_img != n_lab {
        return Err(Error::CountMismatch {
            images: n_img,
            labels: n_lab,
        });
    }
    let d = rows * cols;
    let pixels = payload(&img, 16, n_img * d, images_path)?;
    let labels: Vec<usize> = payload(&lab, 8, n_lab, labels_path)?.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    let inputs = Tensor::new(vec![n_img, d], pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    Dataset::new(
        inputs,
        labels,
        classes,
        split,
        Provenance::Idx {
            images_sha256: img_digest,
            labels_sha256: lab_digest,
        },
    )
}
