//! IDX files: big-endian header, unsigned-byte payload.
//!
//! Images use magic `0x00000803` (`n, rows, cols`); colour sets are written
//! with `0x00000804` (`n, rows, cols, channels`). Labels use `0x00000801`.

use std::fs;
use std::path::Path;

use crate::data::{denormalize_byte, normalize_byte, Domain, LabeledImageSet, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const IMAGES_GRAY: u32 = 0x0000_0803;
const IMAGES_COLOUR: u32 = 0x0000_0804;
const LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Images as `[n, rows, cols, channels]` normalised to `[-1, 1]`.
pub fn read_idx_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    let magic = be_u32(bytes, 0, "images")?;
    let dims = match magic {
        IMAGES_GRAY => 3,
        IMAGES_COLOUR => 4,
        other => {
            return Err(Error::Format(format!(
                "images: bad magic {other:#010x}, expected {IMAGES_GRAY:#010x}"
            )))
        }
    };
    let mut shape = (0..dims)
        .map(|i| be_u32(bytes, 4 + 4 * i, "images").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    if dims == 3 {
        shape.push(1);
    }
    let header = 4 + 4 * dims;
    let n: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != n {
        return Err(Error::Format(format!(
            "images: payload has {} bytes, header declares {n}",
            payload.len()
        )));
    }
    Tensor::new(shape, payload.iter().map(|&b| normalize_byte(b)).collect())
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != LABELS {
        return Err(Error::Format(format!(
            "labels: bad magic {magic:#010x}, expected {LABELS:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Format(format!(
            "labels: payload has {} bytes, header declares {n}",
            payload.len()
        )));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Loads an image/label file pair. The class count is one past the largest label.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<LabeledImageSet> {
    let imgs = read_idx_images(&fs::read(images)?)?;
    let labs = read_idx_labels(&fs::read(labels)?)?;
    if imgs.rows() != labs.len() {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            imgs.rows(),
            labs.len()
        )));
    }
    let classes = labs.iter().max().map_or(1, |m| m + 1);
    LabeledImageSet::new(imgs, labs, classes, Domain::Finetune, Split::Train)
}

pub fn write_idx(
    set: &LabeledImageSet,
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
) -> Result<()> {
    let [h, w, c] = set.image_shape();
    let mut img = Vec::with_capacity(20 + set.images.len());
    let n = u32::try_from(set.len()).map_err(|_| Error::Format("too many images".into()))?;
    let colour = c != 1;
    img.extend_from_slice(&(if colour { IMAGES_COLOUR } else { IMAGES_GRAY }).to_be_bytes());
    img.extend_from_slice(&n.to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    if colour {
        img.extend_from_slice(&(c as u32).to_be_bytes());
    }
    img.extend(set.images.data().iter().map(|&v| denormalize_byte(v)));
    fs::write(images, img)?;

    let mut lab = Vec::with_capacity(8 + set.len());
    lab.extend_from_slice(&LABELS.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    for &l in &set.labels {
        lab.push(u8::try_from(l).map_err(|_| Error::Format(format!("label {l} exceeds a byte")))?);
    }
    fs::write(labels, lab)?;
    Ok(())
}
