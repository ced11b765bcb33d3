//! Dataset handling: manifests, PPM image decoding, bilinear resize,
//! augmentation, imbalance-aware sampling and a synthetic dataset generator.
//!
//! A dataset is a plain-text manifest of `relative/path.ppm,<label>` lines
//! (LF endings, no header) next to binary PPM (P6, maxval 255) images.
//! Pixels are kept as `(3,H,W)` tensors scaled to [0,1]; every operation in
//! this module preserves that range.

mod augment;
mod ppm;
mod sampler;
mod synth;

pub use augment::{augment, AugmentPolicy};
pub use ppm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm};
pub use sampler::{rebalance, RebalanceMode, WeightedSampler};
pub use synth::{synth_images, write_synth_dataset};

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::tensor::{Tensor, TensorError};
use crate::NUM_CLASSES;

#[derive(Debug)]
pub enum DataError {
    Io(io::Error),
    /// Manifest parse failure with its 1-based line number.
    Parse {
        line: usize,
        detail: String,
    },
    Decode(String),
    Tensor(TensorError),
    Invalid(String),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io(e) => write!(f, "io error: {e}"),
            DataError::Parse { line, detail } => write!(f, "manifest line {line}: {detail}"),
            DataError::Decode(d) => write!(f, "image decode error: {d}"),
            DataError::Tensor(e) => write!(f, "{e}"),
            DataError::Invalid(d) => write!(f, "{d}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<io::Error> for DataError {
    fn from(e: io::Error) -> Self {
        DataError::Io(e)
    }
}

impl From<TensorError> for DataError {
    fn from(e: TensorError) -> Self {
        DataError::Tensor(e)
    }
}

/// One manifest entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: String,
    pub label: usize,
}

/// Label-mapped image records plus per-class totals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub class_counts: [usize; NUM_CLASSES],
}

impl DatasetManifest {
    pub fn from_records(records: Vec<ManifestRecord>) -> Result<Self, DataError> {
        let mut class_counts = [0usize; NUM_CLASSES];
        for r in &records {
            if r.label >= NUM_CLASSES {
                return Err(DataError::Invalid(format!(
                    "label {} out of range 0..{NUM_CLASSES}",
                    r.label
                )));
            }
            class_counts[r.label] += 1;
        }
        Ok(DatasetManifest {
            records,
            class_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Parse manifest text: one `path,label` per line, labels in 0..7.
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.is_empty() {
                return Err(DataError::Parse {
                    line: lineno,
                    detail: "empty line".into(),
                });
            }
            let (path, label) = line.rsplit_once(',').ok_or_else(|| DataError::Parse {
                line: lineno,
                detail: format!("expected `path,label`, got {line:?}"),
            })?;
            if path.is_empty() {
                return Err(DataError::Parse {
                    line: lineno,
                    detail: "empty path".into(),
                });
            }
            let label: usize = label.trim().parse().map_err(|_| DataError::Parse {
                line: lineno,
                detail: format!("label {label:?} is not an integer"),
            })?;
            if label >= NUM_CLASSES {
                return Err(DataError::Parse {
                    line: lineno,
                    detail: format!("label {label} out of range 0..{NUM_CLASSES}"),
                });
            }
            records.push(ManifestRecord {
                path: path.to_string(),
                label,
            });
        }
        Self::from_records(records)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Serialize back to manifest text (LF line endings).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!("{},{}\n", r.path, r.label));
        }
        out
    }
}

/// One decoded, resized training example; pixels in [0,1].
#[derive(Clone, Debug)]
pub struct Sample {
    pub pixels: Tensor,
    pub label: usize,
}

/// Load every record of a manifest as a resized sample. Record paths are
/// resolved relative to `root`.
pub fn load_samples(
    manifest: &DatasetManifest,
    root: &Path,
    size: usize,
) -> Result<Vec<Sample>, DataError> {
    let mut samples = Vec::with_capacity(manifest.len());
    for record in &manifest.records {
        let full: PathBuf = root.join(&record.path);
        let bytes = fs::read(&full).map_err(|e| {
            DataError::Invalid(format!("cannot read {}: {e}", full.display()))
        })?;
        let img = decode_ppm(&bytes)?;
        let (h, w) = (img.shape()[1], img.shape()[2]);
        let pixels = if h == size && w == size {
            img
        } else {
            resize_bilinear(&img, size, size)?
        };
        samples.push(Sample {
            pixels,
            label: record.label,
        });
    }
    Ok(samples)
}

/// Stack samples into one `(N,3,S,S)` batch tensor plus the label vector.
pub fn stack_samples(samples: &[&Sample]) -> Result<(Tensor, Vec<usize>), DataError> {
    let first = samples
        .first()
        .ok_or_else(|| DataError::Invalid("empty batch".into()))?;
    let shape = first.pixels.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.pixels.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        if s.pixels.shape() != shape.as_slice() {
            return Err(DataError::Invalid("mixed image shapes in batch".into()));
        }
        data.extend_from_slice(s.pixels.data());
        labels.push(s.label);
    }
    let mut full_shape = vec![samples.len()];
    full_shape.extend_from_slice(&shape);
    Ok((Tensor::new(&full_shape, data)?, labels))
}

/// Bilinear resize of a `(C,H,W)` image with half-pixel sample centers.
/// Constant inputs stay constant; same-size resize is the identity.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor, DataError> {
    let (channels, in_h, in_w) = match img.shape() {
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(DataError::Invalid(format!(
                "resize expects (C,H,W), got {other:?}"
            )))
        }
    };
    if out_h == 0 || out_w == 0 {
        return Err(DataError::Invalid("resize target must be positive".into()));
    }
    let scale_y = in_h as f64 / out_h as f64;
    let scale_x = in_w as f64 / out_w as f64;
    let data = img.data();
    let mut out = vec![0.0; channels * out_h * out_w];
    for y in 0..out_h {
        let src_y = ((y as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (in_h - 1) as f64);
        let y0 = src_y.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let wy = src_y - y0 as f64;
        for x in 0..out_w {
            let src_x = ((x as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (in_w - 1) as f64);
            let x0 = src_x.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let wx = src_x - x0 as f64;
            for c in 0..channels {
                let plane = &data[c * in_h * in_w..][..in_h * in_w];
                let v = plane[y0 * in_w + x0] * (1.0 - wy) * (1.0 - wx)
                    + plane[y0 * in_w + x1] * (1.0 - wy) * wx
                    + plane[y1 * in_w + x0] * wy * (1.0 - wx)
                    + plane[y1 * in_w + x1] * wy * wx;
                out[(c * out_h + y) * out_w + x] = v;
            }
        }
    }
    Ok(Tensor::new(&[channels, out_h, out_w], out)?)
}
