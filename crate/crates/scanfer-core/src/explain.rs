//! Grad-CAM heatmaps from the deep tap point.
//!
//! The class evidence carried by the deep pathway is the sum of the
//! context-branch logits for the target class; its gradient with respect to
//! the deep tap activation weighs each channel (spatial mean), the weighted
//! channel sum is rectified, normalized to peak 1, and upsampled to the
//! input resolution.

use crate::data::{encode_pgm, encode_ppm, resize_bilinear};
use crate::model::FerModel;
use crate::tensor::{invalid_err, shape_err, Tape, Tensor, TensorError};

/// A normalized attention map: values in [0,1] at input resolution, peak 1
/// unless identically zero.
#[derive(Clone, Debug)]
pub struct Heatmap {
    /// `(H,W)` map at the upsampled (input) resolution.
    pub values: Tensor,
    /// Spatial dims of the tap activation the map came from.
    pub source_h: usize,
    pub source_w: usize,
}

/// Compute the Grad-CAM heatmap of `target_class` for one `(3,S,S)` image.
pub fn gradcam(model: &FerModel, image: &Tensor, target_class: usize) -> Result<Heatmap, TensorError> {
    if target_class >= model.config.num_classes {
        return Err(invalid_err(
            "gradcam",
            format!("class {target_class} out of range 0..{}", model.config.num_classes),
        ));
    }
    if image.rank() != 3 {
        return Err(shape_err("gradcam", "expected a single (3,S,S) image"));
    }

    let mut tape = Tape::new();
    let out = model.forward_eval(&mut tape, image, None)?;

    // class evidence downstream of the deep tap: sum of the block logits
    let mut target = tape.pick(out.cci_logits[0], target_class)?;
    for &logits in &out.cci_logits[1..] {
        let picked = tape.pick(logits, target_class)?;
        target = tape.add(target, picked)?;
    }
    tape.backward(target)?;

    let activation = tape.value(out.deep_activation).to_vec();
    let grad = tape.grad(out.deep_activation).to_vec();
    let shape = tape.shape(out.deep_activation).to_vec();
    let (channels, h, w) = (shape[0], shape[1], shape[2]);
    let spatial = h * w;

    // channel weights: spatial mean of the gradient
    let mut weights = vec![0.0; channels];
    for c in 0..channels {
        weights[c] = grad[c * spatial..(c + 1) * spatial].iter().sum::<f64>() / spatial as f64;
    }

    // rectified weighted channel sum
    let mut map = vec![0.0; spatial];
    for c in 0..channels {
        let plane = &activation[c * spatial..(c + 1) * spatial];
        let alpha = weights[c];
        for (m, &a) in map.iter_mut().zip(plane) {
            *m += alpha * a;
        }
    }
    for m in map.iter_mut() {
        *m = m.max(0.0);
    }
    normalize_peak(&mut map);

    let size = model.input_size();
    let wrapped = Tensor::new(&[1, h, w], map)?;
    let scaled = resize_bilinear(&wrapped, size, size)
        .map_err(|e| invalid_err("gradcam", e.to_string()))?;
    // renormalize: interpolation can pull the peak below 1
    let mut values = scaled.data().to_vec();
    normalize_peak(&mut values);

    Ok(Heatmap {
        values: Tensor::new(&[size, size], values)?,
        source_h: h,
        source_w: w,
    })
}

fn normalize_peak(map: &mut [f64]) {
    let peak = map.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        for m in map.iter_mut() {
            *m /= peak;
        }
    }
}

/// Raw heatmap as binary PGM bytes.
pub fn heatmap_pgm(heatmap: &Heatmap) -> Result<Vec<u8>, TensorError> {
    encode_pgm(&heatmap.values).map_err(|e| invalid_err("render_heatmap", e.to_string()))
}

/// Red-blend overlay on a base image of the same resolution, as binary PPM
/// bytes: `base * (1 - w) + red * w` per pixel.
pub fn overlay_ppm(heatmap: &Heatmap, base: &Tensor) -> Result<Vec<u8>, TensorError> {
    let (h, w) = match heatmap.values.shape() {
        [h, w] => (*h, *w),
        _ => unreachable!("heatmap values are (H,W)"),
    };
    if base.shape() != [3, h, w] {
        return Err(shape_err(
            "render_heatmap",
            format!("base {:?} does not match heatmap {h}x{w}", base.shape()),
        ));
    }
    let weights = heatmap.values.data();
    let pixels = base.data();
    let mut blended = vec![0.0; pixels.len()];
    let plane = h * w;
    for p in 0..plane {
        let wt = weights[p];
        // red channel blends toward 1, the others toward 0
        blended[p] = pixels[p] * (1.0 - wt) + wt;
        blended[plane + p] = pixels[plane + p] * (1.0 - wt);
        blended[2 * plane + p] = pixels[2 * plane + p] * (1.0 - wt);
    }
    let img = Tensor::new(&[3, h, w], blended)?;
    encode_ppm(&img).map_err(|e| invalid_err("render_heatmap", e.to_string()))
}
