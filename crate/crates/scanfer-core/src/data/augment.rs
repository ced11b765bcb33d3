//! Training-time augmentation: random horizontal flip and color jitter
//! (brightness, contrast, saturation, hue — applied in that fixed order).
//!
//! Every factor is drawn even when its bound is zero so the random stream
//! stays aligned across policies; results are clamped back into [0,1].

use super::Sample;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AugmentPolicy {
    /// Apply a horizontal mirror with probability 0.5.
    pub flip: bool,
    /// Brightness factor drawn from U[1-b, 1+b].
    pub brightness: f64,
    /// Contrast factor drawn from U[1-c, 1+c], blended with the image's
    /// mean gray value.
    pub contrast: f64,
    /// Saturation factor drawn from U[1-s, 1+s], blended with per-pixel luma.
    pub saturation: f64,
    /// Hue rotation drawn from U[-h, +h] turns, applied in HSV space.
    pub hue: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            flip: true,
            brightness: 0.4,
            contrast: 0.3,
            saturation: 0.25,
            hue: 0.05,
        }
    }
}

impl AugmentPolicy {
    /// Identity policy: no flip, all jitter bounds zero.
    pub fn none() -> Self {
        AugmentPolicy {
            flip: false,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        }
    }
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Apply the policy to one sample. The label never changes.
pub fn augment(sample: &Sample, policy: &AugmentPolicy, rng: &mut Rng) -> Sample {
    let (h, w) = (sample.pixels.shape()[1], sample.pixels.shape()[2]);
    let mut pixels = sample.pixels.clone();

    if policy.flip && rng.next_f64() < 0.5 {
        pixels = hflip(&pixels);
    }

    let b = rng.uniform(1.0 - policy.brightness, 1.0 + policy.brightness);
    let c = rng.uniform(1.0 - policy.contrast, 1.0 + policy.contrast);
    let s = rng.uniform(1.0 - policy.saturation, 1.0 + policy.saturation);
    let hue_shift = rng.uniform(-policy.hue, policy.hue);

    let data = pixels.data_mut();

    // brightness: plain scale
    for v in data.iter_mut() {
        *v = (*v * b).clamp(0.0, 1.0);
    }

    // contrast: blend with the mean gray value of the whole image
    let plane = h * w;
    let mut gray_mean = 0.0;
    for p in 0..plane {
        gray_mean += LUMA[0] * data[p] + LUMA[1] * data[plane + p] + LUMA[2] * data[2 * plane + p];
    }
    gray_mean /= plane as f64;
    for v in data.iter_mut() {
        *v = (c * *v + (1.0 - c) * gray_mean).clamp(0.0, 1.0);
    }

    // saturation: blend each pixel with its own luma
    for p in 0..plane {
        let luma = LUMA[0] * data[p] + LUMA[1] * data[plane + p] + LUMA[2] * data[2 * plane + p];
        for ch in 0..3 {
            let v = &mut data[ch * plane + p];
            *v = (s * *v + (1.0 - s) * luma).clamp(0.0, 1.0);
        }
    }

    // hue: rotate in HSV space; a zero shift is skipped to stay bit-exact
    if hue_shift != 0.0 {
        for p in 0..plane {
            let rgb = [data[p], data[plane + p], data[2 * plane + p]];
            let (hh, ss, vv) = rgb_to_hsv(rgb);
            let rotated = hsv_to_rgb((hh + hue_shift).rem_euclid(1.0), ss, vv);
            for ch in 0..3 {
                data[ch * plane + p] = rotated[ch].clamp(0.0, 1.0);
            }
        }
    }

    Sample {
        pixels,
        label: sample.label,
    }
}

/// Mirror the width axis.
pub fn hflip(img: &Tensor) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w {
                out[row + x] = src[row + (w - 1 - x)];
            }
        }
    }
    Tensor::new(img.shape(), out).expect("same shape")
}

/// Hue in turns [0,1), saturation and value in [0,1].
fn rgb_to_hsv(rgb: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, v)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(values: Tensor) -> Sample {
        Sample {
            pixels: values,
            label: 3,
        }
    }

    #[test]
    fn identity_policy_is_bit_exact() {
        let mut rng = Rng::new(1);
        let img = Tensor::uniform(&[3, 4, 4], 0.0, 1.0, &mut rng);
        let s = sample(img.clone());
        let out = augment(&s, &AugmentPolicy::none(), &mut rng);
        assert_eq!(out.pixels.data(), img.data());
        assert_eq!(out.label, 3);
    }

    #[test]
    fn flip_twice_is_original() {
        let mut rng = Rng::new(2);
        let img = Tensor::uniform(&[3, 3, 5], 0.0, 1.0, &mut rng);
        let twice = hflip(&hflip(&img));
        assert_eq!(twice.data(), img.data());
    }

    #[test]
    fn brightness_scales_constant_image() {
        let policy = AugmentPolicy {
            flip: false,
            brightness: 0.5,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        };
        let img = Tensor::full(&[3, 2, 2], 0.8);
        let mut rng = Rng::new(3);
        let out = augment(&sample(img), &policy, &mut rng);
        // replay the draw to know the factor that was applied
        let mut replay = Rng::new(3);
        let f = replay.uniform(0.5, 1.5);
        let expect = (0.8 * f).clamp(0.0, 1.0);
        assert!(out.pixels.data().iter().all(|&v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn half_brightness_on_constant_image() {
        // direct check of the formula: factor 1/2 on a 0.8 image gives 0.4
        let img = Tensor::full(&[3, 2, 2], 0.8);
        let mut pixels = img.clone();
        for v in pixels.data_mut().iter_mut() {
            *v = (*v * 0.5).clamp(0.0, 1.0);
        }
        assert!(pixels.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let mut rng = Rng::new(4);
        let img = Tensor::uniform(&[3, 6, 6], 0.0, 1.0, &mut rng);
        let s = sample(img);
        for _ in 0..50 {
            let out = augment(&s, &AugmentPolicy::default(), &mut rng);
            assert!(out.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn hsv_round_trip() {
        let mut rng = Rng::new(5);
        for _ in 0..200 {
            let rgb = [rng.next_f64(), rng.next_f64(), rng.next_f64()];
            let (h, s, v) = rgb_to_hsv(rgb);
            let back = hsv_to_rgb(h, s, v);
            for c in 0..3 {
                assert!((rgb[c] - back[c]).abs() < 1e-9, "{rgb:?} -> {back:?}");
            }
        }
    }
}
