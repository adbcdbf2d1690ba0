//! Image corruptions: additive Gaussian noise and separable Gaussian blur.
//!
//! Both operate on every `H×W` plane of a tensor of rank ≥ 2.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Blur sigmas below this are treated as no blur.
pub const MIN_BLUR_SIGMA: f64 = 0.05;

fn plane_dims(image: &Tensor) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() < 2 {
        return Err(Error::shape("image filter", format!("need at least 2 axes, got {s:?}")));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

/// `clamp(image + N(0, sigma²), 0, 1)` per pixel.
pub fn add_gaussian_noise(image: &Tensor, sigma: f64, rng: &mut Rng) -> Result<Tensor> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::InvalidArgument(format!("noise sigma {sigma} is negative")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let mut out = image.clone();
    for v in out.data_mut() {
        let noisy = f64::from(*v) + sigma * rng.normal();
        *v = noisy.clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

/// Normalised 1-D Gaussian taps over `[-r, r]`, `r = ceil(3·sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::InvalidArgument(format!("blur sigma {sigma} is negative")));
    }
    if sigma < MIN_BLUR_SIGMA {
        return Ok(image.clone());
    }
    let (h, w) = plane_dims(image)?;
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;

    let mut out = image.clone();
    let mut tmp = vec![0.0f64; h * w];
    for plane in out.data_mut().chunks_exact_mut(h * w) {
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &t)| t * f64::from(row[clamp(x as isize + k as isize - r, w)]))
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &t)| t * tmp[clamp(y as isize + k as isize - r, h) * w + x])
                    .sum();
                plane[y * w + x] = v as f32;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(t: &Tensor) -> (f64, f64) {
        let n = t.len() as f64;
        let mean = t.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = t.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var.sqrt())
    }

    #[test]
    fn zero_sigma_is_identity() {
        let mut rng = Rng::new(1);
        let img = Tensor::from_vec(&[1, 3, 3], (0..9).map(|v| v as f32 / 9.0).collect()).unwrap();
        assert_eq!(add_gaussian_noise(&img, 0.0, &mut rng).unwrap(), img);
        assert_eq!(gaussian_blur(&img, 0.0).unwrap(), img);
        assert_eq!(gaussian_blur(&img, 0.04).unwrap(), img);
    }

    #[test]
    fn negative_sigma_rejected() {
        let img = Tensor::zeros(&[1, 2, 2]).unwrap();
        assert!(add_gaussian_noise(&img, -0.1, &mut Rng::new(0)).is_err());
        assert!(gaussian_blur(&img, -1.0).is_err());
    }

    #[test]
    fn noise_standard_deviation() {
        let img = Tensor::new(&[1, 64, 64], 0.5f32).unwrap();
        let noisy = add_gaussian_noise(&img, 0.1, &mut Rng::new(42)).unwrap();
        let (mean, sd) = stats(&noisy);
        assert!((0.08..=0.12).contains(&sd), "sd {sd}");
        assert!((mean - 0.5).abs() < 0.01);
    }

    #[test]
    fn noise_stays_in_unit_interval() {
        let img = Tensor::from_vec(&[1, 16, 16], (0..256).map(|v| (v % 2) as f32).collect()).unwrap();
        for sigma in [0.05, 0.5, 3.0] {
            let noisy = add_gaussian_noise(&img, sigma, &mut Rng::new(7)).unwrap();
            assert!(noisy.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn constant_image_survives_blur() {
        let img = Tensor::new(&[1, 10, 12], 0.3f32).unwrap();
        for sigma in [0.5, 1.0, 2.0, 4.0] {
            let out = gaussian_blur(&img, sigma).unwrap();
            assert!(out.max_abs_diff(&img).unwrap() < 1e-6);
        }
    }

    #[test]
    fn kernel_shape() {
        let k = gaussian_kernel(1.0);
        assert_eq!(k.len(), 7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(gaussian_kernel(0.4).len(), 5);
    }

    #[test]
    fn bright_pixel_spreads_like_direct_2d_convolution() {
        let (h, w) = (21, 21);
        let mut img = Tensor::zeros(&[1, h, w]).unwrap();
        img.data_mut()[10 * w + 10] = 1.0;
        let out = gaussian_blur(&img, 1.0).unwrap();

        // Direct 2-D convolution with an unnormalised-then-normalised 2-D kernel.
        let r = 3i64;
        let mut k2 = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                k2.push((-((dy * dy + dx * dx) as f64) / 2.0).exp());
            }
        }
        let norm: f64 = k2.iter().sum();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (dy, dx) = (y - 10, x - 10);
                let want = if dy.abs() <= r && dx.abs() <= r {
                    k2[((dy + r) * (2 * r + 1) + dx + r) as usize] / norm
                } else {
                    0.0
                };
                let got = f64::from(out.data()[(y * w as i64 + x) as usize]);
                assert!((got - want).abs() < 1e-6, "({y},{x}) {got} vs {want}");
            }
        }
        let mass: f64 = out.data().iter().map(|&v| f64::from(v)).sum();
        assert!((mass - 1.0).abs() < 1e-4);
        assert!(out.data()[10 * w + 10] < 1.0);
    }
}
