//! Deterministic synthesis of `base^exponent` images.
//!
//! Each sample is drawn from its own RNG substream keyed by
//! `(master_seed, index)`, so sample `i` is identical whether it is generated
//! alone or as part of any batch. The pipeline is render → blur → noise →
//! 8-bit quantisation.

pub mod filters;
pub mod glyphs;

use std::ops::RangeInclusive;

pub use filters::{add_gaussian_noise, gaussian_blur, gaussian_kernel};
pub use glyphs::{Glyph, GLYPH_H, GLYPH_W};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Exponent glyph size relative to the base glyph.
pub const EXPONENT_SCALE: f64 = 0.6;
/// How far the exponent's top sits above the base's top, as a fraction of the exponent height.
pub const SUPERSCRIPT_RAISE: f64 = 1.0 / 3.0;

/// Generation-time jitter attached to every sample.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleMeta {
    pub font_scale: f32,
    pub noise_sigma: f32,
    pub blur_sigma: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// Index into the base range (`base - base_lo`).
    pub base_label: usize,
    /// Index into the exponent range.
    pub exp_label: usize,
    pub meta: SampleMeta,
}

/// A labelled sample list plus the ranges that give labels their meaning.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: (usize, usize),
    pub base_range: (u8, u8),
    pub exp_range: (u8, u8),
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn base_classes(&self) -> usize {
        (self.base_range.1 - self.base_range.0) as usize + 1
    }

    pub fn exp_classes(&self) -> usize {
        (self.exp_range.1 - self.exp_range.0) as usize + 1
    }

    /// Digit values `(base, exponent)` of a sample.
    pub fn values(&self, sample: &Sample) -> (u8, u8) {
        (
            self.base_range.0 + sample.base_label as u8,
            self.exp_range.0 + sample.exp_label as u8,
        )
    }

    /// Copy holding only the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.header_only()
        }
    }

    fn header_only(&self) -> Dataset {
        Dataset {
            image_size: self.image_size,
            base_range: self.base_range,
            exp_range: self.exp_range,
            samples: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub count: usize,
    /// Index of the first sample's substream; disjoint index ranges give disjoint sets.
    pub start_index: u64,
    pub image_size: (usize, usize),
    pub base_range: (u8, u8),
    pub exp_range: (u8, u8),
    pub font_scale_range: (f64, f64),
    pub noise_sigma_range: (f64, f64),
    pub blur_sigma_range: (f64, f64),
    pub master_seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            count: 10_000,
            start_index: 0,
            image_size: (64, 64),
            base_range: (2, 9),
            exp_range: (0, 9),
            font_scale_range: (2.0, 3.5),
            noise_sigma_range: (0.0, 0.3),
            blur_sigma_range: (0.0, 2.0),
            master_seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.count == 0 {
            return bad("count must be at least 1".into());
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return bad(format!("image size {:?}", self.image_size));
        }
        for (name, (lo, hi)) in [("base", self.base_range), ("exponent", self.exp_range)] {
            if lo > hi || hi > 9 {
                return bad(format!("{name} range {lo}..={hi} must be ordered digits"));
            }
        }
        for (name, (lo, hi), min) in [
            ("font scale", self.font_scale_range, f64::MIN_POSITIVE),
            ("noise sigma", self.noise_sigma_range, 0.0),
            ("blur sigma", self.blur_sigma_range, 0.0),
        ] {
            if !(lo >= min && lo <= hi && hi.is_finite()) {
                return bad(format!("{name} range [{lo}, {hi}]"));
            }
        }
        Ok(())
    }

    /// Sample indices covered by this config.
    pub fn indices(&self) -> RangeInclusive<u64> {
        self.start_index..=self.start_index + self.count as u64 - 1
    }
}

fn scaled(extent: usize, scale: f64) -> usize {
    ((extent as f64 * scale).round() as usize).max(1)
}

/// Nearest-neighbour paint of `glyph` scaled to `h × w` at `(top, left)`.
fn paint(canvas: &mut [f32], canvas_w: usize, glyph: &Glyph, top: usize, left: usize, h: usize, w: usize) {
    for y in 0..h {
        let src_row = y * GLYPH_H / h;
        let line = &mut canvas[(top + y) * canvas_w + left..(top + y) * canvas_w + left + w];
        for (x, px) in line.iter_mut().enumerate() {
            if glyph.is_set(src_row, x * GLYPH_W / w) {
                *px = 1.0;
            }
        }
    }
}

/// White-on-black rendering of `base^exponent`.
///
/// The base glyph (scaled by `font_scale`) is vertically centred; the
/// exponent glyph (scaled by `0.6·font_scale`) follows one scaled pixel to
/// the right, raised above the base. The pair is centred horizontally.
pub fn render_expression(base: u8, exponent: u8, font_scale: f64, image_size: (usize, usize)) -> Result<Tensor> {
    if base > 9 || exponent > 9 {
        return Err(Error::InvalidArgument(format!("{base}^{exponent} is not a digit pair")));
    }
    if !(font_scale > 0.0 && font_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("font scale {font_scale}")));
    }
    let (h, w) = image_size;
    let (bh, bw) = (scaled(GLYPH_H, font_scale), scaled(GLYPH_W, font_scale));
    let exp_scale = EXPONENT_SCALE * font_scale;
    let (eh, ew) = (scaled(GLYPH_H, exp_scale), scaled(GLYPH_W, exp_scale));
    let gap = scaled(1, font_scale);
    let raise = (eh as f64 * SUPERSCRIPT_RAISE).round() as usize;

    let total_w = bw + gap + ew;
    if bh > h || total_w > w {
        return Err(Error::Layout(format!(
            "{base}^{exponent} at scale {font_scale} needs {bh}x{total_w}, canvas is {h}x{w}"
        )));
    }
    let base_top = (h - bh) / 2;
    if raise > base_top {
        return Err(Error::Layout(format!(
            "exponent at scale {font_scale} rises above the top edge"
        )));
    }
    let left = (w - total_w) / 2;
    let mut canvas = vec![0.0f32; h * w];
    paint(&mut canvas, w, &Glyph::digit(base), base_top, left, bh, bw);
    paint(&mut canvas, w, &Glyph::digit(exponent), base_top - raise, left + bw + gap, eh, ew);
    Tensor::from_vec(&[1, h, w], canvas)
}

/// Rounds every pixel to the nearest multiple of 1/255.
pub fn quantize(image: &mut Tensor) {
    for v in image.data_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
}

/// Sample `index` of `config`; depends only on `(config, index)`.
pub fn generate_sample(config: &GenConfig, index: u64) -> Result<Sample> {
    let mut rng = Rng::substream(config.master_seed, index);
    let base = rng.int_inclusive(config.base_range.0.into(), config.base_range.1.into()) as u8;
    let exponent = rng.int_inclusive(config.exp_range.0.into(), config.exp_range.1.into()) as u8;
    let draw = |rng: &mut Rng, (lo, hi): (f64, f64)| rng.uniform(lo, hi) as f32;
    let meta = SampleMeta {
        font_scale: draw(&mut rng, config.font_scale_range),
        noise_sigma: draw(&mut rng, config.noise_sigma_range),
        blur_sigma: draw(&mut rng, config.blur_sigma_range),
    };
    let wrap = |e: Error| Error::Sample {
        index,
        source: Box::new(e),
    };
    let image = render_expression(base, exponent, meta.font_scale.into(), config.image_size).map_err(wrap)?;
    let image = gaussian_blur(&image, meta.blur_sigma.into()).map_err(wrap)?;
    let mut image = add_gaussian_noise(&image, meta.noise_sigma.into(), &mut rng).map_err(wrap)?;
    quantize(&mut image);
    Ok(Sample {
        image,
        base_label: (base - config.base_range.0) as usize,
        exp_label: (exponent - config.exp_range.0) as usize,
        meta,
    })
}

pub fn generate_dataset(config: &GenConfig) -> Result<Dataset> {
    config.validate()?;
    let samples = config
        .indices()
        .map(|i| generate_sample(config, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        image_size: config.image_size,
        base_range: config.base_range,
        exp_range: config.exp_range,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    /// Pixel count of a glyph scaled to `h × w`, from per-row and per-column
    /// multiplicities: master row `r` covers `ceil((r+1)·h/12) − ceil(r·h/12)`
    /// output rows.
    fn scaled_popcount_oracle(g: &Glyph, h: usize, w: usize) -> usize {
        let span = |i: usize, out: usize, master: usize| ((i + 1) * out).div_ceil(master) - (i * out).div_ceil(master);
        let mut n = 0;
        for r in 0..GLYPH_H {
            for c in 0..GLYPH_W {
                if g.is_set(r, c) {
                    n += span(r, h, GLYPH_H) * span(c, w, GLYPH_W);
                }
            }
        }
        n
    }

    fn foreground(t: &Tensor) -> usize {
        t.data().iter().filter(|&&v| v == 1.0).count()
    }

    #[test]
    fn rendered_pixel_count() {
        for &s in &[2.0, 2.5, 3.0, 3.5, 2.37] {
            let img = render_expression(2, 5, s, (64, 64)).unwrap();
            let (g2, g5) = (Glyph::digit(2), Glyph::digit(5));
            let exact = scaled_popcount_oracle(&g2, scaled(12, s), scaled(8, s))
                + scaled_popcount_oracle(&g5, scaled(12, 0.6 * s), scaled(8, 0.6 * s));
            assert_eq!(foreground(&img), exact, "scale {s}");
            let ideal = s * s * (f64::from(g2.popcount()) + 0.36 * f64::from(g5.popcount()));
            assert!((exact as f64 - ideal).abs() / ideal < 0.2, "scale {s}: {exact} vs {ideal}");
        }
    }

    #[test]
    fn rendering_is_binary_and_deterministic() {
        let a = render_expression(7, 3, 2.8, (64, 64)).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(a.data().iter().cloned().fold(0.0, f32::max), 1.0);
        assert_eq!(a, render_expression(7, 3, 2.8, (64, 64)).unwrap());
    }

    #[test]
    fn exponent_sits_up_and_right() {
        let img = render_expression(8, 1, 3.0, (64, 64)).unwrap();
        let bbox = |x0: usize, x1: usize| {
            let mut top = usize::MAX;
            for y in 0..64 {
                for x in x0..x1 {
                    if img.data()[y * 64 + x] == 1.0 {
                        top = top.min(y);
                    }
                }
            }
            top
        };
        // base occupies columns [left, left+24), exponent starts after a 3px gap
        let left = (64 - (24 + 3 + 14)) / 2;
        assert!(bbox(left + 27, 64) < bbox(0, left + 24));
    }

    #[test]
    fn oversized_layout_rejected() {
        assert!(matches!(render_expression(2, 2, 6.0, (64, 64)), Err(Error::Layout(_))));
        assert!(matches!(render_expression(2, 2, 2.0, (20, 64)), Err(Error::Layout(_))));
        assert!(render_expression(10, 2, 2.0, (64, 64)).is_err());
    }

    #[test]
    fn small_dataset_contract() {
        let cfg = GenConfig {
            count: 80,
            master_seed: 5,
            ..GenConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        assert_eq!(ds.len(), 80);
        let mut pairs: HashMap<(usize, usize), usize> = HashMap::new();
        for s in &ds.samples {
            assert!(s.base_label < 8 && s.exp_label < 10);
            assert_eq!(s.image.shape(), &[1, 64, 64]);
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!((2.0..3.5).contains(&s.meta.font_scale));
            assert!((0.0..=0.3).contains(&s.meta.noise_sigma));
            assert!((0.0..=2.0).contains(&s.meta.blur_sigma));
            *pairs.entry((s.base_label, s.exp_label)).or_default() += 1;
        }
        assert!(pairs.values().all(|&c| c <= 80));
        assert_eq!(pairs.values().sum::<usize>(), 80);
        assert_eq!(ds, generate_dataset(&cfg).unwrap());
    }

    #[test]
    fn samples_do_not_depend_on_batch() {
        let cfg = GenConfig {
            count: 12,
            master_seed: 99,
            ..GenConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let tail = generate_dataset(&GenConfig {
            count: 4,
            start_index: 8,
            ..cfg.clone()
        })
        .unwrap();
        assert_eq!(&ds.samples[8..], &tail.samples[..]);
        assert_eq!(generate_sample(&cfg, 3).unwrap(), ds.samples[3]);
    }

    #[test]
    fn pinned_attribute_is_exact() {
        let cfg = GenConfig {
            count: 5,
            noise_sigma_range: (0.2, 0.2),
            blur_sigma_range: (0.0, 0.0),
            ..GenConfig::default()
        };
        for s in generate_dataset(&cfg).unwrap().samples {
            assert_eq!(s.meta.noise_sigma, 0.2);
            assert_eq!(s.meta.blur_sigma, 0.0);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            GenConfig { count: 0, ..GenConfig::default() },
            GenConfig { base_range: (5, 3), ..GenConfig::default() },
            GenConfig { exp_range: (0, 12), ..GenConfig::default() },
            GenConfig { noise_sigma_range: (-0.1, 0.2), ..GenConfig::default() },
            GenConfig { blur_sigma_range: (2.0, 1.0), ..GenConfig::default() },
        ] {
            assert!(generate_dataset(&cfg).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn layout_errors_carry_sample_index() {
        let cfg = GenConfig {
            count: 3,
            start_index: 40,
            image_size: (16, 16),
            ..GenConfig::default()
        };
        match generate_dataset(&cfg) {
            Err(Error::Sample { index: 40, source }) => assert!(matches!(*source, Error::Layout(_))),
            other => panic!("{other:?}"),
        }
    }
}
