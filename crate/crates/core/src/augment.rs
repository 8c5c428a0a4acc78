//! Multi-crop view construction.
//!
//! Global views (teacher and student inputs): an aspect-preserving crop of
//! area ratio `a_g`, zero-padded back to the source extent, resized,
//! optionally flipped, color-jittered and randomly erased.
//!
//! Local views (student only): a crop of area ratio `a_l` with mild aspect
//! jitter, resized, optionally flipped and color-jittered. No erasing.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Image, ImageSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColorJitter {
    /// Brightness, contrast and saturation factors are drawn from `[1 - s, 1 + s]`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift drawn from `[-hue, hue]`, in turns.
    pub hue: f64,
}

impl ColorJitter {
    pub const NONE: ColorJitter = ColorJitter {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        hue: 0.0,
    };
}

impl Default for ColorJitter {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub global_area: (f64, f64),
    pub local_area: (f64, f64),
    pub n_local: usize,
    pub global_size: usize,
    pub local_size: usize,
    pub flip_prob: f64,
    pub jitter: ColorJitter,
    pub erase_prob: f64,
    pub erase_area: (f64, f64),
    /// Aspect-ratio jitter applied to local crops.
    pub local_aspect: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            global_area: (0.8, 1.0),
            local_area: (0.1, 0.4),
            n_local: 4,
            global_size: 128,
            local_size: 64,
            flip_prob: 0.5,
            jitter: ColorJitter::default(),
            erase_prob: 0.5,
            erase_area: (0.02, 0.2),
            local_aspect: (3.0 / 4.0, 4.0 / 3.0),
        }
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64), min: f64, max: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && min <= lo && lo <= hi && hi <= max) {
        return Err(Error::Config(format!(
            "{name} range [{lo}, {hi}] must be ordered within [{min}, {max}]"
        )));
    }
    Ok(())
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("global_area", self.global_area, 0.0, 1.0)?;
        check_range("local_area", self.local_area, 0.0, 1.0)?;
        if self.local_area.0 <= 0.0 || self.global_area.0 <= 0.0 {
            return Err(Error::Config("area ratios must be positive".into()));
        }
        if self.local_area.1 > self.global_area.0 {
            return Err(Error::Config(format!(
                "local area max {} exceeds global area min {}",
                self.local_area.1, self.global_area.0
            )));
        }
        check_range("erase_area", self.erase_area, 0.0, 1.0)?;
        check_range("local_aspect", self.local_aspect, f64::MIN_POSITIVE, f64::MAX)?;
        for (name, p) in [("flip_prob", self.flip_prob), ("erase_prob", self.erase_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.global_size == 0 || self.local_size == 0 {
            return Err(Error::Config("view resolutions must be positive".into()));
        }
        let j = &self.jitter;
        if [j.brightness, j.contrast, j.saturation].iter().any(|s| !(0.0..1.0).contains(s))
            || !(0.0..=0.5).contains(&j.hue)
        {
            return Err(Error::Config(format!("invalid color jitter {j:?}")));
        }
        Ok(())
    }
}

/// A crop rectangle in continuous source-pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl CropBox {
    pub fn area_ratio(&self, src_h: usize, src_w: usize) -> f64 {
        self.width * self.height / (src_h * src_w) as f64
    }
}

/// The per-image view set.
#[derive(Debug, Clone)]
pub struct ViewBundle {
    pub globals: Vec<Image>,
    pub locals: Vec<Image>,
    pub source: Arc<ImageSample>,
}

impl ViewBundle {
    pub fn identity(&self) -> usize {
        self.source.identity()
    }

    pub fn camera(&self) -> usize {
        self.source.camera()
    }

    /// Globals first, then locals: the student's input order.
    pub fn all_views(&self) -> impl Iterator<Item = &Image> {
        self.globals.iter().chain(&self.locals)
    }
}

fn bilinear(img: &Image, c: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (img.height() - 1) as f64);
    let x = x.clamp(0.0, (img.width() - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(img.height() - 1), (x0 + 1).min(img.width() - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
    let bottom = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Maps output pixel `i` of `out` pixels onto the continuous extent `len`.
#[inline]
fn out_to_src(i: usize, out: usize, len: f64) -> f64 {
    (i as f64 + 0.5) * len / out as f64
}

/// Bilinear resize to `size x size`.
pub fn resize(img: &Image, size: usize) -> Image {
    let full = CropBox {
        x: 0.0,
        y: 0.0,
        width: img.width() as f64,
        height: img.height() as f64,
    };
    crop_resize(img, &full, size)
}

fn crop_resize(img: &Image, crop: &CropBox, size: usize) -> Image {
    let mut out = Image::zeros(size, size);
    for i in 0..size {
        let sy = crop.y + out_to_src(i, size, crop.height) - 0.5;
        for j in 0..size {
            let sx = crop.x + out_to_src(j, size, crop.width) - 0.5;
            for c in 0..3 {
                out.set(c, i, j, bilinear(img, c, sy, sx));
            }
        }
    }
    out
}

/// Places the crop centered on a zero canvas of the source extent and
/// resamples the canvas to `size x size`.
fn padded_crop_resize(img: &Image, crop: &CropBox, size: usize) -> Image {
    let (h, w) = (img.height() as f64, img.width() as f64);
    let top = (h - crop.height) / 2.0;
    let left = (w - crop.width) / 2.0;
    let mut out = Image::zeros(size, size);
    for i in 0..size {
        let cy = out_to_src(i, size, h);
        if cy < top || cy > top + crop.height {
            continue;
        }
        let sy = crop.y + (cy - top) - 0.5;
        for j in 0..size {
            let cx = out_to_src(j, size, w);
            if cx < left || cx > left + crop.width {
                continue;
            }
            let sx = crop.x + (cx - left) - 0.5;
            for c in 0..3 {
                out.set(c, i, j, bilinear(img, c, sy, sx));
            }
        }
    }
    out
}

/// Samples a crop with area ratio uniform in `area` and aspect ratio
/// (crop width/height relative to the source's) log-uniform in `aspect`.
/// The aspect is clamped so that the crop fits, keeping the area exact.
pub fn sample_crop<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    area: (f64, f64),
    aspect: (f64, f64),
    rng: &mut R,
) -> CropBox {
    let a = if area.0 < area.1 {
        rng.random_range(area.0..=area.1)
    } else {
        area.0
    };
    let r = if aspect.0 < aspect.1 {
        rng.random_range(aspect.0.ln()..=aspect.1.ln()).exp()
    } else {
        aspect.0
    };
    let r = r.clamp(a, 1.0 / a);
    let cw = (a * r).sqrt() * width as f64;
    let ch = (a / r).sqrt() * height as f64;
    let x = rng.random_range(0.0..=(width as f64 - cw).max(0.0));
    let y = rng.random_range(0.0..=(height as f64 - ch).max(0.0));
    CropBox {
        x,
        y,
        width: cw,
        height: ch,
    }
}

fn hflip(img: &mut Image) {
    let w = img.width();
    for c in 0..3 {
        for y in 0..img.height() {
            for x in 0..w / 2 {
                let a = img.get(c, y, x);
                let b = img.get(c, y, w - 1 - x);
                img.set(c, y, x, b);
                img.set(c, y, w - 1 - x, a);
            }
        }
    }
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Brightness, contrast, saturation then hue. Components with zero strength
/// are skipped, so `ColorJitter::NONE` leaves the image bit-identical.
fn color_jitter<R: Rng + ?Sized>(img: &mut Image, jitter: &ColorJitter, rng: &mut R) {
    let n = img.height() * img.width();
    let mut factor = |s: f64| (s > 0.0).then(|| rng.random_range(1.0 - s..=1.0 + s));
    let brightness = factor(jitter.brightness);
    let contrast = factor(jitter.contrast);
    let saturation = factor(jitter.saturation);
    let hue = (jitter.hue > 0.0).then(|| rng.random_range(-jitter.hue..=jitter.hue));
    let data = img.data_mut();
    if let Some(b) = brightness {
        for v in data.iter_mut() {
            *v = (*v * b).clamp(0.0, 1.0);
        }
    }
    if let Some(c) = contrast {
        let mean = (0..n)
            .map(|i| luma(data[i], data[n + i], data[2 * n + i]))
            .sum::<f64>()
            / n as f64;
        for v in data.iter_mut() {
            *v = ((*v - mean) * c + mean).clamp(0.0, 1.0);
        }
    }
    if let Some(s) = saturation {
        for i in 0..n {
            let gray = luma(data[i], data[n + i], data[2 * n + i]);
            for c in 0..3 {
                let v = &mut data[c * n + i];
                *v = (gray + (*v - gray) * s).clamp(0.0, 1.0);
            }
        }
    }
    if let Some(shift) = hue {
        for i in 0..n {
            let (h, s, v) = rgb_to_hsv(data[i], data[n + i], data[2 * n + i]);
            let (r, g, b) = hsv_to_rgb(h + shift, s, v);
            data[i] = r.clamp(0.0, 1.0);
            data[n + i] = g.clamp(0.0, 1.0);
            data[2 * n + i] = b.clamp(0.0, 1.0);
        }
    }
}

fn random_erase<R: Rng + ?Sized>(img: &mut Image, area: (f64, f64), rng: &mut R) {
    let (h, w) = (img.height(), img.width());
    let target = rng.random_range(area.0..=area.1) * (h * w) as f64;
    let r = rng.random_range((0.3f64).ln()..=(1.0 / 0.3f64).ln()).exp();
    let eh = ((target * r).sqrt().round() as usize).clamp(1, h);
    let ew = ((target / r).sqrt().round() as usize).clamp(1, w);
    let y0 = rng.random_range(0..=h - eh);
    let x0 = rng.random_range(0..=w - ew);
    for c in 0..3 {
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                img.set(c, y, x, 0.0);
            }
        }
    }
}

/// One global view together with the crop it was cut from.
pub fn global_view<R: Rng + ?Sized>(src: &Image, cfg: &AugmentConfig, rng: &mut R) -> (Image, CropBox) {
    let crop = sample_crop(src.height(), src.width(), cfg.global_area, (1.0, 1.0), rng);
    let mut view = padded_crop_resize(src, &crop, cfg.global_size);
    if rng.random_bool(cfg.flip_prob) {
        hflip(&mut view);
    }
    color_jitter(&mut view, &cfg.jitter, rng);
    if rng.random_bool(cfg.erase_prob) {
        random_erase(&mut view, cfg.erase_area, rng);
    }
    (view, crop)
}

/// One local view together with the crop it was cut from.
pub fn local_view<R: Rng + ?Sized>(src: &Image, cfg: &AugmentConfig, rng: &mut R) -> (Image, CropBox) {
    let crop = sample_crop(src.height(), src.width(), cfg.local_area, cfg.local_aspect, rng);
    let mut view = crop_resize(src, &crop, cfg.local_size);
    if rng.random_bool(cfg.flip_prob) {
        hflip(&mut view);
    }
    color_jitter(&mut view, &cfg.jitter, rng);
    (view, crop)
}

pub fn make_global_views<R: Rng + ?Sized>(sample: &ImageSample, cfg: &AugmentConfig, rng: &mut R) -> Result<Vec<Image>> {
    cfg.validate()?;
    Ok((0..2).map(|_| global_view(sample.pixels(), cfg, rng).0).collect())
}

pub fn make_local_views<R: Rng + ?Sized>(sample: &ImageSample, cfg: &AugmentConfig, rng: &mut R) -> Result<Vec<Image>> {
    cfg.validate()?;
    Ok((0..cfg.n_local)
        .map(|_| local_view(sample.pixels(), cfg, rng).0)
        .collect())
}

/// Two globals then `n_local` locals, all drawn from one stream.
pub fn make_view_bundle<R: Rng + ?Sized>(sample: Arc<ImageSample>, cfg: &AugmentConfig, rng: &mut R) -> Result<ViewBundle> {
    let globals = make_global_views(&sample, cfg, rng)?;
    let locals = make_local_views(&sample, cfg, rng)?;
    Ok(ViewBundle {
        globals,
        locals,
        source: sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::substream;

    fn sample() -> ImageSample {
        let mut img = Image::zeros(40, 48);
        for c in 0..3 {
            for y in 0..40 {
                for x in 0..48 {
                    img.set(c, y, x, ((x * 7 + y * 3 + c * 11) % 50) as f64 / 50.0);
                }
            }
        }
        ImageSample::new(img, 3, 1).unwrap()
    }

    fn plain(global_size: usize) -> AugmentConfig {
        AugmentConfig {
            global_area: (1.0, 1.0),
            flip_prob: 0.0,
            jitter: ColorJitter::NONE,
            erase_prob: 0.0,
            global_size,
            ..Default::default()
        }
    }

    #[test]
    fn identity_transform_equals_resized_source() {
        let s = sample();
        let cfg = plain(32);
        let views = make_global_views(&s, &cfg, &mut substream(0, &[])).unwrap();
        let want = resize(s.pixels(), 32);
        for v in &views {
            for (a, b) in v.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn global_crop_area_within_range() {
        let s = sample();
        let cfg = AugmentConfig::default();
        let mut rng = substream(1, &[]);
        for _ in 0..500 {
            let (_, crop) = global_view(s.pixels(), &cfg, &mut rng);
            let a = crop.area_ratio(40, 48);
            assert!((0.8 - 1e-12..=1.0 + 1e-12).contains(&a), "{a}");
        }
    }

    #[test]
    fn local_views_cover_configured_area() {
        let s = sample();
        let cfg = AugmentConfig::default();
        let mut rng = substream(2, &[]);
        for _ in 0..500 {
            let (v, crop) = local_view(s.pixels(), &cfg, &mut rng);
            let a = crop.area_ratio(40, 48);
            assert!((0.1 - 1e-12..=0.4 + 1e-12).contains(&a), "{a}");
            assert!(crop.x >= 0.0 && crop.x + crop.width <= 48.0 + 1e-9);
            assert!(crop.y >= 0.0 && crop.y + crop.height <= 40.0 + 1e-9);
            assert_eq!(v.height(), 64);
        }
    }

    #[test]
    fn zero_locals_gives_empty_list() {
        let cfg = AugmentConfig {
            n_local: 0,
            ..Default::default()
        };
        assert!(make_local_views(&sample(), &cfg, &mut substream(0, &[])).unwrap().is_empty());
    }

    #[test]
    fn same_seed_same_views() {
        let s = Arc::new(sample());
        let cfg = AugmentConfig {
            global_size: 24,
            local_size: 12,
            ..Default::default()
        };
        let a = make_view_bundle(s.clone(), &cfg, &mut substream(9, &[4])).unwrap();
        let b = make_view_bundle(s.clone(), &cfg, &mut substream(9, &[4])).unwrap();
        assert_eq!(a.globals, b.globals);
        assert_eq!(a.locals, b.locals);
        assert_eq!(a.locals.len(), 4);
        assert_eq!(a.identity(), 3);
        assert_eq!(a.camera(), 1);
        for v in a.all_views() {
            v.validate_range().unwrap();
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        let cfg = AugmentConfig {
            local_area: (0.1, 0.9),
            ..Default::default()
        };
        assert!(matches!(
            make_global_views(&sample(), &cfg, &mut substream(0, &[])),
            Err(Error::Config(_))
        ));
        let cfg = AugmentConfig {
            global_area: (0.9, 0.8),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn padded_global_crop_has_zero_border() {
        let mut img = Image::zeros(40, 40);
        img.data_mut().fill(1.0);
        let crop = CropBox {
            x: 4.0,
            y: 4.0,
            width: 32.0,
            height: 32.0,
        };
        let v = padded_crop_resize(&img, &crop, 40);
        assert_eq!(v.get(0, 0, 0), 0.0);
        assert_eq!(v.get(0, 20, 20), 1.0);
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2, 0.4, 0.6), (0.9, 0.1, 0.3), (0.5, 0.5, 0.5)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }
}
