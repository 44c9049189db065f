//! Seeded augmentation suite for training the auxiliary classifiers.
//!
//! Every transform has a deterministic form (`rotate_by`, `scale_contrast`,
//! `shift`, `draw_disc`, `draw_dashed_line`) and a random wrapper that draws
//! its parameters from the supplied RNG. [`augment`] chains them in a fixed
//! order with one independent ChaCha stream per transform, so the output is
//! a pure function of `(image, config, counter)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{clamp01, ImageTensor};
use crate::scalar::Scalar;

/// Fill value for pixels uncovered by rotation or translation: paper white.
pub const BACKGROUND: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpotParams {
    /// Inclusive range of spots per image.
    pub count: (u32, u32),
    /// Radius range in pixels.
    pub radius: (f64, f64),
}

impl SpotParams {
    pub const DISABLED: SpotParams = SpotParams {
        count: (0, 0),
        radius: (0.0, 0.0),
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DashedLineParams {
    pub count: (u32, u32),
    /// Total line length range in pixels.
    pub length: (f64, f64),
    /// Drawn segment length in pixels.
    pub dash: f64,
    /// Gap between drawn segments in pixels.
    pub gap: f64,
}

impl DashedLineParams {
    pub const DISABLED: DashedLineParams = DashedLineParams {
        count: (0, 0),
        length: (0.0, 0.0),
        dash: 0.0,
        gap: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Fraction of a full turn; angles are drawn from `±factor · 360°`.
    pub rotation_factor: f64,
    /// Contrast scale is drawn from `[1 - factor, 1 + factor]`.
    pub contrast_factor: f64,
    /// Maximum shift as a fraction of each image dimension.
    pub translation_fraction: f64,
    pub black_spots: SpotParams,
    pub white_spots: SpotParams,
    pub dashed_lines: DashedLineParams,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_factor: 0.05,
            contrast_factor: 0.5,
            translation_fraction: 0.2,
            black_spots: SpotParams {
                count: (0, 3),
                radius: (1.0, 3.0),
            },
            white_spots: SpotParams {
                count: (0, 3),
                radius: (1.0, 3.0),
            },
            dashed_lines: DashedLineParams {
                count: (0, 2),
                length: (6.0, 20.0),
                dash: 3.0,
                gap: 2.0,
            },
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Configuration under which [`augment`] is the identity.
    pub fn disabled() -> Self {
        AugmentConfig {
            rotation_factor: 0.0,
            contrast_factor: 0.0,
            translation_fraction: 0.0,
            black_spots: SpotParams::DISABLED,
            white_spots: SpotParams::DISABLED,
            dashed_lines: DashedLineParams::DISABLED,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64, name: &str| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be finite and >= 0")))
            }
        };
        nonneg(self.rotation_factor, "rotation_factor")?;
        nonneg(self.contrast_factor, "contrast_factor")?;
        if !(0.0..=1.0).contains(&self.translation_fraction) {
            return Err(Error::Config("translation_fraction must be in [0, 1]".into()));
        }
        for (name, p) in [("black_spots", self.black_spots), ("white_spots", self.white_spots)] {
            check_range_u(p.count, name)?;
            if p.count.1 > 0 {
                check_range_f(p.radius, name)?;
                if p.radius.0 <= 0.0 {
                    return Err(Error::Config(format!("{name} radius must be positive")));
                }
            }
        }
        let d = self.dashed_lines;
        check_range_u(d.count, "dashed_lines")?;
        if d.count.1 > 0 {
            check_range_f(d.length, "dashed_lines length")?;
            if d.dash <= 0.0 || d.gap < 0.0 {
                return Err(Error::Config("dashed_lines needs dash > 0 and gap >= 0".into()));
            }
        }
        Ok(())
    }
}

fn check_range_u(r: (u32, u32), name: &str) -> Result<()> {
    if r.0 > r.1 {
        return Err(Error::Config(format!("{name} count range is inverted")));
    }
    Ok(())
}

fn check_range_f(r: (f64, f64), name: &str) -> Result<()> {
    if !(r.0.is_finite() && r.1.is_finite() && r.0 <= r.1 && r.0 >= 0.0) {
        return Err(Error::Config(format!("{name} range must satisfy 0 <= min <= max")));
    }
    Ok(())
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Samples `(y, x)` from `img` with bilinear interpolation; taps outside
/// the frame read as background.
fn bilinear<T: Scalar>(img: &ImageTensor<T>, y: f64, x: f64, c: usize) -> T {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let tap = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h || xx >= w {
            BACKGROUND
        } else {
            img.get(yy as usize, xx as usize, c).as_f64()
        }
    };
    let (yi, xi) = (y0 as isize, x0 as isize);
    let top = tap(yi, xi) * (1.0 - fx) + tap(yi, xi + 1) * fx;
    let bottom = tap(yi + 1, xi) * (1.0 - fx) + tap(yi + 1, xi + 1) * fx;
    T::of(top * (1.0 - fy) + bottom * fy)
}

/// Rotates by `degrees` about the image centre.
pub fn rotate_by<T: Scalar>(img: &ImageTensor<T>, degrees: f64) -> ImageTensor<T> {
    if degrees == 0.0 {
        return img.clone();
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (img.height() as f64 - 1.0) / 2.0;
    let cx = (img.width() as f64 - 1.0) / 2.0;
    ImageTensor::from_fn(img.height(), img.width(), img.channels(), |y, x, c| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        // inverse mapping: rotate the output coordinate back by -degrees
        let sx = cos * dx + sin * dy + cx;
        let sy = -sin * dx + cos * dy + cy;
        bilinear(img, sy, sx, c)
    })
}

/// Draws the rotation angle in degrees for a given factor.
pub fn rotation_angle<R: Rng + ?Sized>(factor: f64, rng: &mut R) -> f64 {
    let max = factor * 360.0;
    uniform(rng, -max, max)
}

pub fn rotate<T: Scalar, R: Rng + ?Sized>(img: &ImageTensor<T>, factor: f64, rng: &mut R) -> ImageTensor<T> {
    if factor == 0.0 {
        return img.clone();
    }
    rotate_by(img, rotation_angle(factor, rng))
}

/// `clamp(mean + s · (img - mean), 0, 1)` with the global mean.
pub fn scale_contrast<T: Scalar>(img: &ImageTensor<T>, s: T) -> ImageTensor<T> {
    let mean = img.mean();
    img.map(|v| clamp01(mean + s * (v - mean)))
}

pub fn adjust_contrast<T: Scalar, R: Rng + ?Sized>(img: &ImageTensor<T>, factor: f64, rng: &mut R) -> ImageTensor<T> {
    if factor == 0.0 {
        return img.clone();
    }
    scale_contrast(img, T::of(uniform(rng, 1.0 - factor, 1.0 + factor)))
}

/// Moves content by `(dy, dx)` pixels; vacated pixels become background.
pub fn shift<T: Scalar>(img: &ImageTensor<T>, dy: i64, dx: i64) -> ImageTensor<T> {
    if dy == 0 && dx == 0 {
        return img.clone();
    }
    let (h, w) = (img.height() as i64, img.width() as i64);
    ImageTensor::from_fn(img.height(), img.width(), img.channels(), |y, x, c| {
        let (sy, sx) = (y as i64 - dy, x as i64 - dx);
        if sy < 0 || sx < 0 || sy >= h || sx >= w {
            T::of(BACKGROUND)
        } else {
            img.get(sy as usize, sx as usize, c)
        }
    })
}

/// Largest shift magnitude for a dimension of `size` pixels.
pub fn max_shift(size: usize, fraction: f64) -> i64 {
    (fraction * size as f64).floor() as i64
}

/// Draws `(dy, dx)` for a translation.
pub fn translation_offsets<R: Rng + ?Sized>(height: usize, width: usize, fraction: f64, rng: &mut R) -> (i64, i64) {
    let (my, mx) = (max_shift(height, fraction), max_shift(width, fraction));
    (rng.random_range(-my..=my), rng.random_range(-mx..=mx))
}

pub fn translate<T: Scalar, R: Rng + ?Sized>(img: &ImageTensor<T>, fraction: f64, rng: &mut R) -> ImageTensor<T> {
    if fraction == 0.0 {
        return img.clone();
    }
    let (dy, dx) = translation_offsets(img.height(), img.width(), fraction, rng);
    shift(img, dy, dx)
}

/// Blends a disc of `value` centred at `(cy, cx)` with a one pixel feathered rim.
pub fn draw_disc<T: Scalar>(img: &mut ImageTensor<T>, cy: f64, cx: f64, radius: f64, value: f64) {
    let reach = radius + 1.0;
    let y0 = (cy - reach).floor().max(0.0) as usize;
    let x0 = (cx - reach).floor().max(0.0) as usize;
    let y1 = ((cy + reach).ceil() as usize).min(img.height() - 1);
    let x1 = ((cx + reach).ceil() as usize).min(img.width() - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            let alpha = (radius + 0.5 - d).clamp(0.0, 1.0);
            if alpha > 0.0 {
                for c in 0..img.channels() {
                    let v = img.get(y, x, c).as_f64();
                    img.set(y, x, c, clamp01(T::of(v * (1.0 - alpha) + value * alpha)));
                }
            }
        }
    }
}

fn add_spots<T: Scalar, R: Rng + ?Sized>(img: &ImageTensor<T>, params: &SpotParams, value: f64, rng: &mut R) -> ImageTensor<T> {
    let mut out = img.clone();
    let count = rng.random_range(params.count.0..=params.count.1);
    let (h, w) = (img.height() as f64, img.width() as f64);
    for _ in 0..count {
        let r = uniform(rng, params.radius.0, params.radius.1);
        // keep the disc inside the frame when it fits
        let cy = uniform(rng, r.min(h / 2.0), (h - 1.0 - r).max(h / 2.0));
        let cx = uniform(rng, r.min(w / 2.0), (w - 1.0 - r).max(w / 2.0));
        draw_disc(&mut out, cy, cx, r, value);
    }
    out
}

/// Pen-stroke like ink blots.
pub fn add_black_spots<T: Scalar, R: Rng + ?Sized>(img: &ImageTensor<T>, params: &SpotParams, rng: &mut R) -> ImageTensor<T> {
    add_spots(img, params, 0.0, rng)
}

/// Erasure blots.
pub fn add_white_spots<T: Scalar, R: Rng + ?Sized>(img: &ImageTensor<T>, params: &SpotParams, rng: &mut R) -> ImageTensor<T> {
    add_spots(img, params, 1.0, rng)
}

/// Draws a dashed ink line of total `length` centred on `(cy, cx)` at
/// `angle` radians. Stroke coverage falls off linearly over one pixel from
/// the centre line.
pub fn draw_dashed_line<T: Scalar>(
    img: &mut ImageTensor<T>,
    cy: f64,
    cx: f64,
    angle: f64,
    length: f64,
    dash: f64,
    gap: f64,
) {
    let (dir_y, dir_x) = angle.sin_cos();
    let (sy, sx) = (cy - dir_y * length / 2.0, cx - dir_x * length / 2.0);
    let period = dash + gap;
    let reach = length / 2.0 + 1.0;
    let y0 = (cy - reach).floor().max(0.0) as usize;
    let x0 = (cx - reach).floor().max(0.0) as usize;
    let y1 = ((cy + reach).ceil().max(0.0) as usize).min(img.height() - 1);
    let x1 = ((cx + reach).ceil().max(0.0) as usize).min(img.width() - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (py, px) = (y as f64 - sy, x as f64 - sx);
            let t = py * dir_y + px * dir_x;
            if !(0.0..=length).contains(&t) || t % period >= dash {
                continue;
            }
            let perp = (px * dir_y - py * dir_x).abs();
            let alpha = (1.0 - perp).clamp(0.0, 1.0);
            if alpha > 0.0 {
                for c in 0..img.channels() {
                    let v = img.get(y, x, c).as_f64();
                    img.set(y, x, c, clamp01(T::of(v * (1.0 - alpha))));
                }
            }
        }
    }
}

pub fn add_dashed_lines<T: Scalar, R: Rng + ?Sized>(
    img: &ImageTensor<T>,
    params: &DashedLineParams,
    rng: &mut R,
) -> ImageTensor<T> {
    let mut out = img.clone();
    let count = rng.random_range(params.count.0..=params.count.1);
    for _ in 0..count {
        let cy = uniform(rng, 0.0, img.height() as f64 - 1.0);
        let cx = uniform(rng, 0.0, img.width() as f64 - 1.0);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let length = uniform(rng, params.length.0, params.length.1);
        draw_dashed_line(&mut out, cy, cx, angle, length, params.dash, params.gap);
    }
    out
}

/// Independent RNG for transform `slot` of sample `counter`.
pub fn stream_rng(seed: u64, counter: u64, slot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(counter.wrapping_mul(8).wrapping_add(slot));
    rng
}

/// rotate → contrast → translate → black spots → white spots → dashed lines.
pub fn augment<T: Scalar>(img: &ImageTensor<T>, config: &AugmentConfig, counter: u64) -> ImageTensor<T> {
    let rng = |slot| stream_rng(config.seed, counter, slot);
    let out = rotate(img, config.rotation_factor, &mut rng(0));
    let out = adjust_contrast(&out, config.contrast_factor, &mut rng(1));
    let out = translate(&out, config.translation_fraction, &mut rng(2));
    let out = add_black_spots(&out, &config.black_spots, &mut rng(3));
    let out = add_white_spots(&out, &config.white_spots, &mut rng(4));
    add_dashed_lines(&out, &config.dashed_lines, &mut rng(5))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth(h: usize, w: usize) -> ImageTensor<f64> {
        ImageTensor::from_fn(h, w, 1, |y, x, _| {
            0.5 + 0.3 * ((y as f64) / 5.0).sin() * ((x as f64) / 7.0).cos()
        })
    }

    fn glyph() -> ImageTensor<f32> {
        ImageTensor::from_fn(32, 32, 1, |y, x, _| {
            if (10..22).contains(&x) && (4..28).contains(&y) && (x == 12 || x == 19) {
                0.0
            } else {
                1.0
            }
        })
    }

    #[test]
    fn zero_factors_are_identity() {
        let img = smooth(32, 32);
        let mut rng = stream_rng(1, 0, 0);
        assert_eq!(rotate(&img, 0.0, &mut rng), img);
        assert_eq!(adjust_contrast(&img, 0.0, &mut rng), img);
        assert_eq!(translate(&img, 0.0, &mut rng), img);
        assert_eq!(add_black_spots(&img, &SpotParams::DISABLED, &mut rng), img);
        assert_eq!(add_white_spots(&img, &SpotParams::DISABLED, &mut rng), img);
        assert_eq!(add_dashed_lines(&img, &DashedLineParams::DISABLED, &mut rng), img);
        assert_eq!(augment(&img, &AugmentConfig::disabled(), 17), img);
    }

    #[test]
    fn rotation_angle_bound() {
        let mut rng = stream_rng(2, 0, 0);
        let max = (0..10_000)
            .map(|_| rotation_angle(0.05, &mut rng).abs())
            .fold(0.0, f64::max);
        assert!(max <= 18.0);
        assert!(max > 17.0, "draws should approach the bound, got {max}");
    }

    #[test]
    fn rotation_is_approximately_invertible() {
        let img = smooth(32, 32);
        for angle in [5.0, 12.0, -17.0] {
            let back = rotate_by(&rotate_by(&img, angle), -angle);
            let mut worst = 0.0f64;
            for y in 8..24 {
                for x in 8..24 {
                    worst = worst.max((back.get(y, x, 0) - img.get(y, x, 0)).abs());
                }
            }
            assert!(worst < 0.1, "angle {angle}: {worst}");
        }
    }

    #[test]
    fn contrast_collapse_and_mean_preservation() {
        let img = smooth(16, 16);
        let flat = scale_contrast(&img, 0.0);
        let m = img.mean();
        assert!(flat.data().iter().all(|&v| (v - m).abs() < 1e-12));

        // values stay in [0.2, 0.8]; s <= 1.5 keeps them inside [0, 1]
        let mut rng = stream_rng(3, 0, 0);
        for _ in 0..20 {
            let out = adjust_contrast(&img, 0.5, &mut rng);
            assert!((out.mean() - m).abs() < 1e-6);
        }
    }

    #[test]
    fn translation_bounds_and_white_fill() {
        let mut rng = stream_rng(4, 0, 0);
        for _ in 0..10_000 {
            let (dy, dx) = translation_offsets(32, 32, 0.2, &mut rng);
            assert!(dy.abs() <= 6 && dx.abs() <= 6);
        }
        let white = ImageTensor::<f32>::filled(32, 32, 1, 1.0);
        assert_eq!(translate(&white, 0.2, &mut rng), white);
        let shifted = shift(&glyph(), 0, 3);
        assert_eq!(shifted.get(10, 15, 0), 0.0);
        assert_eq!(shifted.get(10, 0, 0), 1.0);
    }

    #[test]
    fn black_spot_area_within_disc_bounds() {
        let params = SpotParams {
            count: (1, 1),
            radius: (2.0, 4.0),
        };
        let white = ImageTensor::<f64>::filled(32, 32, 1, 1.0);
        let hw = 32.0 * 32.0;
        let lo = std::f64::consts::PI * (params.radius.0 - 1.0).powi(2) / hw;
        let hi = std::f64::consts::PI * (params.radius.1 + 1.0).powi(2) / hw;
        for counter in 0..200 {
            let out = add_black_spots(&white, &params, &mut stream_rng(5, counter, 3));
            let dark = out.data().iter().filter(|&&v| v < 0.5).count() as f64 / hw;
            assert!(dark >= lo && dark <= hi, "fraction {dark} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn dashed_line_pixels_are_collinear() {
        let params = DashedLineParams {
            count: (1, 1),
            length: (10.0, 20.0),
            dash: 3.0,
            gap: 2.0,
        };
        let white = ImageTensor::<f64>::filled(32, 32, 1, 1.0);
        let mut checked = 0;
        for counter in 0..200 {
            let out = add_dashed_lines(&white, &params, &mut stream_rng(6, counter, 5));
            let pts: Vec<(f64, f64)> = (0..32)
                .flat_map(|y| (0..32).map(move |x| (y, x)))
                .filter(|&(y, x)| out.get(y, x, 0) < 0.5)
                .map(|(y, x)| (y as f64, x as f64))
                .collect();
            if pts.len() < 3 {
                continue;
            }
            checked += 1;
            // total least squares line through the centroid
            let n = pts.len() as f64;
            let (my, mx) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
            let (syy, sxx, sxy) = pts.iter().fold((0.0, 0.0, 0.0), |a, p| {
                let (dy, dx) = (p.0 - my, p.1 - mx);
                (a.0 + dy * dy, a.1 + dx * dx, a.2 + dx * dy)
            });
            let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
            let (sin, cos) = theta.sin_cos();
            let worst = pts
                .iter()
                .map(|p| ((p.1 - mx) * sin - (p.0 - my) * cos).abs())
                .fold(0.0, f64::max);
            assert!(worst <= 1.5, "residual {worst} at counter {counter}");
        }
        assert!(checked > 100);
    }

    #[test]
    fn augment_is_deterministic_and_seed_sensitive() {
        let img = glyph();
        let cfg = AugmentConfig {
            seed: 9,
            ..AugmentConfig::default()
        };
        let a = augment(&img, &cfg, 3);
        assert_eq!(a, augment(&img, &cfg, 3));
        let b = augment(&img, &AugmentConfig { seed: 10, ..cfg }, 3);
        assert_ne!(a, b);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!((a.height(), a.width(), a.channels()), (32, 32, 1));
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        assert!(AugmentConfig::disabled().validate().is_ok());
        let bad = AugmentConfig {
            translation_fraction: 1.5,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
