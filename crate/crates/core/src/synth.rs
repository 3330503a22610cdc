//! Synthetic anomalies: Perlin-noise masks restricted to the object foreground,
//! filled with a blend of the original image and a foreign texture.

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{ColorImage, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerlinParams {
    /// Lattice cells along (x, y) for the first octave.
    pub grid_periods: (usize, usize),
    pub octaves: usize,
    pub persistence: f64,
    pub threshold: f64,
}

impl Default for PerlinParams {
    fn default() -> Self {
        Self {
            grid_periods: (4, 4),
            octaves: 2,
            persistence: 0.5,
            threshold: 0.5,
        }
    }
}

impl PerlinParams {
    pub fn validate(&self) -> Result<()> {
        let (px, py) = self.grid_periods;
        if px < 1 || py < 1 {
            return Err(Error::invalid("perlin grid periods must be >= 1"));
        }
        if self.octaves < 1 {
            return Err(Error::invalid("perlin octaves must be >= 1"));
        }
        if !(self.persistence > 0.0 && self.persistence <= 1.0) {
            return Err(Error::invalid("perlin persistence must lie in (0, 1]"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid("binarization threshold must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Perlin parameters plus the range of the blend opacity β.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub perlin: PerlinParams,
    /// β is drawn from `[min_opacity, max_opacity)`.
    pub min_opacity: f64,
    pub max_opacity: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            perlin: PerlinParams::default(),
            min_opacity: 0.15,
            max_opacity: 1.0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        self.perlin.validate()?;
        if !(0.0 <= self.min_opacity && self.min_opacity < self.max_opacity && self.max_opacity <= 1.0) {
            return Err(Error::invalid("opacity range must satisfy 0 <= min < max <= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalySample {
    pub x_plus: ColorImage,
    pub x_minus: ColorImage,
    pub mask: Mask,
    pub seed: u64,
    pub beta: f64,
    /// Set when there was no foreground to place an anomaly on.
    pub degenerate: bool,
}

/// True exactly where the depth is positive.
pub fn foreground_mask(depth: &Array2<f64>) -> Result<Mask> {
    if let Some(bad) = depth.iter().find(|d| !(**d >= 0.0)) {
        return Err(Error::invalid(format!("depth must be non-negative, found {bad}")));
    }
    Ok(depth.mapv(|d| d > 0.0))
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

fn perlin_octave(h: usize, w: usize, px: usize, py: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let gradients: Vec<(f64, f64)> = (0..(px + 1) * (py + 1))
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            (angle.cos(), angle.sin())
        })
        .collect();
    let grad = |gx: usize, gy: usize| gradients[gy * (px + 1) + gx];
    Array2::from_shape_fn((h, w), |(r, c)| {
        let x = c as f64 * px as f64 / w as f64;
        let y = r as f64 * py as f64 / h as f64;
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let dot = |gx: usize, gy: usize, dx: f64, dy: f64| {
            let g = grad(gx, gy);
            g.0 * dx + g.1 * dy
        };
        let n00 = dot(x0, y0, fx, fy);
        let n10 = dot(x0 + 1, y0, fx - 1.0, fy);
        let n01 = dot(x0, y0 + 1, fx, fy - 1.0);
        let n11 = dot(x0 + 1, y0 + 1, fx - 1.0, fy - 1.0);
        let (u, v) = (fade(fx), fade(fy));
        lerp(lerp(n00, n10, u), lerp(n01, n11, u), v)
    })
}

/// Lattice-gradient Perlin noise summed over octaves and min-max normalised to
/// `[0, 1]`. A constant field (no spread to normalise) comes back as all 0.5.
pub fn perlin_field(h: usize, w: usize, params: &PerlinParams, seed: u64) -> Result<Array2<f64>> {
    params.validate()?;
    let (px, py) = params.grid_periods;
    if h < py || w < px {
        return Err(Error::invalid(format!(
            "{h}x{w} field is smaller than the {px}x{py} lattice"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = Array2::<f64>::zeros((h, w));
    let mut amplitude = 1.0;
    for octave in 0..params.octaves {
        let scale = 1usize << octave;
        // octaves finer than the pixel grid only alias
        let (ox, oy) = ((px * scale).min(w), (py * scale).min(h));
        field.scaled_add(amplitude, &perlin_octave(h, w, ox, oy, &mut rng));
        amplitude *= params.persistence;
    }
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) || !span.is_finite() {
        return Ok(Array2::from_elem((h, w), 0.5));
    }
    field.mapv_inplace(|v| ((v - lo) / span).clamp(0.0, 1.0));
    Ok(field)
}

/// Seeded colour texture used when no directory of anomaly source images is given.
pub fn procedural_source(h: usize, w: usize, seed: u64) -> ColorImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c010_u64);
    let mut image = ColorImage::zeros((h, w, 3));
    for ch in 0..3 {
        let params = PerlinParams {
            grid_periods: (
                rng.random_range(2..=8).min(w.max(1)),
                rng.random_range(2..=8).min(h.max(1)),
            ),
            octaves: 3,
            persistence: 0.6,
            threshold: 0.5,
        };
        let field = perlin_field(h, w, &params, rng.random()).unwrap_or_else(|_| Array2::from_elem((h, w), 0.5));
        for ((r, c), v) in field.indexed_iter() {
            let speckle: f64 = rng.random_range(-0.15..0.15);
            image[[r, c, ch]] = (v + speckle).clamp(0.0, 1.0);
        }
    }
    image
}

/// Builds `(x⁺, x⁻, m̂)`: the mask is the thresholded Perlin field intersected
/// with the depth foreground, and inside it `x⁻ = β·x⁺ + (1-β)·source` with a
/// single β per sample. Outside the mask `x⁻` is a copy of `x⁺`.
pub fn synthesize_anomaly(
    x_plus: &ColorImage,
    depth: &Array2<f64>,
    source_image: &ColorImage,
    params: &SynthParams,
    seed: u64,
) -> Result<AnomalySample> {
    params.validate()?;
    let (h, w, c) = x_plus.dim();
    if c != 3 || depth.dim() != (h, w) || source_image.dim() != (h, w, 3) {
        return Err(Error::invalid(format!(
            "shape mismatch: image {:?}, depth {:?}, source {:?}",
            x_plus.dim(),
            depth.dim(),
            source_image.dim()
        )));
    }
    let in_unit = |img: &ColorImage| img.iter().all(|v| (0.0..=1.0).contains(v));
    if !in_unit(x_plus) || !in_unit(source_image) {
        return Err(Error::invalid("images must take values in [0, 1]"));
    }
    let foreground = foreground_mask(depth)?;
    let noise = perlin_field(h, w, &params.perlin, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.rotate_left(17) ^ 0xb1e4_d000_u64);
    let beta = rng.random_range(params.min_opacity..params.max_opacity);

    let mut mask = Mask::from_elem((h, w), false);
    Zip::from(&mut mask)
        .and(&noise)
        .and(&foreground)
        .for_each(|m, &n, &fg| *m = fg && n >= params.perlin.threshold);

    let mut x_minus = x_plus.clone();
    for ((r, col), &hit) in mask.indexed_iter() {
        if hit {
            for ch in 0..3 {
                let v = beta * x_plus[[r, col, ch]] + (1.0 - beta) * source_image[[r, col, ch]];
                x_minus[[r, col, ch]] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(AnomalySample {
        x_plus: x_plus.clone(),
        x_minus,
        mask,
        seed,
        beta,
        degenerate: !foreground.iter().any(|f| *f),
    })
}
