//! Procedural toy category: smooth height-field objects with shaded textures.
//!
//! Training shots and the held-out split come from disjoint seed labels, and the
//! held-out anomalies are blended texture patches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::PointCloudGrid;
use crate::inference::TestSample;
use crate::nn::derive_seed;
use crate::synth::{procedural_source, synthesize_anomaly, SynthParams};
use crate::training::ShotSample;
use crate::ColorImage;

pub const TOY_CLASS: &str = "toy";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub size: usize,
    pub seed: u64,
    pub test_normal: usize,
    pub test_anomalous: usize,
    /// Held-out anomalies draw β from `[min_opacity, test_max_opacity)`.
    pub test_max_opacity: f64,
    /// Smallest anomalous area, as a fraction of the image, kept in the test split.
    pub min_anomaly_fraction: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            size: 240,
            seed: 0x70e_da7a,
            test_normal: 20,
            test_anomalous: 20,
            test_max_opacity: 0.5,
            min_anomaly_fraction: 0.01,
        }
    }
}

struct Bump {
    r: f64,
    c: f64,
    sigma: f64,
    height: f64,
}

/// One toy object. Shape, relief and pattern phase vary with `seed`.
pub fn toy_object(size: usize, seed: u64) -> ShotSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let (cr, cc) = (s * rng.random_range(0.47..0.53), s * rng.random_range(0.47..0.53));
    let (ar, ac) = (s * rng.random_range(0.30..0.36), s * rng.random_range(0.30..0.36));
    let exponent = rng.random_range(2.5..3.5);
    let bumps: Vec<Bump> = (0..4)
        .map(|_| Bump {
            r: cr + ar * rng.random_range(-0.6..0.6),
            c: cc + ac * rng.random_range(-0.6..0.6),
            sigma: s * rng.random_range(0.06..0.12),
            height: rng.random_range(0.02..0.05),
        })
        .collect();
    let phase = rng.random_range(0.0..std::f64::consts::TAU);

    let inside = |r: f64, c: f64| ((r - cr) / ar).abs().powf(exponent) + ((c - cc) / ac).abs().powf(exponent) <= 1.0;
    let height = |r: f64, c: f64| {
        let u = ((r - cr) / ar).powi(2) + ((c - cc) / ac).powi(2);
        let dome = 0.06 * (1.0 - u.min(1.0));
        dome + bumps
            .iter()
            .map(|b| b.height * (-((r - b.r).powi(2) + (c - b.c).powi(2)) / (2.0 * b.sigma * b.sigma)).exp())
            .sum::<f64>()
    };

    // metric extent of the object is 0.2 across; the camera looks down +z
    let scale = 0.2 / s;
    let mut points = Vec::with_capacity(size * size);
    let mut valid = Vec::with_capacity(size * size);
    let mut image = ColorImage::zeros((size, size, 3));
    let base = [0.78, 0.62, 0.42];
    let light = normalize([-0.4, -0.5, 1.0]);
    for r in 0..size {
        for c in 0..size {
            let (rf, cf) = (r as f64 + 0.5, c as f64 + 0.5);
            if !inside(rf, cf) {
                points.push([0.0; 3]);
                valid.push(false);
                continue;
            }
            let h = height(rf, cf);
            points.push([(cf - s / 2.0) * scale, (rf - s / 2.0) * scale, 0.5 - h]);
            valid.push(true);
            let dzdc = (height(rf, cf + 1.0) - height(rf, cf - 1.0)) / (2.0 * scale);
            let dzdr = (height(rf + 1.0, cf) - height(rf - 1.0, cf)) / (2.0 * scale);
            let n = normalize([-dzdc, -dzdr, 1.0]);
            let shade = 0.35 + 0.65 * (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0);
            let stripe = 0.06 * ((rf + cf) * 0.08 + phase).sin();
            for ch in 0..3 {
                image[[r, c, ch]] = (base[ch] * shade + stripe).clamp(0.0, 1.0);
            }
        }
    }
    let cloud = PointCloudGrid::new(size, size, points, valid).expect("grid sizes agree by construction");
    ShotSample { image, cloud }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

impl ToyConfig {
    pub fn train_samples(&self, k: usize) -> Vec<ShotSample> {
        (0..k)
            .map(|i| toy_object(self.size, derive_seed(self.seed, &format!("train/object{i}"))))
            .collect()
    }

    /// Normal samples first, then anomalous ones.
    pub fn test_samples(&self) -> Result<Vec<TestSample>> {
        let mut out = Vec::with_capacity(self.test_normal + self.test_anomalous);
        for i in 0..self.test_normal {
            let obj = toy_object(self.size, derive_seed(self.seed, &format!("test/normal{i}")));
            out.push(TestSample {
                name: format!("normal_{i:03}"),
                image: obj.image,
                cloud: obj.cloud,
                mask: None,
                label: false,
            });
        }
        let params = SynthParams {
            max_opacity: self.test_max_opacity,
            ..SynthParams::default()
        };
        let area = (self.size * self.size) as f64;
        for i in 0..self.test_anomalous {
            let obj = toy_object(self.size, derive_seed(self.seed, &format!("test/anomalous{i}")));
            let depth = obj.cloud.depth_map();
            let mut attempt = 0usize;
            let sample = loop {
                let seed = derive_seed(self.seed, &format!("test/anomaly{i}/{attempt}"));
                let source = procedural_source(self.size, self.size, derive_seed(seed, "source"));
                let sample = synthesize_anomaly(&obj.image, &depth, &source, &params, seed)?;
                let hit = sample.mask.iter().filter(|m| **m).count() as f64;
                if hit / area >= self.min_anomaly_fraction {
                    break sample;
                }
                attempt += 1;
            };
            out.push(TestSample {
                name: format!("anomalous_{i:03}"),
                image: sample.x_minus,
                cloud: obj.cloud,
                mask: Some(sample.mask),
                label: true,
            });
        }
        Ok(out)
    }
}
