//! Synthetic speckled image pairs with a known change mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{GksError, Result};
use crate::grid::{Image, Mask};
use crate::preclass::ImagePair;

/// Attempts at drawing a change mask inside the coverage band.
pub const MASK_RETRIES: usize = 200;
/// Allowed deviation of the mask coverage from `change_fraction`.
pub const COVERAGE_TOLERANCE: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub n_regions: usize,
    pub change_fraction: f64,
    pub change_gain: f64,
    pub looks: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 128,
            width: 128,
            n_regions: 12,
            change_fraction: 0.15,
            change_gain: 8.0,
            looks: 4.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(GksError::Config(m.to_string()));
        if self.height < 8 || self.width < 8 {
            return fail("synthetic images must be at least 8x8");
        }
        if self.n_regions < 1 {
            return fail("n_regions must be at least 1");
        }
        if !(self.change_fraction > 0.0 && self.change_fraction < 0.5) {
            return fail("change_fraction must lie in (0, 0.5)");
        }
        if !(self.change_gain > 0.0) || self.change_gain == 1.0 || !self.change_gain.is_finite() {
            return fail("change_gain must be positive, finite and different from 1");
        }
        if !(self.looks >= 1.0) || !self.looks.is_finite() {
            return fail("looks must be at least 1");
        }
        Ok(())
    }
}

/// Generated pair plus the noise-free reflectances on the same scale.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub pair: ImagePair,
    pub reflectance1: Image,
    pub reflectance2: Image,
}

fn voronoi_reflectance(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Image {
    let sites: Vec<(f64, f64, f64)> = (0..cfg.n_regions)
        .map(|_| {
            let r = rng.random::<f64>() * cfg.height as f64;
            let c = rng.random::<f64>() * cfg.width as f64;
            let level = 10f64.powf(rng.random_range(-1.0..0.0));
            (r, c, level)
        })
        .collect();
    Image::from_fn(cfg.height, cfg.width, |row, col| {
        let (y, x) = (row as f64 + 0.5, col as f64 + 0.5);
        sites
            .iter()
            .map(|&(r, c, level)| ((y - r).powi(2) + (x - c).powi(2), level))
            .fold((f64::INFINITY, 0.0), |best, cand| if cand.0 < best.0 { cand } else { best })
            .1
    })
}

fn draw_mask(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Option<Mask> {
    let (h, w) = (cfg.height, cfg.width);
    let total = (h * w) as f64;
    let blobs = rng.random_range(2..=5);
    let area = cfg.change_fraction * total / blobs as f64;
    let mut mask = Mask::filled(h, w, 0);
    let mut covered = 0usize;
    for _ in 0..4 * blobs {
        if covered as f64 >= (cfg.change_fraction - 0.01) * total {
            break;
        }
        let radius = (area / std::f64::consts::PI).sqrt() * rng.random_range(0.7..1.3);
        let cy = rng.random::<f64>() * h as f64;
        let cx = rng.random::<f64>() * w as f64;
        let r0 = (cy - radius).floor().max(0.0) as usize;
        let r1 = ((cy + radius).ceil() as usize).min(h);
        let c0 = (cx - radius).floor().max(0.0) as usize;
        let c1 = ((cx + radius).ceil() as usize).min(w);
        for row in r0..r1 {
            for col in c0..c1 {
                let d2 = (row as f64 + 0.5 - cy).powi(2) + (col as f64 + 0.5 - cx).powi(2);
                if d2 <= radius * radius && *mask.get(row, col) == 0 {
                    mask.set(row, col, 1);
                    covered += 1;
                }
            }
        }
    }
    let frac = covered as f64 / total;
    ((frac - cfg.change_fraction).abs() <= COVERAGE_TOLERANCE).then_some(mask)
}

pub fn generate_scene(cfg: &SynthConfig) -> Result<SynthScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let reflectance = voronoi_reflectance(cfg, &mut rng);
    let mask = (0..MASK_RETRIES)
        .find_map(|_| draw_mask(cfg, &mut rng))
        .ok_or_else(|| {
            GksError::Config(format!(
                "could not reach change_fraction {} within {MASK_RETRIES} attempts",
                cfg.change_fraction
            ))
        })?;
    let changed = Image::from_fn(cfg.height, cfg.width, |r, c| {
        let v = *reflectance.get(r, c);
        if *mask.get(r, c) != 0 {
            v * cfg.change_gain
        } else {
            v
        }
    });
    let gamma = Gamma::new(cfg.looks, 1.0 / cfg.looks).map_err(|e| GksError::Config(e.to_string()))?;
    let i1: Vec<f64> = reflectance.data().iter().map(|&v| v * gamma.sample(&mut rng)).collect();
    let i2: Vec<f64> = changed.data().iter().map(|&v| v * gamma.sample(&mut rng)).collect();
    let gmax = i1.iter().chain(&i2).cloned().fold(0.0, f64::max);
    let quantize = |v: f64| (v / gmax * 65535.0).round() / 65535.0;
    let (h, w) = (cfg.height, cfg.width);
    let img1 = Image::new(h, w, i1.into_iter().map(quantize).collect())?;
    let img2 = Image::new(h, w, i2.into_iter().map(quantize).collect())?;
    Ok(SynthScene {
        pair: ImagePair::new(img1, img2, Some(mask))?,
        reflectance1: reflectance.map(|&v| v / gmax),
        reflectance2: changed.map(|&v| v / gmax),
    })
}

/// Speckled pair with its ground-truth mask, deterministic under `cfg.seed`.
pub fn generate_synthetic_pair(cfg: &SynthConfig) -> Result<ImagePair> {
    Ok(generate_scene(cfg)?.pair)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coverage_in_band() {
        for seed in 0..10 {
            let pair = generate_synthetic_pair(&SynthConfig { seed, ..Default::default() }).unwrap();
            let n = pair.ground_truth().unwrap().data().iter().filter(|&&v| v == 1).count();
            assert!((1966..=2950).contains(&n), "seed {seed}: {n}");
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig { seed: 9, height: 32, width: 40, ..Default::default() };
        let a = generate_synthetic_pair(&cfg).unwrap();
        let b = generate_synthetic_pair(&cfg).unwrap();
        assert_eq!(a.img1(), b.img1());
        assert_eq!(a.img2(), b.img2());
        assert_eq!(a.ground_truth(), b.ground_truth());
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SynthConfig { change_fraction: 0.5, ..Default::default() },
            SynthConfig { change_gain: 1.0, ..Default::default() },
            SynthConfig { looks: 0.5, ..Default::default() },
        ] {
            assert!(generate_synthetic_pair(&cfg).is_err());
        }
    }
}
