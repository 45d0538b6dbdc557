//! Synthetic-scene generation: noise injection, Gaussian-field abundance maps,
//! smooth endmember spectra, and linear mixing.

use super::{gaussian_filter_3d, AbundanceMaps, EndmemberMatrix, HsiCube, NoiseLevel, SyntheticScene};
use crate::error::{Result, UnmixError};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Adds i.i.d. zero-mean Gaussian noise with variance
/// `mean(Y^2) * 10^(-snr_db / 10)`. Noiseless inputs pass through unchanged.
/// Deterministic given the seed.
pub fn add_noise_at_snr(cube: &HsiCube, level: NoiseLevel, seed: u64) -> HsiCube {
    let snr_db = match level {
        NoiseLevel::Noiseless => return cube.clone(),
        NoiseLevel::SnrDb(v) => v,
    };
    let mean_sq = cube.values().mapv(|v| v * v).mean().unwrap();
    let sigma = (mean_sq * 10f64.powf(-snr_db / 10.0)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = cube.values().clone();
    for v in values.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v += sigma * n;
    }
    HsiCube { values }
}

/// Generates `P` smooth random abundance fields over an `H x W` grid: white
/// noise per material, blurred with a 2D Gaussian of width `sigma_field`,
/// standardized per field, then mapped through a per-pixel softmax so the
/// non-negativity and sum-to-one constraints hold by construction.
/// Deterministic given the seed.
pub fn generate_gaussian_field_abundances(
    materials: usize,
    height: usize,
    width: usize,
    sigma_field: f64,
    seed: u64,
) -> Result<AbundanceMaps> {
    if materials < 2 {
        return Err(UnmixError::InvalidInput(format!(
            "need at least 2 materials, got {materials}"
        )));
    }
    if height == 0 || width == 0 {
        return Err(UnmixError::InvalidInput("empty spatial grid".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fields = Array3::zeros((materials, height, width));
    for v in fields.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    // Blur spatially only: the material axis gets sigma 0.
    let blurred = gaussian_filter_3d(&HsiCube { values: fields }, (0.0, sigma_field, sigma_field));
    let mut fields = blurred.into_values();

    // Blurring shrinks the field variance by roughly 4*pi*sigma^2. Restore unit
    // scale, then apply a fixed gain so the softmax carves out patches where a
    // single material dominates at >0.98 next to smoothly mixed transitions.
    // Without the gain every map collapses toward 1/P and the scene carries no
    // near-pure pixels for a simplex search to find.
    const FIELD_GAIN: f64 = 2.5;
    for m in 0..materials {
        let mut field = fields.index_axis_mut(ndarray::Axis(0), m);
        let mean = field.mean().unwrap();
        let var = field.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        let std = var.sqrt().max(1e-12);
        field.mapv_inplace(|v| FIELD_GAIN * (v - mean) / std);
    }

    // Per-pixel softmax with temperature 1.
    let mut values = fields;
    for i in 0..height {
        for j in 0..width {
            let max = (0..materials)
                .map(|m| values[[m, i, j]])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for m in 0..materials {
                let e = (values[[m, i, j]] - max).exp();
                values[[m, i, j]] = e;
                sum += e;
            }
            for m in 0..materials {
                values[[m, i, j]] /= sum;
            }
        }
    }
    AbundanceMaps::new(values)
}

/// Number of Gaussian bumps summed per synthetic spectrum.
const ENDMEMBER_BUMPS: usize = 4;
/// Minimum pairwise spectral angle enforced between generated endmembers.
const MIN_PAIRWISE_SAD: f64 = 0.15;
/// Retry budget for the rejection loop.
const MAX_SEPARATION_ATTEMPTS: usize = 500;

fn random_spectrum(bands: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut spectrum = vec![0.05; bands];
    for _ in 0..ENDMEMBER_BUMPS {
        let center = rng.random_range(0.0..bands as f64);
        let width = rng.random_range(bands as f64 / 20.0..bands as f64 / 4.0);
        let amp = rng.random_range(0.2..1.0);
        for (l, v) in spectrum.iter_mut().enumerate() {
            let d = (l as f64 - center) / width;
            *v += amp * (-0.5 * d * d).exp();
        }
    }
    let max = spectrum.iter().cloned().fold(f64::MIN, f64::max);
    for v in &mut spectrum {
        *v /= max;
    }
    spectrum
}

fn spectral_angle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos()
}

/// Generates `P` smooth positive spectra (sums of Gaussian bumps over the band
/// index, normalized to a per-column maximum of 1) with pairwise spectral
/// angle at least 0.15, enforced by rejection. Deterministic given the seed.
pub fn generate_synthetic_endmembers(
    bands: usize,
    materials: usize,
    seed: u64,
) -> Result<EndmemberMatrix> {
    if materials >= bands {
        return Err(UnmixError::InvalidInput(format!(
            "need P < L, got P={materials}, L={bands}"
        )));
    }
    if materials == 0 {
        return Err(UnmixError::InvalidInput("need at least one material".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spectra: Vec<Vec<f64>> = Vec::with_capacity(materials);
    let mut attempts = 0;
    while spectra.len() < materials {
        let candidate = random_spectrum(bands, &mut rng);
        let separated = spectra
            .iter()
            .all(|s| spectral_angle(s, &candidate) >= MIN_PAIRWISE_SAD);
        if separated {
            spectra.push(candidate);
        } else {
            attempts += 1;
            if attempts >= MAX_SEPARATION_ATTEMPTS {
                return Err(UnmixError::SeparationFailure { attempts });
            }
        }
    }
    let mut values = Array2::zeros((bands, materials));
    for (p, s) in spectra.iter().enumerate() {
        for (l, v) in s.iter().enumerate() {
            values[[l, p]] = *v;
        }
    }
    EndmemberMatrix::new(values)
}

/// Mixes endmembers and abundances under the linear model:
/// `cube(l, x, y) = sum_p E(l, p) * A(p, x, y)`.
pub fn mix(endmembers: &EndmemberMatrix, abundances: &AbundanceMaps) -> Result<HsiCube> {
    if endmembers.materials() != abundances.materials() {
        return Err(UnmixError::DimensionMismatch(format!(
            "endmembers carry {} materials but abundances carry {}",
            endmembers.materials(),
            abundances.materials()
        )));
    }
    let (l, p) = endmembers.values().dim();
    let (_, h, w) = abundances.values().dim();
    let e = endmembers.values();
    let a = abundances.values();
    let mut values = Array3::zeros((l, h, w));
    for band in 0..l {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for m in 0..p {
                    acc += e[[band, m]] * a[[m, i, j]];
                }
                values[[band, i, j]] = acc;
            }
        }
    }
    HsiCube::new(values)
}

/// Builds a scene from ground truth: linear mixing plus Gaussian noise at the
/// requested SNR. Deterministic given the seed.
pub fn synthesize_scene(
    endmembers: &EndmemberMatrix,
    abundances: &AbundanceMaps,
    level: NoiseLevel,
    seed: u64,
) -> Result<SyntheticScene> {
    let clean = mix(endmembers, abundances)?;
    let cube = add_noise_at_snr(&clean, level, seed);
    Ok(SyntheticScene {
        cube,
        gt_endmembers: endmembers.clone(),
        gt_abundances: abundances.clone(),
        snr_db: level,
        seed,
    })
}
