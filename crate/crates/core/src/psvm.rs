//! Projected simplex-volume maximization: deterministic endmember extraction
//! via conditional denoising, subspace projection, maximum-volume simplex
//! search, and back-projection.

use crate::error::{Result, UnmixError};
use crate::hsi_data::{gaussian_filter_3d, reshape_to_matrix, EndmemberMatrix, HsiCube, PixelMatrix};
use crate::subspace::{
    band_mean, estimate_snr_with, project, snr_threshold_db, svm_maximize, SnrFormula,
};
use ndarray::{Array1, Array2};

/// Options controlling the extraction.
#[derive(Debug, Clone)]
pub struct PsvmOptions {
    /// Conditional denoising phase; `false` is the PSVM_ND variant.
    pub denoise: bool,
    /// Output form of the SNR estimate.
    pub snr_formula: SnrFormula,
    /// Gaussian filter widths `(sigma_band, sigma_row, sigma_col)` in voxels.
    pub gaussian_sigma: (f64, f64, f64),
    /// Offset in dB added to the `22 + 10 log10(P)` decision threshold.
    pub snr_threshold_offset: f64,
    /// Cap on simplex-search refinement sweeps.
    pub max_sweeps: usize,
}

impl Default for PsvmOptions {
    fn default() -> Self {
        Self {
            denoise: true,
            snr_formula: SnrFormula::Db,
            gaussian_sigma: (1.0, 1.0, 1.0),
            snr_threshold_offset: 0.0,
            max_sweeps: 50,
        }
    }
}

impl PsvmOptions {
    fn validate(&self) -> Result<()> {
        let (a, b, c) = self.gaussian_sigma;
        if a < 0.0 || b < 0.0 || c < 0.0 {
            return Err(UnmixError::InvalidInput(
                "gaussian sigma components must be nonnegative".into(),
            ));
        }
        if self.max_sweeps < 1 {
            return Err(UnmixError::InvalidInput("max_sweeps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which dimensionality-reduction branch the extraction took.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionBranch {
    /// SNR above threshold: project to `P` dims, projective normalization.
    HighSnr,
    /// SNR at or below threshold: mean-removed projection to `P - 1` dims.
    LowSnr,
}

/// Extraction result with the run's diagnostics.
#[derive(Debug, Clone)]
pub struct PsvmOutcome {
    pub endmembers: EndmemberMatrix,
    /// Source pixel index of each endmember column, ascending.
    pub indices: Vec<usize>,
    /// SNR estimated on the raw reshaped cube.
    pub snr_initial: f64,
    /// SNR used for the branch decision (re-estimated after any denoising).
    pub snr_used: f64,
    pub snr_threshold: f64,
    pub denoised: bool,
    pub branch: ProjectionBranch,
}

fn validate_inputs(cube: &HsiCube, materials: usize) -> Result<()> {
    if materials < 2 || materials >= cube.bands() {
        return Err(UnmixError::InvalidInput(format!(
            "need 2 <= P < L, got P={materials}, L={}",
            cube.bands()
        )));
    }
    if cube.num_pixels() < materials {
        return Err(UnmixError::InvalidInput(format!(
            "need at least P={materials} pixels, got {}",
            cube.num_pixels()
        )));
    }
    Ok(())
}

fn check_rank(r: &PixelMatrix) -> Result<()> {
    let values = r.values();
    let first = values.column(0);
    let all_identical = (1..values.dim().1).all(|j| values.column(j) == first);
    if all_identical {
        return Err(UnmixError::RankDeficient(
            "all pixels are identical; no simplex to search".into(),
        ));
    }
    Ok(())
}

/// Divides each column of `X_d` by its inner product with the reference
/// direction `u`, removing the per-pixel modulation factor. Fails, naming the
/// pixel, when a column is orthogonal to `u`.
pub fn projective_normalize_with_mean(x_d: &Array2<f64>, u: &Array1<f64>) -> Result<Array2<f64>> {
    let (d, n) = x_d.dim();
    let mut out = x_d.clone();
    for j in 0..n {
        let mut dot = 0.0;
        for i in 0..d {
            dot += x_d[[i, j]] * u[i];
        }
        if dot.abs() <= 1e-12 {
            return Err(UnmixError::NormalizationFailure { pixel: j });
        }
        for i in 0..d {
            out[[i, j]] /= dot;
        }
    }
    Ok(out)
}

/// [`projective_normalize_with_mean`] with `u` taken as the column mean of
/// `X_d` itself, as in the extraction pipeline.
pub fn projective_normalize(x_d: &Array2<f64>) -> Result<Array2<f64>> {
    let (d, n) = x_d.dim();
    let mut u = Array1::zeros(d);
    for i in 0..d {
        let mut acc = 0.0;
        for j in 0..n {
            acc += x_d[[i, j]];
        }
        u[i] = acc / n as f64;
    }
    projective_normalize_with_mean(x_d, &u)
}

/// Runs the full extraction and returns the endmembers along with the branch
/// diagnostics. Deterministic: equal inputs give bit-equal outputs.
pub fn psvm_run(cube: &HsiCube, materials: usize, options: &PsvmOptions) -> Result<PsvmOutcome> {
    validate_inputs(cube, materials)?;
    options.validate()?;

    let mut r = reshape_to_matrix(cube);
    check_rank(&r)?;

    let snr_initial = estimate_snr_with(&r, materials, options.snr_formula)?;
    let threshold = snr_threshold_db(materials) + options.snr_threshold_offset;

    let mut denoised = false;
    if options.denoise && snr_initial < threshold {
        let filtered = gaussian_filter_3d(cube, options.gaussian_sigma);
        r = reshape_to_matrix(&filtered);
        check_rank(&r)?;
        denoised = true;
    }
    let snr_used = estimate_snr_with(&r, materials, options.snr_formula)?;

    let (endmembers, indices, branch) = if snr_used > threshold {
        // project onto P dims and strip the modulation factor
        let (basis, x_d) = project(&r, materials)?;
        let r_d = projective_normalize(&x_d)?;
        let indices = svm_maximize(r_d.view(), materials, options.max_sweeps)?;
        let mut e = Array2::zeros((cube.bands(), materials));
        for (col, &idx) in indices.iter().enumerate() {
            for l in 0..cube.bands() {
                let mut acc = 0.0;
                for k in 0..materials {
                    acc += basis.matrix()[[l, k]] * x_d[[k, idx]];
                }
                e[[l, col]] = acc;
            }
        }
        (e, indices, ProjectionBranch::HighSnr)
    } else {
        // mean-removed projection onto P-1 dims
        let mean = band_mean(r.values());
        let mut centered = r.values().clone();
        for i in 0..centered.dim().0 {
            for j in 0..centered.dim().1 {
                centered[[i, j]] -= mean[i];
            }
        }
        let centered = PixelMatrix::new(centered)?;
        let d = materials - 1;
        let (basis, x_d) = project(&centered, d)?;
        let indices = svm_maximize(x_d.view(), materials, options.max_sweeps)?;
        let mut e = Array2::zeros((cube.bands(), materials));
        for (col, &idx) in indices.iter().enumerate() {
            for l in 0..cube.bands() {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += basis.matrix()[[l, k]] * x_d[[k, idx]];
                }
                e[[l, col]] = acc + mean[l];
            }
        }
        (e, indices, ProjectionBranch::LowSnr)
    };

    Ok(PsvmOutcome {
        endmembers: EndmemberMatrix::new(endmembers)?,
        indices,
        snr_initial,
        snr_used,
        snr_threshold: threshold,
        denoised,
        branch,
    })
}

/// Extracts the `L x P` endmember matrix from a cube, columns ordered by
/// ascending source pixel index.
pub fn psvm_extract(cube: &HsiCube, materials: usize, options: &PsvmOptions) -> Result<EndmemberMatrix> {
    Ok(psvm_run(cube, materials, options)?.endmembers)
}

/// The plain simplex-search baseline: no SNR estimation, no denoising, always
/// the mean-removed top-`(P-1)` projection followed by the volume search and
/// back-projection.
pub fn svm_baseline_extract(
    cube: &HsiCube,
    materials: usize,
    max_sweeps: usize,
) -> Result<EndmemberMatrix> {
    validate_inputs(cube, materials)?;
    let r = reshape_to_matrix(cube);
    check_rank(&r)?;
    let mean = band_mean(r.values());
    let mut centered = r.values().clone();
    for i in 0..centered.dim().0 {
        for j in 0..centered.dim().1 {
            centered[[i, j]] -= mean[i];
        }
    }
    let centered = PixelMatrix::new(centered)?;
    let d = materials - 1;
    let (basis, x_d) = project(&centered, d)?;
    let indices = svm_maximize(x_d.view(), materials, max_sweeps)?;
    let mut e = Array2::zeros((cube.bands(), materials));
    for (col, &idx) in indices.iter().enumerate() {
        for l in 0..cube.bands() {
            let mut acc = 0.0;
            for k in 0..d {
                acc += basis.matrix()[[l, k]] * x_d[[k, idx]];
            }
            e[[l, col]] = acc + mean[l];
        }
    }
    EndmemberMatrix::new(e)
}
