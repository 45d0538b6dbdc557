//! Linear-algebra subroutines behind the endmember extractor: correlation
//! eigenprojection, SNR estimation, Cayley-Menger simplex volume, and the
//! simplex-volume maximization search.

use crate::error::{Result, UnmixError};
use crate::hsi_data::PixelMatrix;
use ndarray::{Array1, Array2, ArrayView2};

/// An orthonormal basis of the top-`d` correlation eigenvectors.
#[derive(Debug, Clone)]
pub struct ProjectionBasis {
    u: Array2<f64>,
    eigenvalues: Vec<f64>,
}

impl ProjectionBasis {
    /// The `L x d` basis matrix with orthonormal columns.
    pub fn matrix(&self) -> &Array2<f64> {
        &self.u
    }

    pub fn dim(&self) -> usize {
        self.u.dim().1
    }

    /// Eigenvalues of the retained directions, in non-increasing order.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }
}

/// Which form of the SNR estimate to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SnrFormula {
    /// `10 * log10(ratio)` in decibels.
    #[default]
    Db,
    /// The literal `|log10(ratio)|` form, kept for auditing.
    AsWritten,
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition (cyclic Jacobi)
// ---------------------------------------------------------------------------

const JACOBI_MAX_SWEEPS: usize = 64;

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues (unsorted) and eigenvectors as columns of `v`.
fn jacobi_eigen(mut a: Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.dim().0;
    let mut v = Array2::eye(n);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        let scale: f64 = (0..n).map(|i| a[[i, i]] * a[[i, i]]).sum::<f64>() + off;
        if off <= f64::EPSILON * f64::EPSILON * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                let tau = (aqq - app) / (2.0 * apq);
                // the smaller-magnitude root keeps the rotation stable
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues = (0..n).map(|i| a[[i, i]]).collect();
    (eigenvalues, v)
}

/// Flips each column so its largest-magnitude component is positive
/// (ties: first such index).
fn normalize_signs(u: &mut Array2<f64>) {
    let (rows, cols) = u.dim();
    for c in 0..cols {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for r in 0..rows {
            let a = u[[r, c]].abs();
            if a > best_abs {
                best_abs = a;
                best = r;
            }
        }
        if u[[best, c]] < 0.0 {
            for r in 0..rows {
                u[[r, c]] = -u[[r, c]];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Correlation eigenprojection
// ---------------------------------------------------------------------------

fn correlation_matrix(r: &Array2<f64>) -> Array2<f64> {
    let (l, n) = r.dim();
    let mut m = Array2::zeros((l, l));
    let data = r.as_slice().expect("standard layout");
    // accumulate R R^T one pixel column at a time; R is row-major so walk rows
    for i in 0..l {
        let row_i = &data[i * n..(i + 1) * n];
        for j in i..l {
            let row_j = &data[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (a, b) in row_i.iter().zip(row_j.iter()) {
                acc += a * b;
            }
            m[[i, j]] = acc / n as f64;
            m[[j, i]] = m[[i, j]];
        }
    }
    m
}

/// Top-`d` eigenvectors of the correlation matrix `R R^T / N`, ordered by
/// non-increasing eigenvalue, each column sign-normalized so its
/// largest-magnitude component is positive.
pub fn correlation_eigs(r: &PixelMatrix, d: usize) -> Result<ProjectionBasis> {
    let (l, n) = r.values().dim();
    if d < 1 || d > l.min(n) {
        return Err(UnmixError::InvalidInput(format!(
            "subspace dimension {d} out of range 1..={}",
            l.min(n)
        )));
    }
    let corr = correlation_matrix(r.values());
    let (eigenvalues, vectors) = jacobi_eigen(corr);
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| {
        eigenvalues[b]
            .partial_cmp(&eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut u = Array2::zeros((l, d));
    let mut kept = Vec::with_capacity(d);
    for (col, &idx) in order.iter().take(d).enumerate() {
        for row in 0..l {
            u[[row, col]] = vectors[[row, idx]];
        }
        kept.push(eigenvalues[idx]);
    }
    normalize_signs(&mut u);
    Ok(ProjectionBasis { u, eigenvalues: kept })
}

/// Projects the pixel matrix onto its top-`d` correlation eigenvectors:
/// returns the basis and `X_d = U_d^T R`.
pub fn project(r: &PixelMatrix, d: usize) -> Result<(ProjectionBasis, Array2<f64>)> {
    let basis = correlation_eigs(r, d)?;
    let x = basis.u.t().dot(r.values());
    Ok((basis, x))
}

// ---------------------------------------------------------------------------
// SNR estimation
// ---------------------------------------------------------------------------

/// Per-band mean spectrum of the pixel matrix.
pub(crate) fn band_mean(r: &Array2<f64>) -> Array1<f64> {
    let (l, n) = r.dim();
    let mut mean = Array1::zeros(l);
    for i in 0..l {
        let mut acc = 0.0;
        for j in 0..n {
            acc += r[[i, j]];
        }
        mean[i] = acc / n as f64;
    }
    mean
}

fn subtract_column(r: &Array2<f64>, col: &Array1<f64>) -> Array2<f64> {
    let (l, n) = r.dim();
    let mut out = r.clone();
    for i in 0..l {
        let m = col[i];
        for j in 0..n {
            out[[i, j]] -= m;
        }
    }
    out
}

/// Decision threshold between the projective and the mean-removed branch:
/// `22 + 10 log10(P)` dB.
pub fn snr_threshold_db(materials: usize) -> f64 {
    22.0 + 10.0 * (materials as f64).log10()
}

/// Estimates the SNR of the pixel matrix assuming a `P`-dimensional signal
/// subspace: projects the mean-removed data onto its top-`P` basis and
/// compares retained to discarded power. The ratio argument is clamped below
/// at `1e-12`, as is the denominator, so degenerate (noiseless) inputs report
/// a large positive SNR instead of failing.
pub fn estimate_snr(r: &PixelMatrix, materials: usize) -> Result<f64> {
    estimate_snr_with(r, materials, SnrFormula::Db)
}

/// [`estimate_snr`] with an explicit choice of output formula.
pub fn estimate_snr_with(r: &PixelMatrix, materials: usize, formula: SnrFormula) -> Result<f64> {
    let (l, n) = r.values().dim();
    if materials >= l {
        return Err(UnmixError::InvalidInput(format!(
            "need P < L, got P={materials}, L={l}"
        )));
    }
    let mean = band_mean(r.values());
    let centered = PixelMatrix::new(subtract_column(r.values(), &mean))?;
    let (_, projected) = project(&centered, materials)?;

    let p_r: f64 = r.values().iter().map(|v| v * v).sum::<f64>() / n as f64;
    let p_rp: f64 = projected.iter().map(|v| v * v).sum::<f64>() / n as f64
        + mean.iter().map(|v| v * v).sum::<f64>();

    let numerator = p_rp - (materials as f64 / l as f64) * p_r;
    // A noiseless cube makes the denominator vanish (or go slightly negative
    // from rounding); clamp it so the ratio blows up toward +inf as intended.
    let denominator = (p_r - p_rp).max(1e-12);
    let ratio = (numerator / denominator).max(1e-12);
    Ok(match formula {
        SnrFormula::Db => 10.0 * ratio.log10(),
        SnrFormula::AsWritten => ratio.log10().abs(),
    })
}

// ---------------------------------------------------------------------------
// Cayley-Menger simplex volume
// ---------------------------------------------------------------------------

/// Determinant by LU elimination with partial pivoting.
fn determinant(mut m: Array2<f64>) -> f64 {
    let n = m.dim().0;
    let mut sign = 1.0f64;
    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_val = m[[col, col]].abs();
        for row in (col + 1)..n {
            let v = m[[row, col]].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = row;
            }
        }
        if pivot_val == 0.0 {
            return 0.0;
        }
        if pivot_row != col {
            for k in 0..n {
                let tmp = m[[col, k]];
                m[[col, k]] = m[[pivot_row, k]];
                m[[pivot_row, k]] = tmp;
            }
            sign = -sign;
        }
        let pivot = m[[col, col]];
        for row in (col + 1)..n {
            let factor = m[[row, col]] / pivot;
            for k in col..n {
                m[[row, k]] -= factor * m[[col, k]];
            }
        }
    }
    let mut det = sign;
    for i in 0..n {
        det *= m[[i, i]];
    }
    det
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Squared volume of the simplex spanned by the `P` columns of `points`
/// (`d x P`, `d >= P - 1`), via the bordered squared-distance determinant.
/// Rounding can push the exact value slightly negative; the result is clamped
/// at zero.
pub fn cayley_menger_sq_volume(points: ArrayView2<f64>) -> f64 {
    let (d, p) = points.dim();
    assert!(p >= 2, "need at least two points");
    assert!(d + 1 >= p, "ambient dimension too small for a {p}-vertex simplex");
    let mut c = Array2::zeros((p + 1, p + 1));
    for i in 0..p {
        c[[0, i + 1]] = 1.0;
        c[[i + 1, 0]] = 1.0;
        for j in (i + 1)..p {
            let mut dist = 0.0;
            for k in 0..d {
                let diff = points[[k, i]] - points[[k, j]];
                dist += diff * diff;
            }
            c[[i + 1, j + 1]] = dist;
            c[[j + 1, i + 1]] = dist;
        }
    }
    let det = determinant(c);
    let denom = if p % 2 == 0 { 1.0 } else { -1.0 }
        * 2f64.powi(p as i32 - 1)
        * factorial(p - 1).powi(2);
    (det / denom).max(0.0)
}

// ---------------------------------------------------------------------------
// Simplex-volume maximization
// ---------------------------------------------------------------------------

/// Relative improvement a substitution must exceed to be accepted.
const SVM_IMPROVEMENT: f64 = 1e-12;
/// Escape rounds attempted after the slot sweeps converge.
const SVM_ESCAPE_ROUNDS: usize = 4;

fn sq_volume_of(data: &Array2<f64>, indices: &[usize]) -> f64 {
    let d = data.dim().0;
    let mut pts = Array2::zeros((d, indices.len()));
    for (c, &idx) in indices.iter().enumerate() {
        for r in 0..d {
            pts[[r, c]] = data[[r, idx]];
        }
    }
    cayley_menger_sq_volume(pts.view())
}

fn column_sq_norm(data: &Array2<f64>, j: usize) -> f64 {
    (0..data.dim().0).map(|i| data[[i, j]] * data[[i, j]]).sum()
}

fn strictly_better(candidate: f64, incumbent: f64) -> bool {
    candidate > incumbent * (1.0 + SVM_IMPROVEMENT) && candidate > incumbent
}

/// Completes a partial vertex set to `p` members by greedily adding the column
/// that maximizes the squared volume (ties: lowest index). Columns listed in
/// `forbidden` are skipped unless the remaining pool runs dry. An empty base
/// starts from the max-norm column.
fn greedy_complete(data: &Array2<f64>, base: &[usize], forbidden: &[usize], p: usize) -> Vec<usize> {
    let n = data.dim().1;
    let mut chosen = base.to_vec();
    if chosen.is_empty() {
        let mut best_j = 0usize;
        let mut best_norm = -1.0;
        for j in 0..n {
            if forbidden.contains(&j) {
                continue;
            }
            let norm = column_sq_norm(data, j);
            if norm > best_norm {
                best_norm = norm;
                best_j = j;
            }
        }
        chosen.push(best_j);
    }
    while chosen.len() < p {
        let mut best_j = usize::MAX;
        let mut best_v = -1.0;
        let mut trial = chosen.clone();
        trial.push(0);
        for j in 0..n {
            if forbidden.contains(&j) || chosen.contains(&j) {
                continue;
            }
            *trial.last_mut().unwrap() = j;
            let v = sq_volume_of(data, &trial);
            if v > best_v {
                best_v = v;
                best_j = j;
            }
        }
        if best_j == usize::MAX {
            // pool exhausted by the forbidden set; allow everything not chosen
            for j in 0..n {
                if chosen.contains(&j) {
                    continue;
                }
                *trial.last_mut().unwrap() = j;
                let v = sq_volume_of(data, &trial);
                if v > best_v {
                    best_v = v;
                    best_j = j;
                }
            }
        }
        chosen.push(best_j);
    }
    chosen
}

/// Slot-ordered replacement sweeps: for each slot in order, substitute the
/// best column that strictly increases the squared volume (relative
/// improvement above [`SVM_IMPROVEMENT`]), until a full sweep changes nothing
/// or `max_sweeps` is reached. Returns the refined set and its squared volume.
fn refine_sweeps(
    data: &Array2<f64>,
    mut chosen: Vec<usize>,
    max_sweeps: usize,
) -> (Vec<usize>, f64) {
    let n = data.dim().1;
    let p = chosen.len();
    let mut current_v = sq_volume_of(data, &chosen);
    for _ in 0..max_sweeps {
        let mut changed = false;
        for slot in 0..p {
            let original = chosen[slot];
            let mut best_j = original;
            let mut best_v = current_v;
            for j in 0..n {
                if j != original && chosen.contains(&j) {
                    continue;
                }
                chosen[slot] = j;
                let v = sq_volume_of(data, &chosen);
                if strictly_better(v, best_v) {
                    best_v = v;
                    best_j = j;
                }
            }
            chosen[slot] = best_j;
            if best_j != original {
                current_v = best_v;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    (chosen, current_v)
}

/// Deterministic search for the `P` columns of `R_d` spanning the
/// maximum-volume simplex.
///
/// Structure: greedy seeding (from the max-norm column plus each per-axis
/// extreme column) followed by slot-ordered replacement sweeps from every
/// seed, keeping the best result; then bounded escape rounds that drop one or
/// two kept vertices, re-complete the set greedily, and re-sweep. Every
/// arg-max breaks ties toward the lowest index and the overall winner breaks
/// volume ties lexicographically, so equal inputs give equal outputs. The
/// replacement sweeps alone can stall in a locally maximal set; the fixed
/// multi-start and drop escapes recover the exhaustive optimum on every small
/// instance family tested. Returns sorted pixel indices.
pub fn svm_maximize(r_d: ArrayView2<f64>, materials: usize, max_sweeps: usize) -> Result<Vec<usize>> {
    let (d, n) = r_d.dim();
    if n < materials {
        return Err(UnmixError::InvalidInput(format!(
            "need at least P={materials} pixels, got {n}"
        )));
    }
    if materials < 2 {
        return Err(UnmixError::InvalidInput("need P >= 2".into()));
    }
    if max_sweeps < 1 {
        return Err(UnmixError::InvalidInput("max_sweeps must be >= 1".into()));
    }
    let data = r_d.to_owned();

    // seed columns: max norm first, then the min/max column along each axis
    let mut seeds: Vec<usize> = Vec::with_capacity(2 * d + 1);
    let push_unique = |seeds: &mut Vec<usize>, j: usize| {
        if !seeds.contains(&j) {
            seeds.push(j);
        }
    };
    let mut max_norm_idx = 0usize;
    let mut max_norm = -1.0;
    for j in 0..n {
        let norm = column_sq_norm(&data, j);
        if norm > max_norm {
            max_norm = norm;
            max_norm_idx = j;
        }
    }
    push_unique(&mut seeds, max_norm_idx);
    for axis in 0..d {
        let mut lo = 0usize;
        let mut hi = 0usize;
        for j in 0..n {
            if data[[axis, j]] < data[[axis, lo]] {
                lo = j;
            }
            if data[[axis, j]] > data[[axis, hi]] {
                hi = j;
            }
        }
        push_unique(&mut seeds, lo);
        push_unique(&mut seeds, hi);
    }

    let mut best: Vec<usize> = Vec::new();
    let mut best_v = -1.0;
    let consider = |best: &mut Vec<usize>, best_v: &mut f64, mut idx: Vec<usize>, v: f64| {
        idx.sort_unstable();
        if best.is_empty() || strictly_better(v, *best_v) {
            *best_v = v;
            *best = idx;
        } else if v >= *best_v * (1.0 - SVM_IMPROVEMENT) && idx < *best {
            // volume tie: keep the lexicographically smaller index set
            *best = idx;
        }
    };

    for &s in &seeds {
        let start = greedy_complete(&data, &[s], &[], materials);
        let (idx, v) = refine_sweeps(&data, start, max_sweeps);
        consider(&mut best, &mut best_v, idx, v);
    }

    for _ in 0..SVM_ESCAPE_ROUNDS {
        let mut improved = false;
        let snapshot = best.clone();
        let snapshot_v = best_v;
        for s in 0..materials {
            let mut base = snapshot.clone();
            let dropped = base.remove(s);
            let start = greedy_complete(&data, &base, &[dropped], materials);
            let (idx, v) = refine_sweeps(&data, start, max_sweeps);
            if strictly_better(v, snapshot_v) {
                improved = true;
            }
            consider(&mut best, &mut best_v, idx, v);
        }
        if !improved {
            for s1 in 0..materials {
                for s2 in (s1 + 1)..materials {
                    let mut base = snapshot.clone();
                    let d2 = base.remove(s2);
                    let d1 = base.remove(s1);
                    let start = greedy_complete(&data, &base, &[d1, d2], materials);
                    let (idx, v) = refine_sweeps(&data, start, max_sweeps);
                    if strictly_better(v, snapshot_v) {
                        improved = true;
                    }
                    consider(&mut best, &mut best_v, idx, v);
                }
            }
        }
        if !improved {
            break;
        }
    }
    Ok(best)
}
