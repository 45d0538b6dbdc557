//! Evaluation against ground truth: per-material spectral angle and abundance
//! RMSE, with permutation matching between estimated and reference materials.

use crate::error::{Result, UnmixError};
use crate::hsi_data::{AbundanceMaps, EndmemberMatrix};

/// Largest material count supported by the exhaustive matcher.
pub const MAX_MATCH_MATERIALS: usize = 8;

/// Metrics for one evaluation, materials ordered as in the ground truth.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// `permutation[i]` is the estimated column matched to ground-truth material `i`.
    pub permutation: Vec<usize>,
    pub per_material_sad: Vec<f64>,
    pub per_material_rmse: Vec<f64>,
    pub average_sad: f64,
    pub average_rmse: f64,
}

/// Spectral angle between two spectra in radians. Unlike the training loss
/// this is unclamped (evaluation context, exact at the endpoints): identical
/// spectra report exactly zero. Computed as
/// `2 atan2(|e/|e| - f/|f||, |e/|e| + f/|f||)`, which equals the arccosine of
/// the cosine similarity without its precision loss near the endpoints.
pub fn sad_endmember(e: &[f64], e_hat: &[f64]) -> Result<f64> {
    if e.len() != e_hat.len() {
        return Err(UnmixError::DimensionMismatch(format!(
            "spectra of length {} vs {}",
            e.len(),
            e_hat.len()
        )));
    }
    let ne: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nh: f64 = e_hat.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ne == 0.0 || nh == 0.0 {
        return Err(UnmixError::ZeroNorm("spectral angle of a zero vector".into()));
    }
    let mut diff_sq = 0.0;
    let mut sum_sq = 0.0;
    for (a, b) in e.iter().zip(e_hat) {
        let (ua, ub) = (a / ne, b / nh);
        diff_sq += (ua - ub) * (ua - ub);
        sum_sq += (ua + ub) * (ua + ub);
    }
    Ok(2.0 * diff_sq.sqrt().atan2(sum_sq.sqrt()))
}

/// Root mean squared per-pixel difference for one material's abundance map.
pub fn rmse_material(a: &[f64], a_hat: &[f64]) -> Result<f64> {
    if a.len() != a_hat.len() {
        return Err(UnmixError::DimensionMismatch(format!(
            "abundance vectors of length {} vs {}",
            a.len(),
            a_hat.len()
        )));
    }
    let n = a.len() as f64;
    let sum: f64 = a.iter().zip(a_hat).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sum / n).sqrt())
}

fn permutations_lexicographic(p: usize) -> Vec<Vec<usize>> {
    let mut result = Vec::new();
    let mut current: Vec<usize> = (0..p).collect();
    loop {
        result.push(current.clone());
        // next permutation in lexicographic order
        let Some(i) = (0..p.saturating_sub(1)).rev().find(|&i| current[i] < current[i + 1]) else {
            break;
        };
        let j = (i + 1..p).rev().find(|&j| current[j] > current[i]).unwrap();
        current.swap(i, j);
        current[i + 1..].reverse();
    }
    result
}

/// Finds the permutation minimizing total spectral angle between matched
/// columns, exhaustively over all `P!` assignments (`P <= 8`). Ties resolve to
/// the lexicographically first permutation. `permutation[i]` gives the
/// estimated column for ground-truth material `i`.
pub fn match_materials(est: &EndmemberMatrix, gt: &EndmemberMatrix) -> Result<Vec<usize>> {
    if est.bands() != gt.bands() || est.materials() != gt.materials() {
        return Err(UnmixError::DimensionMismatch(format!(
            "estimated {}x{} vs ground truth {}x{}",
            est.bands(),
            est.materials(),
            gt.bands(),
            gt.materials()
        )));
    }
    let p = gt.materials();
    if p > MAX_MATCH_MATERIALS {
        return Err(UnmixError::InvalidInput(format!(
            "matching supports at most {MAX_MATCH_MATERIALS} materials, got {p}"
        )));
    }
    // pairwise angle table: cost[i][j] = angle(gt column i, est column j)
    let mut cost = vec![vec![0.0; p]; p];
    for i in 0..p {
        let gt_col: Vec<f64> = gt.values().column(i).to_vec();
        for j in 0..p {
            let est_col: Vec<f64> = est.values().column(j).to_vec();
            cost[i][j] = sad_endmember(&gt_col, &est_col)?;
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations_lexicographic(p) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        match &best {
            Some((t, _)) if total >= *t => {}
            _ => best = Some((total, perm)),
        }
    }
    Ok(best.expect("at least one permutation").1)
}

/// Matches materials on endmember angles, applies the same permutation to the
/// abundance maps, and reports per-material and average SAD/RMSE.
pub fn evaluate(
    e_est: &EndmemberMatrix,
    a_est: &AbundanceMaps,
    e_gt: &EndmemberMatrix,
    a_gt: &AbundanceMaps,
) -> Result<EvalReport> {
    if a_est.materials() != e_est.materials()
        || a_gt.materials() != e_gt.materials()
        || a_est.height() != a_gt.height()
        || a_est.width() != a_gt.width()
    {
        return Err(UnmixError::DimensionMismatch(
            "endmember/abundance dimensions disagree".into(),
        ));
    }
    let permutation = match_materials(e_est, e_gt)?;
    let p = permutation.len();
    let n = a_gt.height() * a_gt.width();
    let mut per_material_sad = Vec::with_capacity(p);
    let mut per_material_rmse = Vec::with_capacity(p);
    for (i, &j) in permutation.iter().enumerate() {
        let gt_col: Vec<f64> = e_gt.values().column(i).to_vec();
        let est_col: Vec<f64> = e_est.values().column(j).to_vec();
        per_material_sad.push(sad_endmember(&gt_col, &est_col)?);

        let gt_map: Vec<f64> = a_gt
            .values()
            .index_axis(ndarray::Axis(0), i)
            .iter()
            .cloned()
            .collect();
        let est_map: Vec<f64> = a_est
            .values()
            .index_axis(ndarray::Axis(0), j)
            .iter()
            .cloned()
            .collect();
        debug_assert_eq!(gt_map.len(), n);
        per_material_rmse.push(rmse_material(&gt_map, &est_map)?);
    }
    let average_sad = per_material_sad.iter().sum::<f64>() / p as f64;
    let average_rmse = per_material_rmse.iter().sum::<f64>() / p as f64;
    Ok(EvalReport {
        permutation,
        per_material_sad,
        per_material_rmse,
        average_sad,
        average_rmse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array2, Array3};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn sad_of_identical_spectra_is_zero() {
        let e = [0.3, 0.8, 0.1];
        assert_eq!(sad_endmember(&e, &e).unwrap(), 0.0);
    }

    #[test]
    fn sad_of_orthogonal_spectra_is_right_angle() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        assert_abs_diff_eq!(sad_endmember(&a, &b).unwrap(), FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn sad_of_45_degree_pair() {
        let a = [1.0, 0.0];
        let s = 0.5f64.sqrt();
        let b = [s, s];
        assert_abs_diff_eq!(
            sad_endmember(&a, &b).unwrap(),
            std::f64::consts::FRAC_PI_4,
            epsilon = 1e-12
        );
    }

    #[test]
    fn sad_is_scale_invariant() {
        let a = [0.2, 0.5, 0.9];
        let b = [0.4, 0.1, 0.6];
        let scaled: Vec<f64> = b.iter().map(|v| v * 7.3).collect();
        assert_abs_diff_eq!(
            sad_endmember(&a, &b).unwrap(),
            sad_endmember(&a, &scaled).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn sad_rejects_zero_vectors() {
        assert!(sad_endmember(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn rmse_of_identical_maps_is_zero() {
        let a = [0.1, 0.4, 0.5];
        assert_eq!(rmse_material(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn rmse_of_constant_offset() {
        let a = [0.1, 0.4, 0.5, 0.2];
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert_abs_diff_eq!(rmse_material(&a, &b).unwrap(), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn rmse_matches_direct_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut acc = 0.0;
        for i in 0..20 {
            acc += (a[i] - b[i]) * (a[i] - b[i]);
        }
        let expected = (acc / 20.0).sqrt();
        assert_abs_diff_eq!(rmse_material(&a, &b).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn rmse_rejects_length_mismatch() {
        assert!(rmse_material(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn random_endmembers(l: usize, p: usize, seed: u64) -> EndmemberMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EndmemberMatrix::new(Array2::from_shape_fn((l, p), |_| rng.random_range(0.05..1.0)))
            .unwrap()
    }

    #[test]
    fn matching_identity_case() {
        let e = random_endmembers(12, 4, 20);
        assert_eq!(match_materials(&e, &e).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn matching_undoes_column_swaps() {
        let e = random_endmembers(12, 4, 21);
        // estimated = ground truth with columns rotated left by one
        let mut swapped = Array2::zeros((12, 4));
        for j in 0..4 {
            for l in 0..12 {
                swapped[[l, j]] = e.values()[[l, (j + 1) % 4]];
            }
        }
        let est = EndmemberMatrix::new(swapped).unwrap();
        let perm = match_materials(&est, &e).unwrap();
        // ground-truth material i must map to the estimated column holding it
        assert_eq!(perm, vec![3, 0, 1, 2]);
        for (i, &j) in perm.iter().enumerate() {
            let a: Vec<f64> = e.values().column(i).to_vec();
            let b: Vec<f64> = est.values().column(j).to_vec();
            assert_abs_diff_eq!(sad_endmember(&a, &b).unwrap(), 0.0, epsilon = 1e-12);
        }
    }

    /// Oracle: greedy assignment followed by pairwise-exchange improvement.
    fn greedy_then_exchange(est: &EndmemberMatrix, gt: &EndmemberMatrix) -> f64 {
        let p = gt.materials();
        let mut cost = vec![vec![0.0; p]; p];
        for i in 0..p {
            for j in 0..p {
                let a: Vec<f64> = gt.values().column(i).to_vec();
                let b: Vec<f64> = est.values().column(j).to_vec();
                cost[i][j] = sad_endmember(&a, &b).unwrap();
            }
        }
        let mut assigned = vec![usize::MAX; p];
        let mut used = vec![false; p];
        for i in 0..p {
            let mut best = usize::MAX;
            for j in 0..p {
                if !used[j] && (best == usize::MAX || cost[i][j] < cost[i][best]) {
                    best = j;
                }
            }
            assigned[i] = best;
            used[best] = true;
        }
        loop {
            let mut improved = false;
            for a in 0..p {
                for b in (a + 1)..p {
                    let now = cost[a][assigned[a]] + cost[b][assigned[b]];
                    let swapped = cost[a][assigned[b]] + cost[b][assigned[a]];
                    if swapped + 1e-15 < now {
                        assigned.swap(a, b);
                        improved = true;
                    }
                }
            }
            if !improved {
                break;
            }
        }
        (0..p).map(|i| cost[i][assigned[i]]).sum()
    }

    #[test]
    fn matching_total_agrees_with_exchange_oracle() {
        for seed in 0..10u64 {
            let gt = random_endmembers(16, 4, 30 + seed);
            let est = random_endmembers(16, 4, 300 + seed);
            let perm = match_materials(&est, &gt).unwrap();
            let total: f64 = perm
                .iter()
                .enumerate()
                .map(|(i, &j)| {
                    let a: Vec<f64> = gt.values().column(i).to_vec();
                    let b: Vec<f64> = est.values().column(j).to_vec();
                    sad_endmember(&a, &b).unwrap()
                })
                .sum();
            let oracle = greedy_then_exchange(&est, &gt);
            assert!(
                total <= oracle + 1e-12,
                "seed {seed}: exhaustive {total} worse than oracle {oracle}"
            );
        }
    }

    #[test]
    fn matching_rejects_oversized_problems() {
        let e = random_endmembers(4, 9, 1);
        // constructing directly: 9 materials exceeds the supported range
        assert!(match_materials(&e, &e).is_err());
    }

    fn uniform_abundances(p: usize, h: usize, w: usize) -> AbundanceMaps {
        AbundanceMaps::new(Array3::from_elem((p, h, w), 1.0 / p as f64)).unwrap()
    }

    #[test]
    fn evaluate_perfect_estimates_are_all_zero() {
        let e = random_endmembers(10, 3, 40);
        let a = uniform_abundances(3, 4, 4);
        let report = evaluate(&e, &a, &e, &a).unwrap();
        assert!(report.per_material_sad.iter().all(|v| *v == 0.0));
        assert!(report.per_material_rmse.iter().all(|v| *v == 0.0));
        assert_eq!(report.average_sad, 0.0);
        assert_eq!(report.average_rmse, 0.0);
    }

    #[test]
    fn evaluate_is_invariant_to_material_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let e_gt = random_endmembers(10, 3, 42);
        let mut a_values = Array3::from_shape_fn((3, 5, 5), |_| rng.random_range(0.1..0.5));
        for i in 0..5 {
            for j in 0..5 {
                let s: f64 = (0..3).map(|m| a_values[[m, i, j]]).sum();
                for m in 0..3 {
                    a_values[[m, i, j]] /= s;
                }
            }
        }
        let a_gt = AbundanceMaps::new(a_values).unwrap();

        // permuted copy of the ground truth as the "estimate"
        let order = [2usize, 0, 1];
        let mut e_perm = Array2::zeros((10, 3));
        let mut a_perm = Array3::zeros((3, 5, 5));
        for (dst, &src) in order.iter().enumerate() {
            for l in 0..10 {
                e_perm[[l, dst]] = e_gt.values()[[l, src]];
            }
            for i in 0..5 {
                for j in 0..5 {
                    a_perm[[dst, i, j]] = a_gt.values()[[src, i, j]];
                }
            }
        }
        let report = evaluate(
            &EndmemberMatrix::new(e_perm).unwrap(),
            &AbundanceMaps::new(a_perm).unwrap(),
            &e_gt,
            &a_gt,
        )
        .unwrap();
        assert!(report.average_sad <= 1e-12);
        assert!(report.average_rmse <= 1e-12);
    }

    #[test]
    fn evaluate_matches_hand_composed_oracle() {
        let e_gt = random_endmembers(8, 3, 50);
        let e_est = random_endmembers(8, 3, 51);
        let a_gt = uniform_abundances(3, 3, 3);
        let mut est_values = Array3::from_elem((3, 3, 3), 1.0 / 3.0);
        est_values[[0, 0, 0]] = 0.5;
        est_values[[1, 0, 0]] = 0.25;
        est_values[[2, 0, 0]] = 0.25;
        let a_est = AbundanceMaps::new(est_values).unwrap();

        let report = evaluate(&e_est, &a_est, &e_gt, &a_gt).unwrap();
        let perm = match_materials(&e_est, &e_gt).unwrap();
        assert_eq!(report.permutation, perm);
        for (i, &j) in perm.iter().enumerate() {
            let g: Vec<f64> = e_gt.values().column(i).to_vec();
            let s: Vec<f64> = e_est.values().column(j).to_vec();
            assert_abs_diff_eq!(
                report.per_material_sad[i],
                sad_endmember(&g, &s).unwrap(),
                epsilon = 1e-15
            );
        }
        let mean_sad = report.per_material_sad.iter().sum::<f64>() / 3.0;
        assert_eq!(report.average_sad, mean_sad);
        let mean_rmse = report.per_material_rmse.iter().sum::<f64>() / 3.0;
        assert_eq!(report.average_rmse, mean_rmse);
    }
}
