//! Separable 3D Gaussian filtering with reflect padding.

use super::HsiCube;
use ndarray::Array3;

/// Builds the 1D kernel for one axis: samples of `exp(-i^2 / (2 sigma^2))` for
/// `i` in `-r..=r` with `r = ceil(3 sigma)`, renormalized to unit sum after
/// truncation. `sigma == 0` yields the identity kernel `[1]`.
fn axis_kernel(sigma: f64) -> Vec<f64> {
    assert!(sigma >= 0.0, "sigma must be nonnegative");
    if sigma == 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }
    kernel
}

/// Reflects an out-of-range index back into `[0, len)`, duplicating the edge
/// sample (`-1 -> 0`, `len -> len - 1`). Folds repeatedly so any radius works.
fn reflect(mut idx: i64, len: usize) -> usize {
    let len = len as i64;
    loop {
        if idx < 0 {
            idx = -idx - 1;
        } else if idx >= len {
            idx = 2 * len - 1 - idx;
        } else {
            return idx as usize;
        }
    }
}

fn convolve_axis(data: &Array3<f64>, kernel: &[f64], axis: usize) -> Array3<f64> {
    if kernel.len() == 1 {
        return data.clone();
    }
    let dims = data.dim();
    let len = [dims.0, dims.1, dims.2][axis];
    let radius = (kernel.len() / 2) as i64;
    let mut out = Array3::zeros(dims);
    // Per-sample reduction runs over the kernel taps in a fixed order, so the
    // result does not depend on any outer iteration strategy.
    for i in 0..dims.0 {
        for j in 0..dims.1 {
            for k in 0..dims.2 {
                let center = [i as i64, j as i64, k as i64][axis];
                let mut acc = 0.0;
                for (t, &kv) in kernel.iter().enumerate() {
                    let src = reflect(center + t as i64 - radius, len);
                    let idx = match axis {
                        0 => [src, j, k],
                        1 => [i, src, k],
                        _ => [i, j, src],
                    };
                    acc += kv * data[idx];
                }
                out[[i, j, k]] = acc;
            }
        }
    }
    out
}

/// Convolves the cube with the separable normalized Gaussian, truncated at
/// radius `ceil(3 sigma)` per axis and renormalized after truncation, with
/// reflect-padded borders. The sigma components apply to the cube axes in
/// order: `(sigma_band, sigma_row, sigma_col)`. A zero component is the
/// identity along that axis.
pub fn gaussian_filter_3d(cube: &HsiCube, sigma: (f64, f64, f64)) -> HsiCube {
    assert!(
        sigma.0 >= 0.0 && sigma.1 >= 0.0 && sigma.2 >= 0.0,
        "sigma components must be nonnegative"
    );
    let mut values = cube.values().clone();
    for (axis, s) in [sigma.0, sigma.1, sigma.2].into_iter().enumerate() {
        if s > 0.0 {
            let kernel = axis_kernel(s);
            values = convolve_axis(&values, &kernel, axis);
        }
    }
    HsiCube { values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_cube_is_unchanged() {
        let cube = HsiCube::new(Array3::from_elem((5, 6, 7), 0.7)).unwrap();
        let filtered = gaussian_filter_3d(&cube, (1.0, 2.0, 0.5));
        for (a, b) in filtered.values().iter().zip(cube.values().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_sigma_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cube =
            HsiCube::new(Array3::from_shape_fn((4, 5, 5), |_| rng.random_range(0.0..1.0))).unwrap();
        let filtered = gaussian_filter_3d(&cube, (0.0, 0.0, 0.0));
        assert_eq!(filtered.values(), cube.values());
    }

    /// Oracle: evaluate the truncated, renormalized separable kernel in closed
    /// form and compare against the response to a centered unit impulse.
    #[test]
    fn impulse_response_matches_closed_form_kernel() {
        let sigma = (1.0, 1.5, 0.8);
        let mut values = Array3::zeros((9, 11, 9));
        values[[4, 5, 4]] = 1.0;
        let cube = HsiCube::new(values).unwrap();
        let filtered = gaussian_filter_3d(&cube, sigma);

        let k0 = axis_kernel(sigma.0);
        let k1 = axis_kernel(sigma.1);
        let k2 = axis_kernel(sigma.2);
        let (r0, r1, r2) = (k0.len() / 2, k1.len() / 2, k2.len() / 2);
        for i in 0..9usize {
            for j in 0..11usize {
                for k in 0..9usize {
                    let di = i as i64 - 4;
                    let dj = j as i64 - 5;
                    let dk = k as i64 - 4;
                    let expected = if di.unsigned_abs() as usize <= r0
                        && dj.unsigned_abs() as usize <= r1
                        && dk.unsigned_abs() as usize <= r2
                    {
                        k0[(di + r0 as i64) as usize]
                            * k1[(dj + r1 as i64) as usize]
                            * k2[(dk + r2 as i64) as usize]
                    } else {
                        0.0
                    };
                    assert_abs_diff_eq!(filtered.values()[[i, j, k]], expected, epsilon = 1e-14);
                }
            }
        }
    }

    #[test]
    fn global_mean_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cube =
            HsiCube::new(Array3::from_shape_fn((6, 9, 8), |_| rng.random_range(0.0..1.0))).unwrap();
        let filtered = gaussian_filter_3d(&cube, (1.3, 2.0, 1.0));
        let mean_in = cube.values().mean().unwrap();
        let mean_out = filtered.values().mean().unwrap();
        assert!(((mean_out - mean_in) / mean_in).abs() < 1e-6);
    }

    #[test]
    fn large_sigma_on_small_axis_reflects_repeatedly() {
        // radius 9 on a length-3 axis exercises multi-fold reflection.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cube =
            HsiCube::new(Array3::from_shape_fn((3, 4, 4), |_| rng.random_range(0.0..1.0))).unwrap();
        let filtered = gaussian_filter_3d(&cube, (3.0, 0.0, 0.0));
        let mean_in = cube.values().mean().unwrap();
        let mean_out = filtered.values().mean().unwrap();
        assert!(((mean_out - mean_in) / mean_in).abs() < 1e-6);
    }
}
