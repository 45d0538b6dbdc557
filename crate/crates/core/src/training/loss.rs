//! Spectral-angle training loss and its gradient.

use crate::error::{Result, UnmixError};
use crate::hsi_data::HsiCube;
use ndarray::Array3;

/// Angle between a reference spectrum and its reconstruction, with the cosine
/// clamped to `[-1 + eps_cos, 1 - eps_cos]` so the arccosine stays
/// differentiable at the ends.
pub fn sad_pixel(r: &[f64], r_hat: &[f64], eps_cos: f64) -> Result<f64> {
    if r.len() != r_hat.len() {
        return Err(UnmixError::DimensionMismatch(format!(
            "spectra of length {} vs {}",
            r.len(),
            r_hat.len()
        )));
    }
    let nr: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nh: f64 = r_hat.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nr == 0.0 || nh == 0.0 {
        return Err(UnmixError::ZeroNorm("spectral angle of a zero vector".into()));
    }
    let dot: f64 = r.iter().zip(r_hat).map(|(a, b)| a * b).sum();
    let cos = (dot / (nr * nh)).clamp(-1.0 + eps_cos, 1.0 - eps_cos);
    Ok(cos.acos())
}

/// Mean spectral angle over all pixels of the cube pair.
pub fn sad_loss(y_hat: &HsiCube, y: &HsiCube, eps_cos: f64) -> Result<f64> {
    let (loss, _) = sad_loss_backward(y_hat.values(), y.values(), eps_cos)?;
    Ok(loss)
}

/// Loss plus its gradient with respect to the reconstruction. Pixels whose raw
/// cosine falls outside the clamp window contribute zero gradient.
pub fn sad_loss_backward(
    y_hat: &Array3<f64>,
    y: &Array3<f64>,
    eps_cos: f64,
) -> Result<(f64, Array3<f64>)> {
    if y_hat.dim() != y.dim() {
        return Err(UnmixError::DimensionMismatch(format!(
            "reconstruction {:?} vs reference {:?}",
            y_hat.dim(),
            y.dim()
        )));
    }
    let (l, h, w) = y.dim();
    let n = (h * w) as f64;
    let mut grad = Array3::zeros((l, h, w));
    let mut loss = 0.0;
    for i in 0..h {
        for j in 0..w {
            let mut dot = 0.0;
            let mut nr_sq = 0.0;
            let mut nh_sq = 0.0;
            for band in 0..l {
                let rv = y[[band, i, j]];
                let hv = y_hat[[band, i, j]];
                dot += rv * hv;
                nr_sq += rv * rv;
                nh_sq += hv * hv;
            }
            if nr_sq == 0.0 || nh_sq == 0.0 {
                return Err(UnmixError::ZeroNorm(format!(
                    "pixel ({i},{j}) has a zero-norm spectrum"
                )));
            }
            let nr = nr_sq.sqrt();
            let nh = nh_sq.sqrt();
            let raw = dot / (nr * nh);
            let cos = raw.clamp(-1.0 + eps_cos, 1.0 - eps_cos);
            loss += cos.acos() / n;
            if raw > -1.0 + eps_cos && raw < 1.0 - eps_cos {
                // d acos(c)/dc = -1 / sqrt(1 - c^2), chain through the cosine
                let dcos = -1.0 / (1.0 - cos * cos).sqrt() / n;
                let inv = 1.0 / (nr * nh);
                for band in 0..l {
                    let rv = y[[band, i, j]];
                    let hv = y_hat[[band, i, j]];
                    grad[[band, i, j]] = dcos * (rv * inv - raw * hv / nh_sq);
                }
            }
        }
    }
    Ok((loss, grad))
}
