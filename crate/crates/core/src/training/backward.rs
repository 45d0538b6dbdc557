//! Reverse-mode gradients through the fixed autoencoder graph.

use super::loss::sad_loss_backward;
use super::Gradients;
use crate::cscnet::{
    conv3d, conv3d_kernel_grad, conv3d_transpose, sigmoid, softplus, ForwardCache, NetworkConfig,
    NetworkParams, KD_IN, KD_U, K_SPATIAL,
};
use crate::error::{Result, UnmixError};
use crate::hsi_data::HsiCube;
use ndarray::{Array1, Array2, Array3, Array4};

/// Exact reverse-mode gradients of the mean spectral-angle loss with respect
/// to every network parameter. The shrinkage nonlinearity uses the subgradient
/// that is zero on `|x| <= theta` (kink included) and one elsewhere; the
/// threshold gradient chains through the softplus reparameterization.
pub fn network_backward(
    cache: &ForwardCache,
    y: &HsiCube,
    params: &NetworkParams,
    config: &NetworkConfig,
    eps_cos: f64,
) -> Result<(f64, Gradients)> {
    params.validate(config)?;
    let iterations = config.iterations;
    if cache.cscb.codes.len() != iterations
        || cache.cscb.pre_activations.len() != iterations
        || cache.cscb.synth_outputs.len() + 1 != iterations.max(1)
    {
        return Err(UnmixError::DimensionMismatch(
            "forward cache does not match the configuration".into(),
        ));
    }
    let (l, height, width) = y.values().dim();
    if (l, height, width) != (config.bands, config.height, config.width) {
        return Err(UnmixError::DimensionMismatch(
            "reference cube does not match the configuration".into(),
        ));
    }
    let p = config.materials;

    let (loss, d_recon) = sad_loss_backward(&cache.reconstruction, y.values(), eps_cos)?;

    // decoder: recon[l,i,j] = sum_m dec[l,m] a[m,i,j]
    let abundances = &cache.abundances;
    let mut d_decoder: Array2<f64> = Array2::zeros((l, p));
    for band in 0..l {
        for m in 0..p {
            let mut acc = 0.0;
            for i in 0..height {
                for j in 0..width {
                    acc += d_recon[[band, i, j]] * abundances[[m, i, j]];
                }
            }
            d_decoder[[band, m]] = acc;
        }
    }
    let mut d_abundance: Array3<f64> = Array3::zeros((p, height, width));
    for m in 0..p {
        for band in 0..l {
            let weight = params.decoder[[band, m]];
            for i in 0..height {
                for j in 0..width {
                    d_abundance[[m, i, j]] += weight * d_recon[[band, i, j]];
                }
            }
        }
    }

    // softmax: d_logit_m = a_m (d_a_m - sum_q a_q d_a_q)
    let mut d_logits: Array3<f64> = Array3::zeros((p, height, width));
    for i in 0..height {
        for j in 0..width {
            let mut weighted = 0.0;
            for m in 0..p {
                weighted += abundances[[m, i, j]] * d_abundance[[m, i, j]];
            }
            for m in 0..p {
                d_logits[[m, i, j]] =
                    abundances[[m, i, j]] * (d_abundance[[m, i, j]] - weighted);
            }
        }
    }

    // pointwise head: logits[m,i,j] = sum_c g[c] code[c,m,i,j]
    let code = cache.cscb.codes.last().expect("at least one module");
    let channels = config.channels;
    let mut d_g: Array1<f64> = Array1::zeros(channels);
    let mut d_code: Array4<f64> = Array4::zeros((channels, p, height, width));
    for c in 0..channels {
        let g = params.g_kernel[c];
        let mut acc = 0.0;
        for m in 0..p {
            for i in 0..height {
                for j in 0..width {
                    let dl = d_logits[[m, i, j]];
                    acc += code[[c, m, i, j]] * dl;
                    d_code[[c, m, i, j]] = g * dl;
                }
            }
        }
        d_g[c] = acc;
    }

    // unrolled shrinkage block, walked backwards
    let y4 = y
        .values()
        .to_owned()
        .into_shape_with_order((1, l, height, width))
        .expect("adds singleton channel axis");
    let stride = (config.spectral_stride, 1, 1);
    let pad_in = (config.pad_in, 1, 1);
    let pad_u = (config.pad_u, 1, 1);
    let thresholds = &cache.cscb.thresholds;

    let mut grads = Gradients::zeros_like(params);
    let mut d_theta = vec![0.0; iterations];
    let mut upstream = d_code;
    for k in (0..iterations).rev() {
        let pre = &cache.cscb.pre_activations[k];
        let theta = thresholds[k];
        let mut d_pre = upstream;
        let mut theta_acc = 0.0;
        for (dp, pv) in d_pre.iter_mut().zip(pre.iter()) {
            if pv.abs() > theta {
                theta_acc -= pv.signum() * *dp;
            } else {
                *dp = 0.0;
            }
        }
        d_theta[k] = theta_acc;

        grads.modules[k].k_in = conv3d_kernel_grad(
            y4.view(),
            d_pre.view(),
            stride,
            pad_in,
            (KD_IN, K_SPATIAL, K_SPATIAL),
        )?;

        if k > 0 {
            let prev_code = &cache.cscb.codes[k - 1];
            let synth = &cache.cscb.synth_outputs[k - 1];
            // the correction branch enters with a minus sign
            let d_gram = d_pre.mapv(|v| -v);
            grads.modules[k].k_u = conv3d_kernel_grad(
                synth.view(),
                d_gram.view(),
                stride,
                pad_u,
                (KD_U, K_SPATIAL, K_SPATIAL),
            )?;
            let d_synth = conv3d_transpose(
                d_gram.view(),
                params.modules[k].k_u.view(),
                stride,
                pad_u,
                config.bands,
            )?;
            grads.modules[k].k_d = conv3d_kernel_grad(
                d_synth.view(),
                prev_code.view(),
                stride,
                pad_u,
                (KD_U, K_SPATIAL, K_SPATIAL),
            )?;
            // identity path plus the adjoint of the synthesis map
            let mut d_prev = conv3d(
                d_synth.view(),
                params.modules[k].k_d.view(),
                stride,
                pad_u,
            )?;
            d_prev.zip_mut_with(&d_pre, |a, b| *a += b);
            upstream = d_prev;
        } else {
            upstream = d_pre; // unused, keeps the loop uniform
        }
    }

    // theta^(k) = softplus(w k + b), w = -softplus(rho)
    let w = -softplus(params.thresholds.rho);
    let mut d_w = 0.0;
    let mut d_b = 0.0;
    for (k, dt) in d_theta.iter().enumerate() {
        let s = sigmoid(w * k as f64 + params.thresholds.b_theta);
        d_w += dt * k as f64 * s;
        d_b += dt * s;
    }
    grads.rho = -d_w * sigmoid(params.thresholds.rho);
    grads.b_theta = d_b;
    grads.g_kernel = d_g;
    grads.decoder = d_decoder;

    Ok((loss, grads))
}
