//! Forward computation of the unrolled 3D convolutional sparse-coding
//! autoencoder: the strided encoder convolutions, the iterated
//! shrinkage block, the learned threshold schedule, the pointwise head with
//! per-pixel softmax, and the linear decoder.

mod conv;

pub use conv::{conv3d, conv3d_kernel_grad, conv3d_transpose};

use crate::error::{Result, UnmixError};
use crate::hsi_data::{AbundanceMaps, HsiCube};
use ndarray::{Array1, Array2, Array3, Array4, Array5};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Kernel depth of the input map `W_in`.
pub const KD_IN: usize = 15;
/// Kernel depth of the analysis map `W_u` and the synthesis map `W_d`.
pub const KD_U: usize = 7;
/// Spatial kernel extent of every strided convolution.
pub const K_SPATIAL: usize = 3;

/// Shape parameters of one network instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    /// Feature channels per iteration module.
    pub channels: usize,
    /// Number of unrolled iteration modules.
    pub iterations: usize,
    /// Endmember count; also the code depth.
    pub materials: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    /// Spectral stride `ceil(L / P)`.
    pub spectral_stride: usize,
    /// Depth padding of `W_in`.
    pub pad_in: usize,
    /// Depth padding of `W_u` (and the `W_d` adjoint geometry).
    pub pad_u: usize,
}

/// Smallest nonnegative `p <= ss` with `floor((bands + 2p - kd) / ss) + 1 == materials`.
pub fn solve_depth_padding(bands: usize, kd: usize, ss: usize, materials: usize) -> Option<usize> {
    (0..=ss).find(|&p| {
        let padded = bands + 2 * p;
        padded >= kd && (padded - kd) / ss + 1 == materials
    })
}

/// Derives the full shape configuration: `ss = ceil(L / P)` and the minimal
/// depth paddings that make both strided maps land exactly on `P` output
/// slices. Spatial geometry is fixed at stride 1, padding 1 (dims preserved).
pub fn make_config(
    bands: usize,
    height: usize,
    width: usize,
    materials: usize,
    channels: usize,
    iterations: usize,
) -> Result<NetworkConfig> {
    if materials >= bands || materials == 0 {
        return Err(UnmixError::InvalidInput(format!(
            "need 0 < P < L, got P={materials}, L={bands}"
        )));
    }
    if height < 3 || width < 3 {
        return Err(UnmixError::InvalidInput(format!(
            "spatial dims must be at least 3x3, got {height}x{width}"
        )));
    }
    if channels == 0 || iterations == 0 {
        return Err(UnmixError::InvalidInput(
            "channel and iteration counts must be positive".into(),
        ));
    }
    let spectral_stride = bands.div_ceil(materials);
    let pad_in = solve_depth_padding(bands, KD_IN, spectral_stride, materials).ok_or_else(|| {
        UnmixError::UnsatisfiableShape(format!(
            "no padding p <= {spectral_stride} satisfies floor(({bands} + 2p - {KD_IN}) / {spectral_stride}) + 1 = {materials}"
        ))
    })?;
    let pad_u = solve_depth_padding(bands, KD_U, spectral_stride, materials).ok_or_else(|| {
        UnmixError::UnsatisfiableShape(format!(
            "no padding p <= {spectral_stride} satisfies floor(({bands} + 2p - {KD_U}) / {spectral_stride}) + 1 = {materials}"
        ))
    })?;
    Ok(NetworkConfig {
        channels,
        iterations,
        materials,
        bands,
        height,
        width,
        spectral_stride,
        pad_in,
        pad_u,
    })
}

/// Learnable kernels of one iteration module. `k_in` and `k_u` map the
/// single-channel band stack into code space with spectral stride; `k_d` is
/// applied through the exact adjoint and maps code space back.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationModuleParams {
    /// `(C, 1, 15, 3, 3)`
    pub k_in: Array5<f64>,
    /// `(C, 1, 7, 3, 3)`
    pub k_u: Array5<f64>,
    /// `(C, 1, 7, 3, 3)`, used transposed
    pub k_d: Array5<f64>,
}

/// Reparameterized threshold schedule: the slope is `-softplus(rho)`, always
/// negative, so thresholds decrease across iterations for any parameter value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdParams {
    pub rho: f64,
    pub b_theta: f64,
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid, the derivative of softplus.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ThresholdParams {
    /// `theta^(k) = softplus(w k + b)` with `w = -softplus(rho)`; positive and
    /// strictly decreasing in `k`.
    pub fn schedule(&self, iterations: usize) -> Vec<f64> {
        let w = -softplus(self.rho);
        (0..iterations)
            .map(|k| softplus(w * k as f64 + self.b_theta))
            .collect()
    }
}

/// All learnable quantities of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub modules: Vec<IterationModuleParams>,
    pub thresholds: ThresholdParams,
    /// Pointwise head collapsing the `C` code channels to one; the `1xCx1x1x1`
    /// kernel stored by its `C` data entries.
    pub g_kernel: Array1<f64>,
    /// `L x P` pointwise decoder weights; read out as the endmember matrix.
    pub decoder: Array2<f64>,
}

fn uniform_kernel(rng: &mut ChaCha8Rng, dims: (usize, usize, usize, usize, usize)) -> Array5<f64> {
    let fan_in = (dims.1 * dims.2 * dims.3 * dims.4) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let mut k = Array5::zeros(dims);
    for v in k.iter_mut() {
        *v = rng.random_range(-bound..bound);
    }
    k
}

/// Initialization bound of the pointwise head. Kept small so the softmax
/// starts near uniform: at conv-style fan-in scale the initial logits land
/// several units apart, the maps saturate to one-hot, and the softmax
/// Jacobian kills the gradient before training can organize anything.
const HEAD_INIT_BOUND: f64 = 0.01;

impl NetworkParams {
    /// Seeded initialization: conv kernels i.i.d. uniform on
    /// `+-sqrt(6 / fan_in)`, the head kernel uniform on the much smaller
    /// [`HEAD_INIT_BOUND`], `rho` set so the threshold slope starts at `-0.1`,
    /// `b_theta = -4` (initial threshold ~0.018 lets early signal through).
    /// The decoder is initialized like a pointwise kernel; training
    /// overwrites it with the extracted endmembers.
    pub fn init(config: &NetworkConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let modules = (0..config.iterations)
            .map(|_| IterationModuleParams {
                k_in: uniform_kernel(&mut rng, (c, 1, KD_IN, K_SPATIAL, K_SPATIAL)),
                k_u: uniform_kernel(&mut rng, (c, 1, KD_U, K_SPATIAL, K_SPATIAL)),
                k_d: uniform_kernel(&mut rng, (c, 1, KD_U, K_SPATIAL, K_SPATIAL)),
            })
            .collect();
        // softplus(rho) = 0.1  =>  rho = ln(e^0.1 - 1)
        let rho = (0.1f64.exp() - 1.0).ln();
        let thresholds = ThresholdParams { rho, b_theta: -4.0 };
        let mut g_kernel = Array1::zeros(c);
        for v in g_kernel.iter_mut() {
            *v = rng.random_range(-HEAD_INIT_BOUND..HEAD_INIT_BOUND);
        }
        let d_bound = (6.0 / config.materials as f64).sqrt();
        let mut decoder = Array2::zeros((config.bands, config.materials));
        for v in decoder.iter_mut() {
            *v = rng.random_range(-d_bound..d_bound);
        }
        NetworkParams {
            modules,
            thresholds,
            g_kernel,
            decoder,
        }
    }

    pub fn validate(&self, config: &NetworkConfig) -> Result<()> {
        if self.modules.len() != config.iterations {
            return Err(UnmixError::DimensionMismatch(format!(
                "{} iteration modules for {} iterations",
                self.modules.len(),
                config.iterations
            )));
        }
        let c = config.channels;
        for (k, m) in self.modules.iter().enumerate() {
            if m.k_in.dim() != (c, 1, KD_IN, K_SPATIAL, K_SPATIAL)
                || m.k_u.dim() != (c, 1, KD_U, K_SPATIAL, K_SPATIAL)
                || m.k_d.dim() != (c, 1, KD_U, K_SPATIAL, K_SPATIAL)
            {
                return Err(UnmixError::DimensionMismatch(format!(
                    "module {k} kernel shapes disagree with the configuration"
                )));
            }
        }
        if self.g_kernel.len() != c {
            return Err(UnmixError::DimensionMismatch(
                "head kernel channel count disagrees with the configuration".into(),
            ));
        }
        if self.decoder.dim() != (config.bands, config.materials) {
            return Err(UnmixError::DimensionMismatch(
                "decoder shape disagrees with the configuration".into(),
            ));
        }
        Ok(())
    }
}

/// Elementwise shrinkage `sgn(x) max(|x| - theta, 0)`.
pub fn soft_threshold(x: &Array4<f64>, theta: f64) -> Array4<f64> {
    assert!(theta >= 0.0, "threshold must be nonnegative");
    x.mapv(|v| soft_threshold_scalar(v, theta))
}

#[inline]
pub(crate) fn soft_threshold_scalar(v: f64, theta: f64) -> f64 {
    if v > theta {
        v - theta
    } else if v < -theta {
        v + theta
    } else {
        0.0
    }
}

/// Per-pixel softmax over the material axis of a `P x H x W` stack.
pub(crate) fn softmax_over_materials(logits: &Array3<f64>) -> Array3<f64> {
    let (p, h, w) = logits.dim();
    let mut out = logits.clone();
    for i in 0..h {
        for j in 0..w {
            let max = (0..p).map(|m| out[[m, i, j]]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for m in 0..p {
                let e = (out[[m, i, j]] - max).exp();
                out[[m, i, j]] = e;
                sum += e;
            }
            for m in 0..p {
                out[[m, i, j]] /= sum;
            }
        }
    }
    out
}

/// Intermediates retained for the backward pass of the shrinkage block.
#[derive(Debug, Clone)]
pub struct CscbCache {
    /// Code tensors `z^(0..K-1)`, each `(C, P, H, W)`.
    pub codes: Vec<Array4<f64>>,
    /// Pre-activation tensors feeding each shrinkage.
    pub pre_activations: Vec<Array4<f64>>,
    /// Synthesis outputs `W_d(z^(k-1))` for modules `k >= 1` (index `k - 1`).
    pub synth_outputs: Vec<Array4<f64>>,
    /// Threshold schedule used.
    pub thresholds: Vec<f64>,
}

/// Everything the backward pass needs from one full forward run.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub cscb: CscbCache,
    /// Head output (logits) `P x H x W`.
    pub logits: Array3<f64>,
    /// Softmax abundances `P x H x W`.
    pub abundances: Array3<f64>,
    /// Reconstruction `L x H x W`.
    pub reconstruction: Array3<f64>,
}

fn cube_as_input(cube: &HsiCube) -> Result<Array4<f64>> {
    let (l, h, w) = cube.values().dim();
    Ok(cube
        .values()
        .to_owned()
        .into_shape_with_order((1, l, h, w))
        .expect("adds singleton channel axis"))
}

fn check_cube_shape(cube: &HsiCube, config: &NetworkConfig) -> Result<()> {
    if cube.bands() != config.bands
        || cube.height() != config.height
        || cube.width() != config.width
    {
        return Err(UnmixError::DimensionMismatch(format!(
            "cube {}x{}x{} does not match the configured {}x{}x{}",
            cube.bands(),
            cube.height(),
            cube.width(),
            config.bands,
            config.height,
            config.width
        )));
    }
    Ok(())
}

/// Runs the unrolled shrinkage block:
/// `z^(0) = S(W_in^(0)(Y))`, then
/// `z^(k) = S(z^(k-1) - W_u^(k)(W_d^(k)(z^(k-1))) + W_in^(k)(Y))`.
/// Returns the final code and the cache of intermediates.
pub fn cscb_forward(
    cube: &HsiCube,
    params: &NetworkParams,
    config: &NetworkConfig,
) -> Result<(Array4<f64>, CscbCache)> {
    check_cube_shape(cube, config)?;
    params.validate(config)?;
    let y = cube_as_input(cube)?;
    let stride = (config.spectral_stride, 1, 1);
    let pad_in = (config.pad_in, 1, 1);
    let pad_u = (config.pad_u, 1, 1);
    let thresholds = params.thresholds.schedule(config.iterations);

    let mut codes = Vec::with_capacity(config.iterations);
    let mut pre_activations = Vec::with_capacity(config.iterations);
    let mut synth_outputs = Vec::with_capacity(config.iterations.saturating_sub(1));

    for (k, module) in params.modules.iter().enumerate() {
        let injected = conv3d(y.view(), module.k_in.view(), stride, pad_in)?;
        let pre = if k == 0 {
            // z^(k) = 0 for k < 0, so the correction branch vanishes
            injected
        } else {
            let prev: &Array4<f64> = &codes[k - 1];
            let synth = conv3d_transpose(
                prev.view(),
                module.k_d.view(),
                stride,
                pad_u,
                config.bands,
            )?;
            let gram = conv3d(synth.view(), module.k_u.view(), stride, pad_u)?;
            let mut pre = injected;
            pre.zip_mut_with(prev, |p, z| *p += z);
            pre.zip_mut_with(&gram, |p, g| *p -= g);
            synth_outputs.push(synth);
            pre
        };
        let z = soft_threshold(&pre, thresholds[k]);
        pre_activations.push(pre);
        codes.push(z);
    }
    let final_code = codes.last().expect("at least one iteration").clone();
    Ok((
        final_code,
        CscbCache {
            codes,
            pre_activations,
            synth_outputs,
            thresholds,
        },
    ))
}

/// Applies the pointwise head to a code tensor: logits `P x H x W` with
/// `logits[p,i,j] = sum_c g[c] z[c,p,i,j]`.
pub(crate) fn head_logits(code: &Array4<f64>, g_kernel: &Array1<f64>) -> Array3<f64> {
    let (c, p, h, w) = code.dim();
    let mut logits = Array3::zeros((p, h, w));
    for ch in 0..c {
        let g = g_kernel[ch];
        for m in 0..p {
            for i in 0..h {
                for j in 0..w {
                    logits[[m, i, j]] += g * code[[ch, m, i, j]];
                }
            }
        }
    }
    logits
}

/// Encoder: shrinkage block, pointwise head, softmax. Returns the abundance
/// maps and the cache for backward.
pub fn encoder_forward(
    cube: &HsiCube,
    params: &NetworkParams,
    config: &NetworkConfig,
) -> Result<(AbundanceMaps, CscbCache, Array3<f64>)> {
    let (code, cache) = cscb_forward(cube, params, config)?;
    let logits = head_logits(&code, &params.g_kernel);
    let abundances = softmax_over_materials(&logits);
    Ok((AbundanceMaps::new(abundances)?, cache, logits))
}

/// Decoder: per-pixel linear mixing with the `L x P` weight matrix.
pub fn decoder_forward(abundances: &AbundanceMaps, decoder: &Array2<f64>) -> Result<HsiCube> {
    let (l, p) = decoder.dim();
    if p != abundances.materials() {
        return Err(UnmixError::DimensionMismatch(format!(
            "decoder has {p} materials, abundances have {}",
            abundances.materials()
        )));
    }
    let (h, w) = (abundances.height(), abundances.width());
    let a = abundances.values();
    let mut out = Array3::zeros((l, h, w));
    for band in 0..l {
        for m in 0..p {
            let weight = decoder[[band, m]];
            for i in 0..h {
                for j in 0..w {
                    out[[band, i, j]] += weight * a[[m, i, j]];
                }
            }
        }
    }
    HsiCube::new(out)
}

/// Full autoencoder pass. Returns the reconstruction, the abundances, and the
/// cache required by the backward pass.
pub fn network_forward(
    cube: &HsiCube,
    params: &NetworkParams,
    config: &NetworkConfig,
) -> Result<(HsiCube, AbundanceMaps, ForwardCache)> {
    let (abundances, cscb, logits) = encoder_forward(cube, params, config)?;
    let reconstruction = decoder_forward(&abundances, &params.decoder)?;
    let cache = ForwardCache {
        cscb,
        logits,
        abundances: abundances.values().clone(),
        reconstruction: reconstruction.values().clone(),
    };
    Ok((reconstruction, abundances, cache))
}
