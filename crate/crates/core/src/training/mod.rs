//! Loss, gradients, optimizer, and the two-stage training schedule.

mod backward;
pub mod gradcheck;
mod loss;

pub use backward::network_backward;
pub use loss::{sad_loss, sad_loss_backward, sad_pixel};

use crate::cscnet::{network_forward, IterationModuleParams, NetworkConfig, NetworkParams};
use crate::error::{Result, UnmixError};
use crate::hsi_data::{AbundanceMaps, EndmemberMatrix, HsiCube};
use ndarray::{Array1, Array2, Array5};

/// Gradient (or moment) tensors mirroring [`NetworkParams`] field by field.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub modules: Vec<ModuleGrads>,
    pub rho: f64,
    pub b_theta: f64,
    pub g_kernel: Array1<f64>,
    pub decoder: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ModuleGrads {
    pub k_in: Array5<f64>,
    pub k_u: Array5<f64>,
    pub k_d: Array5<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Gradients {
            modules: params
                .modules
                .iter()
                .map(|m| ModuleGrads {
                    k_in: Array5::zeros(m.k_in.dim()),
                    k_u: Array5::zeros(m.k_u.dim()),
                    k_d: Array5::zeros(m.k_d.dim()),
                })
                .collect(),
            rho: 0.0,
            b_theta: 0.0,
            g_kernel: Array1::zeros(params.g_kernel.len()),
            decoder: Array2::zeros(params.decoder.dim()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.modules.iter().all(|m| {
            m.k_in.iter().chain(m.k_u.iter()).chain(m.k_d.iter()).all(|v| v.is_finite())
        }) && self.rho.is_finite()
            && self.b_theta.is_finite()
            && self.g_kernel.iter().all(|v| v.is_finite())
            && self.decoder.iter().all(|v| v.is_finite())
    }
}

/// Which learning rate a tensor follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

/// Canonical tensor enumeration shared by the optimizer and the gradient
/// checker: the three kernels of each module in order, then the two threshold
/// scalars, the head kernel, and the decoder.
pub fn tensor_names(iterations: usize) -> Vec<(String, ParamGroup)> {
    let mut names = Vec::with_capacity(3 * iterations + 4);
    for k in 0..iterations {
        names.push((format!("module{k}.k_in"), ParamGroup::Encoder));
        names.push((format!("module{k}.k_u"), ParamGroup::Encoder));
        names.push((format!("module{k}.k_d"), ParamGroup::Encoder));
    }
    names.push(("thresholds.rho".into(), ParamGroup::Encoder));
    names.push(("thresholds.b_theta".into(), ParamGroup::Encoder));
    names.push(("g_kernel".into(), ParamGroup::Encoder));
    names.push(("decoder".into(), ParamGroup::Decoder));
    names
}

fn module_field(m: &mut IterationModuleParams, which: usize) -> &mut [f64] {
    match which {
        0 => m.k_in.as_slice_mut().expect("standard layout"),
        1 => m.k_u.as_slice_mut().expect("standard layout"),
        _ => m.k_d.as_slice_mut().expect("standard layout"),
    }
}

/// Mutable view of the `index`-th tensor in [`tensor_names`] order.
pub fn params_tensor_mut(params: &mut NetworkParams, index: usize) -> &mut [f64] {
    let k = params.modules.len();
    if index < 3 * k {
        return module_field(&mut params.modules[index / 3], index % 3);
    }
    match index - 3 * k {
        0 => std::slice::from_mut(&mut params.thresholds.rho),
        1 => std::slice::from_mut(&mut params.thresholds.b_theta),
        2 => params.g_kernel.as_slice_mut().expect("standard layout"),
        3 => params.decoder.as_slice_mut().expect("standard layout"),
        _ => panic!("tensor index {index} out of range"),
    }
}

/// Shared view of the `index`-th gradient tensor in [`tensor_names`] order.
pub fn grads_tensor(grads: &Gradients, index: usize) -> &[f64] {
    let k = grads.modules.len();
    if index < 3 * k {
        let m = &grads.modules[index / 3];
        return match index % 3 {
            0 => m.k_in.as_slice().expect("standard layout"),
            1 => m.k_u.as_slice().expect("standard layout"),
            _ => m.k_d.as_slice().expect("standard layout"),
        };
    }
    match index - 3 * k {
        0 => std::slice::from_ref(&grads.rho),
        1 => std::slice::from_ref(&grads.b_theta),
        2 => grads.g_kernel.as_slice().expect("standard layout"),
        3 => grads.decoder.as_slice().expect("standard layout"),
        _ => panic!("tensor index {index} out of range"),
    }
}

fn grads_tensor_mut(grads: &mut Gradients, index: usize) -> &mut [f64] {
    let k = grads.modules.len();
    if index < 3 * k {
        let m = &mut grads.modules[index / 3];
        return match index % 3 {
            0 => m.k_in.as_slice_mut().expect("standard layout"),
            1 => m.k_u.as_slice_mut().expect("standard layout"),
            _ => m.k_d.as_slice_mut().expect("standard layout"),
        };
    }
    match index - 3 * k {
        0 => std::slice::from_mut(&mut grads.rho),
        1 => std::slice::from_mut(&mut grads.b_theta),
        2 => grads.g_kernel.as_slice_mut().expect("standard layout"),
        3 => grads.decoder.as_slice_mut().expect("standard layout"),
        _ => panic!("tensor index {index} out of range"),
    }
}

/// Adam optimizer state: first and second moment mirrors plus the step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        AdamState {
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Encoder tensors follow `lr_encoder`, the
/// decoder follows `lr_decoder`; with `freeze_decoder` set, the decoder and
/// its moments are left untouched.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &Gradients,
    state: &mut AdamState,
    lr_encoder: f64,
    lr_decoder: f64,
    freeze_decoder: bool,
) {
    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);
    let names = tensor_names(params.modules.len());
    for (index, (_, group)) in names.iter().enumerate() {
        let lr = match group {
            ParamGroup::Encoder => lr_encoder,
            ParamGroup::Decoder => {
                if freeze_decoder {
                    continue;
                }
                lr_decoder
            }
        };
        let g = grads_tensor(grads, index);
        // moments and parameters are distinct structs, so these reborrows are
        // disjoint by construction
        {
            let m = grads_tensor_mut(&mut state.m, index);
            for (mv, gv) in m.iter_mut().zip(g.iter()) {
                *mv = state.beta1 * *mv + (1.0 - state.beta1) * gv;
            }
        }
        {
            let v = grads_tensor_mut(&mut state.v, index);
            for (vv, gv) in v.iter_mut().zip(g.iter()) {
                *vv = state.beta2 * *vv + (1.0 - state.beta2) * gv * gv;
            }
        }
        let pslice = params_tensor_mut(params, index);
        for i in 0..pslice.len() {
            let m_hat = grads_tensor(&state.m, index)[i] / bias1;
            let v_hat = grads_tensor(&state.v, index)[i] / bias2;
            pslice[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
}

/// Learning rates, schedule, and bookkeeping for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    /// Epochs trained with the decoder frozen (stage one). Zero disables the
    /// frozen stage entirely (single-stage training).
    pub stage_one_epochs: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Cosine clamp of the loss.
    pub eps_cos: f64,
    /// Invariants are snapshotted every this many epochs.
    pub check_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_encoder: 1.2e-4,
            lr_decoder: 1e-4,
            stage_one_epochs: 900,
            epochs: 1000,
            seed: 0,
            eps_cos: 1e-7,
            check_interval: 100,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(UnmixError::InvalidInput("need at least one epoch".into()));
        }
        if self.stage_one_epochs > self.epochs {
            return Err(UnmixError::InvalidInput(format!(
                "stage-one epochs {} exceed total {}",
                self.stage_one_epochs, self.epochs
            )));
        }
        if self.lr_encoder <= 0.0 || self.lr_decoder <= 0.0 {
            return Err(UnmixError::InvalidInput("learning rates must be positive".into()));
        }
        if self.check_interval == 0 {
            return Err(UnmixError::InvalidInput("check interval must be positive".into()));
        }
        Ok(())
    }
}

/// Invariant snapshot taken at a checkpoint epoch.
#[derive(Debug, Clone)]
pub struct TrainCheckpoint {
    pub epoch: usize,
    pub loss: f64,
    /// Threshold schedule after this epoch's update.
    pub thresholds: Vec<f64>,
    /// Smallest abundance value seen in this epoch's forward pass.
    pub min_abundance: f64,
    /// Largest per-pixel deviation of the abundance sum from one.
    pub max_asc_deviation: f64,
    /// Whether the decoder still equals the initialization bit for bit.
    pub decoder_matches_init: bool,
}

/// Everything a finished run reports.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Loss per epoch, evaluated before that epoch's update.
    pub losses: Vec<f64>,
    pub final_abundances: AbundanceMaps,
    pub final_endmembers: EndmemberMatrix,
    /// Last stage-one epoch index (0 when single-stage).
    pub stage_boundary: usize,
    pub checkpoints: Vec<TrainCheckpoint>,
}

fn abundance_stats(a: &AbundanceMaps) -> (f64, f64) {
    let v = a.values();
    let (p, h, w) = v.dim();
    let mut min = f64::INFINITY;
    let mut max_dev: f64 = 0.0;
    for i in 0..h {
        for j in 0..w {
            let mut sum = 0.0;
            for m in 0..p {
                let x = v[[m, i, j]];
                min = min.min(x);
                sum += x;
            }
            max_dev = max_dev.max((sum - 1.0).abs());
        }
    }
    (min, max_dev)
}

/// Reads the decoder weights out as the endmember matrix, unmodified.
pub fn extract_endmembers(params: &NetworkParams) -> Result<EndmemberMatrix> {
    EndmemberMatrix::new(params.decoder.clone())
}

/// Two-stage full-image training: the decoder starts from `e_init` and stays
/// frozen for the first `stage_one_epochs`; afterwards encoder and decoder
/// update jointly. One epoch is one forward/backward/update on the whole
/// cube. Deterministic given the seed.
pub fn train(
    cube: &HsiCube,
    materials: usize,
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
    e_init: &EndmemberMatrix,
) -> Result<TrainReport> {
    train_cfg.validate()?;
    if materials != net_cfg.materials {
        return Err(UnmixError::InvalidInput(format!(
            "requested {materials} materials but the network is configured for {}",
            net_cfg.materials
        )));
    }
    if e_init.bands() != net_cfg.bands || e_init.materials() != net_cfg.materials {
        return Err(UnmixError::DimensionMismatch(format!(
            "initializer is {}x{}, network needs {}x{}",
            e_init.bands(),
            e_init.materials(),
            net_cfg.bands,
            net_cfg.materials
        )));
    }

    let mut params = NetworkParams::init(net_cfg, train_cfg.seed);
    params.decoder = e_init.values().clone();
    let mut state = AdamState::new(&params);

    let mut losses = Vec::with_capacity(train_cfg.epochs);
    let mut checkpoints = Vec::new();
    for epoch in 1..=train_cfg.epochs {
        let (_, abundances, cache) = network_forward(cube, &params, net_cfg)?;
        let (loss, grads) = network_backward(&cache, cube, &params, net_cfg, train_cfg.eps_cos)?;
        if !grads.all_finite() || !loss.is_finite() {
            return Err(UnmixError::RankDeficient(format!(
                "non-finite loss or gradient at epoch {epoch}"
            )));
        }
        losses.push(loss);
        let freeze = epoch <= train_cfg.stage_one_epochs;
        adam_step(
            &mut params,
            &grads,
            &mut state,
            train_cfg.lr_encoder,
            train_cfg.lr_decoder,
            freeze,
        );
        if epoch % train_cfg.check_interval == 0 {
            let (min_abundance, max_asc_deviation) = abundance_stats(&abundances);
            checkpoints.push(TrainCheckpoint {
                epoch,
                loss,
                thresholds: params.thresholds.schedule(net_cfg.iterations),
                min_abundance,
                max_asc_deviation,
                decoder_matches_init: params
                    .decoder
                    .iter()
                    .zip(e_init.values().iter())
                    .all(|(a, b)| a.to_bits() == b.to_bits()),
            });
        }
    }

    let (_, final_abundances, _) = network_forward(cube, &params, net_cfg)?;
    let final_endmembers = extract_endmembers(&params)?;
    Ok(TrainReport {
        losses,
        final_abundances,
        final_endmembers,
        stage_boundary: train_cfg.stage_one_epochs,
        checkpoints,
    })
}
