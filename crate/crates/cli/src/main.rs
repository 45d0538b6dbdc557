//! Command-line surface of the unmixing toolkit: scene simulation, endmember
//! extraction, full unmixing, evaluation, and gradient checking.
//!
//! Exit codes: 0 success, 2 usage error, 3 I/O error, 4 numerical failure;
//! a failed gradient check exits 1.

mod manifest;

use clap::{Parser, Subcommand, ValueEnum};
use manifest::RunManifest;
use ndarray::Array3;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use unmix3d_core::cscnet::make_config;
use unmix3d_core::hsi_data::{
    generate_gaussian_field_abundances, generate_synthetic_endmembers, load_abundance_pgm,
    load_cube, load_endmember_csv, store_abundance_pgm, store_cube, store_endmember_csv,
    synthesize_scene,
};
use unmix3d_core::metrics::evaluate;
use unmix3d_core::psvm::{psvm_run, svm_baseline_extract, PsvmOptions};
use unmix3d_core::subspace::SnrFormula;
use unmix3d_core::training::gradcheck::{
    run_gradcheck, run_gradcheck_corrupted, GRADCHECK_STEP, GRADCHECK_TOLERANCE,
};
use unmix3d_core::training::{train, TrainConfig};
use unmix3d_core::{AbundanceMaps, HsiCube, NoiseLevel, Result, UnmixError};

/// Default spatial smoothness of the simulated abundance fields, in pixels.
const FIELD_SIGMA: f64 = 8.0;
/// Activation-memory bound for the unmixing network, in bytes.
const MEMORY_LIMIT: usize = 8 << 30;

#[derive(Parser)]
#[command(
    name = "unmix3d",
    version,
    about = "Blind hyperspectral unmixing: simplex-volume endmember extraction plus an unrolled 3D sparse-coding autoencoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExtractMethod {
    /// Conditional denoising, projection, and simplex search.
    Psvm,
    /// The same pipeline with denoising disabled.
    PsvmNd,
    /// Plain simplex search on the mean-removed projection.
    Svm,
}

#[derive(Clone, Copy, ValueEnum)]
enum SnrFormulaArg {
    Db,
    AsWritten,
}

impl From<SnrFormulaArg> for SnrFormula {
    fn from(v: SnrFormulaArg) -> Self {
        match v {
            SnrFormulaArg::Db => SnrFormula::Db,
            SnrFormulaArg::AsWritten => SnrFormula::AsWritten,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with ground truth.
    Simulate {
        #[arg(long)]
        bands: usize,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        materials: usize,
        /// Target SNR in dB, or "noiseless".
        #[arg(long)]
        snr: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Extract endmembers from a cube.
    Extract {
        #[arg(long = "in", value_name = "CUBE")]
        input: PathBuf,
        #[arg(long)]
        materials: usize,
        #[arg(long, value_enum, default_value = "psvm")]
        method: ExtractMethod,
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
        /// Gaussian denoising width in voxels, applied to all three axes.
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, value_enum, default_value = "db")]
        snr_formula: SnrFormulaArg,
    },
    /// Estimate abundances and endmembers with the full autoencoder pipeline.
    Unmix {
        #[arg(long = "in", value_name = "CUBE")]
        input: PathBuf,
        #[arg(long)]
        materials: usize,
        /// Endmember CSV to initialize the decoder; defaults to a fresh
        /// extraction from the input cube.
        #[arg(long, value_name = "CSV")]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = 48)]
        channels: usize,
        #[arg(long, default_value_t = 6)]
        iters: usize,
        #[arg(long, default_value_t = 1.2e-4)]
        lr_e: f64,
        #[arg(long, default_value_t = 1e-4)]
        lr_d: f64,
        #[arg(long, default_value_t = 900)]
        t1: usize,
        #[arg(long, default_value_t = 1000)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Score estimates against ground truth.
    Eval {
        #[arg(long, value_name = "CSV")]
        est_endmembers: PathBuf,
        #[arg(long, value_name = "DIR")]
        est_abundances: PathBuf,
        #[arg(long, value_name = "CSV")]
        gt_endmembers: PathBuf,
        #[arg(long, value_name = "DIR")]
        gt_abundances: PathBuf,
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
    },
    /// Verify analytic gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = GRADCHECK_STEP)]
        eps: f64,
        /// Corrupt one gradient entry first (negative control).
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

fn exit_code_for(err: &UnmixError) -> u8 {
    match err {
        UnmixError::InvalidInput(_)
        | UnmixError::DimensionMismatch(_)
        | UnmixError::UnsatisfiableShape(_) => 2,
        UnmixError::Io(_) | UnmixError::Format(_) => 3,
        UnmixError::RankDeficient(_)
        | UnmixError::NormalizationFailure { .. }
        | UnmixError::ZeroNorm(_)
        | UnmixError::SeparationFailure { .. } => 4,
    }
}

fn configure_thread_pool() -> Result<()> {
    match std::env::var("UNMIX3D_THREADS") {
        Err(_) => Ok(()),
        Ok(raw) => {
            let n: usize = raw.parse().map_err(|_| {
                UnmixError::InvalidInput(format!(
                    "UNMIX3D_THREADS must be a nonnegative integer, got {raw:?}"
                ))
            })?;
            if n == 0 {
                return Ok(()); // all cores
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| UnmixError::InvalidInput(format!("thread pool: {e}")))?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(err) = configure_thread_pool() {
        eprintln!("error: {err}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Simulate {
            bands,
            height,
            width,
            materials,
            snr,
            seed,
            out_dir,
        } => cmd_simulate(bands, height, width, materials, &snr, seed, &out_dir),
        Command::Extract {
            input,
            materials,
            method,
            out,
            sigma,
            snr_formula,
        } => cmd_extract(&input, materials, method, &out, sigma, snr_formula),
        Command::Unmix {
            input,
            materials,
            init,
            channels,
            iters,
            lr_e,
            lr_d,
            t1,
            epochs,
            seed,
            out_dir,
        } => cmd_unmix(
            &input, materials, init.as_deref(), channels, iters, lr_e, lr_d, t1, epochs, seed,
            &out_dir,
        ),
        Command::Eval {
            est_endmembers,
            est_abundances,
            gt_endmembers,
            gt_abundances,
            out,
        } => cmd_eval(&est_endmembers, &est_abundances, &gt_endmembers, &gt_abundances, &out),
        Command::Gradcheck { seed, eps, corrupt } => {
            return cmd_gradcheck(seed, eps, corrupt);
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    bands: usize,
    height: usize,
    width: usize,
    materials: usize,
    snr: &str,
    seed: u64,
    out_dir: &Path,
) -> Result<()> {
    if materials < 2 {
        return Err(UnmixError::InvalidInput(format!(
            "need at least 2 materials, got {materials}"
        )));
    }
    if materials >= bands {
        return Err(UnmixError::InvalidInput(format!(
            "need more bands than materials, got L={bands}, P={materials}"
        )));
    }
    let level = NoiseLevel::parse(snr)?;
    std::fs::create_dir_all(out_dir)?;

    let endmembers = generate_synthetic_endmembers(bands, materials, seed)?;
    let abundances = generate_gaussian_field_abundances(
        materials,
        height,
        width,
        FIELD_SIGMA,
        seed.wrapping_add(1),
    )?;
    let scene = synthesize_scene(&endmembers, &abundances, level, seed.wrapping_add(2))?;

    let mut manifest = RunManifest::new("simulate");
    manifest
        .seed(seed)
        .option("bands", bands)
        .option("height", height)
        .option("width", width)
        .option("materials", materials)
        .option("snr", level)
        .option("field-sigma", FIELD_SIGMA);

    let cube_path = out_dir.join("scene.hsc");
    store_cube(&scene.cube, &cube_path)?;
    manifest.output(&cube_path);

    let gt_e_path = out_dir.join("gt_endmembers.csv");
    store_endmember_csv(&endmembers, &gt_e_path)?;
    manifest.output(&gt_e_path);

    for p in 0..materials {
        let path = out_dir.join(format!("gt_abundance_{}.pgm", p + 1));
        store_abundance_pgm(abundances.values().index_axis(ndarray::Axis(0), p), &path)?;
        manifest.output(&path);
    }

    manifest.write(&out_dir.join("manifest.txt"))?;
    println!(
        "wrote {}x{}x{} scene with {materials} materials to {}",
        bands,
        height,
        width,
        out_dir.display()
    );
    Ok(())
}

fn cmd_extract(
    input: &Path,
    materials: usize,
    method: ExtractMethod,
    out: &Path,
    sigma: f64,
    snr_formula: SnrFormulaArg,
) -> Result<()> {
    let cube = load_cube(input)?;
    let mut manifest = RunManifest::new("extract");
    manifest
        .option("materials", materials)
        .option("sigma", sigma)
        .input(input);

    let endmembers = match method {
        ExtractMethod::Svm => {
            manifest.option("method", "svm");
            svm_baseline_extract(&cube, materials, 50)?
        }
        ExtractMethod::Psvm | ExtractMethod::PsvmNd => {
            let denoise = matches!(method, ExtractMethod::Psvm);
            manifest.option("method", if denoise { "psvm" } else { "psvm-nd" });
            manifest.option(
                "snr-formula",
                match snr_formula {
                    SnrFormulaArg::Db => "db",
                    SnrFormulaArg::AsWritten => "as-written",
                },
            );
            let options = PsvmOptions {
                denoise,
                snr_formula: snr_formula.into(),
                gaussian_sigma: (sigma, sigma, sigma),
                ..PsvmOptions::default()
            };
            let outcome = psvm_run(&cube, materials, &options)?;
            manifest.option("snr-estimate", outcome.snr_used);
            manifest.option("snr-threshold", outcome.snr_threshold);
            manifest.option("denoised", outcome.denoised);
            outcome.endmembers
        }
    };

    store_endmember_csv(&endmembers, out)?;
    manifest.output(out);
    manifest.write(&manifest_path(out))?;
    println!("wrote {} endmembers to {}", materials, out.display());
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest");
    out.with_file_name(name)
}

#[allow(clippy::too_many_arguments)]
fn cmd_unmix(
    input: &Path,
    materials: usize,
    init: Option<&Path>,
    channels: usize,
    iters: usize,
    lr_e: f64,
    lr_d: f64,
    t1: usize,
    epochs: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<()> {
    let cube = load_cube(input)?;
    let config = make_config(cube.bands(), cube.height(), cube.width(), materials, channels, iters)?;

    // activations dominate memory: codes and pre-activations per module plus
    // the band-space intermediates
    let activation_bytes = 8
        * iters
        * (2 * channels * materials + cube.bands()) // per-pixel f64 values
        * cube.num_pixels();
    if activation_bytes > MEMORY_LIMIT {
        return Err(UnmixError::InvalidInput(format!(
            "configuration needs ~{} GiB of activations, above the {} GiB limit",
            activation_bytes >> 30,
            MEMORY_LIMIT >> 30
        )));
    }

    let mut manifest = RunManifest::new("unmix");
    manifest
        .seed(seed)
        .option("materials", materials)
        .option("channels", channels)
        .option("iters", iters)
        .option("lr-e", lr_e)
        .option("lr-d", lr_d)
        .option("t1", t1)
        .option("epochs", epochs)
        .input(input);

    let e_init = match init {
        Some(path) => {
            manifest.option("init", path.display());
            load_endmember_csv(path)?
        }
        None => {
            manifest.option("init", "psvm");
            psvm_run(&cube, materials, &PsvmOptions::default())?.endmembers
        }
    };

    let train_cfg = TrainConfig {
        lr_encoder: lr_e,
        lr_decoder: lr_d,
        stage_one_epochs: t1,
        epochs,
        seed,
        ..TrainConfig::default()
    };
    let report = train(&cube, materials, &config, &train_cfg, &e_init)?;

    std::fs::create_dir_all(out_dir)?;
    let e_path = out_dir.join("endmembers.csv");
    store_endmember_csv(&report.final_endmembers, &e_path)?;
    manifest.output(&e_path);

    for p in 0..materials {
        let path = out_dir.join(format!("abundance_{}.pgm", p + 1));
        store_abundance_pgm(
            report.final_abundances.values().index_axis(ndarray::Axis(0), p),
            &path,
        )?;
        manifest.output(&path);
    }

    // full-precision abundances, stored as a P-band cube
    let a_path = out_dir.join("abundance.hsc");
    let stack = HsiCube::new(report.final_abundances.values().clone())?;
    store_cube(&stack, &a_path)?;
    manifest.output(&a_path);

    let loss_path = out_dir.join("loss.csv");
    let mut loss_csv = String::from("epoch,loss\n");
    for (i, loss) in report.losses.iter().enumerate() {
        loss_csv.push_str(&format!("{},{}\n", i + 1, loss));
    }
    std::fs::write(&loss_path, loss_csv)?;
    manifest.output(&loss_path);

    manifest.write(&out_dir.join("manifest.txt"))?;
    println!(
        "unmixed {} into {materials} materials over {epochs} epochs; final loss {}",
        input.display(),
        report.losses.last().expect("at least one epoch")
    );
    Ok(())
}

/// Loads a directory of abundance maps: the full-precision `abundance.hsc`
/// stack when present, else numbered 16-bit PGM files. Values are
/// renormalized to the simplex per pixel, undoing quantization drift.
fn load_abundance_dir(dir: &Path) -> Result<AbundanceMaps> {
    let stack_path = dir.join("abundance.hsc");
    let mut pgm_files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("pgm") {
            pgm_files.push(path);
        }
    }
    let values: Array3<f64> = if stack_path.is_file() {
        load_cube(&stack_path)?.into_values()
    } else {
        if pgm_files.is_empty() {
            return Err(UnmixError::InvalidInput(format!(
                "{} holds no abundance stack (.hsc) and no .pgm maps",
                dir.display()
            )));
        }
        // order maps by the integer trailing their final underscore
        let mut numbered: Vec<(usize, PathBuf)> = Vec::with_capacity(pgm_files.len());
        for path in pgm_files {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let index: usize = stem
                .rsplit('_')
                .next()
                .and_then(|tail| tail.parse().ok())
                .ok_or_else(|| {
                    UnmixError::InvalidInput(format!(
                        "cannot find a material index in {}",
                        path.display()
                    ))
                })?;
            numbered.push((index, path));
        }
        numbered.sort();
        let first = load_abundance_pgm(&numbered[0].1)?;
        let (h, w) = first.dim();
        let mut stack = Array3::zeros((numbered.len(), h, w));
        for (slot, (_, path)) in numbered.iter().enumerate() {
            let map = load_abundance_pgm(path)?;
            if map.dim() != (h, w) {
                return Err(UnmixError::DimensionMismatch(format!(
                    "{} is {:?}, expected {:?}",
                    path.display(),
                    map.dim(),
                    (h, w)
                )));
            }
            for i in 0..h {
                for j in 0..w {
                    stack[[slot, i, j]] = map[[i, j]];
                }
            }
        }
        stack
    };

    let (p, h, w) = values.dim();
    let mut normalized = values;
    for i in 0..h {
        for j in 0..w {
            let sum: f64 = (0..p).map(|m| normalized[[m, i, j]]).sum();
            if sum <= 0.0 {
                return Err(UnmixError::InvalidInput(format!(
                    "abundances at pixel ({i},{j}) sum to {sum}"
                )));
            }
            for m in 0..p {
                normalized[[m, i, j]] /= sum;
            }
        }
    }
    AbundanceMaps::new(normalized)
}

fn cmd_eval(
    est_endmembers: &Path,
    est_abundances: &Path,
    gt_endmembers: &Path,
    gt_abundances: &Path,
    out: &Path,
) -> Result<()> {
    let e_est = load_endmember_csv(est_endmembers)?;
    let e_gt = load_endmember_csv(gt_endmembers)?;
    let a_est = load_abundance_dir(est_abundances)?;
    let a_gt = load_abundance_dir(gt_abundances)?;
    let report = evaluate(&e_est, &a_est, &e_gt, &a_gt)?;

    let mut csv = String::from("material,sad,rmse\n");
    println!("material      SAD     RMSE");
    for (i, (sad, rmse)) in report
        .per_material_sad
        .iter()
        .zip(&report.per_material_rmse)
        .enumerate()
    {
        csv.push_str(&format!("{},{},{}\n", i + 1, sad, rmse));
        println!("{:>8} {:>8.4} {:>8.4}", i + 1, sad, rmse);
    }
    csv.push_str(&format!(
        "average,{},{}\n",
        report.average_sad, report.average_rmse
    ));
    println!(
        "{:>8} {:>8.4} {:>8.4}",
        "average", report.average_sad, report.average_rmse
    );
    std::fs::write(out, csv)?;

    let mut manifest = RunManifest::new("eval");
    manifest
        .input(est_endmembers)
        .input(est_abundances)
        .input(gt_endmembers)
        .input(gt_abundances)
        .output(out);
    manifest.write(&manifest_path(out))?;
    Ok(())
}

fn cmd_gradcheck(seed: u64, eps: f64, corrupt: bool) -> ExitCode {
    let report = if corrupt {
        run_gradcheck_corrupted(seed, eps)
    } else {
        run_gradcheck(seed, eps)
    };
    let report = match report {
        Ok(r) => r,
        Err(err) => {
            eprintln!("error: {err}");
            return ExitCode::from(exit_code_for(&err));
        }
    };
    println!("gradient check: seed {seed}, step {eps}, tolerance {GRADCHECK_TOLERANCE}");
    for entry in &report.entries {
        let verdict = if entry.max_rel_error <= report.tolerance {
            "ok"
        } else {
            "FAIL"
        };
        println!(
            "  {:<22} max rel error {:>12.4e}  {verdict}",
            entry.tensor, entry.max_rel_error
        );
    }
    if report.passed() {
        println!("all parameter tensors within tolerance");
        ExitCode::SUCCESS
    } else {
        let worst = &report.failures()[0];
        eprintln!(
            "gradient check failed: {} at {:.4e}",
            worst.tensor, worst.max_rel_error
        );
        ExitCode::from(1)
    }
}
