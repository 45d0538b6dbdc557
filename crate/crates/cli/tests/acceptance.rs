//! Acceptance suite: one test per release criterion, each printing a
//! `[PASS]`/`[FAIL]` line. Run with
//! `cargo test -p unmix3d-cli --test acceptance -- --nocapture`.

use ndarray::Array2;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};
use unmix3d_core::cscnet::{conv3d, conv3d_transpose, make_config};
use unmix3d_core::hsi_data::{
    generate_gaussian_field_abundances, generate_synthetic_endmembers, reshape_to_matrix,
    store_cube, synthesize_scene, AbundanceMaps,
};
use unmix3d_core::metrics::{evaluate, match_materials, sad_endmember};
use unmix3d_core::psvm::{psvm_extract, PsvmOptions};
use unmix3d_core::subspace::{cayley_menger_sq_volume, estimate_snr, svm_maximize};
use unmix3d_core::training::gradcheck::{run_gradcheck, GRADCHECK_STEP, GRADCHECK_TOLERANCE};
use unmix3d_core::training::{train, TrainConfig, TrainReport};
use unmix3d_core::{EndmemberMatrix, NoiseLevel, SyntheticScene};

fn pass(criterion: &str, detail: String) {
    println!("[PASS] {criterion}: {detail}");
}

fn matched_average_sad(est: &EndmemberMatrix, gt: &EndmemberMatrix) -> f64 {
    let perm = match_materials(est, gt).unwrap();
    let total: f64 = perm
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let a: Vec<f64> = gt.values().column(i).to_vec();
            let b: Vec<f64> = est.values().column(j).to_vec();
            sad_endmember(&a, &b).unwrap()
        })
        .sum();
    total / perm.len() as f64
}

/// The desk-scale scene shared by criteria 2, 6, 7, 8, and 9:
/// 64x64 pixels, 120 bands, four materials.
fn desk_scene(snr: NoiseLevel, seed: u64) -> SyntheticScene {
    let e = generate_synthetic_endmembers(120, 4, seed).unwrap();
    let a = generate_gaussian_field_abundances(4, 64, 64, 8.0, seed + 1).unwrap();
    synthesize_scene(&e, &a, snr, seed + 2).unwrap()
}

// ---------------------------------------------------------------------------
// criterion 1: gradient oracle
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_gradient_oracle() {
    let start = Instant::now();
    let mut worst_overall: f64 = 0.0;
    for seed in [1u64, 2, 3] {
        let report = run_gradcheck(seed, GRADCHECK_STEP).unwrap();
        for entry in &report.entries {
            worst_overall = worst_overall.max(entry.max_rel_error);
            assert!(
                entry.max_rel_error <= GRADCHECK_TOLERANCE,
                "[FAIL] criterion 1: seed {seed} tensor {} at {:.3e}",
                entry.tensor,
                entry.max_rel_error
            );
        }
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed < Duration::from_secs(60),
        "[FAIL] criterion 1: took {elapsed:.2?}, budget 1 min"
    );
    pass(
        "criterion 1 (gradient oracle)",
        format!("3 seeds, worst rel error {worst_overall:.3e} <= 1e-4, {elapsed:.2?}"),
    );
}

// ---------------------------------------------------------------------------
// criterion 2: pure-pixel exactness
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_pure_pixel_exactness() {
    let start = Instant::now();
    let e = generate_synthetic_endmembers(120, 4, 201).unwrap();
    let a = generate_gaussian_field_abundances(4, 64, 64, 8.0, 202).unwrap();
    let mut values = a.into_values();
    for m in 0..4 {
        // plant one pure pixel per material
        for q in 0..4 {
            values[[q, 3 * m, 5 * m]] = if q == m { 1.0 } else { 0.0 };
        }
    }
    let a = AbundanceMaps::new(values).unwrap();
    let scene = synthesize_scene(&e, &a, NoiseLevel::Noiseless, 203).unwrap();
    let est = psvm_extract(&scene.cube, 4, &PsvmOptions::default()).unwrap();
    let sad = matched_average_sad(&est, &e);
    let elapsed = start.elapsed();
    assert!(
        sad <= 1e-6,
        "[FAIL] criterion 2: matched average SAD {sad:.3e} > 1e-6"
    );
    assert!(
        elapsed < Duration::from_secs(5),
        "[FAIL] criterion 2: took {elapsed:.2?}, budget 5 s"
    );
    pass(
        "criterion 2 (pure-pixel exactness)",
        format!("matched average SAD {sad:.3e} <= 1e-6, {elapsed:.2?}"),
    );
}

// ---------------------------------------------------------------------------
// criterion 3: determinism
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_determinism() {
    // byte-identical extraction CSVs through the CLI
    let dir = tempfile::tempdir().unwrap();
    let scene = desk_scene(NoiseLevel::SnrDb(20.0), 301);
    let cube_path = dir.path().join("scene.hsc");
    store_cube(&scene.cube, &cube_path).unwrap();
    let mut csvs = Vec::new();
    for name in ["one.csv", "two.csv"] {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_unmix3d"))
            .args([
                "extract",
                "--in", cube_path.to_str().unwrap(),
                "--materials", "4",
                "--out", out.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success());
        csvs.push(std::fs::read(out).unwrap());
    }
    assert_eq!(csvs[0], csvs[1], "[FAIL] criterion 3: extraction CSVs differ");

    // bit-identical loss traces for equal seeds
    let cfg = make_config(16, 8, 8, 3, 4, 2).unwrap();
    let e_init = generate_synthetic_endmembers(16, 3, 302).unwrap();
    let a = generate_gaussian_field_abundances(3, 8, 8, 3.0, 303).unwrap();
    let toy = synthesize_scene(&e_init, &a, NoiseLevel::SnrDb(25.0), 304).unwrap();
    let train_cfg = TrainConfig {
        lr_encoder: 1e-3,
        lr_decoder: 1e-3,
        stage_one_epochs: 10,
        epochs: 25,
        seed: 305,
        ..TrainConfig::default()
    };
    let run1 = train(&toy.cube, 3, &cfg, &train_cfg, &e_init).unwrap();
    let run2 = train(&toy.cube, 3, &cfg, &train_cfg, &e_init).unwrap();
    let bits1: Vec<u64> = run1.losses.iter().map(|l| l.to_bits()).collect();
    let bits2: Vec<u64> = run2.losses.iter().map(|l| l.to_bits()).collect();
    assert_eq!(bits1, bits2, "[FAIL] criterion 3: loss traces differ");
    pass(
        "criterion 3 (determinism)",
        format!(
            "byte-identical CSVs ({} bytes); bit-identical {}-epoch loss traces",
            csvs[0].len(),
            bits1.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 4: simplex search optimality
// ---------------------------------------------------------------------------

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

/// Independent oracle: enumerate all C(N, P) subsets.
fn exhaustive_best(data: &Array2<f64>, p: usize) -> f64 {
    let n = data.dim().1;
    let mut best: f64 = -1.0;
    let mut combo: Vec<usize> = (0..p).collect();
    loop {
        best = best.max(sq_volume_of(data, &combo));
        let mut i = p;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if combo[i] != i + n - p {
                break;
            }
        }
        if combo[p - 1] == n - 1 && combo[0] == n - p {
            return best;
        }
        combo[i] += 1;
        for j in (i + 1)..p {
            combo[j] = combo[j - 1] + 1;
        }
    }
}

#[test]
fn criterion_04_simplex_search_optimality() {
    use rand::Rng;
    use rand::SeedableRng;
    let mut worst_gap: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(400 + seed);
        let data = Array2::from_shape_fn((2, 12), |_| rng.random_range(-1.0..1.0));
        let found = svm_maximize(data.view(), 3, 50).unwrap();
        let v = sq_volume_of(&data, &found);
        let best = exhaustive_best(&data, 3);
        let gap = (best - v).abs() / best;
        worst_gap = worst_gap.max(gap);
        assert!(
            gap <= 1e-12,
            "[FAIL] criterion 4: instance {seed} search {v} vs exhaustive {best}"
        );
    }
    pass(
        "criterion 4 (simplex search optimality)",
        format!("50 instances N=12 P=3, worst relative gap {worst_gap:.2e} <= 1e-12"),
    );
}

// ---------------------------------------------------------------------------
// criterion 5: Cayley-Menger closed forms
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_cayley_menger_closed_forms() {
    let seg = ndarray::arr2(&[[0.0, 1.0]]);
    let v_seg = cayley_menger_sq_volume(seg.view());
    assert!(
        (v_seg - 1.0).abs() <= 1e-12,
        "[FAIL] criterion 5: segment V^2 {v_seg}"
    );

    let h = 3f64.sqrt() / 2.0;
    let tri = ndarray::arr2(&[[0.0, 1.0, 0.5], [0.0, 0.0, h]]);
    let v_tri = cayley_menger_sq_volume(tri.view());
    assert!(
        (v_tri - 3.0 / 16.0).abs() / (3.0 / 16.0) <= 1e-12,
        "[FAIL] criterion 5: triangle V^2 {v_tri}"
    );

    let tet = ndarray::arr2(&[
        [0.0, 1.0, 0.5, 0.5],
        [0.0, 0.0, h, h / 3.0],
        [0.0, 0.0, 0.0, (2.0f64 / 3.0).sqrt()],
    ]);
    let v_tet = cayley_menger_sq_volume(tet.view());
    assert!(
        (v_tet - 1.0 / 72.0).abs() / (1.0 / 72.0) <= 1e-12,
        "[FAIL] criterion 5: tetrahedron V^2 {v_tet}"
    );
    pass(
        "criterion 5 (Cayley-Menger closed forms)",
        format!("segment 1, triangle 3/16, tetrahedron 1/72, all within 1e-12 relative"),
    );
}

// ---------------------------------------------------------------------------
// criterion 6: SNR estimator
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_snr_estimator() {
    let mut details = Vec::new();
    for (i, target) in [10.0, 20.0, 30.0].into_iter().enumerate() {
        let scene = desk_scene(NoiseLevel::SnrDb(target), 600 + 10 * i as u64);
        let r = reshape_to_matrix(&scene.cube);
        let estimate = estimate_snr(&r, 4).unwrap();
        assert!(
            (estimate - target).abs() <= 3.0,
            "[FAIL] criterion 6: {target} dB scene estimated at {estimate:.2} dB"
        );
        details.push(format!("{target} dB -> {estimate:.2} dB"));
    }
    pass(
        "criterion 6 (SNR estimator)",
        format!("{} (all within +-3 dB)", details.join(", ")),
    );
}

// ---------------------------------------------------------------------------
// criterion 7: noise robustness ordering
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_noise_robustness_ordering() {
    let start = Instant::now();
    let mut with_denoise = Vec::new();
    let mut without_denoise = Vec::new();
    for seed in 0..5u64 {
        let scene = desk_scene(NoiseLevel::SnrDb(10.0), 700 + 10 * seed);
        let psvm = psvm_extract(&scene.cube, 4, &PsvmOptions::default()).unwrap();
        let psvm_nd = psvm_extract(
            &scene.cube,
            4,
            &PsvmOptions {
                denoise: false,
                ..PsvmOptions::default()
            },
        )
        .unwrap();
        with_denoise.push(matched_average_sad(&psvm, &scene.gt_endmembers));
        without_denoise.push(matched_average_sad(&psvm_nd, &scene.gt_endmembers));
    }
    with_denoise.sort_by(|a, b| a.partial_cmp(b).unwrap());
    without_denoise.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (median_with, median_without) = (with_denoise[2], without_denoise[2]);
    let elapsed = start.elapsed();
    assert!(
        median_with <= median_without,
        "[FAIL] criterion 7: median SAD {median_with:.4} (PSVM) > {median_without:.4} (PSVM_ND)"
    );
    assert!(
        elapsed < Duration::from_secs(120),
        "[FAIL] criterion 7: took {elapsed:.2?}, budget 2 min"
    );
    pass(
        "criterion 7 (noise robustness ordering)",
        format!(
            "median matched SAD at 10 dB: PSVM {median_with:.4} <= PSVM_ND {median_without:.4}, {elapsed:.2?}"
        ),
    );
}

// ---------------------------------------------------------------------------
// criteria 8 + 9: desk-scale pipeline quality and training invariants
// ---------------------------------------------------------------------------

struct PipelineRun {
    scene: SyntheticScene,
    report: TrainReport,
    average_sad: f64,
    average_rmse: f64,
    elapsed: Duration,
}

static PIPELINE: OnceLock<PipelineRun> = OnceLock::new();

fn pipeline_run() -> &'static PipelineRun {
    PIPELINE.get_or_init(|| {
        let start = Instant::now();
        let scene = desk_scene(NoiseLevel::SnrDb(20.0), 800);
        let init = psvm_extract(&scene.cube, 4, &PsvmOptions::default()).unwrap();
        let net_cfg = make_config(120, 64, 64, 4, 16, 6).unwrap();
        let train_cfg = TrainConfig {
            lr_encoder: 1.2e-4, // calibration pending
            lr_decoder: 1e-4,
            stage_one_epochs: 300,
            epochs: 600,
            seed: 801,
            eps_cos: 1e-7,
            check_interval: 100,
        };
        let report = train(&scene.cube, 4, &net_cfg, &train_cfg, &init).unwrap();
        let eval = evaluate(
            &report.final_endmembers,
            &report.final_abundances,
            &scene.gt_endmembers,
            &scene.gt_abundances,
        )
        .unwrap();
        PipelineRun {
            scene,
            average_sad: eval.average_sad,
            average_rmse: eval.average_rmse,
            report,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn criterion_08_desk_scale_pipeline_quality() {
    let run = pipeline_run();
    assert!(
        run.average_sad <= 0.08,
        "[FAIL] criterion 8: matched mean SAD {:.4} > 0.08",
        run.average_sad
    );
    assert!(
        run.average_rmse <= 0.15,
        "[FAIL] criterion 8: mean RMSE {:.4} > 0.15",
        run.average_rmse
    );
    assert!(
        run.elapsed < Duration::from_secs(15 * 60),
        "[FAIL] criterion 8: took {:.2?}, budget 15 min",
        run.elapsed
    );
    pass(
        "criterion 8 (desk-scale pipeline quality)",
        format!(
            "SAD {:.4} <= 0.08, RMSE {:.4} <= 0.15, {:.2?}",
            run.average_sad, run.average_rmse, run.elapsed
        ),
    );
}

#[test]
fn criterion_09_training_invariant_sweep() {
    let run = pipeline_run();
    let report = &run.report;
    assert_eq!(report.checkpoints.len(), 6, "600 epochs / every 100");
    for c in &report.checkpoints {
        assert!(
            c.thresholds.iter().all(|t| *t > 0.0),
            "[FAIL] criterion 9: nonpositive threshold at epoch {}",
            c.epoch
        );
        for w in c.thresholds.windows(2) {
            assert!(
                w[1] < w[0],
                "[FAIL] criterion 9: thresholds not strictly decreasing at epoch {}",
                c.epoch
            );
        }
        assert!(
            c.min_abundance >= 0.0,
            "[FAIL] criterion 9: negative abundance at epoch {}",
            c.epoch
        );
        assert!(
            c.max_asc_deviation <= 1e-6,
            "[FAIL] criterion 9: ASC off by {} at epoch {}",
            c.max_asc_deviation,
            c.epoch
        );
        assert!(
            c.loss >= 0.0 && c.loss <= std::f64::consts::PI,
            "[FAIL] criterion 9: loss {} out of [0, pi] at epoch {}",
            c.loss,
            c.epoch
        );
        if c.epoch <= report.stage_boundary {
            assert!(
                c.decoder_matches_init,
                "[FAIL] criterion 9: stage-one decoder drifted at epoch {}",
                c.epoch
            );
        }
    }
    // keep the borrow alive for the detail line
    let _ = &run.scene;
    pass(
        "criterion 9 (training invariant sweep)",
        format!(
            "thresholds, ANC/ASC, loss range, and stage discipline hold at {} checkpoints",
            report.checkpoints.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 10: adjoint identity
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_adjoint_identity() {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1000);
    // first case: the 184-band stride-62 geometry
    let mut cases = vec![(184usize, 7usize, 62usize, 0usize, 1usize, 3usize)];
    while cases.len() < 20 {
        let kd = [3, 5, 7, 15][rng.random_range(0..4usize)];
        let sd = rng.random_range(1..=8usize);
        let pd = rng.random_range(0..=sd.min(kd));
        let depth = rng.random_range(kd.max(2 * pd + 1)..kd.max(2 * pd + 1) + 40);
        let c_in = rng.random_range(1..=2usize);
        let c_out = rng.random_range(1..=4usize);
        if depth + 2 * pd >= kd {
            cases.push((depth, kd, sd, pd, c_in, c_out));
        }
    }
    let mut worst: f64 = 0.0;
    for (i, (depth, kd, sd, pd, c_in, c_out)) in cases.into_iter().enumerate() {
        let h = rng.random_range(4..8usize);
        let w = rng.random_range(4..8usize);
        let x = ndarray::Array4::from_shape_fn((c_in, depth, h, w), |_| {
            rng.random_range(-1.0..1.0)
        });
        let k = ndarray::Array5::from_shape_fn((c_out, c_in, kd, 3, 3), |_| {
            rng.random_range(-1.0..1.0)
        });
        let y = conv3d(x.view(), k.view(), (sd, 1, 1), (pd, 1, 1)).unwrap();
        let g = ndarray::Array4::from_shape_fn(y.dim(), |_| rng.random_range(-1.0..1.0));
        let back = conv3d_transpose(g.view(), k.view(), (sd, 1, 1), (pd, 1, 1), depth).unwrap();
        let lhs: f64 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(back.iter()).map(|(a, b)| a * b).sum();
        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-30);
        worst = worst.max(rel);
        assert!(
            rel <= 1e-10,
            "[FAIL] criterion 10: case {i} (D={depth}, kd={kd}, sd={sd}, pd={pd}) rel error {rel:.3e}"
        );
    }
    pass(
        "criterion 10 (adjoint identity)",
        format!("20 geometries incl. 184-band stride-62, worst rel error {worst:.2e} <= 1e-10"),
    );
}
