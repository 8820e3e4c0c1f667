//! Release gate for the crate: one test per release-blocking criterion,
//! each printing a single `[PASS]`/`[FAIL]` line with the measured numbers.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines;
//! the training-based criteria take tens of minutes on one core. Heavy
//! fixtures (datasets, trained networks) are built once and shared.

use std::path::{Path, PathBuf};
use std::sync::LazyLock;
use std::time::Instant;

use rand::Rng as _;
use tempfile::TempDir;

use morphflow::dataset::Dataset;
use morphflow::eval::{
    benchmark_runtime, evaluate_registration, dice, FieldSource,
};
use morphflow::loss::{
    diffusion_reg, diffusion_reg_vjp, local_cc, local_cc_vjp, total_energy, total_loss,
    LossConfig,
};
use morphflow::net::{
    backward, build_network, flatten_kernels, forward, load_params, predict_field, ArchConfig,
};
use morphflow::ops::{
    conv_backward, conv_forward, finite_diff_check, leaky_relu_backward, leaky_relu_forward,
    upsample_nearest, upsample_nearest_backward, ConvKernel, Tensor,
};
use morphflow::rng::{derive_seed, seeded, Rng};
use morphflow::synth::{generate_pair, write_dataset, PhantomSpec};
use morphflow::train::{
    identity_validation_dice, select_model, sweep_lambda, train, TrainConfig,
};
use morphflow::varopt::{optimize_pair, VarOptConfig};
use morphflow::volume::Volume;
use morphflow::warp::{sample_linear, sample_linear_vjp, sample_nearest, DisplacementField};
use morphflow::Real;

/// Print the per-criterion verdict line, then fail the test if needed.
fn verdict(criterion: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {criterion}: {detail}");
    assert!(pass, "{criterion}: {detail}");
}

fn rand_volume(shape: &[usize], rng: &mut Rng) -> Volume {
    let n: usize = shape.iter().product();
    Volume::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
}

fn rand_field(shape: &[usize], scale: Real, rng: &mut Rng) -> DisplacementField {
    let mut field = DisplacementField::zeros(shape);
    for v in &mut field.offsets {
        *v = rng.random_range(-scale..scale);
    }
    field
}

fn rand_tensor(channels: usize, shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = channels * shape.iter().product::<usize>();
    Tensor::new(
        channels,
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

fn rand_kernel(out_c: usize, in_c: usize, extent: &[usize], rng: &mut Rng) -> ConvKernel {
    let nw = out_c * in_c * extent.iter().product::<usize>();
    ConvKernel::new(
        out_c,
        in_c,
        extent.to_vec(),
        (0..nw).map(|_| rng.random_range(-0.5..0.5)).collect(),
        (0..out_c).map(|_| rng.random_range(-0.2..0.2)).collect(),
    )
}

// ---------------------------------------------------------------------------
// Criterion 1 — analytic gradients match central finite differences.
// ---------------------------------------------------------------------------

/// Max relative error of each differentiable building block and of the full
/// loss-through-network chain, probed in random directions per seed.
#[test]
fn criterion_1_gradients_match_finite_differences() {
    let started = Instant::now();
    let tol: Real = 1e-4;
    let seeds = 20;
    let mut worst: (Real, &str) = (0.0, "none");
    let mut track = |err: Real, what: &'static str| {
        if err > worst.0 {
            worst = (err, what);
        }
    };

    for seed in 0..seeds {
        let mut rng = seeded(derive_seed(0xACC3, seed));
        let shape = [6usize, 7];

        // Convolution, both strides: gradients for input, weights, and bias.
        for stride in [1usize, 2] {
            let x = rand_tensor(2, &shape, &mut rng);
            let k = rand_kernel(3, 2, &[3, 3], &mut rng);
            let out = conv_forward(&x, &k, stride).unwrap();
            let ones = Tensor::new(out.channels, out.shape.clone(), vec![1.0; out.data.len()]);
            let (gx, gk) = conv_backward(&x, &k, stride, &ones).unwrap();

            let r = finite_diff_check(
                |v| {
                    let t = Tensor::new(x.channels, x.shape.clone(), v.to_vec());
                    conv_forward(&t, &k, stride).unwrap().data.iter().sum()
                },
                &x.data,
                &gx.data,
                1e-3,
                6,
                &mut rng,
            );
            track(r.max_rel_err, "conv/input");
            let r = finite_diff_check(
                |v| {
                    let kk = ConvKernel::new(
                        k.out_channels,
                        k.in_channels,
                        k.extent.clone(),
                        v.to_vec(),
                        k.bias.clone(),
                    );
                    conv_forward(&x, &kk, stride).unwrap().data.iter().sum()
                },
                &k.weights,
                &gk.weights,
                1e-3,
                6,
                &mut rng,
            );
            track(r.max_rel_err, "conv/weights");
            let r = finite_diff_check(
                |v| {
                    let kk = ConvKernel::new(
                        k.out_channels,
                        k.in_channels,
                        k.extent.clone(),
                        k.weights.clone(),
                        v.to_vec(),
                    );
                    conv_forward(&x, &kk, stride).unwrap().data.iter().sum()
                },
                &k.bias,
                &gk.bias,
                1e-3,
                6,
                &mut rng,
            );
            track(r.max_rel_err, "conv/bias");
        }

        // Leaky rectifier. Keep probes away from the kink at zero, where a
        // two-sided difference straddles the slope change.
        let mut x = rand_tensor(3, &shape, &mut rng);
        for v in &mut x.data {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        let ones = Tensor::new(x.channels, x.shape.clone(), vec![1.0; x.data.len()]);
        let g = leaky_relu_backward(&x, 0.2, &ones);
        let r = finite_diff_check(
            |v| {
                let t = Tensor::new(x.channels, x.shape.clone(), v.to_vec());
                leaky_relu_forward(&t, 0.2).data.iter().sum()
            },
            &x.data,
            &g.data,
            1e-3,
            6,
            &mut rng,
        );
        track(r.max_rel_err, "leaky_relu");

        // Nearest-neighbor upsampling. Weight the output so the probe is not
        // a constant functional of the input sum.
        let x = rand_tensor(2, &shape, &mut rng);
        let up = upsample_nearest(&x);
        let weights: Vec<Real> = (0..up.data.len())
            .map(|i| ((i % 17) as Real) / 8.0 - 1.0)
            .collect();
        let upstream = Tensor::new(up.channels, up.shape.clone(), weights.clone());
        let g = upsample_nearest_backward(&upstream);
        let r = finite_diff_check(
            |v| {
                let t = Tensor::new(x.channels, x.shape.clone(), v.to_vec());
                upsample_nearest(&t)
                    .data
                    .iter()
                    .zip(&weights)
                    .map(|(a, w)| a * w)
                    .sum()
            },
            &x.data,
            &g.data,
            1e-3,
            6,
            &mut rng,
        );
        track(r.max_rel_err, "upsample");

        // Resampling: gradient with respect to the displacement offsets.
        let shape = [9usize, 8];
        let m = rand_volume(&shape, &mut rng);
        let field = rand_field(&shape, 1.5, &mut rng);
        let up_w: Vec<Real> = (0..m.len()).map(|i| ((i % 11) as Real) / 5.0 - 1.0).collect();
        let upstream = Volume::new(shape.to_vec(), up_w.clone());
        let g = sample_linear_vjp(&m, &field, &upstream).unwrap();
        let r = finite_diff_check(
            |v| {
                let trial = DisplacementField::new(shape.to_vec(), v.to_vec());
                sample_linear(&m, &trial)
                    .unwrap()
                    .data
                    .iter()
                    .zip(&up_w)
                    .map(|(a, w)| a * w)
                    .sum()
            },
            &field.offsets,
            &g.offsets,
            1e-3,
            6,
            &mut rng,
        );
        track(r.max_rel_err, "sample_linear");

        // Local correlation: gradient with respect to the warped image.
        let cfg = LossConfig {
            cc_window: 5,
            ..LossConfig::default()
        };
        let f = rand_volume(&shape, &mut rng);
        let w = rand_volume(&shape, &mut rng);
        let g = local_cc_vjp(&f, &w, &cfg, 1.0).unwrap();
        let r = finite_diff_check(
            |v| {
                let t = Volume::new(shape.to_vec(), v.to_vec());
                local_cc(&f, &t, &cfg).unwrap().0
            },
            &w.data,
            &g.data,
            1e-3,
            6,
            &mut rng,
        );
        track(r.max_rel_err, "local_cc");

        // Diffusion penalty: quadratic, so a large step measures it exactly.
        let field = rand_field(&shape, 2.0, &mut rng);
        let g = diffusion_reg_vjp(&field);
        let r = finite_diff_check(
            |v| diffusion_reg(&DisplacementField::new(shape.to_vec(), v.to_vec())),
            &field.offsets,
            &g.offsets,
            0.25,
            6,
            &mut rng,
        );
        track(r.max_rel_err, "diffusion_reg");

        // End to end: objective derivative with respect to every network
        // weight on a two-level 16² network.
        let shape = [16usize, 16];
        let arch = ArchConfig {
            encoder_channels: vec![4, 8],
            decoder_channels: vec![8, 4, 4],
            ..ArchConfig::model_1(2)
        };
        let params = build_network(&arch, derive_seed(0xE2E, seed)).unwrap();
        let f = rand_volume(&shape, &mut rng);
        let m = rand_volume(&shape, &mut rng);
        let (pred, cache) = forward(&params, &f, &m).unwrap();
        let cfg = LossConfig {
            cc_window: 5,
            ..LossConfig::default()
        };
        let loss = total_loss(&f, &m, &pred, &cfg).unwrap();
        let grads = backward(&params, &cache, &loss.grad_field).unwrap();
        let r = finite_diff_check(
            |v| {
                let mut p = params.clone();
                p.set_from_flat(v);
                let (pred, _) = forward(&p, &f, &m).unwrap();
                total_loss(&f, &m, &pred, &cfg).unwrap().value
            },
            &params.flatten(),
            &flatten_kernels(&grads),
            1e-3,
            3,
            &mut rng,
        );
        track(r.max_rel_err, "loss-to-weights");
    }

    let secs = started.elapsed().as_secs_f64();
    verdict(
        "criterion 1 (gradient checks)",
        worst.0 < tol && secs < 300.0,
        &format!(
            "max relative error {:.2e} (worst: {}) over {seeds} seeds, tolerance {tol:.0e}, {secs:.0} s",
            worst.0, worst.1
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2 — warp identities.
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_warp_identities_hold() {
    let mut max_id_ulp: Real = 0.0;
    let mut max_unity_err: Real = 0.0;
    let mut max_lin_err: Real = 0.0;

    for seed in 0..20u64 {
        let mut rng = seeded(derive_seed(0x9A12, seed));
        let shape = [13usize, 11];
        let m = rand_volume(&shape, &mut rng);

        // Zero displacement must reproduce the input to the last bit (one
        // ulp allowed for the interpolation arithmetic).
        let zero = DisplacementField::zeros(&shape);
        let out = sample_linear(&m, &zero).unwrap();
        for (a, b) in out.data.iter().zip(&m.data) {
            let ulp = (a - b).abs() / b.abs().max(Real::MIN_POSITIVE) / Real::EPSILON;
            max_id_ulp = max_id_ulp.max(ulp);
        }

        // Interpolation weights sum to one: a constant image stays constant
        // under any in-range displacement.
        let ones = Volume::new(shape.to_vec(), vec![1.0; m.len()]);
        let field = rand_field(&shape, 3.0, &mut rng);
        let warped = sample_linear(&ones, &field).unwrap();
        for v in &warped.data {
            max_unity_err = max_unity_err.max((v - 1.0).abs());
        }

        // Linearity in the moving image.
        let n = rand_volume(&shape, &mut rng);
        let (a, b) = (1.7 as Real, -0.6 as Real);
        let combo = Volume::new(
            shape.to_vec(),
            m.data.iter().zip(&n.data).map(|(x, y)| a * x + b * y).collect(),
        );
        let direct = sample_linear(&combo, &field).unwrap();
        let wm = sample_linear(&m, &field).unwrap();
        let wn = sample_linear(&n, &field).unwrap();
        for ((d, x), y) in direct.data.iter().zip(&wm.data).zip(&wn.data) {
            max_lin_err = max_lin_err.max((d - (a * x + b * y)).abs());
        }
    }

    verdict(
        "criterion 2 (warp identities)",
        max_id_ulp <= 1.0 && max_unity_err == 0.0 && max_lin_err < 1e-6,
        &format!(
            "identity {max_id_ulp:.2} ulp, unity error {max_unity_err:.1e}, linearity error {max_lin_err:.1e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3 — correlation properties.
// ---------------------------------------------------------------------------

/// Brute-force one window's correlation score straight from the definition.
fn brute_window_cc(
    f: &Volume,
    w: &Volume,
    center: &[usize],
    win: usize,
    epsilon: Real,
) -> Real {
    let rank = f.shape.len();
    let half = (win / 2) as isize;
    // Gather in-range window coordinates.
    let mut coords: Vec<Vec<usize>> = vec![vec![]];
    for (&c0, &dim) in center.iter().zip(&f.shape) {
        let mut next = Vec::new();
        for c in &coords {
            for off in -half..=half {
                let p = c0 as isize + off;
                if p >= 0 && (p as usize) < dim {
                    let mut cc = c.clone();
                    cc.push(p as usize);
                    next.push(cc);
                }
            }
        }
        coords = next;
    }
    let strides: Vec<usize> = {
        let mut s = vec![1; rank];
        for d in (0..rank - 1).rev() {
            s[d] = s[d + 1] * f.shape[d + 1];
        }
        s
    };
    let idx = |c: &[usize]| -> usize { c.iter().zip(&strides).map(|(a, s)| a * s).sum() };
    let cnt = coords.len() as Real;
    let (mut mf, mut mw) = (0.0 as Real, 0.0 as Real);
    for c in &coords {
        mf += f.data[idx(c)];
        mw += w.data[idx(c)];
    }
    mf /= cnt;
    mw /= cnt;
    let (mut cross, mut fvar, mut wvar) = (0.0 as Real, 0.0 as Real, 0.0 as Real);
    for c in &coords {
        let df = f.data[idx(c)] - mf;
        let dw = w.data[idx(c)] - mw;
        cross += df * dw;
        fvar += df * df;
        wvar += dw * dw;
    }
    // Windows flat in either image score zero by definition.
    let scale: Real = 1e-12;
    if fvar <= scale * cnt || wvar <= scale * cnt {
        return 0.0;
    }
    cross * cross / (fvar * wvar + epsilon)
}

#[test]
fn criterion_3_correlation_properties_hold() {
    let cfg = LossConfig {
        cc_window: 5,
        ..LossConfig::default()
    };
    let mut max_pv: Real = Real::NEG_INFINITY;
    let mut min_pv: Real = Real::INFINITY;
    let mut max_affine_err: Real = 0.0;
    let mut max_oracle_err: Real = 0.0;

    for seed in 0..20u64 {
        let mut rng = seeded(derive_seed(0xCC05, seed));
        let shape = [10usize, 9];
        let f = rand_volume(&shape, &mut rng);
        let w = rand_volume(&shape, &mut rng);

        // Range of the per-voxel scores.
        let (total, per_voxel) = local_cc(&f, &w, &cfg).unwrap();
        for v in &per_voxel.data {
            max_pv = max_pv.max(*v);
            min_pv = min_pv.min(*v);
        }

        // Invariance under affine intensity changes of the second image.
        for a in [-2.0 as Real, 0.5, 3.0] {
            let b: Real = rng.random_range(-1.0..1.0);
            let wa = Volume::new(shape.to_vec(), w.data.iter().map(|x| a * x + b).collect());
            let (ta, _) = local_cc(&f, &wa, &cfg).unwrap();
            max_affine_err = max_affine_err.max((ta - total).abs() / total.abs().max(1.0));
        }

        // Every window against the brute-force definition.
        for row in 0..shape[0] {
            for col in 0..shape[1] {
                let ours = per_voxel.data[row * shape[1] + col];
                let brute = brute_window_cc(&f, &w, &[row, col], 5, cfg.epsilon);
                max_oracle_err = max_oracle_err.max((ours - brute).abs());
            }
        }
    }

    verdict(
        "criterion 3 (correlation properties)",
        min_pv >= 0.0 && max_pv <= 1.0 + 1e-4 && max_affine_err < 1e-6 && max_oracle_err < 1e-12,
        &format!(
            "per-voxel range [{min_pv:.2e}, {max_pv:.6}], affine error {max_affine_err:.1e}, oracle error {max_oracle_err:.1e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criteria 4 and 5 share one trained 2D pipeline.
// ---------------------------------------------------------------------------

struct TrainedStack {
    _dir: TempDir,
    test_manifest: PathBuf,
    identity_dice: Real,
    network_dice: Real,
    best_checkpoint: PathBuf,
    train_secs: f64,
}

/// Dataset of 60 pairs at 64², peak displacement 5, blur 4; split 40/10/10;
/// compact preset trained ≤ 5,000 iterations at λ = 1; best checkpoint by
/// validation overlap.
static STACK_2D: LazyLock<TrainedStack> = LazyLock::new(|| {
    let dir = TempDir::new().expect("tempdir");
    let spec = PhantomSpec {
        shape: vec![64, 64],
        n_structures: 4,
        deform_amplitude: 5.0,
        deform_smoothness: 4.0,
        seed: 42,
    };
    let manifest = write_dataset(&spec, 60, dir.path()).expect("dataset");
    let splits = manifest.split(&[40, 10, 10]).expect("split");
    let names = ["train", "val", "test"];
    for (name, part) in names.iter().zip(&splits) {
        part.save(&dir.path().join(format!("manifest_{name}.json"))).expect("save");
    }
    let test_manifest = dir.path().join("manifest_test.json");

    let identity_dice = evaluate_registration(&FieldSource::Identity, &test_manifest, 100)
        .expect("identity eval")
        .mean_dice;

    let started = Instant::now();
    let cfg = TrainConfig {
        learning_rate: 5e-4,
        iterations: 5000,
        seed: 0,
        arch: ArchConfig::model_1(2),
        checkpoint_interval: 500,
        dataset: dir.path().join("manifest_train.json"),
        validation: Some(dir.path().join("manifest_val.json")),
        out_dir: dir.path().join("run"),
        ..TrainConfig::default()
    };
    let outcome = train(&cfg).expect("training");
    let (best_checkpoint, _) = select_model(
        &outcome.checkpoints,
        &dir.path().join("manifest_val.json"),
    )
    .expect("model selection");
    let train_secs = started.elapsed().as_secs_f64();

    let params = load_params(&best_checkpoint).expect("checkpoint");
    let network_dice = evaluate_registration(&FieldSource::Network(&params), &test_manifest, 100)
        .expect("network eval")
        .mean_dice;

    TrainedStack {
        _dir: dir,
        test_manifest,
        identity_dice,
        network_dice,
        best_checkpoint,
        train_secs,
    }
});

#[test]
fn criterion_4a_trained_network_beats_identity_2d() {
    let s = &*STACK_2D;
    let gain = s.network_dice - s.identity_dice;
    verdict(
        "criterion 4a (2D registration quality)",
        s.identity_dice <= 0.80 && gain >= 0.15 && s.train_secs < 1800.0,
        &format!(
            "identity Dice {:.4}, network Dice {:.4}, gain {:.4} (need ≥ 0.15), training {:.0} s",
            s.identity_dice, s.network_dice, gain, s.train_secs
        ),
    );
}

#[test]
fn criterion_4b_trained_network_beats_identity_3d() {
    let dir = TempDir::new().expect("tempdir");
    let spec = PhantomSpec {
        shape: vec![32, 32, 32],
        n_structures: 4,
        deform_amplitude: 5.0,
        deform_smoothness: 4.0,
        seed: 42,
    };
    let manifest = write_dataset(&spec, 60, dir.path()).expect("dataset");
    let splits = manifest.split(&[40, 10, 10]).expect("split");
    for (name, part) in ["train", "val", "test"].iter().zip(&splits) {
        part.save(&dir.path().join(format!("manifest_{name}.json"))).expect("save");
    }
    let test_manifest = dir.path().join("manifest_test.json");
    let identity_dice = evaluate_registration(&FieldSource::Identity, &test_manifest, 100)
        .expect("identity eval")
        .mean_dice;

    let started = Instant::now();
    let cfg = TrainConfig {
        learning_rate: 5e-4,
        iterations: 2000,
        seed: 0,
        arch: ArchConfig::model_1(3),
        checkpoint_interval: 0,
        dataset: dir.path().join("manifest_train.json"),
        validation: Some(dir.path().join("manifest_val.json")),
        out_dir: dir.path().join("run"),
        ..TrainConfig::default()
    };
    let outcome = train(&cfg).expect("training");
    let train_secs = started.elapsed().as_secs_f64();

    let params = load_params(outcome.checkpoints.last().expect("final checkpoint"))
        .expect("checkpoint");
    let network_dice = evaluate_registration(&FieldSource::Network(&params), &test_manifest, 100)
        .expect("network eval")
        .mean_dice;
    let gain = network_dice - identity_dice;
    verdict(
        "criterion 4b (3D registration quality)",
        gain >= 0.10 && train_secs < 3600.0,
        &format!(
            "identity Dice {identity_dice:.4}, network Dice {network_dice:.4}, gain {gain:.4} (need ≥ 0.10), training {train_secs:.0} s"
        ),
    );
}

#[test]
fn criterion_5_network_outpaces_baseline() {
    let s = &*STACK_2D;
    let params = load_params(&s.best_checkpoint).expect("checkpoint");
    let rows = benchmark_runtime(
        &params,
        &s.test_manifest,
        5,
        &VarOptConfig::default(),
    )
    .expect("benchmark");
    let net = rows.iter().find(|r| r.method == "network").expect("network row");
    let base = rows.iter().find(|r| r.method == "baseline").expect("baseline row");
    let ratio = base.median_ms / net.median_ms;
    verdict(
        "criterion 5 (amortization speedup)",
        ratio >= 10.0,
        &format!(
            "network median {:.1} ms, baseline-to-5%-energy median {:.1} ms, ratio {ratio:.1}x (need ≥ 10x)",
            net.median_ms, base.median_ms
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 6 — smoothness-weight sweep.
// ---------------------------------------------------------------------------

/// Spearman rank correlation with average ranks for ties.
fn rank_correlation(xs: &[Real], ys: &[Real]) -> Real {
    fn ranks(v: &[Real]) -> Vec<Real> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut out = vec![0.0 as Real; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as Real / 2.0 + 1.0;
            for k in i..=j {
                out[idx[k]] = avg;
            }
            i = j + 1;
        }
        out
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as Real;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mean) * (b - mean);
        dx += (a - mean) * (a - mean);
        dy += (b - mean) * (b - mean);
    }
    num / (dx.sqrt() * dy.sqrt()).max(1e-12)
}

#[test]
fn criterion_6_lambda_sweep_tradeoff() {
    let dir = TempDir::new().expect("tempdir");
    let spec = PhantomSpec {
        shape: vec![32, 32],
        n_structures: 3,
        deform_amplitude: 4.0,
        deform_smoothness: 3.0,
        seed: 17,
    };
    let manifest = write_dataset(&spec, 26, dir.path()).expect("dataset");
    let splits = manifest.split(&[18, 8]).expect("split");
    splits[0].save(&dir.path().join("manifest_train.json")).expect("save");
    splits[1].save(&dir.path().join("manifest_val.json")).expect("save");

    let base = TrainConfig {
        learning_rate: 5e-4,
        iterations: 800,
        seed: 0,
        arch: ArchConfig::model_1(2),
        checkpoint_interval: 0,
        dataset: dir.path().join("manifest_train.json"),
        validation: Some(dir.path().join("manifest_val.json")),
        out_dir: dir.path().join("sweep"),
        ..TrainConfig::default()
    };
    let grid = [0.0 as Real, 0.5, 1.0, 2.0, 4.0];
    let rows = sweep_lambda(&base, &grid).expect("sweep");
    let identity = identity_validation_dice(&dir.path().join("manifest_val.json"))
        .expect("identity dice");

    let zero_dice = rows[0].mean_dice;
    let lambdas: Vec<Real> = rows.iter().map(|r| r.lambda).collect();
    let smooth: Vec<Real> = rows.iter().map(|r| r.mean_smooth_energy).collect();
    let rho = rank_correlation(&lambdas, &smooth);
    let summary: Vec<String> = rows
        .iter()
        .map(|r| format!("λ={} Dice {:.3} rough {:.1}", r.lambda, r.mean_dice, r.mean_smooth_energy))
        .collect();
    verdict(
        "criterion 6 (smoothness sweep)",
        zero_dice > identity && rho <= 0.0,
        &format!(
            "identity {identity:.3}; {}; rank corr(λ, roughness) {rho:.2} (need ≤ 0)",
            summary.join("; ")
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 7 — per-pair optimizer sanity.
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_baseline_energy_monotone_and_dice_improves() {
    let spec = PhantomSpec {
        shape: vec![64, 64],
        n_structures: 3,
        deform_amplitude: 4.0,
        deform_smoothness: 4.0,
        seed: 8,
    };
    let pair = generate_pair(&spec).expect("pair");
    let cfg = VarOptConfig::default();
    let (field, log) = optimize_pair(&pair.fixed, &pair.moving, &cfg).expect("optimize");

    // Within every pyramid level the accepted energies never increase.
    let mut monotone = true;
    for rows in log.chunk_by(|a, b| a.level == b.level) {
        for pair in rows.windows(2) {
            if pair[1].energy > pair[0].energy {
                monotone = false;
            }
        }
    }

    let warped = sample_nearest(&pair.seg_moving, &field).expect("warp");
    let labels = pair.seg_fixed.label_set();
    let mut before = 0.0;
    let mut after = 0.0;
    for &label in &labels {
        before += dice(&pair.seg_fixed, &pair.seg_moving, label).expect("dice");
        after += dice(&pair.seg_fixed, &warped, label).expect("dice");
    }
    before /= labels.len() as Real;
    after /= labels.len() as Real;

    verdict(
        "criterion 7 (per-pair optimizer)",
        monotone && after > before,
        &format!(
            "energy log monotone within levels: {monotone}; Dice {before:.3} -> {after:.3} over {} structures",
            labels.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 8 — bit-reproducibility.
// ---------------------------------------------------------------------------

fn read_dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .expect("read dir")
        .map(|e| {
            let e = e.expect("entry");
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).expect("read file"),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn criterion_8_runs_are_reproducible() {
    let dir = TempDir::new().expect("tempdir");

    // Dataset generation twice through the command-line entry point.
    let mut synth_identical = true;
    let (a, b) = (dir.path().join("synth_a"), dir.path().join("synth_b"));
    for out in [&a, &b] {
        let code = morphflow::cli::run([
            "morphflow",
            "synth",
            "--shape",
            "24,24",
            "--pairs",
            "4",
            "--structures",
            "2",
            "--seed",
            "9",
            "--out",
            out.to_str().expect("utf-8 path"),
        ]);
        assert_eq!(code, 0, "synth run failed");
    }
    let fa = read_dir_files(&a);
    let fb = read_dir_files(&b);
    synth_identical &= fa == fb;
    let n_files = fa.len();

    // Training twice through the command-line entry point; checkpoints must
    // match to the byte. (log.csv carries wall-clock times, so it is not
    // compared.)
    let (ta, tb) = (dir.path().join("train_a"), dir.path().join("train_b"));
    for out in [&ta, &tb] {
        let code = morphflow::cli::run([
            "morphflow",
            "train",
            "--dataset",
            a.join("manifest.json").to_str().expect("utf-8 path"),
            "--out",
            out.to_str().expect("utf-8 path"),
            "--iterations",
            "40",
            "--model",
            "1",
            "--seed",
            "3",
        ]);
        assert_eq!(code, 0, "train run failed");
    }
    let ca = std::fs::read(ta.join("ckpt_final.ckpt")).expect("checkpoint");
    let cb = std::fs::read(tb.join("ckpt_final.ckpt")).expect("checkpoint");
    let train_identical = ca == cb;

    verdict(
        "criterion 8 (reproducibility)",
        synth_identical && train_identical,
        &format!(
            "dataset files identical: {synth_identical} ({n_files} files); checkpoints identical: {train_identical} ({} bytes)",
            ca.len()
        ),
    );
}
