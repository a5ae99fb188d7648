//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use lowrank::cli::{self, RunConfig};
use lowrank::data::{load_idx, synthetic_stream, Dataset, StreamDesign, SyntheticStream, SyntheticStreamSpec};
use lowrank::linalg::svd_oracle;
use lowrank::nn::{gradient_check, Network, GRADCHECK_RELATIVE, PRESETS};
use lowrank::sbpca::{init_state, sbpca_update, tracking_error, LowRankState, SbpcaConfig, Variant};
use lowrank::train::{
    cost_model, cost_model_for_blocks, metrics_csv, parse_metrics_csv, train, Hyperparams, Method, TrainOutcome,
};
use lowrank::Matrix;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/mnist")
}

fn load_mnist() -> (Dataset, Dataset) {
    let d = mnist_dir();
    let train_set = load_idx(d.join("train-images-idx3-ubyte.gz"), d.join("train-labels-idx1-ubyte.gz")).unwrap();
    let test_set = load_idx(d.join("t10k-images-idx3-ubyte.gz"), d.join("t10k-labels-idx1-ubyte.gz")).unwrap();
    (train_set, test_set)
}

// 1 -------------------------------------------------------------------------

fn oracle_convergence() -> Check {
    let start = Instant::now();
    let stream = synthetic_stream(&SyntheticStreamSpec {
        m: 20,
        n: 15,
        singular_values: vec![3.0, 2.0, 1.0],
        samples: 256,
        noise: 0.0,
        seed: 7,
        design: StreamDesign::Hadamard,
    })
    .map_err(|e| e.to_string())?;
    let cfg = SbpcaConfig::new(3, 8, Variant::Sbpca, 21);
    let mut state = init_state(20, 15, &cfg).map_err(|e| e.to_string())?;
    let sizes = vec![8; 8];
    let mut sweeps = 0;
    while sweeps < 200 {
        let before = state.sigma.clone();
        for start in (0..stream.len()).step_by(64) {
            let blocks = stream.blocks(start, &sizes).map_err(|e| e.to_string())?;
            state = sbpca_update(&state, &blocks, &cfg).map_err(|e| e.to_string())?;
        }
        sweeps += 1;
        let change = state
            .sigma
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b).abs() / a.abs().max(1e-300))
            .fold(0.0, f64::max);
        if change < 1e-10 {
            break;
        }
    }
    let target = stream.target();
    let err = tracking_error(&target, &state).map_err(|e| e.to_string())? / target.frobenius_norm();
    let sigma: Vec<f64> = state.ranked_sigma().iter().map(|s| s.0).collect();
    let sigma_ok = sigma.iter().zip([3.0, 2.0, 1.0]).all(|(s, w)| (s - w).abs() <= 0.05 * w);
    let secs = start.elapsed().as_secs_f64();
    ensure(
        err < 1e-2 && sigma_ok && secs < 10.0,
        format!("relative error {err:.2e}, sigma {sigma:.4?}, {sweeps} sweeps, {secs:.2}s"),
    )
}

// 2 -------------------------------------------------------------------------

fn eckart_young() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let a = Matrix::gaussian(12, 9, &mut rng);
        let svd = svd_oracle(&a).map_err(|e| e.to_string())?;
        for k in 1..=3 {
            let take = |p: &Matrix| Matrix::from_fn(p.rows(), k, |i, j| p[(i, j)]);
            let state = LowRankState::from_parts(take(&svd.v), take(&svd.u), svd.s[..k].to_vec())
                .map_err(|e| e.to_string())?;
            let got = tracking_error(&a, &state).map_err(|e| e.to_string())?;
            let want = svd.s[k..].iter().map(|s| s * s).sum::<f64>().sqrt();
            worst = worst.max((got - want).abs());
        }
    }
    ensure(worst < 1e-8, format!("max |error - tail energy| {worst:.2e} over 60 cases"))
}

// 4 -------------------------------------------------------------------------

fn gradient_correctness() -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    for name in PRESETS {
        for seed in 0..3u64 {
            let net = Network::preset(name, true, seed).map_err(|e| e.to_string())?;
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = Matrix::from_fn(4, net.input.len(), |_, _| rng.random::<f64>());
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..10)).collect();
            let r = gradient_check(&net, &x, &labels, seed, 16).map_err(|e| e.to_string())?;
            ok &= r.passed() && r.max_relative_error <= GRADCHECK_RELATIVE;
            lines.push(format!(
                "{name}/{seed}: {} entries, max abs {:.1e}, max rel {:.1e}",
                r.checked, r.max_absolute_error, r.max_relative_error
            ));
        }
    }
    ensure(ok, lines.join("; "))
}

// MNIST runs shared by 3, 5, 6, 7, 8 ----------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
enum Arm {
    Mbgd,
    Sbpca10,
    Sbpca1,
    Sbpcav10,
}

fn hyperparams(arm: Arm, seed: u64) -> Hyperparams {
    let base = Hyperparams {
        batch_size: 128,
        block_size: Some(32),
        rank: 10,
        alpha_fc: 0.01,
        epochs: 30,
        method: Method::Sbpca,
        seed,
        tracking_every: 5,
        check_orthonormality: true,
        wall_clock: false,
        ..Hyperparams::default()
    };
    match arm {
        Arm::Mbgd => Hyperparams {
            method: Method::Mbgd,
            ..base
        },
        Arm::Sbpca10 => base,
        Arm::Sbpca1 => Hyperparams { rank: 1, ..base },
        Arm::Sbpcav10 => Hyperparams {
            method: Method::Sbpcav,
            batch_size: 127,
            ..base
        },
    }
}

struct Runs {
    outcomes: BTreeMap<(Arm, u64), TrainOutcome>,
    train_len: usize,
    seconds: f64,
}

impl Runs {
    fn final_accuracy(&self, arm: Arm) -> Vec<f64> {
        (0..3)
            .map(|s| self.outcomes[&(arm, s)].metrics.last().unwrap().test_accuracy)
            .collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mnist_runs(train_set: &Dataset, test_set: &Dataset) -> Result<Runs, String> {
    let start = Instant::now();
    let jobs: Vec<(Arm, u64)> = [Arm::Mbgd, Arm::Sbpca10, Arm::Sbpca1, Arm::Sbpcav10]
        .into_iter()
        .flat_map(|a| (0..3).map(move |s| (a, s)))
        .collect();
    let outcomes = jobs
        .par_iter()
        .map(|&(arm, seed)| {
            let net = Network::preset("mlp-mnist", false, seed).map_err(|e| e.to_string())?;
            let out = train(&net, train_set, test_set, &hyperparams(arm, seed)).map_err(|e| format!("{arm:?}/{seed}: {e}"))?;
            Ok(((arm, seed), out))
        })
        .collect::<Result<BTreeMap<_, _>, String>>()?;
    Ok(Runs {
        outcomes,
        train_len: train_set.len(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

// 3 -------------------------------------------------------------------------

fn orthonormality(runs: &Runs) -> Check {
    let mut worst: f64 = 0.0;
    let (mut violations, mut blocks) = (0, 0);
    for ((arm, _), out) in &runs.outcomes {
        if *arm == Arm::Mbgd {
            continue;
        }
        worst = worst.max(out.trace.max_orthonormality_error);
        violations += out.trace.orthonormality_violations;
        blocks += out.trace.blocks;
    }
    ensure(
        worst < 1e-8 && violations == 0 && blocks > 0,
        format!("{blocks} block updates checked, max deviation {worst:.2e}, {violations} violations"),
    )
}

// 5 -------------------------------------------------------------------------

fn accuracy_parity(runs: &Runs) -> Check {
    let mbgd = mean(&runs.final_accuracy(Arm::Mbgd));
    let k10 = mean(&runs.final_accuracy(Arm::Sbpca10));
    let k1 = mean(&runs.final_accuracy(Arm::Sbpca1));
    ensure(
        (k10 - mbgd).abs() <= 0.02 && k10 - k1 >= 0.01 && runs.seconds < 900.0,
        format!(
            "mean final accuracy MBGD {mbgd:.4}, SBPCA k=10 {k10:.4}, k=1 {k1:.4}; 12 runs in {:.0}s",
            runs.seconds
        ),
    )
}

// 6 -------------------------------------------------------------------------

fn sbpcav_parity(runs: &Runs) -> Check {
    let v = mean(&runs.final_accuracy(Arm::Sbpcav10));
    let k10 = mean(&runs.final_accuracy(Arm::Sbpca10));
    ensure(
        (v - k10).abs() <= 0.03,
        format!("SBPCAV(k=10, B=127) {v:.4} vs SBPCA(k=10) {k10:.4}"),
    )
}

// 7 -------------------------------------------------------------------------

fn cost_model_exactness(runs: &Runs) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..50 {
        let m: u64 = rng.random_range(1..5000);
        let n: u64 = rng.random_range(1..5000);
        let b: u64 = rng.random_range(1..64);
        let bb = b * rng.random_range(1..32u64);
        let k: u64 = rng.random_range(1..=m.min(n).min(64));
        let c = cost_model(m as usize, n as usize, bb as usize, b as usize, k as usize).map_err(|e| e.to_string())?;
        let big = m.max(n);
        let ints = [
            (c.mbgd_flops, 2 * bb * m * n),
            (c.sbpca_stream_flops, 4 * bb * k * (m + n)),
            (c.state_floats, k * (m + n + 1)),
            (c.qr_workspace_floats, k * k + big * (k + 1)),
            (c.sbpca_recompose_flops, 2 * k * m * n),
            (c.mbgd_aux_floats, bb * (m + n)),
        ];
        if let Some((got, want)) = ints.iter().find(|(g, w)| g != w) {
            return Err(format!("case {case} ({m}x{n}, B={bb}, b={b}, k={k}): {got} != {want}"));
        }
        let streamed = (3 * k + 1) as f64 / bb as f64;
        let expanded = (2 * k * (m + n) + big * (k + 1) + k * k) as f64 / (m * n) as f64;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs();
        if !close(c.ratios.memory_streamed, streamed) || !close(c.ratios.memory_expanded, expanded) {
            return Err(format!("case {case}: ratio mismatch"));
        }
    }

    let mut lines = vec!["50 random tuples match".to_string()];
    let mut worst: f64 = 0.0;
    for (arm, b_rows, blocks) in [(Arm::Mbgd, 128, 1), (Arm::Sbpca10, 128, 4), (Arm::Sbpcav10, 127, 7)] {
        let out = &runs.outcomes[&(arm, 0)];
        let batches = (runs.train_len / b_rows * 30) as u64;
        let (mut stream, mut qr, mut recompose, mut grad) = (0, 0, 0, 0);
        for (m, n) in out.net.dense_shapes() {
            grad += 2 * (b_rows * m * n) as u64 * batches;
            if arm != Arm::Mbgd {
                let c = cost_model_for_blocks(m, n, b_rows, blocks, 10).map_err(|e| e.to_string())?;
                stream += c.sbpca_stream_flops * batches;
                qr += c.sbpca_qr_flops * batches;
                recompose += c.sbpca_recompose_flops * batches;
            }
        }
        let rel = |got: u64, want: u64| (got as f64 - want as f64).abs() / want as f64;
        let pairs: Vec<(&str, f64)> = if arm == Arm::Mbgd {
            vec![("gradient", rel(out.ledger.gradient, grad))]
        } else {
            vec![
                ("stream", rel(out.ledger.stream, stream)),
                ("qr", rel(out.ledger.qr, qr)),
                ("recompose", rel(out.ledger.recompose, recompose)),
            ]
        };
        for (name, r) in &pairs {
            worst = worst.max(*r);
            lines.push(format!("{arm:?} {name} {:.2}%", 100.0 * r));
        }
    }
    ensure(worst < 0.05, lines.join(", "))
}

// 8 -------------------------------------------------------------------------

/// Mean over instrumented epochs in the second half of the run of the
/// combined (all dense layers) tracking error.
fn late_tracking_error(out: &TrainOutcome) -> f64 {
    let epochs = out.metrics.len();
    let late: Vec<f64> = out
        .metrics
        .iter()
        .filter(|r| r.epoch > epochs / 2)
        .filter_map(|r| {
            let parts: Option<Vec<f64>> = r.tracking_error.iter().copied().collect();
            parts.map(|p| p.iter().map(|e| e * e).sum::<f64>().sqrt())
        })
        .collect();
    mean(&late)
}

fn tracking_trend(runs: &Runs) -> Check {
    let mut ok = true;
    let mut lines = Vec::new();
    for seed in 0..3 {
        let k10 = late_tracking_error(&runs.outcomes[&(Arm::Sbpca10, seed)]);
        let k1 = late_tracking_error(&runs.outcomes[&(Arm::Sbpca1, seed)]);
        ok &= k10 < k1;
        let batch = late_tracking_error(&runs.outcomes[&(Arm::Mbgd, seed)]);
        lines.push(format!("seed {seed}: k=10 {k10:.4e} vs k=1 {k1:.4e} (exact batch gradient {batch:.4e})"));
    }
    ensure(ok, lines.join("; "))
}

// 9 -------------------------------------------------------------------------

fn determinism_and_serialization(runs: &Runs) -> Check {
    let tmp = std::env::temp_dir().join(format!("lowrank-acceptance-{}", std::process::id()));
    let d = mnist_dir();
    let text = format!(
        "dataset = mnist\ntrain_images = {}\ntrain_labels = {}\ntest_images = {}\ntest_labels = {}\n\
         train_limit = 2000\ntest_limit = 500\narchitecture = mlp-mnist\nepochs = 3\nwall_clock = false\n\
         dropout = true\n[sweep]\nvariant = MBGD, SBPCA, SBPCAV\nrank = 10\n",
        d.join("train-images-idx3-ubyte.gz").display(),
        d.join("train-labels-idx1-ubyte.gz").display(),
        d.join("t10k-images-idx3-ubyte.gz").display(),
        d.join("t10k-labels-idx1-ubyte.gz").display(),
    );
    let run_into = |name: &str| -> Result<PathBuf, String> {
        let dir = tmp.join(name);
        let cfg = RunConfig::parse(&format!("output_dir = {}\n{text}", dir.display()), &tmp.join("c.conf"))
            .map_err(|e| e.to_string())?;
        let out = cli::run(&cfg).map_err(|e| e.to_string())?;
        if !out.rows.iter().all(|r| r.ok()) {
            return Err("a rerun failed".into());
        }
        Ok(out.dir)
    };
    let (a, b) = (run_into("a")?, run_into("b")?);
    let mut files = vec![PathBuf::from("summary.csv")];
    for entry in std::fs::read_dir(&a).map_err(|e| e.to_string())? {
        let p = entry.map_err(|e| e.to_string())?.path();
        if p.is_dir() {
            let run = p.file_name().unwrap().to_owned();
            for f in ["metrics.csv", "model.bin", "cost_report.txt"] {
                files.push(Path::new(&run).join(f));
            }
        }
    }
    let mut identical = 0;
    for f in &files {
        let x = std::fs::read(a.join(f)).map_err(|e| format!("{}: {e}", f.display()))?;
        let y = std::fs::read(b.join(f)).map_err(|e| format!("{}: {e}", f.display()))?;
        if x != y {
            return Err(format!("{} differs between reruns", f.display()));
        }
        identical += 1;
    }
    let _ = std::fs::remove_dir_all(&tmp);

    let mut formats = 0;
    for out in runs.outcomes.values() {
        let bytes = out.net.to_bytes();
        let back = Network::from_bytes(&bytes).map_err(|e| e.to_string())?;
        if back.to_bytes() != bytes || back != out.net {
            return Err("network checkpoint does not round-trip".into());
        }
        for s in &out.states {
            let bytes = s.to_bytes();
            let back = LowRankState::from_bytes(&bytes).map_err(|e| e.to_string())?;
            let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            if back.to_bytes() != bytes || bits(&back.x_hat) != bits(&s.x_hat) || bits(&back.delta_hat) != bits(&s.delta_hat) {
                return Err("state checkpoint does not round-trip".into());
            }
        }
        let csv = metrics_csv(&out.metrics, out.net.dense_shapes().len());
        if parse_metrics_csv(&csv).as_deref() != Some(&out.metrics[..]) {
            return Err("metrics csv does not round-trip".into());
        }
        formats += 3;
    }
    let stream: SyntheticStream = synthetic_stream(&SyntheticStreamSpec {
        m: 9,
        n: 7,
        singular_values: vec![2.0, 0.5],
        samples: 40,
        noise: 0.1,
        seed: 5,
        design: StreamDesign::Hadamard,
    })
    .map_err(|e| e.to_string())?;
    let bytes = stream.to_bytes();
    if SyntheticStream::from_bytes(&bytes).map_err(|e| e.to_string())?.to_bytes() != bytes {
        return Err("stream checkpoint does not round-trip".into());
    }
    formats += 1;
    Ok(format!(
        "{identical} artifacts byte-identical across CLI reruns; {formats} checkpoint/CSV round trips bit-exact"
    ))
}

fn main() {
    let total = Instant::now();
    let mut results: Vec<(usize, &str, Check, f64)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &dyn Fn() -> Check| {
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match &r {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} [{n}] {name}: {detail} ({secs:.1}s)");
        results.push((n, name, r, secs));
    };

    record(1, "oracle convergence", &oracle_convergence);
    record(2, "Eckart-Young consistency", &eckart_young);
    record(4, "gradient correctness", &gradient_correctness);

    let (train_set, test_set) = load_mnist();
    println!(
        "info: MNIST subset {} train / {} test, mean train pixel {:.4}",
        train_set.len(),
        test_set.len(),
        train_set.mean_pixel()
    );
    match mnist_runs(&train_set, &test_set) {
        Ok(runs) => {
            println!("info: 12 MNIST runs finished in {:.0}s", runs.seconds);
            record(3, "orthonormality invariant", &|| orthonormality(&runs));
            record(5, "desk-scale accuracy parity", &|| accuracy_parity(&runs));
            record(6, "SBPCAV parity", &|| sbpcav_parity(&runs));
            record(7, "cost-model exactness", &|| cost_model_exactness(&runs));
            record(8, "tracking-error rank trend", &|| tracking_trend(&runs));
            record(9, "determinism and serialization", &|| determinism_and_serialization(&runs));
        }
        Err(e) => {
            for (n, name) in [
                (3, "orthonormality invariant"),
                (5, "desk-scale accuracy parity"),
                (6, "SBPCAV parity"),
                (7, "cost-model exactness"),
                (8, "tracking-error rank trend"),
                (9, "determinism and serialization"),
            ] {
                record(n, name, &|| Err(format!("MNIST runs failed: {e}")));
            }
        }
    }

    results.sort_by_key(|r| r.0);
    let passed = results.iter().filter(|r| r.2.is_ok()).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0}s",
        results.len(),
        total.elapsed().as_secs_f64()
    );
    if passed != results.len() {
        std::process::exit(1);
    }
}
