//! End-to-end acceptance run: one PASS/FAIL line per criterion, then a single
//! assertion over all of them. Trains two desk models, so it takes minutes.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use menet::audit::{gradient_audit, TOLERANCE};
use menet::autodiff::Tape;
use menet::config::DistortionConfig;
use menet::data::{self, generate_synthetic, to_batch, DatasetManifest, Sample, GENERATOR_VERSION};
use menet::experiment::{degradation_table, evaluate_samples, metric_separation};
use menet::losses::{metric_loss_centroid, metric_loss_pairwise, SampleSet};
use menet::metrics::{adaptive_threshold, evaluate_map, f_beta, mae, pr_curve, quantize_8bit};
use menet::model::{MEnetParams, ModelConfig};
use menet::nn::BnMode;
use menet::rng::random_normal;
use menet::robustness::{
    input_gradient, lipschitz_bound, mc_directional_norm, MenetProbe, MlpProbe, Norm, ProbeHead,
};
use menet::saliency::MapKind;
use menet::trainer::{load_checkpoint, window_mean, Checkpoint, TrainConfig, Trainer};
use menet::{Rng, Tensor};

const TRAIN_SEED: u64 = 7;
const TEST_SEED: u64 = 8;
const VAL_SEED: u64 = 9;

struct Outcome {
    label: String,
    passed: bool,
    detail: String,
}

#[derive(Default)]
struct Report(Vec<Outcome>);

impl Report {
    fn record(&mut self, label: impl Into<String>, passed: bool, detail: String) {
        let label = label.into();
        println!(
            "{label}: {} ({detail})",
            if passed { "PASS" } else { "FAIL" }
        );
        self.0.push(Outcome {
            label,
            passed,
            detail,
        });
    }
}

struct Trained {
    params: MEnetParams<f32>,
    history: Vec<menet::trainer::LossRecord>,
    best_iteration: u64,
    seconds: f64,
}

fn train(name: &str, config: TrainConfig, train: &[Sample], val: &[Sample], dir: &Path) -> Trained {
    let out = dir.join(name);
    let mut t = Trainer::<f32>::new(&ModelConfig::default(), config).unwrap();
    let start = Instant::now();
    let summary = t.run(train, Some(val), Some(&out)).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let best = load_checkpoint::<f32>(&out.join("best.ment")).unwrap();
    println!(
        "trained {name}: {} iterations in {seconds:.0}s, best validation F {:.3} at {}",
        t.iteration(),
        summary.best.unwrap().report.f_beta,
        best.iteration
    );
    Trained {
        params: best.params,
        history: summary.history,
        best_iteration: best.iteration,
        seconds,
    }
}

fn audit(report: &mut Report) {
    let start = Instant::now();
    let entries = gradient_audit(0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = entries
        .iter()
        .filter(|e| !(e.passed && e.max_rel_error < TOLERANCE))
        .map(|e| e.name.as_str())
        .collect();
    report.record(
        "criterion 1 gradient audit",
        failed.is_empty() && secs < 120.0,
        format!(
            "{} checks, worst {worst:.2e}, {secs:.1}s, failing {failed:?}",
            entries.len()
        ),
    );
}

fn column(e: &Tensor<f64>, i: usize) -> Vec<f64> {
    let (_, c, _, p) = e.dims4().unwrap();
    (0..c).map(|ch| e.data()[ch * p + i]).collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn brute_pairwise(e: &Tensor<f64>, labels: &[u8]) -> f64 {
    let p = labels.len();
    let cols: Vec<Vec<f64>> = (0..p).map(|i| column(e, i)).collect();
    let mut total = 0.0;
    for i in 0..p {
        let (mut same, mut ns, mut other, mut no) = (0.0, 0.0, 0.0, 0.0);
        for k in 0..p {
            let d = dist2(&cols[i], &cols[k]);
            if labels[k] == labels[i] {
                same += d;
                ns += 1.0;
            } else {
                other += d;
                no += 1.0;
            }
        }
        total += same / ns - other / no;
    }
    total / p as f64
}

fn class_variance(e: &Tensor<f64>, labels: &[u8], cls: u8) -> f64 {
    let cols: Vec<Vec<f64>> = (0..labels.len())
        .filter(|&i| labels[i] == cls)
        .map(|i| column(e, i))
        .collect();
    let n = cols.len() as f64;
    let mu: Vec<f64> = (0..cols[0].len())
        .map(|ch| cols.iter().map(|v| v[ch]).sum::<f64>() / n)
        .collect();
    cols.iter().map(|v| dist2(v, &mu)).sum::<f64>() / n
}

fn loss_equivalence(report: &mut Report) {
    let mut rng = Rng::new(101, 0);
    let mut instance = |p: usize, pos: usize| {
        let e = Tensor::from_vec(
            &[1, 16, 1, p],
            (0..16 * p).map(|_| 2.0 * rng.normal()).collect(),
        )
        .unwrap();
        let mut labels: Vec<u8> = (0..p).map(|i| (i < pos) as u8).collect();
        for i in (1..p).rev() {
            labels.swap(i, rng.below(i + 1));
        }
        (e, labels)
    };
    let library = |e: &Tensor<f64>, labels: &[u8]| {
        let labels = vec![labels.to_vec()];
        let sets = vec![SampleSet::all(&labels[0])];
        let mut t = Tape::new();
        let x = t.constant(e.clone());
        let pw = metric_loss_pairwise(&mut t, x, &labels, &sets).unwrap();
        let ce = metric_loss_centroid(&mut t, x, &labels, &sets).unwrap();
        (t.value(pw).item(), t.value(ce).item())
    };
    let mut worst_balanced = 0.0f64;
    let mut worst_gap = 0.0f64;
    let mut ok = true;
    for k in 0..100 {
        let half = 1 + k % 32;
        let (e, labels) = instance(2 * half, half);
        let (pw, cen) = library(&e, &labels);
        let rel = (pw - cen).abs() / (1.0 + cen.abs());
        worst_balanced = worst_balanced.max(rel);
        ok &= rel <= 1e-6;

        let p = 3 + k % 62;
        let pos = 1 + (7 * k) % (p - 1);
        let (e, labels) = instance(p, pos);
        let (_, cen) = library(&e, &labels);
        let term = (pos as f64 - (p - pos) as f64)
            * (class_variance(&e, &labels, 0) - class_variance(&e, &labels, 1))
            / p as f64;
        let gap = ((cen - brute_pairwise(&e, &labels)) - term).abs();
        worst_gap = worst_gap.max(gap);
        ok &= gap <= 1e-6;
    }
    report.record(
        "criterion 2 loss equivalence",
        ok,
        format!(
            "balanced worst rel {worst_balanced:.1e}, unbalanced worst residual {worst_gap:.1e}"
        ),
    );
}

fn mc_consistency(report: &mut Report) {
    let d = 48;
    let w = random_normal::<f64>(&mut Rng::new(102, 0), &[3, d], 0.0, 1.0).unwrap();
    let g: Vec<f64> = (0..d)
        .map(|i| (0..3).map(|j| w.data()[j * d + i]).sum())
        .collect();
    let f = MlpProbe::new(vec![w]).unwrap();
    let x = Tensor::from_vec(&[1, d], (0..d).map(|i| (i as f64).cos()).collect()).unwrap();
    let est = mc_directional_norm(&f, &x, 2.0, 1e-4, 10_000, &Rng::new(103, 0)).unwrap();
    let expect = g.iter().map(|v| v * v).sum::<f64>() / d as f64;
    let z = (est.estimate - expect).abs() / est.std_error;
    report.record(
        "criterion 7 Monte-Carlo consistency",
        z <= 3.0,
        format!(
            "estimate {:.5} vs {expect:.5}, {z:.2} standard errors",
            est.estimate
        ),
    );
}

fn brute_pr(s: &[f64], g: &[u8], t: f64) -> (f64, f64) {
    let tp = s.iter().zip(g).filter(|(&v, &m)| v > t && m == 1).count() as f64;
    let np = s.iter().filter(|&&v| v > t).count() as f64;
    let ng = g.iter().filter(|&&m| m == 1).count() as f64;
    (
        if np == 0.0 { 1.0 } else { tp / np },
        if ng == 0.0 { 1.0 } else { tp / ng },
    )
}

fn metric_oracles(report: &mut Report) {
    let mut rng = Rng::new(104, 0);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let s: Vec<f64> = (0..64)
            .map(|_| {
                if rng.bernoulli(0.3) {
                    rng.below(5) as f64 / 4.0
                } else {
                    rng.uniform()
                }
            })
            .collect();
        let density = rng.uniform();
        let g: Vec<u8> = (0..64).map(|_| rng.bernoulli(density) as u8).collect();
        let t = 2.0 * s.iter().sum::<f64>() / 64.0;
        let (p, r) = brute_pr(&s, &g, t);
        let f = if p == 0.0 && r == 0.0 {
            0.0
        } else {
            1.3 * p * r / (0.3 * p + r)
        };
        let m = s
            .iter()
            .zip(&g)
            .map(|(&v, &y)| (v - y as f64).abs())
            .sum::<f64>()
            / 64.0;
        let lib = evaluate_map(&s, &g).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
        let mut ok = close(adaptive_threshold(&s), t)
            && close(lib.precision, p)
            && close(lib.recall, r)
            && close(lib.f_beta, f)
            && close(mae(&s, &g).unwrap(), m);
        let q = quantize_8bit(&s);
        let qf: Vec<f64> = q.iter().map(|&v| v as f64).collect();
        let curve = pr_curve(&q, &g).unwrap();
        for th in 0..256 {
            let (bp, br) = brute_pr(&qf, &g, th as f64);
            ok &= close(curve.points[th].1, bp) && close(curve.points[th].2, br);
        }
        mismatches += !ok as usize;
    }
    let identity = (0..=1000).all(|k| {
        let p = k as f64 / 1000.0;
        f_beta(p, p) == p
    });
    report.record(
        "criterion 8 metric oracles",
        mismatches == 0 && identity,
        format!("{mismatches} of 1000 maps disagree, F = P at P = R holds: {identity}"),
    );
}

fn bound_dominance(report: &mut Report, params: &MEnetParams<f32>, test: &[Sample]) {
    let params = params.cast::<f64>();
    let (mut violations, mut norm_violations, mut checked) = (0usize, 0usize, 0usize);
    let mut min_ratio = f64::INFINITY;
    for (i, s) in test.iter().take(50).enumerate() {
        let head = if i % 2 == 0 {
            ProbeHead::Metric
        } else {
            ProbeHead::Ce
        };
        let x: Tensor<f64> = to_batch(&[&s.image]).unwrap();
        let probe = MenetProbe::new(&params, &x, head).unwrap();
        let g = input_gradient(&probe, &x).unwrap();
        let b = lipschitz_bound(&probe, Norm::L2).unwrap();
        violations += g
            .data()
            .iter()
            .zip(&b.bound)
            .filter(|(gv, bv)| gv.abs() > **bv)
            .count();
        let gn = Norm::L2.of(g.data());
        norm_violations += (gn > b.l2) as usize;
        min_ratio = min_ratio.min(b.l2 / gn);
        checked += g.numel();
    }
    report.record(
        "criterion 6 bound dominance",
        violations == 0 && norm_violations == 0,
        format!(
            "{violations} element and {norm_violations} norm violations over {checked} entries of 50 images, min M/|g| {min_ratio:.3e}"
        ),
    );
}

fn determinism(report: &mut Report, params: &MEnetParams<f32>, test: &[Sample], train: &[Sample]) {
    let ckpt = Checkpoint::for_inference(params.clone(), TrainConfig::default(), 0);
    let back = Checkpoint::<f32>::decode(&ckpt.encode().unwrap()).unwrap();
    let imgs: Vec<_> = test.iter().take(5).map(|s| &s.image).collect();
    let x = to_batch::<f32>(&imgs).unwrap();
    let a = params.forward(&x, BnMode::Inference).unwrap();
    let b = back.params.forward(&x, BnMode::Inference).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let exact = bits(&a.embedding) == bits(&b.embedding) && bits(&a.probs) == bits(&b.probs);

    let config = |iterations| TrainConfig {
        iterations,
        checkpoint_interval: 10,
        ..TrainConfig::desk(16)
    };
    let mut full = Trainer::<f32>::new(&ModelConfig::default(), config(20)).unwrap();
    let history = full.run(train, None, None).unwrap().history;
    let mut first = Trainer::<f32>::new(&ModelConfig::default(), config(10)).unwrap();
    first.run(train, None, None).unwrap();
    let bytes = first.checkpoint().encode().unwrap();
    let mut resumed =
        Trainer::resume(Checkpoint::<f32>::decode(&bytes).unwrap(), Some(config(20))).unwrap();
    let tail = resumed.run(train, None, None).unwrap().history;
    let replay = history[10..] == tail[..] && full.params == resumed.params;
    report.record(
        "criterion 11 determinism and serialization",
        exact && replay,
        format!(
            "bit-exact forward after round trip: {exact}, resumed trajectory identical: {replay}"
        ),
    );
}

fn menet_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_menet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "menet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn table_v(report: &mut Report, dir: &Path, ckpt: &Path, test: &[Sample]) {
    let clean = dir.join("test_clean");
    let subset = &test[..20];
    let manifest = DatasetManifest {
        split: "test".into(),
        ids: subset.iter().map(|s| s.id.clone()).collect(),
        seed: TEST_SEED,
        size: 64,
        version: GENERATOR_VERSION,
    };
    data::save_split(&clean, &manifest, subset).unwrap();
    let spec = dir.join("awgn.json");
    std::fs::write(
        &spec,
        serde_json::to_string(&menet::distortions::DistortionSpec::awgn(0.1)).unwrap(),
    )
    .unwrap();
    let noisy = dir.join("test_awgn");
    menet_cli(&[
        "distort",
        "--images",
        clean.to_str().unwrap(),
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        noisy.to_str().unwrap(),
    ]);
    let mut rows = Vec::new();
    let mut ok = true;
    for (name, images) in [("clean", &clean), ("awgn", &noisy)] {
        let out = dir.join(format!("robustness_{name}"));
        menet_cli(&[
            "robustness",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--images",
            images.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--dataset",
            name,
        ]);
        let csv = std::fs::read_to_string(out.join("jacobian.csv")).unwrap();
        let mut lines = csv.lines();
        ok &= lines.next() == Some("dataset,images,max,min,median,mean,var");
        let row = lines.next().unwrap_or_default().to_string();
        let fields: Vec<&str> = row.split(',').collect();
        let nums: Vec<f64> = fields[2..].iter().filter_map(|v| v.parse().ok()).collect();
        ok &= fields.len() == 7
            && fields[0] == name
            && nums.len() == 5
            && nums[0] >= nums[2]
            && nums[2] >= nums[1]
            && nums[4] >= 0.0;
        rows.push(row);
    }
    for r in &rows {
        println!("  {r}");
    }
    report.record(
        "criterion 10 gradient statistics table",
        ok,
        format!("{} rows with columns max,min,median,mean,var", rows.len()),
    );
}

#[test]
fn acceptance() {
    let mut report = Report::default();
    audit(&mut report);
    loss_equivalence(&mut report);

    let train_set = generate_synthetic(400, 64, TRAIN_SEED, "train").unwrap();
    let test = generate_synthetic(100, 64, TEST_SEED, "test").unwrap();
    let val = generate_synthetic(50, 64, VAL_SEED, "val").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let desk = TrainConfig::desk(ModelConfig::default().embedding_dim);
    let combined = train("combined", desk.clone(), &train_set, &val, dir.path());
    let ce_only = train(
        "ce_only",
        TrainConfig {
            metric_weight: 0.0,
            ..desk.clone()
        },
        &train_set,
        &val,
        dir.path(),
    );

    let ce = evaluate_samples(&combined.params, &test, MapKind::Ce)
        .unwrap()
        .mean;
    let metric = evaluate_samples(&combined.params, &test, MapKind::Metric)
        .unwrap()
        .mean;
    report.record(
        "criterion 3 desk training",
        ce.f_beta >= 0.80 && ce.mae <= 0.10 && combined.seconds <= 1800.0,
        format!(
            "classifier map F {:.3} MAE {:.3} (metric map F {:.3} MAE {:.3}), checkpoint {} of {}, {:.0}s",
            ce.f_beta, ce.mae, metric.f_beta, metric.mae, combined.best_iteration, desk.iterations, combined.seconds
        ),
    );
    let early = window_mean(&combined.history, 0, 100).unwrap();
    let late = window_mean(&combined.history, 1900, 2000).unwrap();
    report.record(
        "training loss decrease",
        early - late >= 0.5 * early.abs(),
        format!("window mean {early:.3} over [0,100), {late:.3} over [1900,2000)"),
    );

    let base = evaluate_samples(&ce_only.params, &test, MapKind::Ce)
        .unwrap()
        .mean;
    report.record(
        "criterion 4 ablation direction",
        ce.f_beta >= base.f_beta - 0.02,
        format!(
            "combined F {:.3}, classifier-only F {:.3}, difference {:+.3}",
            ce.f_beta,
            base.f_beta,
            ce.f_beta - base.f_beta
        ),
    );

    let sep = metric_separation(&combined.params, &test).unwrap();
    report.record(
        "criterion 5 metric-space separation",
        sep.background < 0.5 * sep.salient,
        format!(
            "mean S background {:.3}, salient {:.3}",
            sep.background, sep.salient
        ),
    );

    bound_dominance(&mut report, &combined.params, &test);
    mc_consistency(&mut report);
    metric_oracles(&mut report);

    let specs = DistortionConfig::default().specs();
    let table = degradation_table(
        &[
            ("combined", &combined.params, MapKind::Ce),
            ("ce_only", &ce_only.params, MapKind::Ce),
        ],
        &test,
        &specs,
    )
    .unwrap();
    print!("{}", table.to_csv());
    let strength = |label: &str| -> f64 {
        if let Some(s) = label.strip_prefix("awgn_") {
            s.parse().unwrap()
        } else {
            100.0 - label.trim_start_matches("dct_q").parse::<f64>().unwrap()
        }
    };
    let columns_ok = table.rows.len() == 2
        && table.rows.iter().all(|r| {
            let labels: Vec<&str> = r.distorted.iter().map(|(l, _)| l.as_str()).collect();
            let (awgn, dct): (Vec<&str>, Vec<&str>) =
                labels.iter().partition(|l| l.starts_with("awgn_"));
            awgn.len() == 4
                && dct.len() == 3
                && awgn.windows(2).all(|w| strength(w[0]) < strength(w[1]))
                && dct.windows(2).all(|w| strength(w[0]) < strength(w[1]))
                && r.distorted.iter().all(|(_, f)| (0.0..=1.0).contains(f))
        });
    report.record(
        "criterion 9 distortion degradation",
        columns_ok,
        "columns ordered by strength for both models".into(),
    );

    let ckpt = dir.path().join("combined").join("best.ment");
    table_v(&mut report, dir.path(), &ckpt, &test);
    determinism(&mut report, &combined.params, &test, &train_set);

    println!("summary:");
    for o in &report.0 {
        println!("  {}: {}", o.label, if o.passed { "PASS" } else { "FAIL" });
    }
    let failed: Vec<String> = report
        .0
        .iter()
        .filter(|o| !o.passed)
        .map(|o| format!("{}: {}", o.label, o.detail))
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:#?}");
}
