//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails that is not listed in `KNOWN_RED`.
//!
//! Set `CATN_RECORD_FIXTURE=1` to (re)write the ablation fixture from the
//! current run instead of comparing against it.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use catn::checkpoint::save_checkpoint;
use catn::conditioning::{multilinear_condition, randomized_condition, Branch, ConditionPolicy, Conditioner, RandomizedMaps};
use catn::data::{gen_two_moons_pair, DomainPair, ShiftSpec};
use catn::gradcheck::{run_suite, CheckSettings};
use catn::graph::Graph;
use catn::models::ArchConfig;
use catn::tensor::Tensor;
use catn::trainer::{
    ablation_run, domain_disc_mean, stability_band, train, write_metrics_csv, AblationMode, AblationTable, TrainConfig,
    TrainOutcome,
};

/// Criteria that fail on the current implementation, with the analysis kept
/// outside the repository. They still print FAIL.
const KNOWN_RED: &[u32] = &[6, 8];

const BENCH_N: usize = 500;
const BENCH_DATA_SEED: u64 = 0;
const ABLATION_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const FIXTURE_SLACK: f64 = 0.03;

struct Verdict {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn bench() -> DomainPair {
    gen_two_moons_pair(BENCH_N, &ShiftSpec::default(), BENCH_DATA_SEED).expect("benchmark generates")
}

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn criterion_1() -> Verdict {
    let t = Instant::now();
    let reports = run_suite(&[], CheckSettings { eps: 1e-5, tol: 1e-4 }, 0).expect("suite runs");
    let elapsed = t.elapsed();
    let worst = reports.iter().max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error)).unwrap();
    let all = reports.iter().all(|r| r.report.passed);
    Verdict {
        id: 1,
        name: "gradient correctness",
        pass: all && elapsed < Duration::from_secs(60),
        detail: format!(
            "{} components, worst {:.2e} in {} at {}, {}",
            reports.len(),
            worst.report.max_rel_error,
            worst.name,
            worst.worst_location,
            secs(elapsed)
        ),
    }
}

fn criterion_2() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    // Exact branch: width and inner-product identity on 100 pairs.
    let (df, dp) = (7, 3);
    let (f, p) = (rand_matrix(&mut rng, 200, df), rand_matrix(&mut rng, 200, dp));
    let mut g = Graph::new();
    let (fv, pv) = (g.constant(f.clone()), g.constant(p.clone()));
    let h = multilinear_condition(&mut g, fv, pv, usize::MAX).unwrap();
    let width_ok = g.shape(h) == [200, df * dp];
    let hv = g.value(h);
    let mut worst_identity = 0.0f64;
    for k in 0..100 {
        let (i, j) = (2 * k, 2 * k + 1);
        let lhs = dot(hv.row(i), hv.row(j));
        let rhs = dot(f.row(i), f.row(j)) * dot(p.row(i), p.row(j));
        worst_identity = worst_identity.max((lhs - rhs).abs());
    }

    // Randomized branch: Monte-Carlo mean of the inner product over map draws.
    let (df, dp, d, draws) = (16, 8, 64, 10_000);
    let f = rand_matrix(&mut rng, 1, df);
    let f2 = Tensor::new(vec![1, df], f.data().iter().map(|x| x + 0.5 * rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let p = rand_matrix(&mut rng, 1, dp);
    let p2 = Tensor::new(vec![1, dp], p.data().iter().map(|x| x + 0.5 * rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let target = dot(f.data(), f2.data()) * dot(p.data(), p2.data());
    let mut acc = 0.0;
    for _ in 0..draws {
        let maps = RandomizedMaps::sample(df, dp, d, &mut rng).unwrap();
        let mut g = Graph::new();
        let (a, b, a2, b2) = (g.constant(f.clone()), g.constant(p.clone()), g.constant(f2.clone()), g.constant(p2.clone()));
        let h = randomized_condition(&mut g, a, b, &maps).unwrap();
        let h2 = randomized_condition(&mut g, a2, b2, &maps).unwrap();
        acc += dot(g.value(h).data(), g.value(h2).data());
    }
    let mc_rel = (acc / draws as f64 - target).abs() / target.abs();
    let elapsed = t.elapsed();
    Verdict {
        id: 2,
        name: "conditioning laws",
        pass: width_ok && worst_identity < 1e-9 && mc_rel < 0.05 && elapsed < Duration::from_secs(30),
        detail: format!(
            "width ok: {width_ok}, identity max err {worst_identity:.1e}, Monte-Carlo rel err {:.2}% (target {target:.4}), {}",
            100.0 * mc_rel,
            secs(elapsed)
        ),
    }
}

fn criterion_3() -> Verdict {
    let policy = ConditionPolicy::default();
    let cases = [(64, 64, Branch::Exact), (64, 65, Branch::Randomized), (4096, 1, Branch::Exact), (4097, 1, Branch::Randomized)];
    let mut ok = policy.threshold == 4096;
    let mut detail = Vec::new();
    for (df, dp, want) in cases {
        let got = policy.branch(df, dp);
        let built = Conditioner::new(policy.clone(), df, dp, 0).unwrap().branch();
        ok &= got == want && built == want;
        detail.push(format!("{df}x{dp}->{got:?}"));
    }
    Verdict { id: 3, name: "dispatch rule", pass: ok, detail: detail.join(", ") }
}

fn criterion_4(data: &DomainPair) -> Verdict {
    let cfg = TrainConfig { total_steps: 1000, eval_every: 10, ..Default::default() };
    let out = train(&cfg, data).expect("1000-step run");
    let w = cfg.effective_weights();
    let mut worst = 0.0f64;
    for r in &out.history {
        let con = r.l_cls + w.lambda * r.l_dom;
        let total = r.l_con + w.eta1 * (r.l_s2t + r.l_t2s) + w.eta2 * r.l_cyc;
        worst = worst.max((r.l_con - con).abs()).max((r.l_total - total).abs());
    }
    Verdict {
        id: 4,
        name: "loss identities",
        pass: worst <= 1e-12 && out.history.len() == 100,
        detail: format!("{} logged steps, max residual {worst:.1e}", out.history.len()),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Fixture {
    seeds: Vec<u64>,
    means: Vec<(AblationMode, f64)>,
}

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/ablation_means.json")
}

fn fixture_check(table: &AblationTable) -> (bool, String) {
    let path = fixture_path();
    let current = Fixture { seeds: table.seeds.clone(), means: table.rows.iter().map(|r| (r.mode, r.mean)).collect() };
    if std::env::var_os("CATN_RECORD_FIXTURE").is_some() {
        std::fs::write(&path, serde_json::to_string_pretty(&current).unwrap()).expect("fixture written");
        return (true, "fixture recorded".into());
    }
    let Ok(text) = std::fs::read_to_string(&path) else {
        return (false, format!("fixture {} missing", path.display()));
    };
    let fixture: Fixture = serde_json::from_str(&text).expect("fixture parses");
    if fixture.seeds != current.seeds {
        return (false, "fixture seeds differ".into());
    }
    let worst = fixture
        .means
        .iter()
        .map(|(m, v)| (table.mean(*m).unwrap_or(f64::NAN) - v).abs())
        .fold(0.0f64, f64::max);
    (worst <= FIXTURE_SLACK, format!("max drift from fixture {:.1} pts", 100.0 * worst))
}

fn criteria_5_6(data: &DomainPair) -> (Verdict, Verdict) {
    let t = Instant::now();
    let table = ablation_run(&TrainConfig::default(), data, &ABLATION_SEEDS, &AblationMode::ALL).expect("ablation runs");
    let elapsed = t.elapsed();
    let m = |mode| table.mean(mode).unwrap();
    let (s0, s1, s2, s3, s4) = (m(AblationMode::S0), m(AblationMode::S1), m(AblationMode::S2), m(AblationMode::S3), m(AblationMode::S4));
    let (fixture_ok, fixture_detail) = fixture_check(&table);
    let gain = s3 - s0;
    let five = Verdict {
        id: 5,
        name: "adaptation gain",
        pass: gain >= 0.10 && s3 >= s1 && fixture_ok && elapsed < Duration::from_secs(600),
        detail: format!(
            "S3 {:.1} vs S0 {:.1} (+{:.1} pts), S1 {:.1}, {fixture_detail}, {}",
            100.0 * s3,
            100.0 * s0,
            100.0 * gain,
            100.0 * s1,
            secs(elapsed)
        ),
    };
    let slack = 0.01;
    let six = Verdict {
        id: 6,
        name: "ablation ladder",
        pass: s3 + slack >= s2 && s2 + slack >= s1 && s1 + slack >= s0 && s4 < s3,
        detail: format!(
            "S0 {:.1}, S1 {:.1}, S2 {:.1}, S3 {:.1}, S4 {:.1}",
            100.0 * s0,
            100.0 * s1,
            100.0 * s2,
            100.0 * s3,
            100.0 * s4
        ),
    };
    (five, six)
}

fn criterion_7(run: &TrainOutcome) -> Verdict {
    let held_out = gen_two_moons_pair(BENCH_N, &ShiftSpec::default(), 1_000).unwrap();
    let dd = domain_disc_mean(&run.suite, &held_out).unwrap();
    let first = run.history.iter().find(|r| r.step == 50).expect("step 50 logged");
    let last = run.last().unwrap();
    let ratio = last.l_cyc / first.l_cyc;
    Verdict {
        id: 7,
        name: "equilibrium and cycle",
        pass: (0.3..=0.7).contains(&dd) && ratio < 0.2,
        detail: format!("held-out D_d mean {dd:.3}, l_cyc {:.4} -> {:.4} (ratio {ratio:.3})", first.l_cyc, last.l_cyc),
    }
}

fn criterion_8(run: &TrainOutcome, cfg: &TrainConfig) -> Verdict {
    let band = stability_band(&run.history, cfg.total_steps, 0.2, 5).expect("tail has enough rows");
    let final_acc = run.last().and_then(|r| r.target_acc).unwrap_or(f64::NAN);
    Verdict {
        id: 8,
        name: "stability",
        pass: band < 0.03,
        detail: format!("running-mean band over final 20% {:.1} pts (final target acc {:.1})", 100.0 * band, 100.0 * final_acc),
    }
}

fn criterion_9(data: &DomainPair) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { total_steps: 300, arch: ArchConfig { seed: 3, ..Default::default() }, ..Default::default() };
    let mut files = Vec::new();
    for tag in ["a", "b"] {
        let out = train(&cfg, data).unwrap();
        let (m, c) = (dir.path().join(format!("{tag}.csv")), dir.path().join(format!("{tag}.ckpt")));
        write_metrics_csv(&m, &out.history).unwrap();
        save_checkpoint(&out.suite, &cfg, out.steps, &c).unwrap();
        files.push((std::fs::read(m).unwrap(), std::fs::read(c).unwrap()));
    }
    let same = files[0] == files[1];
    Verdict {
        id: 9,
        name: "determinism",
        pass: same,
        detail: format!("metrics {} bytes, checkpoint {} bytes, identical: {same}", files[0].0.len(), files[0].1.len()),
    }
}

fn main() -> ExitCode {
    let data = bench();
    let mut verdicts = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4(&data)];
    let (five, six) = criteria_5_6(&data);
    verdicts.push(five);
    verdicts.push(six);
    let cfg = TrainConfig::default();
    let run = train(&cfg, &data).expect("default run");
    verdicts.push(criterion_7(&run));
    verdicts.push(criterion_8(&run, &cfg));
    verdicts.push(criterion_9(&data));

    let mut unexpected = Vec::new();
    for v in &verdicts {
        let known = KNOWN_RED.contains(&v.id);
        let tag = match (v.pass, known) {
            (true, false) => "PASS",
            (true, true) => "PASS (listed as known red; update the list)",
            (false, true) => "FAIL (known red)",
            (false, false) => "FAIL",
        };
        println!("criterion {} {:<24} {tag}: {}", v.id, v.name, v.detail);
        if !v.pass && !known {
            unexpected.push(v.id);
        }
    }
    let passed = verdicts.iter().filter(|v| v.pass).count();
    println!("{passed}/{} criteria pass", verdicts.len());
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
