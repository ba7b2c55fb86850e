//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 1-4 and 10 are exact properties and abort the run when they fail.
//! Criteria 5-9 are trends measured on the synthetic benchmark over three
//! seeds; their raw numbers are printed and a FAIL there is reported, not
//! fatal. `GSSL_ACCEPTANCE_SEEDS` overrides the seed count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Instant;

use gssl::config::RunConfig;
use gssl::run::Bench;
use gssl_core::gradcheck::{check_primitive, loss_case_error, random_case, CASE_NAMES, LOSS_NAMES};
use gssl_core::losses::{loss_prototype, uniformity_rows};
use gssl_core::metrics::{aupr, auroc, cross_domain, f_beta, PixelRecord};
use gssl_core::model::PrototypeBank;
use gssl_core::rng::{seeded, Rng};
use gssl_core::train::{Ablation, TrainOutput};
use gssl_core::uncertainty::{calculate_gamma, certainty_mask, Mask};
use gssl_core::{Graph, Tensor};

struct Outcome {
    failed_hard: Vec<usize>,
    failed_trend: Vec<usize>,
}

impl Outcome {
    fn report(&mut self, id: usize, hard: bool, pass: bool, detail: String) {
        println!("criterion {id:>2} {}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            if hard {
                self.failed_hard.push(id);
            } else {
                self.failed_trend.push(id);
            }
        }
    }
}

fn gradients() -> (bool, String) {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_name = "";
    let mut checks = 0;
    for seed in 0..20u64 {
        for (i, name) in CASE_NAMES.iter().enumerate() {
            let (prim, inputs) = random_case(i, 1000 + seed);
            let err = check_primitive(&prim, &inputs, 1e-5).expect("primitive check runs");
            if err > worst {
                (worst, worst_name) = (err, name);
            }
            checks += 1;
        }
        for (i, name) in LOSS_NAMES.iter().enumerate() {
            let err = loss_case_error(i, 2000 + seed, 1e-5).expect("loss check runs");
            if err > worst {
                (worst, worst_name) = (err, name);
            }
            checks += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst < 1e-5 && secs < 60.0,
        format!("{checks} checks, worst relative error {worst:.2e} ({worst_name}), {secs:.1}s"),
    )
}

fn proportion_identity() -> (bool, String) {
    let start = Instant::now();
    let mut rng = seeded(7);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (n, k, h, w) = (rng.random_range(1..4), rng.random_range(2..6), rng.random_range(1..9), rng.random_range(1..9));
        let scores = Tensor::from_fn([n, k, h, w], |_| rng.random_range(-1.0..1.0));
        let p = rng.random_range(0.0..1.0);
        let bits: Vec<bool> = (0..n * h * w).map(|_| rng.random_bool(p)).collect();
        let mask = Mask { shape: [n, h, w], bits };
        let gamma = calculate_gamma(&mask, &scores).expect("gamma");
        let certain = certainty_mask(&scores, gamma).expect("mask");
        let m = (n * h * w) as f64;
        let gap = (certain.count() as f64 / m - mask.count() as f64 / m).abs() * m;
        worst = worst.max(gap);
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst <= 1.0 && secs < 10.0,
        format!("1000 instances, worst |p_certain - p_consistent| = {worst} / NHW, {secs:.2}s"),
    )
}

fn mann_whitney(r: &[PixelRecord]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for a in r.iter().filter(|p| p.accurate) {
        for b in r.iter().filter(|p| !p.accurate) {
            pairs += 1.0;
            num += if b.score > a.score {
                1.0
            } else if b.score == a.score {
                0.5
            } else {
                0.0
            };
        }
    }
    num / pairs
}

fn aupr_by_enumeration(r: &[PixelRecord]) -> f64 {
    let mut scores: Vec<f64> = r.iter().map(|p| p.score).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let positives = r.iter().filter(|p| p.accurate).count() as f64;
    let (mut area, mut prev) = (0.0, 0.0);
    for t in scores.iter().map(|s| s.next_up()) {
        let tp = r.iter().filter(|p| p.accurate && p.score < t).count() as f64;
        let fp = r.iter().filter(|p| !p.accurate && p.score < t).count() as f64;
        let recall = tp / positives;
        area += (recall - prev) * tp / (tp + fp);
        prev = recall;
    }
    area
}

fn metric_oracles() -> (bool, String) {
    let start = Instant::now();
    let mut rng = seeded(11);
    let (mut d_roc, mut d_pr) = (0.0f64, 0.0f64);
    let mut sets = 0;
    while sets < 200 {
        let n = rng.random_range(2..=1000);
        let levels = rng.random_range(2..200);
        let r: Vec<PixelRecord> = (0..n)
            .map(|_| PixelRecord {
                score: f64::from(rng.random_range(0..levels)) / 17.0 - 3.0,
                accurate: rng.random_bool(0.6),
            })
            .collect();
        if !(r.iter().any(|p| p.accurate) && r.iter().any(|p| !p.accurate)) {
            continue;
        }
        d_roc = d_roc.max((auroc(&r).unwrap() - mann_whitney(&r)).abs());
        d_pr = d_pr.max((aupr(&r).unwrap() - aupr_by_enumeration(&r)).abs());
        sets += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    (
        d_roc <= 1e-12 && d_pr <= 1e-12 && secs < 30.0,
        format!("200 sets, max |AUROC - oracle| = {d_roc:.1e}, max |AUPR - oracle| = {d_pr:.1e}, {secs:.2}s"),
    )
}

fn hand_values() -> (bool, String) {
    let f = f_beta(2, 1, 1, 0.5).unwrap();

    let s = 3f64.sqrt() / 2.0;
    let cols = [[1.0, 0.0], [-0.5, s], [-0.5, -s]];
    let bank = PrototypeBank {
        vectors: Tensor::from_fn([2, 3], |i| cols[i % 3][i / 3]),
        fresh: vec![true; 3],
        available: vec![true; 3],
    };
    let lp = loss_prototype(&bank).unwrap();

    let mut g = Graph::new();
    let pair = g.constant(Tensor::new([2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap());
    let lu = uniformity_rows(&mut g, pair).unwrap();
    let lu = g.value(lu).data()[0];

    let x = g.constant(Tensor::new([2], vec![1.0, 0.7071]).unwrap());
    let y = g.softmax(x, 0, 0.07).unwrap();
    let sm = g.value(y).data().to_vec();
    // independent closed forms
    let f_ref = 1.25 * 2.0 / (1.25 * 2.0 + 0.25 * 1.0 + 1.0);
    let sm_ref = 1.0 / (1.0 + (-(1.0 - 0.7071f64) / 0.07).exp());
    let errs = [
        (f - f_ref).abs(),
        (lp + 0.5).abs(),
        (lu - (-8f64).exp()).abs(),
        (sm[0] - sm_ref).abs(),
        (sm[1] - (1.0 - sm_ref)).abs(),
    ];
    let pass = errs.iter().all(|e| *e < 1e-6);
    (
        pass,
        format!(
            "F_0.5 = {f:.7}, L_p = {lp:.7}, L_u = {lu:.6e} (e^-8 = {:.6e}), softmax = [{:.7}, {:.7}]",
            (-8f64).exp(),
            sm[0],
            sm[1]
        ),
    )
}

fn base_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.seed = seed;
    cfg.benchmark.seed = seed;
    cfg
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn max_dominant(run: &TrainOutput) -> f64 {
    run.log
        .iter()
        .filter_map(|e| e.dominant_fraction)
        .fold(0.0, f64::max)
}

#[derive(Default)]
struct SeedResults {
    auroc: BTreeMap<&'static str, f64>,
    aupr: BTreeMap<&'static str, f64>,
    aupr_two_stage: f64,
    dominant: BTreeMap<&'static str, f64>,
    f_trained: f64,
    f_best: f64,
    cross_delta: f64,
}

const COMPARED: [Ablation; 5] = [
    Ablation::None,
    Ablation::NoSsl,
    Ablation::GammaNegInf,
    Ablation::NoRegLosses,
    Ablation::NoTarget,
];

fn run_seed(seed: u64) -> SeedResults {
    let start = Instant::now();
    let cfg = base_config(seed);
    let mut bench = Bench::new(&cfg, None).expect("benchmark");
    bench.ensure("b_test", None).expect("b_test");
    let single = vec!["c".to_string()];
    let mut res = SeedResults::default();
    for ablation in COMPARED.into_iter().chain([Ablation::SymNonparam]) {
        let run = bench.run(ablation, &single).expect("training run");
        let ev = bench.evaluate(&run.state, "c_test", run.state.gamma.is_some()).expect("evaluation");
        let name = ablation.name();
        res.auroc.insert(name, ev.summary.auroc.unwrap_or(f64::NAN));
        res.aupr.insert(name, ev.summary.aupr.unwrap_or(f64::NAN));
        res.dominant.insert(name, max_dominant(&run));
        if ablation == Ablation::None {
            res.f_best = ev.summary.max_f_beta.value;
            res.f_trained = ev.summary.trained.as_ref().map_or(f64::NAN, |t| t.metrics.f_beta);
            let source = bench.evaluate(&run.state, "b_test", false).expect("evaluation");
            let from: Vec<PixelRecord> = source.records.iter().flatten().copied().collect();
            let to: Vec<PixelRecord> = ev.records.iter().flatten().copied().collect();
            res.cross_delta = cross_domain(&from, &to, cfg.eval.beta).expect("cross domain").delta;
        }
    }
    let run = bench.run(Ablation::None, &cfg.curriculum).expect("curriculum run");
    let ev = bench.evaluate(&run.state, "c_test", false).expect("evaluation");
    res.aupr_two_stage = ev.summary.aupr.unwrap_or(f64::NAN);
    res.dominant.insert("none_two_stage", max_dominant(&run));
    eprintln!("seed {seed} done in {:.0}s", start.elapsed().as_secs_f64());
    res
}

fn trends(seeds: &[u64], out: &mut Outcome) {
    let results: Vec<SeedResults> = seeds.iter().map(|&s| run_seed(s)).collect();
    let avg = |f: &dyn Fn(&SeedResults) -> f64| mean(&results.iter().map(f).collect::<Vec<_>>());

    let names: Vec<&str> = COMPARED.iter().map(|a| a.name()).collect();
    let roc: Vec<f64> = names.iter().map(|n| avg(&|r| r.auroc[n])).collect();
    let pr: Vec<f64> = names.iter().map(|n| avg(&|r| r.aupr[n])).collect();
    let table: Vec<String> = names
        .iter()
        .zip(roc.iter().zip(&pr))
        .map(|(n, (a, p))| format!("{n} {a:.4}/{p:.4}"))
        .collect();
    let beaten: Vec<&str> = names[1..]
        .iter()
        .enumerate()
        .filter(|(i, _)| !(roc[0] > roc[i + 1] && pr[0] > pr[i + 1]))
        .map(|(_, n)| *n)
        .collect();
    let detail = if beaten.is_empty() {
        format!("mean AUROC/AUPR on c_test: {}", table.join(", "))
    } else {
        format!("mean AUROC/AUPR on c_test: {}; not exceeded: {}", table.join(", "), beaten.join(", "))
    };
    out.report(5, false, beaten.is_empty(), detail);

    let one = avg(&|r| r.aupr["none"]);
    let two = avg(&|r| r.aupr_two_stage);
    out.report(
        6,
        false,
        two >= one,
        format!("mean AUPR on c_test: a->b->c {two:.4}, a->c {one:.4}"),
    );

    let sym: Vec<f64> = results.iter().map(|r| r.dominant["sym_nonparam"]).collect();
    let default: Vec<f64> = results
        .iter()
        .flat_map(|r| [r.dominant["none"], r.dominant["none_two_stage"]])
        .collect();
    let collapsed = sym.iter().filter(|&&d| d > 0.9).count();
    let default_max = default.iter().copied().fold(0.0, f64::max);
    out.report(
        7,
        false,
        collapsed * 3 >= 2 * seeds.len() && default_max <= 0.9,
        format!("max dominant fraction: sym_nonparam {sym:.3?} ({collapsed} above 0.9), default max {default_max:.3}"),
    );

    let gaps: Vec<f64> = results.iter().map(|r| r.f_best - r.f_trained).collect();
    out.report(
        8,
        false,
        gaps.iter().all(|g| *g < 0.05),
        format!(
            "F_0.5 at trained gamma {:.4?} vs sweep max {:.4?}; gaps {:.4?}",
            results.iter().map(|r| r.f_trained).collect::<Vec<_>>(),
            results.iter().map(|r| r.f_best).collect::<Vec<_>>(),
            gaps
        ),
    );

    let deltas: Vec<f64> = results.iter().map(|r| r.cross_delta).collect();
    out.report(
        9,
        false,
        deltas.iter().all(|d| d.abs() < 0.02),
        format!("delta F_0.5 carrying the b_test optimum to c_test: {deltas:.4?}"),
    );
}

const TINY: &str = r#"{
  "train": {
    "steps_pretrain": 40,
    "steps_ssl": 10,
    "batch_source": 2,
    "batch_target": 2,
    "prototype_batch": 2,
    "augment": { "crop": [16, 16] }
  },
  "benchmark": { "extent": [20, 20], "n_source": 6, "n_unlabelled": 6, "n_test": 4 },
  "eval": { "chunk": 2 }
}"#;

fn pipeline(root: &Path, config: &Path) -> Vec<(String, Vec<u8>)> {
    let gssl = |args: &[&str]| {
        let status = Command::new(env!("CARGO_BIN_EXE_gssl"))
            .args(args)
            .args(["--config", config.to_str().unwrap()])
            .env_remove("GSSL_OUT")
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .expect("gssl runs");
        assert!(status.success(), "gssl {args:?} failed");
    };
    let p = |sub: &str| root.join(sub).to_str().unwrap().to_string();
    let data = p("data");
    gssl(&["generate-data", "--out", &data]);
    gssl(&["train", "--data", &data, "--out", &p("train")]);
    gssl(&["sweep", "--data", &data, "--out", &p("sweep"), "--checkpoint", &p("train/checkpoint")]);
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path != config {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn determinism() -> (bool, String) {
    let base: PathBuf = std::env::temp_dir().join(format!("gssl-acceptance-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&base);
    let runs: Vec<Vec<(String, Vec<u8>)>> = ["one", "two"]
        .iter()
        .map(|n| {
            let root = base.join(n);
            std::fs::create_dir_all(&root).unwrap();
            let config = root.join("config.json");
            std::fs::write(&config, TINY).unwrap();
            pipeline(&root, &config)
        })
        .collect();
    let _ = std::fs::remove_dir_all(&base);
    let names: Vec<&String> = runs[0].iter().map(|(n, _)| n).collect();
    let differing: Vec<&String> = runs[0]
        .iter()
        .zip(&runs[1])
        .filter(|(a, b)| a != b)
        .map(|(a, _)| &a.0)
        .collect();
    let pass = runs[0].len() == runs[1].len() && differing.is_empty();
    let kinds = ["checkpoint/", "log.csv", "curves.csv"];
    let covered = kinds.iter().all(|k| names.iter().any(|n| n.contains(k)));
    (
        pass && covered,
        format!("{} files compared across two pipeline runs, {} differ", names.len(), differing.len()),
    )
}

fn main() {
    let mut out = Outcome {
        failed_hard: Vec::new(),
        failed_trend: Vec::new(),
    };
    for (id, check) in [(1usize, gradients as fn() -> (bool, String)), (2, proportion_identity), (3, metric_oracles), (4, hand_values)] {
        let (pass, detail) = check();
        out.report(id, true, pass, detail);
    }
    let n_seeds: u64 = std::env::var("GSSL_ACCEPTANCE_SEEDS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(3);
    let seeds: Vec<u64> = (1..=n_seeds).collect();
    trends(&seeds, &mut out);
    let (pass, detail) = determinism();
    out.report(10, true, pass, detail);

    if !out.failed_trend.is_empty() {
        println!("trend criteria not reproduced: {:?}", out.failed_trend);
    }
    if !out.failed_hard.is_empty() {
        println!("property criteria failed: {:?}", out.failed_hard);
        std::process::exit(1);
    }
}
