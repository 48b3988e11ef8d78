//! Exit criteria. Prints one PASS/FAIL line per criterion and fails if any
//! criterion fails.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::Rng;

use imkws_core::experiment::{run_sweep, Cell, RunResult, SweepConfig, SweepResult};
use imkws_core::gradcheck::{check_dem, check_model_affine, check_model_full, check_tent_reduction, MODEL_INSTANCES};
use imkws_core::losses::{dem_grad, penalty_q, reward_t};
use imkws_core::numerics::{entropy, softmax};
use imkws_core::stream::{
    environment_noise, floor_profile, generate_stream, make_class_templates, mix_noise_at_snr, sample_example,
    NoiseKind, TemplateShape,
};
use imkws_core::{ConfusionMatrix, LogitVector, SeedStream, StreamConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_logits<R: Rng>(rng: &mut R, classes: usize) -> LogitVector {
    LogitVector::new((0..classes).map(|_| rng.random_range(-10.0..=10.0)).collect()).unwrap()
}

fn decomposition_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = SeedStream::new(1).rng();
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let z = random_logits(&mut rng, [2, 4, 10][i % 3]);
        let h = entropy(&softmax(&z, 1.0).unwrap());
        let split = reward_t(&z, 1.0).unwrap() + penalty_q(&z, 1.0).unwrap();
        worst = worst.max((split - h).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-9 && elapsed < Duration::from_secs(1),
        format!("max |T+Q-H| = {worst:.2e}, {elapsed:.2?}"),
    )
}

fn dem_gradient_identity() -> Outcome {
    let start = Instant::now();
    // The suite cycles alpha over {0.6, 0.8, 1.0} and C over {2, 4, 10}.
    let r = check_dem(SeedStream::new(2), 1000, &|_, _| {});
    let elapsed = start.elapsed();
    outcome(
        r.cases == 1000 && r.max_rel_err < 1e-5 && elapsed < Duration::from_secs(5),
        format!("{} trials, max rel err {:.2e}, {elapsed:.2?}", r.cases, r.max_rel_err),
    )
}

fn throttling_margin() -> Outcome {
    let mut rng = SeedStream::new(3).rng();
    let mut worst = 0.0f64;
    for i in 0..100 {
        let z = random_logits(&mut rng, [2, 4, 10][i % 3]);
        let p = softmax(&z, 1.0).unwrap();
        let base = dem_grad(&z, 1.0);
        for alpha in [0.6, 0.8] {
            let g = dem_grad(&z, alpha);
            for j in 0..z.len() {
                let want = -(1.0 - alpha) * p.as_slice()[j];
                worst = worst.max((g[j] - base[j] - want).abs());
            }
        }
    }
    outcome(worst <= 1e-10, format!("max deviation {worst:.2e}"))
}

fn model_gradients() -> Outcome {
    let affine = check_model_affine(SeedStream::new(4), &|_, _| {});
    let full = check_model_full(SeedStream::new(5), &|_, _| {});
    let enough = affine.cases >= 20 && full.cases >= 20 && MODEL_INSTANCES >= 20;
    outcome(
        enough && affine.max_rel_err < 1e-5 && full.max_rel_err < 1e-5,
        format!(
            "affine {} instances {:.2e}, full {} instances {:.2e}",
            affine.cases, affine.max_rel_err, full.cases, full.max_rel_err
        ),
    )
}

fn reduction_to_tent() -> Outcome {
    let r = check_tent_reduction(SeedStream::new(6), 10, &|_, _| {});
    outcome(
        r.cases == 10 && r.max_rel_err == 0.0,
        format!("{} batches, max |diff| {:e}", r.cases, r.max_rel_err),
    )
}

const SEEDS: u64 = 5;
const TENT: &str = "tent";
const IMKWS: &str = "imkws";
const UNADAPTED: &str = "unadapted";
const ABLATIONS: [&str; 3] = ["imkws-no-dem", "imkws-no-consistency", "imkws-no-selection"];

struct Protocol {
    result: SweepResult,
    elapsed: Duration,
}

impl Protocol {
    fn run() -> Self {
        let mut methods = vec![UNADAPTED.to_string(), TENT.to_string(), IMKWS.to_string()];
        methods.extend(ABLATIONS.iter().map(|s| s.to_string()));
        let cfg = SweepConfig {
            methods,
            ratios: vec![8.0],
            snrs: vec![-10.0],
            seeds: (0..SEEDS).collect(),
            write_runs: false,
            ..SweepConfig::default()
        };
        assert_eq!(cfg.stream.n_classes, 4);
        assert_eq!(cfg.stream.n_batches, 50);
        assert_eq!(cfg.adapt.batch_size, 128);
        let start = Instant::now();
        let (_, result) = run_sweep(&cfg).expect("protocol sweep");
        Self {
            result,
            elapsed: start.elapsed(),
        }
    }

    fn runs(&self, method: &str) -> Vec<&RunResult> {
        let runs: Vec<&RunResult> = self
            .result
            .runs
            .iter()
            .filter(|(c, _): &&(Cell, RunResult)| c.variant.name() == method)
            .map(|(_, r)| r)
            .collect();
        assert_eq!(runs.len(), SEEDS as usize, "{method}");
        runs
    }

    fn mean(&self, method: &str, metric: impl Fn(&RunResult) -> f64) -> f64 {
        let runs = self.runs(method);
        runs.iter().map(|r| metric(r)).sum::<f64>() / runs.len() as f64
    }

    fn macro_f1(&self, method: &str) -> f64 {
        self.mean(method, |r| r.report.macro_f1)
    }

    /// Nearest-rank 95th percentile of per-batch gradient norms pooled over seeds.
    fn p95_grad_norm(&self, method: &str) -> f64 {
        let mut norms: Vec<f64> = self.runs(method).iter().flat_map(|r| r.trace.grad_norms()).collect();
        norms.sort_by(f64::total_cmp);
        let rank = (0.95 * norms.len() as f64).ceil() as usize;
        norms[rank - 1]
    }
}

fn performance_ordering(p: &Protocol) -> Outcome {
    let (imkws, tent, unadapted) = (p.macro_f1(IMKWS), p.macro_f1(TENT), p.macro_f1(UNADAPTED));
    let kw = |m| p.mean(m, |r| r.report.keyword_f1);
    let nk = |m| p.mean(m, |r| r.report.nonkeyword_f1);
    let nk_drop = nk(TENT) - nk(IMKWS);
    let pass = imkws > tent
        && tent > unadapted
        && kw(IMKWS) >= kw(TENT)
        && nk_drop <= 0.01
        && p.elapsed < Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "macro F1 imkws {imkws:.4} tent {tent:.4} unadapted {unadapted:.4}; keyword F1 imkws {:.4} tent {:.4}; \
             non-keyword drop {:.2} points; {:.1?} for all variants",
            kw(IMKWS),
            kw(TENT),
            100.0 * nk_drop,
            p.elapsed
        ),
    )
}

fn gradient_tail(p: &Protocol) -> Outcome {
    let with = p.p95_grad_norm(IMKWS);
    let without = p.p95_grad_norm("imkws-no-consistency");
    outcome(with <= without, format!("p95 grad norm with {with:.4}, without {without:.4}"))
}

fn ablation_ordering(p: &Protocol) -> Outcome {
    let full = p.macro_f1(IMKWS);
    let mut detail = format!("full {full:.4}");
    let mut pass = true;
    for name in ABLATIONS {
        let v = p.macro_f1(name);
        // Ties within 0.2 points are allowed.
        pass &= v - full <= 0.002;
        detail.push_str(&format!(", {name} {v:.4}"));
    }
    outcome(pass, detail)
}

/// Upper 1% point of chi-square with 3 degrees of freedom.
const CHI2_99_DF3: f64 = 11.344866730144373;

fn stream_statistics() -> Outcome {
    let mut detail = String::new();
    let mut pass = true;
    for ratio in [4.0, 8.0] {
        let cfg = StreamConfig {
            ratio,
            frames: 4,
            bins: 4,
            n_batches: 100,
            batch_size: 100,
            seed: 9,
            ..StreamConfig::default()
        };
        let templates = make_class_templates(4, 4, 4, 0, &TemplateShape::default()).unwrap();
        let mut counts = [0u64; 4];
        for b in generate_stream(&cfg, &templates).unwrap() {
            for y in b.into_parts().1 {
                counts[y.unwrap()] += 1;
            }
        }
        let n = counts.iter().sum::<u64>() as f64;
        let expected = [1.0 / (3.0 * (1.0 + ratio)), 1.0 / (3.0 * (1.0 + ratio)), 1.0 / (3.0 * (1.0 + ratio)), ratio / (1.0 + ratio)];
        let chi2: f64 = counts
            .iter()
            .zip(expected)
            .map(|(&o, p)| (o as f64 - n * p).powi(2) / (n * p))
            .sum();
        pass &= chi2 < CHI2_99_DF3;
        detail.push_str(&format!("1:{ratio} chi2 {chi2:.2}; "));
    }

    let templates = make_class_templates(4, 20, 8, 1, &TemplateShape::default()).unwrap();
    let floor = floor_profile(SeedStream::new(2), 8);
    let mut rng = SeedStream::new(3).rng();
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let x = sample_example(&templates, i % 4, 1.0, &mut rng).unwrap();
        let noise = environment_noise(&mut rng, 20, NoiseKind::Structured, &floor, 3.0);
        for snr in [-10.0, 0.0, 10.0] {
            let mixed = mix_noise_at_snr(&x, &noise, snr).unwrap();
            let added = mixed.data() - x.data();
            let pn = added.iter().map(|v| v * v).sum::<f64>() / added.len() as f64;
            let want = 10f64.powf(snr / 10.0);
            worst = worst.max(((x.power() / pn) - want).abs() / want);
        }
    }
    pass &= worst < 1e-9;
    detail.push_str(&format!("SNR max rel err {worst:.2e}"));
    outcome(pass, detail)
}

fn files_under(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn cli_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_imkws");
    let tmp = tempfile::tempdir().unwrap();
    let small = [
        "-T", "12", "-F", "8", "--n-batches", "4", "--n-per-class", "30", "--hidden", "8", "--epochs", "4",
    ];
    let masks = ["--batch-size", "32", "--max-time-len", "3", "--max-freq-len", "2"];
    let run = |tag: &str| -> Result<BTreeMap<String, Vec<u8>>, String> {
        let root = tmp.path().join(tag);
        let invocations: Vec<Vec<String>> = vec![
            ["sweep", "--methods", "unadapted,tent,imkws", "--ratios", "4,8", "--seeds", "0,1", "--seed", "7"]
                .iter()
                .chain(&small)
                .chain(&masks)
                .map(|s| s.to_string())
                .chain(["--out-dir".into(), root.join("sweep").display().to_string()])
                .collect(),
            ["adapt", "--method", "imkws", "--seed", "3"]
                .iter()
                .chain(&small)
                .chain(&masks)
                .map(|s| s.to_string())
                .chain(["--out-dir".into(), root.join("adapt").display().to_string()])
                .collect(),
            ["gradcheck", "--seed", "5", "--trials", "50"]
                .iter()
                .map(|s| s.to_string())
                .chain(["--out-dir".into(), root.join("gradcheck").display().to_string()])
                .collect(),
        ];
        for args in invocations {
            let out = Command::new(bin).args(&args).output().map_err(|e| e.to_string())?;
            if !out.status.success() {
                return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
            }
        }
        Ok(files_under(&root))
    };
    match (run("a"), run("b")) {
        (Ok(a), Ok(b)) => {
            let csvs = a.keys().filter(|k| k.ends_with(".csv")).count();
            outcome(a == b && csvs > 0, format!("{csvs} CSV files compared, identical: {}", a == b))
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

/// Per-class F1 by enumerating every (truth, prediction) pair.
fn brute_force_f1(rows: &[Vec<u64>]) -> (Vec<f64>, f64, f64) {
    let c = rows.len();
    let mut pairs = Vec::new();
    for (t, row) in rows.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            pairs.extend(std::iter::repeat_n((t, p), n as usize));
        }
    }
    let per_class: Vec<f64> = (0..c)
        .map(|k| {
            let tp = pairs.iter().filter(|&&(t, p)| t == k && p == k).count();
            let predicted = pairs.iter().filter(|&&(_, p)| p == k).count();
            let actual = pairs.iter().filter(|&&(t, _)| t == k).count();
            let prec = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
            let rec = if actual == 0 { 0.0 } else { tp as f64 / actual as f64 };
            if prec + rec == 0.0 {
                0.0
            } else {
                2.0 * prec * rec / (prec + rec)
            }
        })
        .collect();
    let macro_f1 = per_class.iter().sum::<f64>() / c as f64;
    let correct = pairs.iter().filter(|(t, p)| t == p).count();
    (per_class, macro_f1, correct as f64 / pairs.len() as f64)
}

fn f1_oracle() -> Outcome {
    let mut rng = SeedStream::new(11).rng();
    let mut mismatches = 0;
    for _ in 0..1000 {
        let c = rng.random_range(2..=6);
        let mut rows: Vec<Vec<u64>> = (0..c).map(|_| (0..c).map(|_| rng.random_range(0..12)).collect()).collect();
        if rows.iter().flatten().all(|&v| v == 0) {
            rows[0][0] = 1;
        }
        let got = ConfusionMatrix::from_rows(&rows).unwrap().f1_scores().unwrap();
        let (per_class, macro_f1, micro_f1) = brute_force_f1(&rows);
        if got.per_class != per_class || got.macro_f1 != macro_f1 || got.micro_f1 != micro_f1 {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches in 1000 matrices"))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        }
    }
}

fn main() -> ExitCode {
    let protocol = panic::catch_unwind(Protocol::run).ok();
    let with_protocol = |f: fn(&Protocol) -> Outcome| -> Outcome {
        match &protocol {
            Some(p) => guarded(|| f(p)),
            None => outcome(false, "protocol sweep failed"),
        }
    };
    let results: Vec<(&str, Outcome)> = vec![
        ("decomposition identity", guarded(decomposition_identity)),
        ("decoupled gradient vs finite differences", guarded(dem_gradient_identity)),
        ("throttling margin", guarded(throttling_margin)),
        ("model gradient checks", guarded(model_gradients)),
        ("reduction to Tent", guarded(reduction_to_tent)),
        ("performance ordering at 1:8, -10 dB", with_protocol(performance_ordering)),
        ("gradient tail with consistency", with_protocol(gradient_tail)),
        ("ablation ordering", with_protocol(ablation_ordering)),
        ("stream statistics", guarded(stream_statistics)),
        ("CLI determinism", guarded(cli_determinism)),
        ("F1 oracle", guarded(f1_oracle)),
    ];
    let mut failed = 0;
    for (i, (name, o)) in results.iter().enumerate() {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {verdict} {name}: {}", i + 1, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
