//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use depthcal::data::{gen_synthetic, load_manifest, SynthConfig, SynthOutput};
use depthcal::losses::loss_env;
use depthcal::metrics::EvalConfig;
use depthcal::oracle::masked_inverse_mse;
use depthcal::trainer::{caption_sensitivity, evaluate, fit_global_baseline, pipeline_grad_check, train, Predictor, TrainConfig};
use depthcal::{compute_metrics, fit_oracle, CalibBounds, DepthMap, Envelope, ForwardMode, Sample64, UnconstrainedCalib};

type Files = Vec<(String, Vec<u8>)>;
type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn synth(dir: &Path, cfg: &SynthConfig) -> (SynthOutput, Vec<Sample64>) {
    let out = gen_synthetic(cfg, dir).unwrap();
    let samples = load_manifest(&out.manifest_path).unwrap().load_samples().unwrap();
    (out, samples)
}

fn holdout(out: &SynthOutput) -> Vec<Sample64> {
    load_manifest(out.holdout_path.as_ref().unwrap()).unwrap().load_samples().unwrap()
}

fn oracle_exactness() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { n_samples: 64, height: 64, width: 64, sigma_n: 0.0, seed: 101, ..SynthConfig::default() };
    let (out, samples) = synth(dir.path(), &cfg);
    let b = CalibBounds::default();
    let mut worst: f64 = 0.0;
    for (s, t) in samples.iter().zip(&out.truth) {
        let fit = fit_oracle(&s.y, &s.gt, &b).unwrap();
        worst = worst.max((fit.alpha_ls - t.alpha_star).abs() / t.alpha_star);
        worst = worst.max((fit.beta_ls - t.beta_star).abs() / t.beta_star);
    }
    let ev = evaluate(&samples, &Predictor::Oracle { unclamped: false }, &b, &EvalConfig::default()).unwrap();
    let took = start.elapsed();
    let pass = worst <= 1e-9 && ev.report.abs_rel <= 1e-9 && ev.report.d1 == 1.0 && took < Duration::from_secs(5);
    outcome(pass, format!("max rel err {worst:.2e}, abs_rel {:.2e}, d1 {}, {took:.2?}", ev.report.abs_rel, ev.report.d1))
}

fn oracle_optimality() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { n_samples: 20, sigma_n: 0.05, seed: 102, ..SynthConfig::default() };
    let (_, samples) = synth(dir.path(), &cfg);
    let b = CalibBounds::default();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst_gap = f64::NEG_INFINITY;
    for s in &samples {
        let fit = fit_oracle(&s.y, &s.gt, &b).unwrap();
        let best = masked_inverse_mse(&s.y, &s.gt, fit.alpha_raw, fit.beta_raw, b.eps).unwrap();
        for i in 0..100 {
            // Half the probes are local perturbations, half are broad.
            let (a, bb) = if i % 2 == 0 {
                let scale = 10f64.powf(rng.random_range(-8.0..-1.0));
                (fit.alpha_raw + scale * rng.random_range(-1.0..1.0), fit.beta_raw + scale * rng.random_range(-1.0..1.0))
            } else {
                (rng.random_range(0.01..5.0), rng.random_range(-1.0..3.0))
            };
            let probe = masked_inverse_mse(&s.y, &s.gt, a, bb, b.eps).unwrap();
            worst_gap = worst_gap.max(best - probe);
        }
    }
    outcome(worst_gap <= 1e-12, format!("max (oracle - probe) mse {worst_gap:.2e} over 2000 probes"))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let reports: Vec<_> = (0..5).map(|seed| pipeline_grad_check(seed).unwrap()).collect();
    let took = start.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let pass = reports.iter().all(|r| r.passed) && worst <= 1e-4 && took < Duration::from_secs(30);
    outcome(pass, format!("max rel err {worst:.2e} over 5 seeds, {took:.2?}"))
}

fn envelope_identities() -> Outcome {
    // The second coordinate sits far inside its box, where its term underflows to 0.
    let env = Envelope { mu: [0.3, 0.0], r: [1.2, 900.0] };
    let at_boundary = loss_env(&UnconstrainedCalib::new(0.3 + 1.2, 0.0), &env);
    let below = loss_env(&UnconstrainedCalib::new(0.3 - 1.2, 0.0), &env);
    let far = loss_env(&UnconstrainedCalib::new(0.3 + 1.2 + 1e3, 0.0), &env);
    let ln2 = std::f64::consts::LN_2;
    let (e1, e2, e3) = ((at_boundary - ln2).abs(), (below - ln2).abs(), (far - 1e3).abs());
    outcome(e1 <= 1e-9 && e2 <= 1e-9 && e3 <= 1e-6, format!("boundary err {e1:.1e}/{e2:.1e}, asymptote err {e3:.1e}"))
}

fn metric_identities() -> Outcome {
    let gt: Vec<f64> = (1..=9).map(|i| 0.4 * i as f64).collect();
    let d = |v: &[f64]| DepthMap::new(3, 3, v.to_vec()).unwrap();
    let scaled = |k: f64| d(&gt.iter().map(|v| k * v).collect::<Vec<_>>());
    let cfg = EvalConfig::default();
    let same = compute_metrics(&d(&gt), &d(&gt), &cfg).unwrap();
    let ten = compute_metrics(&scaled(1.1), &d(&gt), &cfg).unwrap();
    let e = compute_metrics(&scaled(std::f64::consts::E), &d(&gt), &cfg).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let mut ok = same.abs_rel == 0.0 && same.rmse == 0.0 && (same.d1, same.d2, same.d3) == (1.0, 1.0, 1.0);
    ok &= close(ten.abs_rel, 0.1) && ten.d1 == 1.0;
    ok &= close(e.rmse_log, 1.0) && close(e.log10, std::f64::consts::LOG10_E) && e.d1 == 0.0 && e.d3 == 0.0;

    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut nested = 0;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let g: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.01..9.0)).collect();
        let p: Vec<f64> = g.iter().map(|v| v * rng.random_range(0.3..3.0)).collect();
        let m = compute_metrics(&DepthMap::new(h, w, p).unwrap(), &DepthMap::new(h, w, g).unwrap(), &cfg).unwrap();
        nested += usize::from(m.d1 <= m.d2 && m.d2 <= m.d3);
    }
    ok &= nested == 1000;
    outcome(ok, format!("rmse_log(e) {:.15}, log10(e) {:.17}, nesting {nested}/1000", e.rmse_log, e.log10))
}

fn protocol_data(dir: &Path, sigma_t: f64, seed: u64) -> (Vec<Sample64>, Vec<Sample64>, depthcal::data::Manifest) {
    let cfg = SynthConfig { n_samples: 512, n_holdout: 128, sigma_n: 0.02, sigma_t, sigma_f: 0.1, seed, ..SynthConfig::default() };
    let (out, train_samples) = synth(dir, &cfg);
    let manifest = load_manifest(&out.manifest_path).unwrap();
    (train_samples, holdout(&out), manifest)
}

fn learning_efficacy() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (train_samples, held, manifest) = protocol_data(dir.path(), 0.1, 106);
    let tc = TrainConfig::default();
    let ck = train::<f64>(&manifest, &tc).unwrap();
    let b = CalibBounds::default();
    let ev = EvalConfig::default();
    let model = evaluate(&held, &Predictor::Model(&ck.model, ForwardMode::Full), &b, &ev).unwrap().report.abs_rel;
    let oracle = evaluate(&held, &Predictor::Oracle { unclamped: false }, &b, &ev).unwrap().report.abs_rel;
    let g = fit_global_baseline(&train_samples, &b).unwrap();
    let global = evaluate(&held, &Predictor::Global(g.clamped()), &b, &ev).unwrap().report.abs_rel;
    let took = start.elapsed();
    let pass = model <= 0.5 * global && model <= 1.5 * oracle && took < Duration::from_secs(600);
    outcome(
        pass,
        format!(
            "abs_rel model {model:.5}, global {global:.5}, oracle {oracle:.5} (model/global {:.3}, model/oracle {:.3}), {took:.2?}",
            model / global,
            model / oracle
        ),
    )
}

fn caption_sensitivity_ordering() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (_, held, manifest) = protocol_data(dir.path(), 0.2, 107);
    let std_of = |mode: ForwardMode| {
        let ck = train::<f64>(&manifest, &TrainConfig { mode, ..TrainConfig::default() }).unwrap();
        caption_sensitivity(&held, &ck.model, mode).unwrap().std_ln_alpha
    };
    let (full, lang, vision) = (std_of(ForwardMode::Full), std_of(ForwardMode::LanguageOnly), std_of(ForwardMode::VisionOnly));
    outcome(full < lang && vision == 0.0, format!("std ln alpha full {full:.3e}, language-only {lang:.3e}, vision-only {vision:e}"))
}

fn run_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_depthcal")).args(args).env("RUST_LOG", "error").output().map(|o| o.status.success()).unwrap_or(false)
}

fn tree_bytes(dir: &Path) -> Files {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn determinism() -> Outcome {
    let run = |root: &Path| -> Option<(Files, Vec<u8>, Vec<u8>)> {
        let s = |p: &Path| p.to_str().unwrap().to_string();
        let (d, ck, rep) = (root.join("d"), root.join("ck"), root.join("r.json"));
        let m = s(&d.join("manifest.jsonl"));
        let ok = run_cli(&["synth", "--out", &s(&d), "--n", "48", "--seed", "108", "--threads", "1"])
            && run_cli(&["train", "--manifest", &m, "--out", &s(&ck), "--epochs", "3", "--seed", "5", "--threads", "1"])
            && run_cli(&["eval", "--manifest", &m, "--ckpt", &s(&ck), "--out", &s(&rep), "--threads", "1"]);
        ok.then(|| (tree_bytes(&ck), std::fs::read(&rep).unwrap(), std::fs::read(root.join("r.csv")).unwrap()))
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    match (run(a.path()), run(b.path())) {
        (Some(x), Some(y)) => {
            let files = x.0.len();
            outcome(x == y, format!("{files} checkpoint files, report and table compared byte for byte"))
        }
        _ => outcome(false, "a CLI step failed".into()),
    }
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("oracle exactness", oracle_exactness),
        ("oracle optimality", oracle_optimality),
        ("gradient suite", gradient_suite),
        ("envelope-loss identities", envelope_identities),
        ("metric identities", metric_identities),
        ("learning efficacy", learning_efficacy),
        ("caption-sensitivity ordering", caption_sensitivity_ordering),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let o = check();
        failed += usize::from(!o.pass);
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
