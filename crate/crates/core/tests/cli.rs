use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use anlab::arch::{ModelConfig, PresetSize, Variant};
use anlab::cli::RunConfig;
use anlab::instrument::{read_metrics, series_of};

const BIN: &str = env!("CARGO_BIN_EXE_anlab");

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn anlab(root: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("AN_LAB_OUT", root)
        .current_dir(root)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path, name: &str, variant: &str, extra_model: &str, steps: u64) -> PathBuf {
    let p = dir.join(format!("{name}.json"));
    let text = format!(
        r#"{{
  "schema_version": 1,
  "model": {{"variant": "{variant}", "d_model": 16, "n_layers": 1, "n_heads": 1,
             "vocab_size": 256, "context_len": 32{extra_model}}},
  "optim": {{"lr": 0.01, "total_steps": {steps}}},
  "data": {{"source": {{"kind": "synthetic", "bytes": 50000, "seed": 2}},
            "batch_size": 2, "seq_len": 16}},
  "train": {{"trace_every": 2, "checkpoint_every": 5}},
  "seed": 3,
  "output_dir": "runs/{name}"
}}"#
    );
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn smoke_run_loss_falls_in_every_window() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = repo().join("configs/smoke/angpt.json");
    let o = anlab(dir.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("runs/smoke/angpt");
    for f in ["config.json", "metrics.jsonl", "final.anck", "summary.json", "loss.svg"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let loss: Vec<f64> = series_of(&read_metrics(&run.join("metrics.jsonl")).unwrap(), "train/loss")
        .into_iter()
        .map(|p| p.1)
        .collect();
    assert_eq!(loss.len(), 200);
    let w: Vec<f64> = loss.chunks(20).map(|c| c.iter().sum::<f64>() / 20.0).collect();
    for k in 1..w.len() {
        assert!(w[k] < w[k - 1], "window {k}: {:?}", w);
    }
}

#[test]
fn reruns_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "det", "angpt", "", 12);
    let c = cfg.to_str().unwrap();
    assert!(anlab(dir.path(), &["train", "--config", c, "--out", "a"]).status.success());
    assert!(anlab(dir.path(), &["train", "--config", c, "--out", "b"]).status.success());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for f in ["metrics.jsonl", "final.anck", "checkpoints/step_000005.anck", "checkpoints/step_000010.anck"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    // The persisted config reproduces the run.
    let again = a.join("config.json");
    assert!(anlab(dir.path(), &["train", "--config", again.to_str().unwrap(), "--out", "c"]).status.success());
    assert_eq!(
        std::fs::read(a.join("metrics.jsonl")).unwrap(),
        std::fs::read(dir.path().join("c/metrics.jsonl")).unwrap()
    );
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "envrun", "gpt_plus", "", 3);
    let elsewhere = tempfile::tempdir().unwrap();
    let o = Command::new(BIN)
        .args(["train", "--config", cfg.to_str().unwrap()])
        .env("AN_LAB_OUT", dir.path())
        .current_dir(elsewhere.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("runs/envrun/final.anck").exists());
    assert_eq!(std::fs::read_dir(elsewhere.path()).unwrap().count(), 0);
}

#[test]
fn persisted_config_is_materialized() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "mat", "gpt_plus", "", 2);
    assert!(anlab(dir.path(), &["train", "--config", cfg.to_str().unwrap()]).status.success());
    let text = std::fs::read_to_string(dir.path().join("runs/mat/config.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["optim"]["warmup_fraction"], 0.1);
    assert_eq!(v["optim"]["weight_decay"], 0.1);
    assert_eq!(v["optim"]["beta2"], 0.99);
    assert!(v["model"]["s_init"].is_number() && v["model"]["s_scale"].is_number());
}

#[test]
fn schema_accepts_warmup_fraction_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "w", "gpt_plus", "", 2);
    let text = std::fs::read_to_string(&cfg).unwrap();
    let ok = text.replace(r#""total_steps": 2"#, r#""total_steps": 2, "warmup_fraction": 0.5"#);
    assert!(RunConfig::from_json(&ok).is_ok());
    let bad = text.replace(r#""total_steps": 2"#, r#""total_steps": 2, "warmup": 0.5"#);
    let e = RunConfig::from_json(&bad).unwrap_err().to_string();
    assert!(e.contains("warmup"), "{e}");
    std::fs::write(&cfg, bad).unwrap();
    let o = anlab(dir.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warmup"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(anlab(d, &["--help"]).status.code(), Some(0));
    assert_eq!(anlab(d, &["train", "--help"]).status.code(), Some(0));
    assert_eq!(anlab(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(anlab(d, &["params", "--variant", "angpt", "--size", "7b"]).status.code(), Some(1));
    let o = anlab(d, &["train", "--config", "missing.json"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.json"));
    // Divergence: an absurd learning rate on an unnormalized model.
    let cfg = tiny_config(d, "boom", "gpt_plus", "", 50);
    let text = std::fs::read_to_string(&cfg).unwrap().replace(r#""lr": 0.01"#, r#""lr": 1e30"#);
    std::fs::write(&cfg, text).unwrap();
    let o = anlab(d, &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("step"));
}

#[test]
fn params_prints_groups_and_total() {
    let dir = tempfile::tempdir().unwrap();
    let o = anlab(dir.path(), &["params", "--variant", "gpt_plus", "--size", "32m"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("32.05M"), "{s}");
    let o = anlab(dir.path(), &["params", "--variant", "angpt", "--size", "1b"]);
    assert!(stdout(&o).contains("1.073B"), "{}", stdout(&o));
    let cfg = tiny_config(dir.path(), "p", "ngpt", "", 1);
    let s = stdout(&anlab(dir.path(), &["params", "--config", cfg.to_str().unwrap()]));
    let mut groups = 0u64;
    let mut total = 0u64;
    for line in s.lines() {
        let mut it = line.split_whitespace();
        let (name, n) = (it.next().unwrap(), it.next().unwrap().parse::<u64>().unwrap());
        if name == "total" {
            total = n;
        } else {
            groups += n;
        }
    }
    assert!(total > 0 && total == groups);
}

#[test]
fn factors_report_lists_the_constants() {
    let dir = tempfile::tempdir().unwrap();
    let o = anlab(dir.path(), &["factors", "--d-model", "1024", "--out", "f"]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(dir.path().join("f/factors.csv")).unwrap();
    let row = |n: &str| -> f64 {
        csv.lines()
            .find(|l| l.split(',').next() == Some(n))
            .unwrap_or_else(|| panic!("{n} in {csv}"))
            .split(',')
            .nth(1)
            .unwrap()
            .parse()
            .unwrap()
    };
    assert_eq!(row("nu_qkv"), 4.0);
    assert_eq!(row("nu_uz"), 0.5);
    assert_eq!(row("nu_d"), 2.0);
    assert!((row("nu_acf") - 3.74).abs() < 1e-12);
    assert_eq!(row("nu_p"), 0.25);
    let o = anlab(dir.path(), &["factors", "--d-model", "256", "--samples", "2000", "--out", "g"]);
    assert!(o.status.success());
    assert!(dir.path().join("g/factor_errors.csv").exists());
    assert_eq!(anlab(dir.path(), &["factors", "--d-model", "100", "--d-head", "64"]).status.code(), Some(1));
}

#[test]
fn concentration_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = |o: &'static str| ["concentration", "--dims", "64,256,1024", "--samples", "10000", "--seed", "3", "--out", o];
    assert!(anlab(dir.path(), &args("a")).status.success());
    assert!(anlab(dir.path(), &args("b")).status.success());
    let a = std::fs::read(dir.path().join("a/concentration.csv")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b/concentration.csv")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 4);
    assert!(dir.path().join("a/concentration.svg").exists());
    let o = anlab(dir.path(), &["concentration", "--samples", "10"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn contraction_and_residual_growth_reports() {
    let dir = tempfile::tempdir().unwrap();
    let o = anlab(dir.path(), &["contraction", "--lambdas", "1,9", "--out", "c"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("alpha_star 0.2") && s.contains("rho_max 0.8"), "{s}");
    assert!(dir.path().join("c/contraction.csv").exists());
    let o = anlab(dir.path(), &["residual-growth", "--layers", "16", "--d-model", "64", "--samples", "20", "--out", "r"]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(dir.path().join("r/residual_growth.csv")).unwrap();
    assert_eq!(csv.lines().count(), 17);
}

#[test]
fn analyze_reports_on_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d, "an", "angpt", "", 10);
    let c = cfg.to_str().unwrap();
    // Norm ratio on the initial checkpoint.
    assert!(anlab(d, &["init", "--config", c, "--out", "init.anck"]).status.success());
    let o = anlab(d, &["analyze", "norm-ratio", "--config", c, "--checkpoint", "init.anck", "--out", "nr"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 2);

    assert!(anlab(d, &["train", "--config", c]).status.success());
    let run = "runs/an";
    let o = anlab(d, &["analyze", "robustness", "--run", run, "--length", "32", "--batch", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert!(s.contains("text") && s.contains("repeated"));
    assert!(d.join("runs/an/analysis/robustness.csv").exists());
    assert!(anlab(d, &["analyze", "alpha", "--run", run]).status.success());
    assert!(d.join("runs/an/analysis/alpha.csv").exists());
    assert!(anlab(d, &["analyze", "momentum", "--run", run]).status.success());
    assert!(d.join("runs/an/analysis/momentum.csv").exists());
    let o = anlab(d, &["analyze", "fit", "--metrics", "runs/an/metrics.jsonl", "--series", "train/loss"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("A = ") && stdout(&o).contains("b = "));

    let o = anlab(d, &["analyze", "norm-ratio", "--run", "runs/nothing"]);
    assert_eq!(o.status.code(), Some(3));
    let o = anlab(d, &["analyze", "robustness", "--run", run, "--repeat-token", "999", "--length", "32"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn fit_on_points_file() {
    let dir = tempfile::tempdir().unwrap();
    let pts: String = (1..=6).map(|i| format!("{},{}\n", 10f64.powi(i), 5.0 * 10f64.powi(i).powf(-0.1))).collect();
    std::fs::write(dir.path().join("p.csv"), format!("tokens,loss\n{pts}")).unwrap();
    let o = anlab(dir.path(), &["analyze", "fit", "--points", "p.csv", "--out", "fit"]);
    assert!(o.status.success());
    let s = stdout(&o);
    let b: f64 = s.lines().find_map(|l| l.strip_prefix("b = ")).unwrap().parse().unwrap();
    assert!((b + 0.1).abs() < 1e-10);
    assert!(dir.path().join("fit/fit.csv").exists());
}

#[test]
fn compare_same_config_differs_by_zero() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny_config(dir.path(), "ca", "angpt", "", 6);
    let o = anlab(
        dir.path(),
        &["compare", "--a", a.to_str().unwrap(), "--b", a.to_str().unwrap(), "--out", "cmp"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("+0.000%") || stdout(&o).contains("-0.000%"), "{}", stdout(&o));
    assert!(dir.path().join("cmp/compare.csv").exists());
    let r = anlab::cli::compare(
        &RunConfig::load(&a).unwrap(),
        &RunConfig::load(&a).unwrap(),
        None,
        Some(&dir.path().join("cmp2")),
    )
    .unwrap();
    assert_eq!(r.rel_diff, 0.0);
}

#[test]
fn no_lerp_variant_uses_the_classic_factor() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "nl", "angpt", r#", "use_lerp": false"#, 4);
    let rc = RunConfig::load(&cfg).unwrap();
    assert!(!rc.model.use_lerp);
    let f = anlab::normfactor::resolve_factors(&rc.model);
    assert_eq!(f.residual_scale(0.3), std::f64::consts::FRAC_1_SQRT_2);
    assert!(anlab(dir.path(), &["train", "--config", cfg.to_str().unwrap()]).status.success());
}

#[test]
fn shipped_presets_match_the_builtin_table() {
    let sizes = [
        ("32m", PresetSize::M32),
        ("62m", PresetSize::M62),
        ("125m", PresetSize::M125),
        ("250m", PresetSize::M250),
        ("0.5b", PresetSize::B05),
        ("1b", PresetSize::B1),
    ];
    let variants = [("gpt_plus", Variant::GptPlus), ("ngpt", Variant::Ngpt), ("angpt", Variant::Angpt)];
    for (sn, s) in sizes {
        for (vn, v) in variants {
            let p = repo().join(format!("configs/presets/{sn}_{vn}.json"));
            let rc = RunConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            assert_eq!(rc.model, ModelConfig::preset(v, s), "{}", p.display());
            // Budgets follow the GPT+ count so all variants see the same tokens.
            let n = anlab::arch::param_count(&ModelConfig::preset(Variant::GptPlus, s)) as f64;
            let want = (20.0 * n / (256.0 * 2048.0)).round() as u64;
            assert!(rc.optim.total_steps.abs_diff(want) <= 1, "{}", p.display());
        }
    }
    for v in ["angpt", "gpt_plus", "ngpt"] {
        let rc = RunConfig::load(&repo().join(format!("configs/smoke/{v}.json"))).unwrap();
        rc.validate().unwrap();
        assert_eq!((rc.model.d_model, rc.model.n_layers), (64, 2));
    }
}
