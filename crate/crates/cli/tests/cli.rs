use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deepssm_cli::config::Config;
use deepssm_cli::dataset::{read_vector, Dataset};
use deepssm_core::downstream::fit_ppca;
use deepssm_core::evaluate::rmse_report;
use deepssm_core::kde::KdeModel;
use deepssm_core::shape::{read_correspondences, write_particles};
use deepssm_core::ShapeModel;

const TINY: &str = r#"
[synth]
count = 14
test_count = 4
[synth.family]
num_particles = 16
grid = { dims = [16, 16, 16], spacing = [4.0, 4.0, 4.0], origin = [-30.0, -30.0, -30.0] }
[augment]
count = 10
[train]
epochs = 4
batch_size = 4
num_modes = 3
architecture = { conv_channels = [2, 4], pool_after = [1, 2], fc_features = [8], kernel = 3 }
latent_dim = 4
ae_hidden = 16
ae_epochs = 2
tflank_epochs = 2
joint_epochs = 1
[infer]
timing_repeats = 2
"#;

fn deepssm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepssm")).args(args).current_dir(cwd).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = deepssm(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn workspace(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), format!("{TINY}\n{extra}")).unwrap();
    ok(&["synth", "--config", "c.toml", "--out", "s"], dir.path());
    dir
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run.json" {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn assert_same_tree(a: &Path, b: &Path) {
    let (fa, fb) = (files_under(a), files_under(b));
    assert_eq!(fa, fb);
    for f in fa {
        assert!(fs::read(a.join(&f)).unwrap() == fs::read(b.join(&f)).unwrap(), "{} differs", f.display());
    }
}

#[test]
fn missing_or_invalid_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = deepssm(&["synth", "--config", "nowhere.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.toml"));
    fs::write(dir.path().join("bad.toml"), "[train]\nvariant = \"deep\"\n").unwrap();
    let out = deepssm(&["train", "--config", "bad.toml", "--data", "x"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(deepssm(&["explode"], dir.path()).status.code(), Some(2));
    fs::write(dir.path().join("split.toml"), "[synth]\ncount = 3\ntest_count = 3\n").unwrap();
    assert_eq!(deepssm(&["synth", "--config", "split.toml"], dir.path()).status.code(), Some(2));
}

#[test]
fn all_four_variants_parse() {
    let dir = tempfile::tempdir().unwrap();
    for v in ["base", "tl", "base-focal", "tl-focal"] {
        let p = dir.path().join(format!("{v}.toml"));
        fs::write(&p, format!("[train]\nvariant = \"{v}\"\n")).unwrap();
        assert_eq!(Config::load(Some(&p)).unwrap().train.variant.name(), v);
    }
}

#[test]
fn architecture_presets_parse_by_name() {
    use deepssm_core::networks::Architecture;
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.toml");
    fs::write(&p, "[train]\narchitecture = \"full\"\n").unwrap();
    assert_eq!(Config::load(Some(&p)).unwrap().train.architecture, Architecture::full());
    fs::write(&p, "[train]\narchitecture = \"huge\"\n").unwrap();
    assert!(Config::load(Some(&p)).is_err());
    assert_eq!(Config::default().train.architecture, Architecture::desk());
}

#[test]
fn shipped_config_presets_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let full = Config::load(Some(&root.join("full.toml"))).unwrap();
    assert_eq!((full.train.ae_epochs, full.train.tflank_epochs, full.train.joint_epochs), (5000, 100, 50));
    let desk = Config::load(Some(&root.join("desk.toml"))).unwrap();
    assert_eq!(desk.train, Config::default().train);
}

#[test]
fn synth_writes_a_complete_manifest_and_is_reproducible() {
    let dir = workspace("");
    let train = Dataset::load(&dir.path().join("s/train")).unwrap();
    let test = Dataset::load(&dir.path().join("s/test")).unwrap();
    assert_eq!((train.entries.len(), test.entries.len()), (10, 4));
    for e in train.entries.iter().chain(&test.entries) {
        let root = if train.entries.contains(e) { &train.root } else { &test.root };
        assert!(root.join(e.volume.as_ref().unwrap()).exists());
        assert_eq!(read_correspondences(&root.join(&e.particles)).unwrap().len(), 16);
    }
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("s/run.json")).unwrap()).unwrap();
    for f in run["outputs"].as_array().unwrap() {
        assert!(dir.path().join("s").join(f.as_str().unwrap()).exists());
    }
    ok(&["synth", "--config", "c.toml", "--out", "again"], dir.path());
    assert_same_tree(&dir.path().join("s"), &dir.path().join("again"));
    // a different seed changes the data
    ok(&["synth", "--config", "c.toml", "--out", "other", "--seed", "5"], dir.path());
    assert_ne!(fs::read(dir.path().join("s/train/particles/sample_0000.particles")).unwrap(), fs::read(dir.path().join("other/train/particles/sample_0000.particles")).unwrap());
}

#[test]
fn augment_reports_count_downsampling_and_bandwidth() {
    let dir = workspace("");
    ok(&["augment", "--config", "c.toml", "--input", "s/train", "--out", "a"], dir.path());
    let a = Dataset::load(&dir.path().join("a")).unwrap();
    assert_eq!(a.entries.len(), 10 + 10);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a/augment.json")).unwrap()).unwrap();
    assert_eq!(summary["count"], 10);
    let shapes = Dataset::load(&dir.path().join("s/train")).unwrap().shapes().unwrap();
    // the linear family spans six directions, below the N - 1 = 9 the sample count allows
    let model = ShapeModel::fit_full(&shapes).unwrap();
    let rank = model.eigenvalues.iter().filter(|&&l| l > 0.0).count();
    assert_eq!(rank, 6);
    assert_eq!(summary["num_modes"], 6);
    let model = model.truncated(6).unwrap();
    let scores: Vec<Vec<f64>> = shapes.iter().map(|s| model.project(s).unwrap()).collect();
    assert_eq!(summary["bandwidth"].as_f64().unwrap(), KdeModel::fit(scores).unwrap().bandwidth);

    fs::write(dir.path().join("d.toml"), format!("{TINY}\n").replace("count = 10\n", "count = 10\ndownsample = 2\ninclude_originals = false\n")).unwrap();
    ok(&["augment", "--config", "d.toml", "--input", "s/train", "--out", "half"], dir.path());
    let half = Dataset::load(&dir.path().join("half")).unwrap();
    assert_eq!(half.entries.len(), 10);
    let full = a.volume(&a.entries[0]).unwrap();
    let small = half.volume(&half.entries[0]).unwrap();
    assert_eq!(small.grid.dims, [8, 8, 8]);
    assert_eq!(small.grid.spacing, full.grid.spacing.map(|s| 2.0 * s));
}

#[test]
fn train_history_resume_infer_and_evaluate() {
    let dir = workspace("");
    let p = dir.path();
    ok(&["augment", "--config", "c.toml", "--input", "s/train", "--out", "a"], p);
    ok(&["train", "--config", "c.toml", "--data", "a", "--out", "full"], p);
    let history = fs::read_to_string(p.join("full/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 4);

    fs::write(p.join("pause.toml"), TINY.replace("epochs = 4\n", "epochs = 4\nstop_after_epoch = 2\n")).unwrap();
    ok(&["train", "--config", "pause.toml", "--data", "a", "--out", "part"], p);
    assert_eq!(fs::read_to_string(p.join("part/history.csv")).unwrap().lines().count(), 3);
    ok(&["train", "--config", "c.toml", "--data", "a", "--out", "resumed", "--resume", "part/model.ckpt"], p);
    assert_same_tree(&p.join("full"), &p.join("resumed"));

    let stdout = ok(&["infer", "--config", "c.toml", "--model", "full/model.ckpt", "--input", "s/test", "--out", "pred"], p);
    assert!(stdout.contains("inference time: median"), "{stdout}");
    let pred = Dataset::load(&p.join("pred")).unwrap();
    assert_eq!(pred.entries.len(), 4);
    assert_eq!(pred.shape(&pred.entries[0]).unwrap().len(), 16);
    assert_eq!(pred.descriptor(&pred.entries[0]).unwrap().len(), 3);

    ok(&["evaluate", "--pred", "pred", "--truth", "s/test", "--out", "ev"], p);
    let csv = fs::read_to_string(p.join("ev/rmse.csv")).unwrap();
    let truth = Dataset::load(&p.join("s/test")).unwrap().shapes().unwrap();
    let report = rmse_report(&pred.shapes().unwrap(), &truth).unwrap();
    let avg: f64 = csv.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(avg, report.average_rmse);
    assert!(p.join("ev/surface.csv").exists());

    ok(&["evaluate", "--pred", "s/test", "--truth", "s/test", "--out", "same"], p);
    let csv = fs::read_to_string(p.join("same/rmse.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",0")), "{csv}");

    // a single volume file works too
    ok(&["infer", "--config", "c.toml", "--model", "full/model.ckpt", "--input", "s/test/volumes/sample_0010.raw", "--out", "one"], p);
    assert_eq!(read_correspondences(&p.join("one/particles/sample_0010.particles")).unwrap().len(), 16);
}

#[test]
fn tl_training_and_latent_swim() {
    let dir = workspace("");
    let p = dir.path();
    fs::write(p.join("tl.toml"), TINY.replace("[train]\n", "[train]\nvariant = \"tl-focal\"\n")).unwrap();
    ok(&["augment", "--config", "tl.toml", "--input", "s/train", "--out", "a"], p);
    ok(&["train", "--config", "tl.toml", "--data", "a", "--out", "m"], p);
    assert_eq!(fs::read_to_string(p.join("m/history.csv")).unwrap().lines().count(), 1 + 5);
    ok(&["analyze", "swim", "--config", "tl.toml", "--model", "m/model.ckpt", "--group-a", "s/train", "--group-b", "s/test", "--out", "sw"], p);
    assert!(p.join("sw/swim/step_004.particles").exists());
    // a Base model cannot swim
    ok(&["train", "--config", "c.toml", "--data", "a", "--out", "base"], p);
    let out = deepssm(&["analyze", "swim", "--model", "base/model.ckpt", "--group-a", "s/train", "--group-b", "s/test", "--out", "x"], p);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mismatched_predictions_fail_evaluation() {
    let dir = workspace("");
    let p = dir.path();
    fs::create_dir_all(p.join("short/particles")).unwrap();
    fs::copy(p.join("s/test/dataset.jsonl"), p.join("short/dataset.jsonl")).unwrap();
    let test = Dataset::load(&p.join("s/test")).unwrap();
    for (i, e) in test.entries.iter().enumerate() {
        let shape = test.shape(e).unwrap();
        let keep = if i == 0 { 10 } else { 16 };
        write_particles(&p.join("short").join(&e.particles), &shape.points[..keep]).unwrap();
    }
    let out = deepssm(&["evaluate", "--pred", "short", "--truth", "s/test", "--out", "x"], p);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("points"));
    let out = deepssm(&["evaluate", "--pred", "s/train", "--truth", "s/test", "--out", "y"], p);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn severity_of_controls_and_the_mean() {
    let dir = workspace("");
    let p = dir.path();
    ok(&["severity", "--controls", "s/train", "--query", "s/test", "--out", "sev"], p);
    let csv = fs::read_to_string(p.join("sev/severity.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    assert!(p.join("sev/field.particles").exists());

    let controls = Dataset::load(&p.join("s/train")).unwrap().shapes().unwrap();
    let model = fit_ppca(&controls, 0.95).unwrap();
    let mean: Vec<[f64; 3]> = model.mean.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    write_particles(&p.join("mean.particles"), &mean).unwrap();
    ok(&["severity", "--controls", "s/train", "--query", "mean.particles", "--out", "m"], p);
    let score: f64 = fs::read_to_string(p.join("m/severity.csv")).unwrap().lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!(score < 1e-6, "{score}");

    // leave-one-out: a held-out control scores like the other held-out controls
    let loo = |i: usize| {
        let rest: Vec<_> = controls.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, c)| c.clone()).collect();
        fit_ppca(&rest, 0.95).unwrap().severity(&controls[i]).unwrap()
    };
    let others: Vec<f64> = (1..controls.len()).map(loo).collect();
    let held = &Dataset::load(&p.join("s/train")).unwrap().entries[0];
    fs::create_dir_all(p.join("loo")).unwrap();
    let lines: Vec<String> = fs::read_to_string(p.join("s/train/dataset.jsonl")).unwrap().lines().map(String::from).collect();
    fs::write(p.join("s/train/dataset.jsonl"), lines[1..].join("\n") + "\n").unwrap();
    ok(&["severity", "--controls", "s/train", "--query", &format!("s/train/{}", held.particles), "--out", "loo"], p);
    let s0: f64 = fs::read_to_string(p.join("loo/severity.csv")).unwrap().lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(s0, loo(0));
    let (lo, hi) = others.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    assert!(s0 >= 0.5 * lo && s0 <= 2.0 * hi, "{s0} vs [{lo}, {hi}]");

    let out = deepssm(&["severity", "--controls", "nowhere", "--query", "mean.particles", "--out", "z"], p);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn difference_and_classification() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let bump = format!("{TINY}\n").replace("num_particles = 16\n", "num_particles = 16\nkind = \"ellipsoid_bump\"\npathological_fraction = 0.5\nradii_min = [12.0, 10.0, 8.0]\nradii_max = [16.0, 14.0, 12.0]\ncenter_jitter = 2.0\n").replace("count = 14\ntest_count = 4", "count = 40\ntest_count = 12");
    fs::write(p.join("b.toml"), bump).unwrap();
    ok(&["synth", "--config", "b.toml", "--out", "s"], p);
    ok(&["analyze", "difference", "--group-a", "s/train", "--group-b", "s/train", "--out", "d0"], p);
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("d0/run.json")).unwrap()).unwrap();
    assert_eq!(run["summary"]["max_displacement"], 0.0);

    ok(&["augment", "--config", "b.toml", "--input", "s/train", "--out", "a"], p);
    ok(&["train", "--config", "b.toml", "--data", "a", "--out", "m"], p);
    ok(&["infer", "--config", "b.toml", "--model", "m/model.ckpt", "--input", "s/train", "--out", "ptrain"], p);
    ok(&["infer", "--config", "b.toml", "--model", "m/model.ckpt", "--input", "s/test", "--out", "ptest"], p);
    fs::write(p.join("k.toml"), "[analyze]\ntrim = 2\n[analyze.classifier]\nepochs = 50\n").unwrap();
    ok(&["analyze", "classify", "--config", "k.toml", "--train", "ptrain", "--test", "ptest", "--out", "cls"], p);
    let preds = fs::read_to_string(p.join("cls/predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 1 + 12);
    assert_eq!(read_vector(&p.join("cls/selected_features.txt")).unwrap().len(), 2);
    ok(&["severity", "--controls", "s/train", "--query", "s/test", "--model", "m/model.ckpt", "--out", "sv"], p);
    assert!(p.join("sv/metrics.json").exists());
}
