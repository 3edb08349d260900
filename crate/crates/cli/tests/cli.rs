use std::path::Path;
use std::process::{Command, Output};

use scarcascade::config::RunConfig;
use scarcascade::data::{load_mask, ClassScheme, DatasetManifest, SCAR};

const TINY: &[&str] = &[
    "--profile=custom",
    "--set=preprocess.crop_size=[32,32]",
    "--set=preprocess.depth=3",
    "--set=synth.count=10",
    "--set=synth.shape=[5,64,64]",
    "--set=network_2d.levels=2",
    "--set=network_2d.base_width=4",
    "--set=network_2d.max_width=8",
    "--set=network_2d.deep_supervision_levels=[0]",
    "--set=network_3d.levels=2",
    "--set=network_3d.base_width=4",
    "--set=network_3d.max_width=8",
    "--set=network_3d.deep_supervision_levels=[0]",
    "--set=train.epochs=2",
    "--set=train.steps_per_epoch=1",
    "--set=train.batch_size_2d=2",
    "--set=train.batch_size_3d=1",
    "--set=train.micro_batch_2d=2",
    "--set=train.checkpoint_interval=0",
    "--set=perturbation.enable_after_epoch=0",
];

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scarcascade"))
        .args(args)
        .args(TINY)
        .arg("--out")
        .arg(out)
        .env_remove("SCARCASCADE_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = run(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn synth(out: &Path) -> String {
    ok(out, &["synth"]);
    out.join("synth/manifest.json").display().to_string()
}

fn error_json(o: &Output) -> serde_json::Value {
    let line = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(line.trim().lines().last().unwrap()).expect("machine-readable error")
}

#[test]
fn crossval_writes_fold_directories_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path());
    let csv = ok(dir.path(), &["crossval", "--manifest", &m]);
    let root = dir.path().join("crossval");
    for k in 0..5 {
        let fd = root.join(format!("fold_{k}"));
        assert!(fd.join("planar/final.ckpt").exists());
        assert!(fd.join("cascade/final.ckpt").exists());
        assert!(fd.join("run_config.json").exists());
        assert!(root.join(format!("predictions/fold_{k}/run_config.json")).exists());
    }
    let written = std::fs::read_to_string(root.join("report.csv")).unwrap();
    assert_eq!(written, csv);
    let mut lines = written.lines();
    assert_eq!(lines.next().unwrap(), "target,metric,unit,fold_1,fold_2,fold_3,fold_4,fold_5,mean,sd");
    assert!(written.contains("\ninfarction,DSC,%,"));
    assert!(written.contains("\nmvo,AVDR,%,"));
    assert!(root.join("report.json").exists());
}

#[test]
fn every_output_directory_holds_the_config_that_made_it() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path());
    ok(dir.path(), &["train2d", "--fold", "1", "--manifest", &m, "--seed", "9"]);
    let saved = RunConfig::load(&dir.path().join("fold_1/planar/run_config.json")).unwrap();
    assert_eq!(saved.seed, 9);
    assert_eq!(saved.train.epochs, 2);
    assert_eq!(saved.manifest.as_deref(), Some(Path::new(&m)));

    let again = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("fold_1/planar/run_config.json");
    let o = Command::new(env!("CARGO_BIN_EXE_scarcascade"))
        .args(["train2d", "--fold", "1", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(again.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = std::fs::read(dir.path().join("fold_1/planar/final.ckpt")).unwrap();
    let b = std::fs::read(again.path().join("fold_1/planar/final.ckpt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn vanilla_and_perturbed_predictions_are_comparable() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path());
    let base = ["--fold", "0", "--manifest", m.as_str()];
    let with = |extra: &[&str]| -> Vec<String> { extra.iter().chain(&base).map(|s| s.to_string()).collect() };
    for args in [
        with(&["train2d"]),
        with(&["train-cascade"]),
        with(&["train-cascade", "--vanilla"]),
        with(&["predict"]),
        with(&["predict", "--vanilla"]),
    ] {
        ok(dir.path(), &args.iter().map(String::as_str).collect::<Vec<_>>());
    }
    let a = dir.path().join("predictions_fold_0");
    let b = dir.path().join("predictions_vanilla_fold_0");
    let csv = ok(
        dir.path(),
        &with(&["evaluate", "--pred-dir", a.to_str().unwrap(), "--compare", b.to_str().unwrap()])
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>(),
    );
    assert!(csv.starts_with("target,metric,unit,fold_1,mean,sd"));
    let cmp: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("evaluation/comparison.json")).unwrap()).unwrap();
    assert_eq!(cmp.as_array().unwrap().len(), 9);
    assert_eq!(cmp[0]["n"], 2);
}

#[test]
fn fake_scar_on_a_healthy_case() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path());
    let manifest = DatasetManifest::load(Path::new(&m)).unwrap();
    let healthy = manifest
        .entries
        .iter()
        .find(|e| load_mask(e.mask_path.as_ref().unwrap(), ClassScheme::Emidec).unwrap().count(SCAR) == 0)
        .expect("a healthy phantom");
    let stdout = ok(dir.path(), &["perturb", "--op", "fake_scar", "--case", &healthy.case_id, "--manifest", &m]);
    let record: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(record["operator"], "fake_scar");
    assert!(record["affected_voxels"].as_u64().unwrap() > 0);

    let out = dir.path().join(format!("perturb/{}_fake_scar", healthy.case_id));
    let before = load_mask(&out.join("before.u8"), ClassScheme::Emidec).unwrap();
    let after = load_mask(&out.join("after.u8"), ClassScheme::Emidec).unwrap();
    assert_eq!(before.count(SCAR), 0);
    assert_eq!(after.count(SCAR) as u64, record["affected_voxels"].as_u64().unwrap());
    let z = record["slice_index"].as_u64().unwrap() as usize;
    for s in 0..after.shape()[0] {
        if s != z {
            assert_eq!(after.slice(s), before.slice(s));
        }
    }
    assert!(out.join("run_config.json").exists());
    assert!(out.join("record.json").exists());
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path());

    let o = run(dir.path(), &["train2d", "--manifest", &m, "--set", "train.epochs=-1"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"], "config");

    let o = run(dir.path(), &["train2d", "--manifest", &m, "--set", "train.no_such_field=1"]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(dir.path(), &["train2d", "--manifest", &m, "--device", "cuda"]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(dir.path(), &["perturb", "--manifest", &m, "--op", "smudge", "--case", "phantom_000"]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(dir.path(), &["train2d", "--manifest", "/definitely/not/here.json"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_json(&o)["error"], "data");

    let o = run(dir.path(), &["predict", "--manifest", &m, "--fold", "0"]);
    assert_eq!(o.status.code(), Some(3));

    let o = run(
        dir.path(),
        &["train2d", "--manifest", &m, "--set", "train.lr_2d=1e30", "--set", "train.grad_clip_norm=null", "--set", "train.epochs=4"],
    );
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(error_json(&o)["error"], "numeric");
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_scarcascade"))
        .arg("synth")
        .args(TINY)
        .env("SCARCASCADE_OUTPUT_ROOT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("synth/manifest.json").exists());
    assert!(dir.path().join("synth/run_config.json").exists());
}
