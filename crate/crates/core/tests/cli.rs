//! Command-line smoke tests on synthetic data.

use std::path::Path;

use rebnn::cli::run_with;

fn run(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = run_with(std::iter::once("rebnn").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("exp.json");
    let text = format!(
        r#"{{"name":"smoke","dataset":{{"name":"synthetic","subset_size":64}},
            "model":{{"widths":[4,8,8],"strides":[2,2,1]}},
            "train":{{"epochs":2,"batch_size":16,"seed":1}},
            "output_dir":{:?}{extra}}}"#,
        dir.join("runs").display().to_string()
    );
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn train_then_eval_with_path_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let (code, out) = run(&["train", "-c", &cfg]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("epoch   1"));
    let run_dir = dir.path().join("runs/smoke");
    for f in ["model.rbnn", "telemetry.csv", "telemetry.json"] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }
    let ckpt = run_dir.join("model.rbnn").display().to_string();
    let (code, out) = run(&[
        "eval",
        "-c",
        &ckpt,
        "-d",
        "synthetic",
        "--subset",
        "64",
        "--check-paths",
    ]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("identical"));
    assert!(out.contains("accuracy"));
}

#[test]
fn ablation_prints_one_row_per_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#","ablation_modes":["adaptive",{"constant":0.0},"off"]"#);
    let (code, out) = run(&["ablate-gamma", "-c", &cfg]);
    assert_eq!(code, 0, "{out}");
    let table: Vec<&str> = out.lines().skip_while(|l| !l.starts_with("mode")).collect();
    assert_eq!(table.len(), 4, "{out}");
    assert!(dir.path().join("runs/smoke/ablation.csv").is_file());
}

#[test]
fn bench_reports_compression() {
    let (code, out) = run(&["bench", "--sizes", "128,1000", "--reps", "21"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("256x256x3x3 conv"));
    assert!(out.contains("dot M=1000"));
}

#[test]
fn missing_dataset_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"name":"x","dataset":{{"name":"mnist","path":{:?}}}}}"#,
            dir.path().join("nope").display().to_string()
        ),
    )
    .unwrap();
    assert_eq!(run(&["train", "-c", &cfg.display().to_string()]).0, 2);
}

#[test]
fn checkpoint_version_mismatch_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    assert_eq!(run(&["train", "-c", &cfg]).0, 0);
    let ckpt = dir.path().join("runs/smoke/model.rbnn");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[4] = 9;
    std::fs::write(&ckpt, bytes).unwrap();
    let (code, _) = run(&["eval", "-c", &ckpt.display().to_string(), "-d", "synthetic"]);
    assert_eq!(code, 4);
}

#[test]
fn diverging_training_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.json");
    std::fs::write(
        &path,
        r#"{"name":"nan","dataset":{"name":"synthetic","subset_size":32},
            "model":{"widths":[4,8,8],"strides":[2,2,1]},
            "train":{"epochs":1,"batch_size":16,"eta":1e30,"schedule":"constant"},
            "output_dir":"/tmp/unused"}"#,
    )
    .unwrap();
    assert_eq!(run(&["train", "-c", &path.display().to_string()]).0, 3);
}

#[test]
fn unknown_config_field_exits_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.json");
    std::fs::write(&path, r#"{"name":"x","dataset":{"name":"synthetic"},"bogus":1}"#).unwrap();
    assert_eq!(run(&["train", "-c", &path.display().to_string()]).0, 1);
}

#[test]
fn eval_on_empty_subset_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    assert_eq!(run(&["train", "-c", &cfg]).0, 0);
    let ckpt = dir.path().join("runs/smoke/model.rbnn").display().to_string();
    let (code, out) = run(&["eval", "-c", &ckpt, "-d", "synthetic", "--subset", "0"]);
    assert_eq!(code, 2, "{out}");
}

#[test]
fn histogram_cadence_follows_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#","histogram_every":2"#);
    assert_eq!(run(&["train", "-c", &cfg]).0, 0);
    let log = rebnn::telemetry::import_json(&dir.path().join("runs/smoke/telemetry.json")).unwrap();
    assert!(log.histograms.iter().all(|h| h.epoch == 1));
    assert_eq!(log.histograms.len(), log.layers.len());
}
