//! End-to-end command behavior through the compiled binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn scanfer(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scanfer"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const TINY_TRAIN: &str = "\
seed = 5
epochs = 2
batch_size = 8
lr_heads = 0.01
lr_backbone = 0.001
augment = off
train_manifest = data/manifest.txt
val_manifest = data/manifest.txt
out_dir = run
";

fn synth(dir: &Path, per_class: usize, seed: u64) {
    let out = scanfer(
        &[
            "synth-data",
            "--out",
            "data",
            "--per-class",
            &per_class.to_string(),
            "--seed",
            &seed.to_string(),
        ],
        dir,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_writes_all_artifacts_and_history_lines() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 2, 3);
    let config = write_config(dir.path(), "run.cfg", TINY_TRAIN);
    let out = scanfer(&["train", "--config", &config], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let run = dir.path().join("run");
    for artifact in ["best.ckpt", "last.ckpt", "history.tsv", "report_train.txt", "report_val.txt"] {
        assert!(run.join(artifact).exists(), "{artifact} missing");
    }
    let history = fs::read_to_string(run.join("history.tsv")).unwrap();
    assert_eq!(history.lines().count(), 2);
    for line in history.lines() {
        assert_eq!(line.split('\t').count(), 10, "history line has 10 fields");
    }
}

#[test]
fn missing_manifest_fails_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "bad.cfg",
        "train_manifest = nowhere/missing.txt\nout_dir = run\n",
    );
    let out = scanfer(&["train", "--config", &config], dir.path());
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing.txt"), "stderr: {stderr}");
}

#[test]
fn same_seed_runs_are_byte_identical() {
    // identical config text in two independent directories
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        synth(dir.path(), 2, 3);
        let config = write_config(dir.path(), "run.cfg", TINY_TRAIN);
        assert!(scanfer(&["train", "--config", &config], dir.path()).status.success());
        let history = fs::read(dir.path().join("run/history.tsv")).unwrap();
        let best = fs::read(dir.path().join("run/best.ckpt")).unwrap();
        let last = fs::read(dir.path().join("run/last.ckpt")).unwrap();
        (history, best, last)
    };
    let (history_a, best_a, last_a) = run();
    let (history_b, best_b, last_b) = run();
    assert_eq!(history_a, history_b);
    assert_eq!(best_a, best_b);
    assert_eq!(last_a, last_b);
}

#[test]
fn eval_after_train_reproduces_the_train_report() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 2, 3);
    let config = write_config(dir.path(), "run.cfg", TINY_TRAIN);
    assert!(scanfer(&["train", "--config", &config], dir.path()).status.success());

    let out = scanfer(
        &[
            "eval",
            "--ckpt",
            "run/best.ckpt",
            "--manifest",
            "data/manifest.txt",
            "--out",
            "eval_report.txt",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let from_train = fs::read_to_string(dir.path().join("run/report_train.txt")).unwrap();
    let from_eval = fs::read_to_string(dir.path().join("eval_report.txt")).unwrap();
    assert_eq!(from_train, from_eval);

    // the printed overall must equal the recomputation from printed values
    let stdout = String::from_utf8_lossy(&out.stdout);
    let get = |key: &str| -> f64 {
        stdout
            .lines()
            .find(|l| l.starts_with(&format!("{key}=")))
            .unwrap()
            .split('=')
            .nth(1)
            .unwrap()
            .parse()
            .unwrap()
    };
    let recomputed = 0.67 * get("macro_f1") + 0.33 * get("accuracy");
    assert!((get("overall") - recomputed).abs() < 1e-12);
}

#[test]
fn corrupted_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.ckpt"), b"XXXX finding nothing here").unwrap();
    let out = scanfer(
        &["eval", "--ckpt", "bad.ckpt", "--manifest", "whatever.txt"],
        dir.path(),
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("magic"), "stderr: {stderr}");
}

#[test]
fn gradcam_outputs_decode_and_rerun_identically() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 2, 3);
    let config = write_config(dir.path(), "run.cfg", TINY_TRAIN);
    assert!(scanfer(&["train", "--config", &config], dir.path()).status.success());

    let args = [
        "gradcam",
        "--ckpt",
        "run/best.ckpt",
        "--image",
        "data/class2_0000.ppm",
        "--out-dir",
        "maps",
    ];
    let out = scanfer(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("predicted:"), "stdout: {stdout}");

    let maps = dir.path().join("maps");
    let produced: Vec<_> = fs::read_dir(&maps)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    let pgm_name = produced.iter().find(|n| n.ends_with(".pgm")).unwrap().clone();
    let ppm_name = produced.iter().find(|n| n.ends_with(".ppm")).unwrap().clone();
    let pgm = fs::read(maps.join(&pgm_name)).unwrap();
    let ppm = fs::read(maps.join(&ppm_name)).unwrap();
    scanfer_core::data::decode_pgm(&pgm).expect("valid PGM");
    scanfer_core::data::decode_ppm(&ppm).expect("valid PPM");

    // rerun: identical bytes
    assert!(scanfer(&args, dir.path()).status.success());
    assert_eq!(fs::read(maps.join(&pgm_name)).unwrap(), pgm);
    assert_eq!(fs::read(maps.join(&ppm_name)).unwrap(), ppm);

    // explicit class shows up in the filename suffix
    let out = scanfer(
        &[
            "gradcam",
            "--ckpt",
            "run/best.ckpt",
            "--image",
            "data/class2_0000.ppm",
            "--class",
            "6",
            "--out-dir",
            "maps",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    assert!(maps.join("class2_0000_gradcam_class6.pgm").exists());
    assert!(maps.join("class2_0000_gradcam_class6.ppm").exists());
}

#[test]
fn gradcam_rejects_out_of_range_class() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 1, 4);
    let config = write_config(dir.path(), "run.cfg", &TINY_TRAIN.replace("epochs = 2", "epochs = 1"));
    assert!(scanfer(&["train", "--config", &config], dir.path()).status.success());
    let out = scanfer(
        &[
            "gradcam",
            "--ckpt",
            "run/best.ckpt",
            "--image",
            "data/class0_0000.ppm",
            "--class",
            "9",
        ],
        dir.path(),
    );
    assert!(!out.status.success());
}

#[test]
fn unreadable_image_fails() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 1, 4);
    let config = write_config(dir.path(), "run.cfg", &TINY_TRAIN.replace("epochs = 2", "epochs = 1"));
    assert!(scanfer(&["train", "--config", &config], dir.path()).status.success());
    let out = scanfer(
        &[
            "gradcam",
            "--ckpt",
            "run/best.ckpt",
            "--image",
            "data/not_there.ppm",
        ],
        dir.path(),
    );
    assert!(!out.status.success());
}

#[test]
fn synth_data_is_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &str| {
        let status = scanfer(
            &["synth-data", "--out", out, "--per-class", "2", "--seed", "9"],
            dir.path(),
        )
        .status;
        assert!(status.success());
    };
    run("d1");
    run("d2");
    for entry in fs::read_dir(dir.path().join("d1")).unwrap() {
        let name = entry.unwrap().file_name();
        let a = fs::read(dir.path().join("d1").join(&name)).unwrap();
        let b = fs::read(dir.path().join("d2").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?}");
    }
}

#[test]
fn check_grad_passes_and_corrupt_control_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = scanfer(&["check-grad"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS"), "stdout: {stdout}");

    let out = scanfer(&["check-grad", "--corrupt"], dir.path());
    assert!(!out.status.success(), "corrupted backward must be flagged");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAIL"), "stdout: {stdout}");
}

#[test]
fn bad_config_is_a_diagnostic_not_a_crash() {
    let dir = tempfile::tempdir().unwrap();
    for body in ["lambda = banana\n", "nonsense_key = 1\n", "seed 5\n", "lambda = 7\n"] {
        let config = write_config(dir.path(), "bad.cfg", body);
        let out = scanfer(&["train", "--config", &config], dir.path());
        assert!(!out.status.success());
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(stderr.contains("config"), "stderr for {body:?}: {stderr}");
    }
}
