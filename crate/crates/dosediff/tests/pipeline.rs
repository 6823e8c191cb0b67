//! End-to-end pipeline tests through the command layer and the
//! compiled binary: gen -> train -> sample -> eval on a small grid,
//! plus CLI contract checks (exit codes, machine-parseable errors,
//! no partial writes).

use std::path::Path;
use std::process::Command;

use dosediff::commands::{
    self, evaluate_predictions, pred_file_name, EvalArgs, GenArgs, SampleArgs, TrainArgs,
};
use dosediff::phantom::{write_array_file, Dataset, Split};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dosediff"))
}

fn tiny_config_toml() -> String {
    r#"
[model]
image_size = 32
patch_size = 4
base_channels = 8
depth = 2
expand = 2
n_state = 4
time_embed_dim = 16
conv_kernel = 4
in_channels = 1
cond_channels = 5

[schedule]
t_steps = 100
beta_min = 1e-4
beta_max = 0.02

[optimizer]
lr = 1e-3
lr_min = 1e-5
beta1 = 0.9
beta2 = 0.999
eps = 1e-8

[training]
epochs = 2
batch_size = 4
seed = 3
sample_stride = 10
"#
    .to_string()
}

fn gen_args(out: &Path) -> GenArgs {
    GenArgs {
        out: out.to_path_buf(),
        n_train: 6,
        n_val: 2,
        n_test: 2,
        size: 32,
        seed: 5,
        patch_size: 4,
        depth: 2,
        force: false,
    }
}

#[test]
fn full_pipeline_through_the_binary() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let preds = tmp.path().join("preds");
    let evald = tmp.path().join("eval");
    let config_path = tmp.path().join("config.toml");
    std::fs::write(&config_path, tiny_config_toml()).unwrap();

    let status = bin()
        .args(["gen", "--out"])
        .arg(&data)
        .args([
            "--train", "6", "--val", "2", "--test", "2", "--size", "32", "--seed", "5",
            "--patch-size", "4", "--depth", "2",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(data.join("manifest.json").exists());

    let status = bin()
        .args(["train", "--config"])
        .arg(&config_path)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&run)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(run.join("checkpoint.bin").exists());
    assert!(run.join("loss.csv").exists());
    assert!(run.join("config.toml").exists());

    let status = bin()
        .args(["sample", "--checkpoint"])
        .arg(run.join("checkpoint.bin"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&preds)
        .args(["--split", "test", "--n", "2", "--seed", "1"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(preds.join("diagnostics.csv").exists());

    // a two-epoch toy model predicts a flat zero target, for which the
    // homogeneity index is undefined by contract; evaluate the eval
    // subcommand against well-formed predictions instead
    let ds = Dataset::open(&data).unwrap();
    for &id in ds.split_ids(Split::Test) {
        let ph = ds.load(id).unwrap();
        let (h, w) = (ph.dose.height, ph.dose.width);
        write_array_file(
            &preds.join(pred_file_name(id)),
            &[
                ("pred", vec![1, h, w], ph.dose.data.as_slice()),
                ("gt", vec![1, h, w], ph.dose.data.as_slice()),
                ("body", vec![1, h, w], ph.body.as_slice()),
            ],
        )
        .unwrap();
    }

    let status = bin()
        .args(["eval", "--pred"])
        .arg(&preds)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&evald)
        .args(["--split", "test"])
        .status()
        .unwrap();
    assert!(status.success());
    let metrics = std::fs::read_to_string(evald.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("sample,dose_score,dvh_score,hi"));
    assert!(metrics.contains("mean,"));
    assert!(evald.join("dvh.csv").exists());
}

#[test]
fn gen_rejects_indivisible_size_before_writing() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("data48");
    let output = bin()
        .args(["gen", "--out"])
        .arg(&out)
        .args(["--size", "48"]) // default patching: 4 * 2^4 = 64
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.starts_with("error:"), "{stderr}");
    assert!(!out.exists(), "validation must precede any write");
}

#[test]
fn gen_refuses_overwrite_without_force() {
    let tmp = TempDir::new().unwrap();
    let args = gen_args(&tmp.path().join("d"));
    commands::cmd_gen(&args).unwrap();
    let err = commands::cmd_gen(&args).unwrap_err();
    assert!(err.to_string().contains("force"));
    let forced = GenArgs {
        force: true,
        ..args
    };
    commands::cmd_gen(&forced).unwrap();
}

#[test]
fn sample_more_than_split_is_an_error() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    commands::cmd_gen(&gen_args(&data)).unwrap();
    let config_path = tmp.path().join("config.toml");
    std::fs::write(&config_path, tiny_config_toml()).unwrap();
    commands::cmd_train(&TrainArgs {
        config: Some(config_path),
        data: data.clone(),
        out: tmp.path().join("run"),
        epochs: Some(1),
        seed: None,
        batch_size: None,
        resume: false,
    })
    .unwrap();
    let err = commands::cmd_sample(&SampleArgs {
        checkpoint: tmp.path().join("run/checkpoint.bin"),
        data: data.clone(),
        out: tmp.path().join("preds"),
        split: Split::Val,
        n: 99,
        seed: 0,
        stride: Some(25),
    })
    .unwrap_err();
    assert!(err.to_string().contains("99"), "{err}");
}

#[test]
fn sampling_is_deterministic_in_the_seed() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    commands::cmd_gen(&gen_args(&data)).unwrap();
    let config_path = tmp.path().join("config.toml");
    std::fs::write(&config_path, tiny_config_toml()).unwrap();
    commands::cmd_train(&TrainArgs {
        config: Some(config_path),
        data: data.clone(),
        out: tmp.path().join("run"),
        epochs: Some(1),
        seed: None,
        batch_size: None,
        resume: false,
    })
    .unwrap();
    for out in ["p1", "p2"] {
        commands::cmd_sample(&SampleArgs {
            checkpoint: tmp.path().join("run/checkpoint.bin"),
            data: data.clone(),
            out: tmp.path().join(out),
            split: Split::Val,
            n: 1,
            seed: 42,
            stride: Some(25),
        })
        .unwrap();
    }
    let ids = Dataset::open(&data).unwrap().split_ids(Split::Val).to_vec();
    let f = pred_file_name(ids[0]);
    let a = std::fs::read(tmp.path().join("p1").join(&f)).unwrap();
    let b = std::fs::read(tmp.path().join("p2").join(&f)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn eval_lists_missing_predictions_and_scores_self_comparison_zero() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    commands::cmd_gen(&gen_args(&data)).unwrap();
    let ds = Dataset::open(&data).unwrap();

    let preds = tmp.path().join("preds");
    std::fs::create_dir_all(&preds).unwrap();
    let err = evaluate_predictions(&preds, &ds, Split::Test).unwrap_err();
    let msg = err.to_string();
    for id in ds.split_ids(Split::Test) {
        assert!(msg.contains(&format!("{id:04}")), "{msg}");
    }

    // write ground truth as the prediction: every metric must be zero
    for &id in ds.split_ids(Split::Test) {
        let ph = ds.load(id).unwrap();
        let (h, w) = (ph.dose.height, ph.dose.width);
        write_array_file(
            &preds.join(pred_file_name(id)),
            &[
                ("pred", vec![1, h, w], ph.dose.data.as_slice()),
                ("gt", vec![1, h, w], ph.dose.data.as_slice()),
                ("body", vec![1, h, w], ph.body.as_slice()),
            ],
        )
        .unwrap();
    }
    let reports = evaluate_predictions(&preds, &ds, Split::Test).unwrap();
    for (_, r) in reports {
        assert_eq!(r.dose_score, 0.0);
        assert_eq!(r.dvh_score, 0.0);
        assert_eq!(r.hi, 0.0);
    }

    // the eval command over the same predictions writes both CSVs
    commands::cmd_eval(&EvalArgs {
        pred: preds,
        data,
        out: tmp.path().join("eval"),
        split: Split::Test,
    })
    .unwrap();
    assert!(tmp.path().join("eval/metrics.csv").exists());
}

#[test]
fn unknown_split_fails_with_machine_parseable_error() {
    let output = bin()
        .args(["sample", "--checkpoint", "/nonexistent.bin", "--data", "/nowhere"])
        .args(["--out", "/tmp/x", "--split", "nope"])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.starts_with("error:"), "{stderr}");
}
