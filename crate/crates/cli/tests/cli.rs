use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn saol(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saol"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

const TINY: &str = r#"
train_count = 24
test_count = 12
image_size = 16
num_classes = 2
base_channels = [4, 8]
strides = [1, 2]
epochs = 2
batch_size = 8
heatmaps = 2
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn train_then_eval_wsol_visualize() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();

    let r = saol(&["train", "--config", &cfg, "--out", out_s, "--seed", "3"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(out.join("checkpoint.bin").exists());

    let r = saol(&["eval", "--config", &cfg, "--out", out_s, "--head", "gapfc"]);
    assert!(r.status.success());
    let stdout = String::from_utf8_lossy(&r.stdout);
    assert!(stdout.contains("saol accuracy") && stdout.contains("gapfc accuracy"));
    assert!(stdout.contains("selected Gapfc"));

    let r = saol(&["wsol", "--config", &cfg, "--out", out_s]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let report = fs::read_to_string(out.join("wsol_report.csv")).unwrap();
    assert!(report.starts_with("image_id,gt_label,pred_label,iou,pass_top1,pass_gtknown"));
    assert_eq!(report.lines().count(), 13);
    // two images, two classes
    let pgms = fs::read_dir(out.join("heatmaps"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(pgms, 4);

    let r = saol(&["visualize", "--config", &cfg, "--out", out_s]);
    assert!(r.status.success());
    assert!(out.join("visualize/img0000_input.ppm").exists());
    assert!(out.join("visualize/img0001_attention.pgm").exists());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "lr = -1.0\n");
    assert_eq!(saol(&["train", "--config", &cfg]).status.code(), Some(2));
    let cfg = write_config(dir.path(), "not_a_key = 1\n");
    assert_eq!(saol(&["eval", "--config", &cfg]).status.code(), Some(2));
    assert_eq!(saol(&["train", "--config", "/no/such/config.toml"]).status.code(), Some(2));
    assert_eq!(saol(&["train", "--head", "both"]).status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "dataset = \"cifar10\"\nnum_classes = 10\ndata_path = \"/no/such/cifar\"\n",
    );
    let r = saol(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("/no/such/cifar"));
}

#[test]
fn bad_checkpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let ck = dir.path().join("bad.bin");
    fs::write(&ck, b"NOPE").unwrap();
    let out = dir.path().to_str().unwrap();
    let r = saol(&["eval", "--config", &cfg, "--out", out, "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(4));
    let r = saol(&["wsol", "--config", &cfg, "--out", out, "--checkpoint", "/no/such/ck.bin"]);
    assert_eq!(r.status.code(), Some(4));
}
