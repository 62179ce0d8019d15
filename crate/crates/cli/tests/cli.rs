use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use depthcrf::data::{decode_pfm, save_ppm};
use depthcrf::Tensor;

const TINY: &str = "\
embed_dim = 8
window_size = 4
decoder_dims = 16,8,8,8
train_scenes = 2
eval_scenes = 1
train_size = 32
eval_size = 64
batch_size = 2
epochs = 2
lr_start = 0.001
lr_end = 0.0005
";

fn depthcrf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depthcrf")).current_dir(dir).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

fn train(dir: &Path, out: &str) -> Output {
    let o = depthcrf(dir, &["train", "--config", "tiny.cfg", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = setup();
    assert_eq!(depthcrf(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(depthcrf(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(depthcrf(dir.path(), &["train", "--bogus"]).status.code(), Some(1));
    fs::write(dir.path().join("bad.cfg"), "window_sise = 4\n").unwrap();
    assert_eq!(depthcrf(dir.path(), &["train", "--config", "bad.cfg"]).status.code(), Some(1));
}

#[test]
fn training_is_deterministic_and_resumable() {
    let dir = setup();
    train(dir.path(), "a");
    train(dir.path(), "b");
    let a = fs::read(dir.path().join("a/checkpoint.ckpt")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/checkpoint.ckpt")).unwrap());
    let log = fs::read_to_string(dir.path().join("a/train_log.csv")).unwrap();
    assert_eq!(log, fs::read_to_string(dir.path().join("b/train_log.csv")).unwrap());
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("epoch,step,train_loss,abs_rel"));

    let threads = depthcrf(dir.path(), &["train", "--config", "tiny.cfg", "--out", "c", "--device-threads", "2"]);
    assert_eq!(threads.status.code(), Some(0));
    assert_eq!(a, fs::read(dir.path().join("c/checkpoint.ckpt")).unwrap());

    // a finished run has nothing left to do; it must still load cleanly
    let o = depthcrf(dir.path(), &["train", "--resume", "a/checkpoint.ckpt", "--out", "a"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = depthcrf(dir.path(), &["train", "--resume", "a/checkpoint.ckpt", "--config", "tiny.cfg"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn infer_writes_bounded_depth_of_the_input_size() {
    let dir = setup();
    train(dir.path(), "run");
    let img = Tensor::from_fn([3, 64, 96], |i| ((i * 37) % 255) as f32 / 255.0);
    save_ppm(dir.path().join("in.ppm"), &img).unwrap();
    for out in ["d1.pfm", "d2.pfm"] {
        let o = depthcrf(dir.path(), &["infer", "run/checkpoint.ckpt", "in.ppm", out]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let d1 = fs::read(dir.path().join("d1.pfm")).unwrap();
    assert_eq!(d1, fs::read(dir.path().join("d2.pfm")).unwrap());
    let depth = decode_pfm(&d1).unwrap();
    assert_eq!(depth.shape(), &[1, 64, 96]);
    assert!(depth.data().iter().all(|&v| v > 0.0 && v < 10.0));
    let pgm = fs::read(dir.path().join("d1.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n96 64\n255\n"));

    save_ppm(dir.path().join("odd.ppm"), &Tensor::zeros([3, 40, 40])).unwrap();
    assert_eq!(depthcrf(dir.path(), &["infer", "run/checkpoint.ckpt", "odd.ppm", "x.pfm"]).status.code(), Some(1));
    fs::write(dir.path().join("junk.ckpt"), b"DCRFCKPT\x01").unwrap();
    assert_eq!(depthcrf(dir.path(), &["infer", "junk.ckpt", "in.ppm", "x.pfm"]).status.code(), Some(2));
    assert_eq!(depthcrf(dir.path(), &["infer", "missing.ckpt", "in.ppm", "x.pfm"]).status.code(), Some(2));
}

#[test]
fn eval_reports_the_fixed_csv_and_a_perfect_oracle() {
    let dir = setup();
    train(dir.path(), "run");
    let o = depthcrf(dir.path(), &["gen-data", "--config", "tiny.cfg", "--out", "data", "--count", "2", "--size", "64"]);
    assert_eq!(o.status.code(), Some(0));
    for f in ["scene_0000.ppm", "scene_0000.pfm", "scene_0001.ppm", "scene_0001.pfm", "manifest.txt"] {
        assert!(dir.path().join("data").join(f).exists(), "{f}");
    }

    let o = depthcrf(dir.path(), &["eval", "run/checkpoint.ckpt", "data/manifest.txt", "--oracle"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("abs_rel,sq_rel,rmse,log_rmse,d1,d2,d3,k"));
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row[..7], [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    assert!(row[7] > 0.0);

    let o = depthcrf(dir.path(), &["eval", "run/checkpoint.ckpt", "data/manifest.txt"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let row: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!(row[0] > 0.0 && row[4] <= row[5] && row[5] <= row[6]);

    fs::write(dir.path().join("bad.txt"), "rgb=a.ppm\n").unwrap();
    assert_eq!(depthcrf(dir.path(), &["eval", "run/checkpoint.ckpt", "bad.txt"]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let dir = setup();
    let o = depthcrf(dir.path(), &["gradcheck"]);
    let text = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{text}");
    assert!(text.contains("identity") && text.contains("silog") && text.contains("decoder_level"));
    assert!(text.contains(" 0 failed"));
}

#[test]
fn bench_reports_counts_and_parameters() {
    let dir = setup();
    let o = depthcrf(dir.path(), &["bench", "--config", "tiny.cfg", "--repeats", "1"]);
    let text = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(text.starts_with("side,tokens,windowed_macs,dense_macs"));
    assert!(text.contains("128->256: windowed x4.000, dense x16.000"));
    assert!(text.contains("parameters "));
    assert!(text.contains("latency 32x32"));
}
