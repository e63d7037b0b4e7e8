use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lpae::image_io::{load_image, save_image, synthetic_texture};
use lpae::model::LpaeParams;
use lpae::Rng;

fn lpae(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lpae"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn image(dir: &Path, name: &str, size: usize, seed: u64) -> String {
    let path = dir.join(name);
    save_image(&synthetic_texture(&mut Rng::new(seed), size, size), &path).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn metrics_of_identical_files() {
    let d = tempfile::tempdir().unwrap();
    let a = image(d.path(), "a.ppm", 32, 1);
    let out = lpae(d.path(), &["metrics", &a, &a]);
    assert!(out.status.success());
    assert!(stdout(&out).starts_with("PSNR: inf, SSIM: 1.0000"), "{}", stdout(&out));
}

#[test]
fn metrics_shape_mismatch_is_a_data_error() {
    let d = tempfile::tempdir().unwrap();
    let a = image(d.path(), "a.ppm", 32, 1);
    let b = image(d.path(), "b.ppm", 16, 1);
    assert_eq!(lpae(d.path(), &["metrics", &a, &b]).status.code(), Some(3));
}

#[test]
fn encode_then_decode_reproduces_the_model_output() {
    let d = tempfile::tempdir().unwrap();
    let img = image(d.path(), "in.ppm", 32, 2);
    LpaeParams::from_seed(5).unwrap().save(d.path().join("m.ckpt")).unwrap();
    let enc = lpae(d.path(), &["encode", "--checkpoint", "m.ckpt", "--levels", "2", "--out", "enc", &img]);
    assert!(enc.status.success(), "{}", stderr(&enc));
    for f in ["detail_1.lptn", "detail_2.lptn", "approx.lptn", "detail_1.ppm", "approx.ppm"] {
        assert!(d.path().join("enc").join(f).exists(), "{f}");
    }
    assert_eq!(load_image(d.path().join("enc/approx.ppm")).unwrap().h(), 8);

    let dec = lpae(d.path(), &["decode", "--checkpoint", "m.ckpt", "--out", "r.ppm", "--original", &img, "enc"]);
    assert!(dec.status.success(), "{}", stderr(&dec));
    let model = LpaeParams::load(d.path().join("m.ckpt")).unwrap();
    let x = load_image(&img).unwrap();
    let pyr = model.encode_pyramid(&x, 2).unwrap();
    let want = lpae::image_io::quantized(&model.decode_pyramid(&pyr).unwrap());
    assert_eq!(load_image(d.path().join("r.ppm")).unwrap(), want);
    assert!(stdout(&dec).contains("PSNR: "));
}

#[test]
fn indivisible_size_names_the_divisor() {
    let d = tempfile::tempdir().unwrap();
    let img = image(d.path(), "in.ppm", 12, 3);
    LpaeParams::from_seed(5).unwrap().save(d.path().join("m.ckpt")).unwrap();
    let out = lpae(d.path(), &["encode", "--checkpoint", "m.ckpt", "--levels", "3", "--out", "enc", &img]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("not divisible by 8"), "{}", stderr(&out));
}

#[test]
fn missing_corpus_writes_no_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let out = lpae(d.path(), &["train-lpae", "--corpus", "nowhere", "--out", "m.ckpt"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!d.path().join("m.ckpt").exists());
    assert!(!d.path().join("m.json").exists());

    fs::create_dir(d.path().join("empty")).unwrap();
    let out = lpae(d.path(), &["train-lpae", "--corpus", "empty", "--out", "m.ckpt"]);
    assert_ne!(out.status.code(), Some(0));
    assert!(!d.path().join("m.ckpt").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(lpae(d.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(lpae(d.path(), &["synth"]).status.code(), Some(2), "missing --out");
    let out = lpae(d.path(), &["train-lpae", "--corpus", ".", "--out", "m", "--set", "lr0=-1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = lpae(d.path(), &["train-lpae", "--corpus", ".", "--out", "m", "--set", "bogus=1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn short_training_run_writes_log_and_manifest() {
    let d = tempfile::tempdir().unwrap();
    let s = lpae(d.path(), &["synth", "--count", "4", "--size", "64", "--out", "c"]);
    assert!(s.status.success());
    let out = lpae(
        d.path(),
        &["train-lpae", "--corpus", "c", "--holdout", "c", "--out", "m.ckpt", "--set", "steps=4", "--set", "crop_size=32"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(d.path().join("m.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,step,lr,l_r,l_e,l_s,l_total,psnr,bicubic_psnr,approx_psnr,detail_energy"
    );
    assert_eq!(lines.count(), 4);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "train-lpae");
    assert_eq!(m["corpus_images"], 4);
    assert_eq!(m["checkpoints"][0]["file"], "m.ckpt");
    assert_eq!(m["checkpoints"][0]["sha256"].as_str().unwrap().len(), 64);
    assert!(m["initial_eval"]["detail_energy"].as_f64().unwrap() > 0.0);
    LpaeParams::load(d.path().join("m.ckpt")).unwrap();
}

#[test]
fn flops_bundled_tables() {
    let d = tempfile::tempdir().unwrap();
    let out = lpae(d.path(), &["flops", "vgg16"]);
    assert!(stdout(&out).contains("complexity 15470264320"), "{}", stdout(&out));
    fs::write(d.path().join("bad.spec"), "conv 3 3 16 32\nconv 8 3 16 32\n").unwrap();
    let out = lpae(d.path(), &["flops", "bad.spec"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn pyramid_collapse_is_lossless() {
    let d = tempfile::tempdir().unwrap();
    let img = image(d.path(), "in.ppm", 64, 4);
    let out = lpae(d.path(), &["pyramid", "--levels", "3", "--out", "p", &img]);
    assert!(out.status.success());
    assert_eq!(fs::read(d.path().join("p/collapse.ppm")).unwrap(), fs::read(&img).unwrap());
}
