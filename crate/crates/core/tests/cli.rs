use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn fpq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpq")).args(args).output().unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = fpq(args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn err_json(out: &Output) -> Value {
    serde_json::from_slice::<Value>(&out.stderr).unwrap()["error"].clone()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

fn gen(dir: &Path, name: &str, kind: &str, shape: &str, seed: u32) -> String {
    let p = path(dir, name);
    ok_json(&[
        "gen",
        "--kind",
        kind,
        "--shape",
        shape,
        "--seed",
        &seed.to_string(),
        "--out",
        &p,
    ]);
    p
}

#[test]
fn gen_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.bin", "outlier-injected", "16x32", 3);
    let b = gen(dir.path(), "b.bin", "outlier-injected", "16x32", 3);
    let c = gen(dir.path(), "c.bin", "outlier-injected", "16x32", 4);
    let read = |p: &str| std::fs::read(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn quantize_report_embeds_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let w = gen(dir.path(), "w.bin", "normal", "8x64", 1);
    let r = ok_json(&[
        "quantize",
        "--weights",
        &w,
        "--spec",
        "int4:asym:group32",
        "--out",
        &path(dir.path(), "w.qt"),
    ]);
    assert_eq!(r["config"]["spec"], "int4:asym:group32");
    assert_eq!(r["stages"][0]["stage"], "rtn");
    assert!(Path::new(&path(dir.path(), "w.qt")).exists());
}

#[test]
fn config_file_and_flags_merge() {
    let dir = tempfile::tempdir().unwrap();
    let w = gen(dir.path(), "w.bin", "normal", "8x64", 1);
    let x = gen(dir.path(), "x.bin", "normal", "32x64", 2);
    let cfg = path(dir.path(), "recipe.json");
    std::fs::write(
        &cfg,
        format!(r#"{{"spec":"fp4:e2m1:group32","gptq":{{"block":16}},"lorc_rank":2,"scale_constraint":"m1","weights":"{w}","calib":"{x}"}}"#),
    )
    .unwrap();
    let r = ok_json(&["quantize", "--config", &cfg, "--lorc", "4"]);
    let stages: Vec<&str> = r["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["stage"].as_str().unwrap())
        .collect();
    assert_eq!(stages, ["gptq", "lorc", "scale_constraint", "cast"]);
    assert_eq!(r["config"]["lorc_rank"], 4);
    assert_eq!(r["stages"][0]["block"], 16);
    assert_eq!(r["cast_exact"], true);

    let no_cast = ok_json(&["quantize", "--config", &cfg, "--no-cast"]);
    assert_eq!(no_cast["stages"].as_array().unwrap().len(), 3);
}

#[test]
fn unknown_config_keys_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = path(dir.path(), "bad.json");
    std::fs::write(&cfg, r#"{"spec":"fp4:e2m1:group32","lora_rank":8}"#).unwrap();
    let out = fpq(&["quantize", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(err_json(&out)["message"].as_str().unwrap().contains("lora_rank"));
}

#[test]
fn exit_codes_separate_usage_from_domain_errors() {
    let dir = tempfile::tempdir().unwrap();
    // Missing file: I/O, exit 2, path reported.
    let missing = path(dir.path(), "nope.bin");
    let out = fpq(&["analyze", "--input", &missing]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(err_json(&out)["path"], missing);

    // Unknown flag: clap usage error, exit 2.
    assert_eq!(fpq(&["gen", "--frobnicate"]).status.code(), Some(2));

    // A malformed recipe is user input, so it is a usage error.
    let w = gen(dir.path(), "w.bin", "normal", "4x8", 0);
    let out = fpq(&["quantize", "--weights", &w, "--spec", "fp4:e9m9:group8"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(err_json(&out)["kind"], "invalid_format");

    // Calibration width disagreeing with the weights: domain error, exit 1.
    let narrow = gen(dir.path(), "narrow.bin", "normal", "16x4", 2);
    let out = fpq(&[
        "gptq",
        "--weights",
        &w,
        "--calib",
        &narrow,
        "--spec",
        "int4:sym:group8",
        "--out",
        &path(dir.path(), "n.qt"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(err_json(&out)["kind"], "shape_mismatch");

    // Rank-deficient calibration without damping: factorization failure, exit 1.
    let x = gen(dir.path(), "x.bin", "normal", "2x8", 1);
    let out = fpq(&[
        "gptq",
        "--weights",
        &w,
        "--calib",
        &x,
        "--spec",
        "int4:sym:group8",
        "--damping",
        "0",
        "--out",
        &path(dir.path(), "q.qt"),
    ]);
    assert_eq!(out.status.code(), Some(1));

    // A corrupted container is an input problem: exit 2.
    let mut bytes = std::fs::read(&w).unwrap();
    let n = bytes.len();
    bytes[n - 10] ^= 1;
    std::fs::write(&w, bytes).unwrap();
    let out = fpq(&["analyze", "--input", &w]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(err_json(&out)["kind"], "checksum");
}

#[test]
fn compare_emits_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let w = gen(dir.path(), "w.bin", "normal", "16x64", 5);
    let x = gen(dir.path(), "x.bin", "normal", "32x64", 6);
    let recipes = [
        "compare",
        "--weights",
        &w,
        "--calib",
        &x,
        "--recipe",
        "int4:sym:group32",
        "--recipe",
        "int4:sym:group32+gptq",
        "--recipe",
        "fp4:e2m1:group32",
    ];
    let r = ok_json(&recipes);
    assert_eq!(r["reports"].as_array().unwrap().len(), 3);

    let csv_path = path(dir.path(), "cmp.csv");
    let out = fpq(&[&recipes[..], &["--format", "csv", "--out", &csv_path]].concat());
    assert!(out.status.success());
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), csv);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("recipe,mse,"));
    // Second-order solve wins the proxy loss here.
    assert_eq!(r["winners"]["proxy_loss"], 1);

    let one = fpq(&["compare", "--weights", &w, "--recipe", "int8:sym:tensor"]);
    assert_eq!(one.status.code(), Some(2));
}

#[test]
fn analyze_writes_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let v = path(dir.path(), "demo.csv");
    ok_json(&["gen", "--kind", "outlier-demo", "--dtype", "csv", "--out", &v]);
    let plot = path(dir.path(), "hist.dat");
    let r = ok_json(&["analyze", "--input", &v, "--bins", "10", "--gnuplot", &plot]);
    assert_eq!(r["report"]["count"], 15);
    assert_eq!(r["report"]["outlier_count"], 1);
    assert_eq!(
        std::fs::read_to_string(&plot)
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with('#'))
            .count(),
        10
    );
}

#[test]
fn gptq_lorc_and_cast_subcommands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let w = gen(dir.path(), "w.bin", "normal", "32x64", 7);
    let x = gen(dir.path(), "x.bin", "relu-skewed", "64x64", 8);
    let q = path(dir.path(), "w.qt");
    let g = ok_json(&[
        "gptq",
        "--weights",
        &w,
        "--calib",
        &x,
        "--spec",
        "fp4:e2m1:group32:m2",
        "--out",
        &q,
    ]);
    assert!(g["gptq"]["proxy_loss"].as_f64().unwrap() <= g["rtn"]["proxy_loss"].as_f64().unwrap());

    let l = ok_json(&[
        "lorc",
        "--weights",
        &w,
        "--quantized",
        &q,
        "--rank",
        "4",
        "--out",
        &path(dir.path(), "w.lorc"),
    ]);
    assert!(l["frobenius_err_after"].as_f64().unwrap() < l["frobenius_err_before"].as_f64().unwrap());

    let c = ok_json(&["cast", "--quantized", &q, "--out", &path(dir.path(), "w8.qt")]);
    assert_eq!(c["certified"], true);
    assert_eq!(c["exact"], true);
    assert_eq!(c["output_spec"].as_str().unwrap().split(':').nth(1), Some("e5m2"));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let w = gen(dir.path(), "w.bin", "normal", "64x128", 9);
    let x = gen(dir.path(), "x.bin", "normal", "64x128", 10);
    let run = |threads: &str, out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_fpq"))
            .env("FPQ_THREADS", threads)
            .args([
                "gptq",
                "--weights",
                &w,
                "--calib",
                &x,
                "--spec",
                "int4:sym:group32",
                "--out",
                &path(dir.path(), out),
            ])
            .output()
            .unwrap();
        assert!(o.status.success());
        std::fs::read(path(dir.path(), out)).unwrap()
    };
    assert_eq!(run("1", "a.qt"), run("4", "b.qt"));

    let bad = Command::new(env!("CARGO_BIN_EXE_fpq"))
        .env("FPQ_THREADS", "zero")
        .args(["gen", "--kind", "normal", "--out", &path(dir.path(), "z.bin")])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn compare_rows_follow_recipe_order_and_directions() {
    let dir = tempfile::tempdir().unwrap();
    let w = gen(dir.path(), "w.bin", "outlier_injected", "64x256", 11);
    let r = ok_json(&[
        "compare",
        "--weights",
        &w,
        "--recipe",
        "int8:sym:group256",
        "--recipe",
        "fp8:e4m3:group256",
    ]);
    assert_eq!(r["winners"]["clustered_max_abs_err"], 1);

    let g = gen(dir.path(), "g.bin", "normal", "64x256", 12);
    let r = ok_json(&[
        "compare",
        "--weights",
        &g,
        "--recipe",
        "fp4:e2m1:group256",
        "--recipe",
        "fp4:e3m0:group256",
    ]);
    assert_eq!(r["winners"]["mse"], 0);

    let r = ok_json(&[
        "compare",
        "--weights",
        &g,
        "--recipe",
        "int4:sym:group64",
        "--recipe",
        "int4:sym:group64",
    ]);
    assert_eq!(r["reports"][0], r["reports"][1]);
}

#[test]
fn relu_generator_and_outlier_vector_analyze_as_expected() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.bin", "relu_skewed", "64x64", 7);
    let r = ok_json(&["analyze", "--input", &a]);
    assert_eq!(r["report"]["min"], 0.0);
    assert_eq!(r["report"]["histogram"]["counts"].as_array().unwrap().len(), 100);

    let v = path(dir.path(), "v.bin");
    ok_json(&["gen", "--kind", "outlier-demo", "--out", &v]);
    let r = ok_json(&["analyze", "--input", &v]);
    assert_eq!(r["report"]["max"], 100.0);
    assert_eq!(r["report"]["outlier_count"], 1);
}

#[test]
fn token_wise_spec_gives_one_scale_per_row() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.bin", "relu-skewed", "12x40", 3);
    let q = path(dir.path(), "a.qt");
    ok_json(&["quantize", "--weights", &a, "--spec", "int8:sym:token", "--out", &q]);
    assert_eq!(fpq_core::tensor_io::read_quantized(&q).unwrap().scales().len(), 12);
}
