//! CLI behavior: exit codes, output formats, determinism, and parity with the
//! library paths.

use std::path::PathBuf;
use std::process::{Command, Output};

fn mvtk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvtk"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tmpdir() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mvtk-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn describe_shows_head_width_and_reduced_stage() {
    let o = mvtk(&["describe", "mobilevitv3-s"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("1280"), "{s}");
    assert!(s.contains("mobilevit block (L=4)"));

    let o = mvtk(&["describe", "mobilevitv3-xxs", "--layer4-blocks", "2"]);
    let s = stdout(&o);
    assert!(s.contains("mobilevit block (L=2)"));
    assert!(!s.contains("(L=4)"), "reduced variant still shows L=4: {s}");
}

#[test]
fn bad_model_name_exits_2_listing_names() {
    let o = mvtk(&["describe", "mobilevitv4-mega"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr).into_owned();
    assert!(err.contains("mobilevitv3-xxs") && err.contains("mobilevitv2-0.5"), "{err}");
}

#[test]
fn count_csv_parses_against_schema() {
    let o = mvtk(&["count", "mobilevitv3-s", "--res", "256", "--format", "csv"]);
    assert!(o.status.success());
    let csv = stdout(&o);
    assert!(csv.starts_with("layer,kind,out_n,out_c,out_h,out_w,params,macs\n"));
    let rep = mvtk_cost::CostReport::from_csv("mobilevitv3-s", 256, &csv).unwrap();
    // Table-1 ballpark: ~5.8M params, ~1841M MACs
    assert!((rep.total_params as f64 / 1e6 - 5.8).abs() < 5.8 * 0.02);
    assert!((rep.total_macs as f64 / 1e6 - 1841.0).abs() < 1841.0 * 0.05);
}

#[test]
fn count_json_and_out_file() {
    let dir = tmpdir();
    let path = dir.join("v2.json");
    let o = mvtk(&[
        "count",
        "mobilevitv2-1.0",
        "--format",
        "json",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).is_empty(), "machine output should go to the file");
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let params = parsed["total_params"].as_u64().unwrap() as f64 / 1e6;
    let macs = parsed["total_macs"].as_u64().unwrap() as f64 / 1e6;
    assert!((params - 4.9).abs() < 4.9 * 0.02);
    assert!((macs - 1851.0).abs() < 1851.0 * 0.05);
}

#[test]
fn count_and_describe_are_deterministic() {
    for args in [
        vec!["count", "mobilevitv3-0.5", "--format", "csv"],
        vec!["describe", "mobilevitv1-xs"],
    ] {
        let a = mvtk(&args);
        let b = mvtk(&args);
        assert_eq!(stdout(&a), stdout(&b));
    }
}

fn write_test_ppm(path: &std::path::Path, w: usize, h: usize) {
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            bytes.push((x * 255 / w) as u8);
            bytes.push((y * 255 / h) as u8);
            bytes.push(128);
        }
    }
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn infer_prints_sorted_topk_and_is_deterministic() {
    let dir = tmpdir();
    let img = dir.join("t.ppm");
    write_test_ppm(&img, 80, 64);
    let args = [
        "infer",
        "mobilevitv3-xxs",
        "--image",
        img.to_str().unwrap(),
        "--res",
        "64",
        "--seed",
        "5",
    ];
    let a = mvtk(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let out = stdout(&a);
    let scores: Vec<f64> = out
        .lines()
        .map(|l| l.split_whitespace().last().unwrap().parse().unwrap())
        .collect();
    assert_eq!(scores.len(), 5);
    let total: f64 = scores.iter().sum();
    assert!(total <= 1.0 + 1e-6);
    for w in scores.windows(2) {
        assert!(w[0] >= w[1], "scores not sorted: {scores:?}");
    }
    let b = mvtk(&args);
    assert_eq!(out, stdout(&b), "identical invocations must match");
}

#[test]
fn infer_logits_match_library_forward() {
    // CLI-vs-library parity on the same preprocessed tensor, via a weight
    // bundle so both sides share parameters
    let dir = tmpdir();
    let img = dir.join("p.ppm");
    write_test_ppm(&img, 64, 64);
    let bundle = dir.join("m.mvtb");
    let spec = mvtk_zoo::named_spec("mobilevitv3-xxs").unwrap();
    let model = mvtk_zoo::build::<f32>(&spec, 5).unwrap();
    mvtk_zoo::save_bundle(&model, &bundle).unwrap();

    let o = mvtk(&[
        "infer",
        "mobilevitv3-xxs",
        "--weights",
        bundle.to_str().unwrap(),
        "--image",
        img.to_str().unwrap(),
        "--res",
        "64",
        "--topk",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);

    // library route: same preprocessing (64x64 ppm, no resampling needed)
    let bytes = std::fs::read(&img).unwrap();
    let pix = &bytes[bytes.len() - 64 * 64 * 3..];
    let shape = mvtk_tensor::Shape::nchw(1, 3, 64, 64);
    let mut data = vec![0f32; shape.numel()];
    for y in 0..64 {
        for x in 0..64 {
            for c in 0..3 {
                data[shape.idx(0, c, y, x)] = pix[(y * 64 + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    let x = mvtk_tensor::Tensor::new(shape, data).unwrap();
    let logits = model.forward(&x).unwrap();
    let probs = mvtk_tensor::kernels::softmax(&logits, 1);
    let mut ranked: Vec<(usize, f32)> = probs.data().iter().cloned().enumerate().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let top_line = out.lines().next().unwrap();
    assert!(
        top_line.contains(&format!("class {:>4}", ranked[0].0)),
        "cli top class differs: {top_line} vs {}",
        ranked[0].0
    );
    let cli_score: f64 = top_line.split_whitespace().last().unwrap().parse().unwrap();
    assert!((cli_score - ranked[0].1 as f64).abs() < 1e-6);
}

#[test]
fn infer_rejects_mismatched_bundle() {
    let dir = tmpdir();
    let img = dir.join("q.ppm");
    write_test_ppm(&img, 64, 64);
    let bundle = dir.join("xxs.mvtb");
    let spec = mvtk_zoo::named_spec("mobilevitv3-xxs").unwrap();
    mvtk_zoo::save_bundle(&mvtk_zoo::build::<f32>(&spec, 1).unwrap(), &bundle).unwrap();
    let o = mvtk(&[
        "infer",
        "mobilevitv3-xs",
        "--weights",
        bundle.to_str().unwrap(),
        "--image",
        img.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn infer_rejects_malformed_image() {
    let dir = tmpdir();
    let img = dir.join("bad.ppm");
    std::fs::write(&img, b"P6\n10 10\n255\nshort").unwrap();
    let o = mvtk(&["infer", "mobilevitv3-xxs", "--image", img.to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("truncated"));
}

#[test]
fn bench_single_iteration_and_json_fields() {
    let o = mvtk(&[
        "bench",
        "mobilevitv3-xxs",
        "--res",
        "64",
        "--iterations",
        "1",
        "--warmup",
        "0",
        "--format",
        "json",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["iterations"], 1);
    assert_eq!(v["warmup"], 0);
    // the report carries the model MAC count for ops/sec derivation
    assert!(v["macs_per_sample"].as_u64().unwrap() > 10_000_000);
    assert!(v["latency_ms"]["mean"].as_f64().unwrap() > 0.0);
}

#[test]
fn gradcheck_exit_codes_and_determinism() {
    let o = mvtk(&["gradcheck", "--block", "linear", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("PASS"));
    let o2 = mvtk(&["gradcheck", "--block", "linear", "--seed", "3"]);
    assert_eq!(stdout(&o), stdout(&o2));

    // an impossible threshold fails with exit 1
    let o = mvtk(&["gradcheck", "--block", "v3", "--threshold", "1e-18"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));

    let o = mvtk(&["gradcheck", "--block", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_toy_deterministic_under_seed() {
    let dir = tmpdir();
    let c1 = dir.join("c1.csv");
    let c2 = dir.join("c2.csv");
    let run = |out: &std::path::Path| {
        mvtk(&[
            "train-toy",
            "--seed",
            "7",
            "--steps",
            "5",
            "--batch",
            "8",
            "--out",
            out.to_str().unwrap(),
        ])
    };
    let a = run(&c1);
    let b = run(&c2);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(
        std::fs::read_to_string(&c1).unwrap(),
        std::fs::read_to_string(&c2).unwrap()
    );
    let curve = std::fs::read_to_string(&c1).unwrap();
    assert!(curve.starts_with("step,loss,acc\n"));
    assert_eq!(curve.lines().count(), 6);
}

#[test]
fn ablate_emits_five_rows() {
    let dir = tmpdir();
    let out = dir.join("ablate.csv");
    let o = mvtk(&[
        "ablate",
        "--preset",
        "table6",
        "--steps",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    // header plus exactly five config rows
    assert_eq!(text.lines().count(), 6, "{text}");
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().nth(5).unwrap().starts_with("full-v3"));

    let o = mvtk(&["ablate", "--preset", "table9"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn spec_file_round_trip_through_cli() {
    let dir = tmpdir();
    let spec_path = dir.join("custom.spec");
    let spec = mvtk_zoo::named_spec("mobilevitv3-xxs")
        .unwrap()
        .with_classes(10);
    std::fs::write(&spec_path, mvtk_zoo::spec_to_text(&spec)).unwrap();
    let o = mvtk(&["describe", spec_path.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("mobilevitv3-xxs"));
}
