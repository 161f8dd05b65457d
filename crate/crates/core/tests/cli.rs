use std::path::Path;
use std::process::{Command, Output};

fn forestnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forestnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    let text = format!(
        "output_dir = \"{}\"\n[synth.train]\nframes = 3\n[synth.test]\nframes = 1\n\
         [features]\ncount = 40\nsamples_per_frame = 150\n\
         [forest]\nn_trees = 3\nmax_depth = 3\nn_candidates = 20\n\
         [finetune]\nepochs = 1\nsamples_per_frame = 10\n\
         [ransac]\nhypotheses = 16\n[localize]\nsamples = 200\n[mapping]\nsubtree_depth = 1\n",
        dir.join("out").display()
    );
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn invalid_config_exits_with_its_category() {
    let d = tempfile::tempdir().unwrap();
    let path = d.path().join("bad.toml");
    std::fs::write(&path, "[forest]\nn_trees = 0\n").unwrap();
    let out = forestnet(&["show-config", "-c", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[config-invalid]"));

    std::fs::write(&path, "[forest]\nnot_a_key = 1\n").unwrap();
    let out = forestnet(&["show-config", "-c", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn show_config_applies_overrides() {
    let out = forestnet(&["show-config", "--trees", "7", "--gm-sigma", "0.05"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("n_trees = 7"), "{text}");
    assert!(text.contains("sigma = 0.05"), "{text}");
}

#[test]
fn stages_run_in_order_and_report_failures() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path());

    let out = forestnet(&["localize", "-c", &cfg]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[missing-artifact]"));

    for stage in ["synth", "train-forest", "map", "finetune", "localize", "report"] {
        let out = forestnet(&[stage, "-c", &cfg]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = forestnet(&["report", "-c", &cfg]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("fNET-LST"));

    let out = forestnet(&["mapback", "-c", &cfg, "--variant", "LST"]);
    assert_eq!(out.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[variant-not-mappable]"));
    let out = forestnet(&["mapback", "-c", &cfg, "--variant", "L"]);
    assert!(out.status.success());
}
