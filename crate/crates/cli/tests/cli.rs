use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn evseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evseg"))
        .args(args)
        .output()
        .expect("run evseg")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.kv")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Dataset, two trained subnets and their predictions on the test case.
struct Chain {
    _dir: tempfile::TempDir,
    root: PathBuf,
    case: PathBuf,
}

fn chain() -> Chain {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let cfg = smoke_config();
    let data = root.join("data");
    let out = evseg(&["phantom", "--config", s(&cfg), "--out", s(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for ch in ["fa", "md"] {
        let ckpt = root.join(format!("{ch}.eprm"));
        let out = evseg(&[
            "train",
            "--data",
            s(&data),
            "--channel",
            ch,
            "--config",
            s(&cfg),
            "--out",
            s(&ckpt),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(root.join(format!("{ch}.eprm.training.kv")).exists());
    }
    let case = std::fs::read_dir(data.join("test"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    for ch in ["fa", "md"] {
        let out = evseg(&[
            "predict",
            "--checkpoint",
            s(&root.join(format!("{ch}.eprm"))),
            "--volume",
            s(&case.join("params.evol")),
            "--out",
            s(&root.join(format!("p_{ch}"))),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    Chain {
        _dir: dir,
        root,
        case,
    }
}

#[test]
fn subcommands_compose() {
    let c = chain();
    let r = &c.root;
    for f in [
        "evidence.evol",
        "labels.elbl",
        "uncertainty.evol",
        "subnet.kv",
    ] {
        assert!(r.join("p_fa").join(f).exists(), "{f}");
    }
    let fused = r.join("fused");
    let out = evseg(&[
        "fuse",
        "--inputs",
        s(&r.join("p_fa")),
        s(&r.join("p_md")),
        "--criterion",
        "evidence",
        "--out",
        s(&fused),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fused.join("chosen_subnet.elbl").exists());

    let metrics = r.join("metrics.kv");
    let gt = c.case.join("labels.elbl");
    let out = evseg(&[
        "eval",
        "--pred",
        s(&fused.join("labels.elbl")),
        "--gt",
        s(&gt),
        "--out",
        s(&metrics),
    ]);
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(&metrics).unwrap();
    assert!(text.contains("mean_dice"));

    let pgm = r.join("u.pgm");
    let out = evseg(&[
        "render",
        "--input",
        s(&fused.join("uncertainty.evol")),
        "--index",
        "3",
        "--out",
        s(&pgm),
    ]);
    assert_eq!(code(&out), 0);
    assert!(std::fs::read(&pgm).unwrap().starts_with(b"P5 24 24 255\n"));
    let ppm = r.join("l.ppm");
    let out = evseg(&[
        "render",
        "--input",
        s(&gt),
        "--axis",
        "x",
        "--index",
        "3",
        "--out",
        s(&ppm),
    ]);
    assert_eq!(code(&out), 0);
    assert!(std::fs::read(&ppm).unwrap().starts_with(b"P6 24 16 255\n"));
}

#[test]
fn single_member_fusion_reproduces_prediction() {
    let c = chain();
    for criterion in ["evidence", "probability", "entropy"] {
        let out_dir = c.root.join(format!("f1_{criterion}"));
        let out = evseg(&[
            "fuse",
            "--inputs",
            s(&c.root.join("p_md")),
            "--criterion",
            criterion,
            "--out",
            s(&out_dir),
        ]);
        assert_eq!(code(&out), 0);
        assert_eq!(
            std::fs::read(out_dir.join("labels.elbl")).unwrap(),
            std::fs::read(c.root.join("p_md/labels.elbl")).unwrap(),
            "{criterion}"
        );
    }
}

#[test]
fn e2e_writes_manifest_and_lesion_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = evseg(&["e2e", "--config", s(&smoke_config()), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("ood.auroc"));
    let manifest = std::fs::read_to_string(out_dir.join("manifest.kv")).unwrap();
    assert!(manifest.contains("output.summary.kv"));
    assert!(manifest.contains("config.seed = 7"));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let cfg = smoke_config();
    assert_eq!(
        code(&evseg(&["phantom", "--config", s(&cfg), "--out", s(&a)])),
        0
    );
    assert_eq!(
        code(&evseg(&[
            "--seed",
            "99",
            "phantom",
            "--config",
            s(&cfg),
            "--out",
            s(&b)
        ])),
        0
    );
    let manifest = std::fs::read_to_string(b.join("manifest.kv")).unwrap();
    assert!(manifest.contains("config.seed = 99"));
    let first = |d: &Path| std::fs::read(d.join("train/case000/params.evol")).ok();
    assert_ne!(first(&a), first(&b));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&evseg(&[])), 2);
    assert_eq!(code(&evseg(&["frobnicate"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let out = evseg(&[
        "fuse",
        "--inputs",
        s(dir.path()),
        "--criterion",
        "bogus",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 2);
    let out = evseg(&[
        "train",
        "--data",
        s(dir.path()),
        "--channel",
        "adc",
        "--out",
        "x",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn io_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.elbl");
    let out = evseg(&[
        "eval",
        "--pred",
        s(&missing),
        "--gt",
        s(&missing),
        "--out",
        s(&dir.path().join("m.kv")),
    ]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn format_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.elbl");
    std::fs::write(&junk, b"not a labelmap").unwrap();
    let out = evseg(&[
        "eval",
        "--pred",
        s(&junk),
        "--gt",
        s(&junk),
        "--out",
        s(&dir.path().join("m.kv")),
    ]);
    assert_eq!(code(&out), 4);
    let cfg = dir.path().join("bad.kv");
    std::fs::write(&cfg, "num_phantoms = 4\nno_such_key = 1\n").unwrap();
    let out = evseg(&[
        "phantom",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("d")),
    ]);
    assert_eq!(code(&out), 4);
}

#[test]
fn shape_and_domain_errors() {
    let c = chain();
    let gt = c.case.join("labels.elbl");
    let pgm = c.root.join("x.pgm");
    let out = evseg(&[
        "render",
        "--input",
        s(&gt),
        "--axis",
        "z",
        "--index",
        "99",
        "--out",
        s(&pgm),
    ]);
    assert_eq!(code(&out), 6);

    // A labelmap from a different grid.
    let dir = tempfile::tempdir().unwrap();
    let other = dir.path().join("cfg.kv");
    let text = std::fs::read_to_string(smoke_config())
        .unwrap()
        .replace("phantom.dims = 24 24 16", "phantom.dims = 26 24 16");
    std::fs::write(&other, text).unwrap();
    let data = dir.path().join("data");
    assert_eq!(
        code(&evseg(&[
            "phantom",
            "--config",
            s(&other),
            "--out",
            s(&data)
        ])),
        0
    );
    let other_gt = std::fs::read_dir(data.join("test"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path()
        .join("labels.elbl");
    let out = evseg(&[
        "eval",
        "--pred",
        s(&c.root.join("p_fa/labels.elbl")),
        "--gt",
        s(&other_gt),
        "--out",
        s(&dir.path().join("m.kv")),
    ]);
    assert_eq!(code(&out), 5);
}

#[test]
fn help_documents_exit_codes() {
    let out = evseg(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in ["Exit codes", "e2e", "fuse", "ood", "render"] {
        assert!(text.contains(needle), "{needle}");
    }
}

#[test]
fn default_config_file_matches_builtin_defaults() {
    use evseg_core::phantom::LesionSpec;
    use evseg_core::pipeline::PipelineConfig;
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.kv");
    let cfg = PipelineConfig::load(&path).unwrap();
    let mut want = PipelineConfig::default();
    want.lesion = Some(LesionSpec::toy(&want.phantom));
    assert_eq!(cfg, want);
}
