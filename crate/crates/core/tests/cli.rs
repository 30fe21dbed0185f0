use std::fs;
use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_xdiff");

#[rustfmt::skip]
const SMALL: &[&str] = &[
    "--set", "world.d=16",
    "--set", "world.vocab=8",
    "--set", "world.shared=4",
    "--set", "world.base_only=2",
    "--set", "world.chat_only=2",
    "--steps", "150",
    "--batch-size", "64",
    "--dict-size", "32",
    "--k", "4",
    "--samples", "1024",
    "--seed", "3",
];

fn xdiff(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).env("XDIFF_THREADS", "1").output().expect("binary runs")
}

fn run_in(dir: &Path, sub: &str, extra: &[&str]) -> std::process::Output {
    let out = dir.to_str().unwrap();
    let mut args = vec![sub, "--output-dir", out];
    args.extend_from_slice(extra);
    xdiff(&args)
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn full_pipeline_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        let o = run_in(dir, "all", SMALL);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (fa, fb) = (files(a.path()), files(b.path()));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    for expected in ["latents.csv", "twins.csv", "scaling.csv", "patch.csv", "manifest.txt", "weights.xcoder"] {
        assert!(names.contains(&expected), "missing {expected} in {names:?}");
    }
    assert_eq!(fa, fb);
}

#[test]
fn analysis_subcommands_reuse_saved_weights() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_in(dir.path(), "train", SMALL).status.success());
    let weights = dir.path().join("weights.xcoder");
    let w = weights.to_str().unwrap();
    for sub in ["diff", "scale", "patch", "report"] {
        let out = dir.path().join(sub);
        let mut args = SMALL.to_vec();
        args.extend(["--weights", w]);
        let o = run_in(&out, sub, &args);
        assert!(o.status.success(), "{sub}: {}", String::from_utf8_lossy(&o.stderr));
        let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
        assert!(manifest.contains(&format!("command = {sub}")));
    }
    assert!(dir.path().join("scale/scaling.csv").exists());
    assert!(dir.path().join("patch/patch.csv").exists());
    assert!(!dir.path().join("diff/patch.csv").exists());
}

#[test]
fn emitted_csvs_parse_back_losslessly() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_in(dir.path(), "all", SMALL).status.success());
    let mut numbers = 0;
    for name in ["latents.csv", "twins.csv", "scaling.csv", "patch.csv", "delta_norm_hist.csv", "train_log.csv"] {
        let mut r = csv::Reader::from_path(dir.path().join(name)).unwrap();
        let width = r.headers().unwrap().len();
        for rec in r.records() {
            let rec = rec.unwrap();
            assert_eq!(rec.len(), width, "{name}");
            for field in rec.iter() {
                if let Ok(x) = field.parse::<f64>() {
                    if field.contains('e') {
                        assert_eq!(xdiff::io::reports::fmt_f64(x), field, "{name}");
                        numbers += 1;
                    }
                }
            }
        }
    }
    assert!(numbers > 100);
}

#[test]
fn generate_writes_world_and_batch() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), "generate", SMALL);
    assert!(o.status.success());
    let batch = xdiff::io::load_batch(&dir.path().join("batch.xdiffact")).unwrap();
    assert_eq!((batch.len(), batch.dim()), (1024, 16));
    let cfg = xdiff::WorldConfig::from_kv_text(&fs::read_to_string(dir.path().join("world.cfg")).unwrap()).unwrap();
    assert_eq!((cfg.d, cfg.seed), (16, 3));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| xdiff(args).status.code().unwrap();

    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&[]), 2);
    assert_eq!(code(&["train", "--k", "-5"]), 2);
    assert_eq!(code(&["train", "--set", "world.nope=1"]), 2);

    let missing = dir.path().join("absent.xcoder");
    let out = dir.path().join("o");
    assert_eq!(code(&["diff", "--weights", missing.to_str().unwrap(), "--output-dir", out.to_str().unwrap()]), 4);

    let garbage = dir.path().join("garbage.xcoder");
    fs::write(&garbage, b"not a weights file").unwrap();
    assert_eq!(code(&["diff", "--weights", garbage.to_str().unwrap(), "--output-dir", out.to_str().unwrap()]), 4);

    let mut args = vec!["train", "--output-dir", out.to_str().unwrap(), "--lr", "1e300", "--variant", "l1"];
    args.extend_from_slice(SMALL);
    assert_eq!(code(&args), 3);
}
