use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use facemtl::data::synth::{synth_face, write_synth_tree};
use facemtl::data::LabelTriple;
use facemtl::model::{build_model_unchecked, ModelSpec};
use facemtl::train::save_checkpoint;
use facemtl::ParamStore32;

const TINY: [&str; 6] = [
    "--set",
    "model.enforce_budget=false",
    "--set",
    "model.channels=4,8,8",
    "--set",
    "model.head_hidden=8",
];

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_facemtl"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn fails(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    let last = err.lines().rev().find(|l| l.starts_with("error:"));
    assert!(last.is_some(), "no `error:` line in {err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    walkdir(root)
        .into_iter()
        .map(|p| (p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()))
        .collect()
}

fn walkdir(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walkdir(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn augment_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_synth_tree(&data, [4, 3, 3], 5, 64).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["augment", "--root", s(&data), "--seed", "1", "--out", s(&a)]);
    ok(&["augment", "--root", s(&data), "--seed", "1", "--out", s(&b)]);
    let (mut fa, mut fb) = (files(&a), files(&b));
    fa.remove(Path::new("config.txt"));
    fb.remove(Path::new("config.txt"));
    assert_eq!(fa.len(), 11, "10 images plus manifest");
    assert_eq!(fa, fb);

    let manifest = String::from_utf8(fa[Path::new("manifest.csv")].clone()).unwrap();
    let mut lines = manifest.lines();
    assert_eq!(lines.next(), Some("filename,coverage,color,texture,seed"));
    assert_eq!(lines.count(), 10);

    let c = tmp.path().join("c");
    ok(&["augment", "--root", s(&data), "--seed", "2", "--out", s(&c)]);
    assert_ne!(files(&c)[Path::new("manifest.csv")], fa[Path::new("manifest.csv")]);
}

#[test]
fn augment_default_output_and_empty_tree() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("faces");
    std::fs::create_dir_all(empty.join("part1")).unwrap();
    ok(&["augment", "--root", s(&empty)]);
    let manifest = std::fs::read_to_string(tmp.path().join("faces_masked/manifest.csv")).unwrap();
    assert_eq!(manifest, "filename,coverage,color,texture,seed\n");
}

#[test]
fn out_of_range_mask_config_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "[mask]\ncoverage_min = 0.6\ncoverage_max = 0.7\n").unwrap();
    let err = fails(&["augment", "--config", s(&cfg), "--root", s(tmp.path())]);
    assert!(err.contains("coverage"), "{err}");
}

#[test]
fn zero_epochs_writes_initial_checkpoint_only() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    ok(&["train", "--epochs", "0", "--out", s(&out), "--root", "does-not-matter"]);
    let mut names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["config.txt", "final.mmtl"]);
    let (p, spec) = facemtl::train::load_checkpoint::<f32>(&out.join("final.mmtl")).unwrap();
    assert_eq!(spec, ModelSpec::default());
    assert_eq!(p, facemtl::model::build_model::<f32>(&spec, 0).unwrap());
}

fn strip_seconds(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| l.rsplit_once(',').map(|(a, _)| a.to_string()).unwrap_or_default())
        .collect()
}

#[test]
fn train_then_rerun_from_dumped_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_synth_tree(&data, [6, 3, 3], 9, 48).unwrap();
    let first = tmp.path().join("first");
    let mut args = vec!["train", "--root", s(&data), "--out", s(&first), "--epochs", "2", "--batch-size", "4"];
    args.extend(TINY);
    args.extend(["--sharing", "soft", "--seed", "4"]);
    ok(&args);
    for f in ["config.txt", "train_log.csv", "val_log.csv", "final.mmtl", "best.mmtl"] {
        assert!(first.join(f).is_file(), "missing {f}");
    }
    let log = std::fs::read_to_string(first.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,total,age_l1,gender_bce,ethnicity_cce,soft_penalty,seconds\n"));
    assert_eq!(log.lines().count(), 3);
    let val = std::fs::read_to_string(first.join("val_log.csv")).unwrap();
    assert_eq!(val.lines().count(), 3);

    let second = tmp.path().join("second");
    ok(&["train", "--config", s(&first.join("config.txt")), "--out", s(&second)]);
    assert_eq!(
        std::fs::read(first.join("final.mmtl")).unwrap(),
        std::fs::read(second.join("final.mmtl")).unwrap()
    );
    assert_eq!(
        strip_seconds(&log),
        strip_seconds(&std::fs::read_to_string(second.join("train_log.csv")).unwrap())
    );
    let dump = std::fs::read_to_string(second.join("config.txt")).unwrap();
    assert!(dump.contains("sharing = soft") && dump.contains("seed = 4"));
}

/// Constant predictor that is right on a set whose samples all share `label`.
fn oracle_stub(label: LabelTriple) -> (ParamStore32, ModelSpec) {
    let spec = ModelSpec {
        encoder_channels: [2, 4, 4],
        head_hidden: 2,
        ..ModelSpec::default()
    };
    let mut p: ParamStore32 = build_model_unchecked(&spec, 0).unwrap();
    for (_, t) in p.iter_mut() {
        t.data_mut().fill(0.0);
    }
    p.get_mut("age/fc2/bias").unwrap().data_mut()[0] = f32::from(label.age);
    p.get_mut("gender/fc2/bias").unwrap().data_mut()[0] = if label.gender.index() == 1 { 8.0 } else { -8.0 };
    p.get_mut("ethnicity/fc2/bias").unwrap().data_mut()[label.ethnicity.index()] = 8.0;
    (p, spec)
}

#[test]
fn eval_of_oracle_stub_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("toy");
    let part2 = data.join("part2");
    std::fs::create_dir_all(&part2).unwrap();
    let label = LabelTriple::new(25, 1, 3).unwrap();
    for i in 0..3 {
        synth_face(&label, i, 48).save(part2.join(format!("{label}_{i}.png"))).unwrap();
    }
    let (p, spec) = oracle_stub(label);
    let ckpt = tmp.path().join("stub.mmtl");
    save_checkpoint(&ckpt, &p, &spec).unwrap();
    let out = tmp.path().join("eval");
    let res = ok(&["eval", "--root", s(&data), "--checkpoint", s(&ckpt), "--out", s(&out)]);
    let line = String::from_utf8(res.stdout).unwrap();
    assert_eq!(line.trim(), "gender_acc 1.0000 race_acc 1.0000 age_l1 0.00");

    let eth = std::fs::read_to_string(out.join("ethnicity_confusion.csv")).unwrap();
    let rows: Vec<&str> = eth.lines().collect();
    assert_eq!(rows[0], "true\\pred,White,Black,Asian,Indian,Others");
    assert_eq!(rows[4], "Indian,0,0,0,3,0");
    let gender = std::fs::read_to_string(out.join("gender_confusion.csv")).unwrap();
    assert_eq!(gender, "true\\pred,Male,Female\nMale,0,0\nFemale,0,3\n");
    for f in ["metrics.csv", "metrics.txt", "gender_prf1.csv", "ethnicity_prf1.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }

    let err = fails(&[
        "eval",
        "--root",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--set",
        "model.sharing=hard",
    ]);
    assert!(err.contains("spec conflict"), "{err}");
}

#[test]
fn cam_outputs_and_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("m.mmtl");
    let spec = ModelSpec {
        encoder_channels: [2, 4, 4],
        head_hidden: 4,
        ..ModelSpec::default()
    };
    let p: ParamStore32 = build_model_unchecked(&spec, 1).unwrap();
    save_checkpoint(&ckpt, &p, &spec).unwrap();
    let img = tmp.path().join("face.png");
    synth_face(&LabelTriple::new(40, 0, 2).unwrap(), 3, 96).save(&img).unwrap();
    let out = tmp.path().join("cams");
    let base = ["cam", "--checkpoint", s(&ckpt), "--image", s(&img), "--out", s(&out)];

    let mut age = base.to_vec();
    age.extend(["--head", "age", "--class", "3"]);
    ok(&age);
    assert!(out.join("face_age_cam.pgm").is_file());
    assert!(out.join("face_age_overlay.ppm").is_file());

    let mut eth = base.to_vec();
    eth.extend(["--head", "ethnicity"]);
    let printed = String::from_utf8(ok(&eth).stdout).unwrap();
    let pgm = PathBuf::from(printed.lines().next().unwrap());
    let name = pgm.file_name().unwrap().to_str().unwrap().to_string();
    assert!(name.starts_with("face_ethnicity_") && name.ends_with("_cam.pgm"), "{name}");

    let mut named = base.to_vec();
    named.extend(["--head", "ethnicity", "--class", "asian"]);
    ok(&named);
    let cam = std::fs::read(out.join("face_ethnicity_2_cam.pgm")).unwrap();
    let overlay = std::fs::read(out.join("face_ethnicity_2_overlay.ppm")).unwrap();
    assert_eq!(&cam[..2], b"P5");
    assert_eq!(&overlay[..2], b"P6");
    let gray = image::open(out.join("face_ethnicity_2_cam.pgm")).unwrap();
    assert_eq!((gray.width(), gray.height()), (48, 48));
    let rgb = image::open(out.join("face_ethnicity_2_overlay.ppm")).unwrap();
    assert_eq!((rgb.width(), rgb.height()), (48, 48));

    let mut bad = base.to_vec();
    bad.extend(["--head", "ethnicity", "--class", "7"]);
    fails(&bad);
    let mut bad = base.to_vec();
    bad.extend(["--head", "gender", "--class", "nobody"]);
    fails(&bad);
}

#[test]
fn errors_are_single_prefixed_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let err = fails(&["eval", "--checkpoint", s(&tmp.path().join("missing.mmtl"))]);
    assert_eq!(err.lines().filter(|l| l.starts_with("error:")).count(), 1);
    let out = tmp.path().join("run");
    fails(&["train", "--root", s(&tmp.path().join("nowhere")), "--epochs", "1", "--out", s(&out)]);
    assert!(!out.exists(), "failed runs leave no output behind");
    let bad = tmp.path().join("bad.cfg");
    std::fs::write(&bad, "train.epochs = lots\n").unwrap();
    let err = fails(&["train", "--config", s(&bad)]);
    assert!(err.contains("bad.cfg:1"), "{err}");
    let out = bin()
        .args(["train", "--epochs", "0", "--out", s(&tmp.path().join("x"))])
        .env("FACEMTL_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!out.status.success());
}
