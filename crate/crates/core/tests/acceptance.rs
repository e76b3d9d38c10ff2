//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any criterion fails.
//!
//! The full-dataset criterion runs only when `FACEMTL_UTKFACE` (and optionally
//! `FACEMTL_UTKFACE_MASKED`) point at dataset roots.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use common::{naive_conv, naive_non_local, rand_tensor, small_spec};
use facemtl::data::synth::synth_dataset;
use facemtl::data::{load_split, tensor_to_image, InMemoryDataset, MaskRanges, SampleSource, Split};
use facemtl::eval::{accuracy, grad_cam, prf1, ConfusionMatrix, MetricsReport};
use facemtl::layers::{self, Activation, Conv2DParams, Conv2d, Dense, NonLocal};
use facemtl::model::{build_model, build_model_unchecked, forward_on_tape, ModelSpec, Sharing, Task};
use facemtl::tensor::grad_check;
use facemtl::train::{decode_checkpoint, encode_checkpoint, multitask_loss_on_tape, predict, train, TrainConfig};
use facemtl::{ParamStore32, ParamStore64, Result, Tape64, Tensor, Var};

type Outcome = std::result::Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_1() -> Outcome {
    let eth: Vec<Vec<u64>> = common::REF_ETHNICITY_CONFUSION.iter().map(|r| r.to_vec()).collect();
    let names = ["White", "Black", "Asian", "Indian", "Others"];
    let m = ConfusionMatrix::from_counts(eth, &names).unwrap();
    let got = prf1(&m);
    let mut worst: f64 = 0.0;
    for (c, want) in common::REF_ETHNICITY_PRF1.iter().enumerate() {
        for (g, w) in [got.precision[c], got.recall[c], got.f1[c]].iter().zip(want) {
            worst = worst.max((g - w).abs());
        }
    }
    let gender: Vec<Vec<u64>> = common::REF_GENDER_CONFUSION.iter().map(|r| r.to_vec()).collect();
    let gm = ConfusionMatrix::from_counts(gender, &["Male", "Female"]).unwrap();
    let g = prf1(&gm);
    for (got, want) in [g.precision[1], g.recall[1], g.f1[1]].iter().zip(common::REF_FEMALE_PRF1) {
        worst = worst.max((got - want).abs());
    }
    // The reference Male row disagrees with the reference gender matrix; it is reported, not gated.
    let male = [g.precision[0], g.recall[0], g.f1[0]];
    let male_gap = male
        .iter()
        .zip(common::REF_MALE_PRF1)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let (ea, ga) = (accuracy(&m).unwrap(), accuracy(&gm).unwrap());
    let acc_ok = (ea - 3991.0 / 5305.0).abs() < 1e-12 && (ga - 3920.0 / 4665.0).abs() < 1e-12;
    check(
        worst <= 0.005 && acc_ok && male_gap > 0.005,
        format!(
            "max |prf1 - table| {worst:.4} (tol 0.005); acc eth {ea:.4} gender {ga:.4}; Male row exempt (gap {male_gap:.3})"
        ),
    )
}

fn project(tape: &mut Tape64, out: Var, seed: u64) -> Result<Var> {
    let r = tape.constant(rand_tensor(tape.shape(out), seed ^ 0xabc));
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

fn layer_error<F>(mut params: ParamStore64, shape: &[usize], seed: u64, layer: F) -> f64
where
    F: Fn(&mut Tape64, Var) -> Result<Var>,
{
    params.insert("x", rand_tensor(shape, seed)).unwrap();
    grad_check(
        |tape, _| {
            let x = tape.param_by_name("x")?;
            let out = layer(tape, x)?;
            project(tape, out, seed)
        },
        &params,
        &Tensor::scalar(0.0),
        1e-5,
    )
    .unwrap()
    .max_rel_error
}

fn criterion_2() -> Outcome {
    let mut errs: Vec<(String, f64)> = Vec::new();
    for seed in 1..=3u64 {
        let mut p = ParamStore64::new();
        p.insert("c/weights", rand_tensor(&[3, 2, 3, 3], seed + 10)).unwrap();
        p.insert("c/bias", rand_tensor(&[3], seed + 20)).unwrap();
        errs.push(("conv2d".into(), layer_error(p, &[2, 2, 6, 6], seed, |t, x| {
            let l = Conv2d::from_tape(t, "c", 1, 1)?;
            layers::conv2d(t, x, &l)
        })));
        let mut p = ParamStore64::new();
        p.insert("d/weights", rand_tensor(&[3, 4], seed + 30)).unwrap();
        p.insert("d/bias", rand_tensor(&[3], seed + 40)).unwrap();
        errs.push(("dense".into(), layer_error(p, &[3, 4], seed, |t, x| {
            let l = Dense::from_tape(t, "d")?;
            layers::dense(t, x, &l)
        })));
        errs.push(("maxpool".into(), layer_error(ParamStore64::new(), &[2, 3, 6, 8], seed, |t, x| {
            layers::maxpool2d(t, x, 2)
        })));
        for kind in [Activation::Relu, Activation::Sigmoid, Activation::Softmax] {
            errs.push((format!("{kind:?}").to_lowercase(), layer_error(ParamStore64::new(), &[4, 5], seed, |t, x| {
                Ok(layers::activation(t, x, kind))
            })));
        }
        let mut p = ParamStore64::new();
        for (i, part) in ["theta", "phi", "g"].into_iter().enumerate() {
            p.insert(format!("nl/{part}"), rand_tensor(&[4, 8], seed * 7 + i as u64)).unwrap();
        }
        p.insert("nl/w_z", rand_tensor(&[8, 4], seed * 7 + 5)).unwrap();
        errs.push(("non_local".into(), layer_error(p, &[1, 8, 4, 4], seed, |t, x| {
            let b = NonLocal::from_tape(t, "nl")?;
            layers::non_local(t, x, &b)
        })));
    }
    let labels = vec![
        facemtl::data::LabelTriple::new(31, 1, 2).unwrap(),
        facemtl::data::LabelTriple::new(7, 0, 4).unwrap(),
    ];
    for sharing in [Sharing::Hierarchical, Sharing::Hard, Sharing::Soft] {
        let spec = small_spec(sharing);
        let mut params: ParamStore64 = build_model_unchecked(&spec, 11).unwrap();
        for (i, (name, t)) in params.iter_mut().enumerate() {
            if name.ends_with("w_z") || name.ends_with("bias") || sharing == Sharing::Soft {
                let noise = rand_tensor(t.shape(), 100 + i as u64);
                for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
                    *v += 0.1 * n;
                }
            }
        }
        let input = rand_tensor(&[2, 3, 48, 48], 5).map(|v| 0.5 + 0.5 * v);
        let snapshot = params.clone();
        let report = grad_check(
            |tape, x| {
                let heads = forward_on_tape(tape, &spec, x)?;
                Ok(multitask_loss_on_tape(tape, &heads, &labels, &spec, &snapshot, 0.5)?.total)
            },
            &params,
            &input,
            1e-5,
        )
        .unwrap();
        let covered = report.per_param.len() == params.len();
        errs.push((format!("loss/{sharing}"), if covered { report.max_rel_error } else { f64::INFINITY }));
    }
    let (name, worst) = errs.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    check(
        worst < 1e-4,
        format!("{} checks, max relative error {worst:.2e} ({name}), tol 1e-4", errs.len()),
    )
}

fn criterion_3() -> Outcome {
    let spec = ModelSpec::default();
    let p: ParamStore32 = build_model(&spec, 0).unwrap();
    let count = p.param_count("encoder").unwrap() + p.param_count("non_local").unwrap();
    check(
        (250_000..=350_000).contains(&count),
        format!("encoder + non-local = {count} (window 250000..=350000), whole model {}", p.total_count()),
    )
}

/// The overfit model, shared by criteria 4 and 6.
struct Overfit {
    spec: ModelSpec,
    data: InMemoryDataset,
    plain: InMemoryDataset,
    params: ParamStore32,
    report: MetricsReport,
}

fn overfit() -> Overfit {
    let spec = ModelSpec::default();
    let data = synth_dataset(64, 7, Some(&MaskRanges::default())).unwrap();
    let plain = synth_dataset(64, 7, None).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        seed: 1,
        ..TrainConfig::default()
    };
    let params = train(&spec, build_model::<f32>(&spec, 1).unwrap(), &data, &cfg).unwrap().params;
    let pred = predict(&params, &spec, &data, 32).unwrap();
    let labels: Vec<_> = (0..data.len()).map(|i| data.label(i)).collect();
    let report = MetricsReport::from_predictions(&pred, &labels).unwrap();
    Overfit { spec, data, plain, params, report }
}

fn criterion_4(o: &Overfit) -> Outcome {
    let r = &o.report;
    let fit = r.gender_acc == 1.0 && r.race_acc == 1.0 && r.age_l1 < 2.0;

    // Grad-CAM on the masked inputs; the mask line is the first row where the masked
    // image departs from its unmasked twin.
    let mut shares = Vec::new();
    let mut area_above = 0.0;
    for i in 0..o.data.len() {
        let (masked, clean) = (&o.data.images[i], &o.plain.images[i]);
        let row = (0..48)
            .find(|&y| (0..3).any(|c| (0..48).any(|x| masked[(c * 48 + y) * 48 + x] != clean[(c * 48 + y) * 48 + x])))
            .unwrap_or(48);
        let class = o.data.label(i).ethnicity.index();
        let cam = grad_cam(&o.params, &o.spec, masked, Task::Ethnicity, Some(class)).unwrap();
        shares.push(cam.top_decile_mass_above(row));
        area_above += row as f64 / 48.0 / o.data.len() as f64;
    }
    let mean = shares.iter().sum::<f64>() / shares.len() as f64;
    let majority = shares.iter().filter(|&&s| s > 0.5).count();
    check(
        fit && mean > 0.5,
        format!(
            "{}; ethnicity CAM top-decile mass above mask line {mean:.3} (need > 0.5; {majority}/64 images; area above line {area_above:.3})",
            r.summary_line()
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let mut seed = 0;
    for n in 1..=2 {
        for c in 1..=3 {
            for h in 3..=7 {
                for (k, stride, pad) in [(3, 1, 1), (3, 1, 0), (1, 1, 0), (3, 2, 1)] {
                    if (h + 2 * pad - k) % stride != 0 {
                        continue;
                    }
                    seed += 1;
                    let x = rand_tensor(&[n, c, h, h + 1 - stride], seed);
                    if (x.shape()[3] + 2 * pad - k) % stride != 0 {
                        continue;
                    }
                    let w = rand_tensor(&[2, c, k, k], seed + 7000);
                    let b = rand_tensor(&[2], seed + 9000);
                    let mut tape = Tape64::inference();
                    let xv = tape.constant(x.clone());
                    let layer = Conv2DParams::new(w.clone(), b.clone(), stride, pad).unwrap().bind(&mut tape, "c").unwrap();
                    let y = layers::conv2d(&mut tape, xv, &layer).unwrap();
                    worst = worst.max(tape.value(y).max_abs_diff(&naive_conv(&x, &w, &b, stride, pad)).unwrap());
                    cases += 1;
                }
            }
        }
    }
    for (i, shape) in [[1, 2, 2, 2], [1, 4, 3, 3], [2, 6, 4, 3], [1, 8, 4, 4]].iter().enumerate() {
        let ch = shape[1];
        let parts: Vec<Tensor<f64>> = (0..4)
            .map(|j| {
                let shape = if j == 3 { [ch, ch / 2] } else { [ch / 2, ch] };
                rand_tensor(&shape, 50 + 4 * i as u64 + j)
            })
            .collect();
        let mut p = ParamStore64::new();
        for (name, t) in ["theta", "phi", "g", "w_z"].iter().zip(&parts) {
            p.insert(format!("nl/{name}"), t.clone()).unwrap();
        }
        let x = rand_tensor(shape, 500 + i as u64);
        let mut tape = Tape64::inference();
        p.register(&mut tape).unwrap();
        let xv = tape.constant(x.clone());
        let block = NonLocal::from_tape(&tape, "nl").unwrap();
        let y = layers::non_local(&mut tape, xv, &block).unwrap();
        let (want, _) = naive_non_local(&x, &parts[0], &parts[1], &parts[2], &parts[3]);
        worst = worst.max(tape.value(y).max_abs_diff(&want).unwrap());
        cases += 1;
    }
    check(worst < 1e-6, format!("{cases} shapes, max |fast - naive| {worst:.2e} (tol 1e-6)"))
}

fn png_bytes(ds: &InMemoryDataset) -> Vec<Vec<u8>> {
    ds.images
        .iter()
        .map(|t| {
            let mut buf = std::io::Cursor::new(Vec::new());
            tensor_to_image(t).unwrap().write_to(&mut buf, image::ImageFormat::Png).unwrap();
            buf.into_inner()
        })
        .collect()
}

fn criterion_6(o: &Overfit) -> Outcome {
    let again = synth_dataset(64, 7, Some(&MaskRanges::default())).unwrap();
    let same_data = png_bytes(&again) == png_bytes(&o.data);

    let spec = small_spec(Sharing::Hierarchical);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        seed: 4,
        ..TrainConfig::default()
    };
    let curve = || {
        let p: ParamStore32 = build_model_unchecked(&spec, 2).unwrap();
        let out = train(&spec, p, &o.data, &cfg).unwrap();
        out.log.iter().map(|r| r.loss).collect::<Vec<_>>()
    };
    let same_curve = curve() == curve();

    let bytes = encode_checkpoint(&o.params, &o.spec).unwrap();
    let (back, back_spec) = decode_checkpoint::<f32>(&bytes).unwrap();
    let a = predict(&o.params, &o.spec, &o.data, 32).unwrap();
    let b = predict(&back, &back_spec, &o.data, 32).unwrap();
    let bits = |p: &facemtl::model::PredictionTriple<f32>| {
        p.age
            .iter()
            .chain(&p.gender_prob)
            .chain(p.ethnicity_probs.iter().flatten())
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    let same_out = bits(&a) == bits(&b);
    check(
        same_data && same_curve && same_out,
        format!("masked data identical {same_data}, loss curves identical {same_curve}, checkpoint forward bits identical {same_out}"),
    )
}

fn criterion_7() -> Option<Outcome> {
    let roots: Vec<(&str, PathBuf)> = [("unmasked", "FACEMTL_UTKFACE"), ("masked", "FACEMTL_UTKFACE_MASKED")]
        .into_iter()
        .filter_map(|(tag, var)| std::env::var_os(var).map(|p| (tag, PathBuf::from(p))))
        .collect();
    if roots.is_empty() {
        return None;
    }
    let mut lines = Vec::new();
    let mut ok = true;
    for (tag, root) in roots {
        let targets = if tag == "masked" { (0.8913, 0.7927, 12.15) } else { (0.8965, 0.7852, 11.57) };
        let train_set = load_split(&root, Split::Train).and_then(|d| d.load_into_memory()).unwrap();
        let test_set = load_split(&root, Split::Test).and_then(|d| d.load_into_memory()).unwrap();
        let labels: Vec<_> = (0..test_set.len()).map(|i| test_set.label(i)).collect();
        let mut race = Vec::new();
        for sharing in [Sharing::Hierarchical, Sharing::Hard, Sharing::Soft] {
            let spec = ModelSpec::with_sharing(sharing);
            let cfg = TrainConfig::default();
            let params = train(&spec, build_model::<f32>(&spec, 0).unwrap(), &train_set, &cfg).unwrap().params;
            let pred = predict(&params, &spec, &test_set, 64).unwrap();
            let r = MetricsReport::from_predictions(&pred, &labels).unwrap();
            if sharing == Sharing::Hierarchical {
                ok &= (r.gender_acc - targets.0).abs() <= 0.03
                    && (r.race_acc - targets.1).abs() <= 0.03
                    && (r.age_l1 - targets.2).abs() <= 1.5;
            }
            race.push(r.race_acc);
            lines.push(format!("{tag}/{sharing}: {}", r.summary_line()));
        }
        ok &= race[0] > race[1] && race[1] > race[2];
    }
    Some(check(ok, lines.join("; ")))
}

fn run(id: &str, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = started.elapsed().as_secs_f64();
    let (tag, detail, ok) = match result {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    println!("[{tag}] {id} {name}: {detail} [{secs:.1}s]");
    ok
}

fn main() {
    let mut ok = true;
    ok &= run("1", "metric oracle", criterion_1);
    ok &= run("2", "gradient suite", criterion_2);
    ok &= run("3", "parameter budget", criterion_3);
    let mut model = None;
    ok &= run("4", "overfit sanity", || {
        let o = overfit();
        let out = criterion_4(&o);
        model = Some(o);
        out
    });
    ok &= run("5", "conv and attention oracles", criterion_5);
    ok &= run("6", "determinism and persistence", || match &model {
        Some(o) => criterion_6(o),
        None => Err("overfit model unavailable".into()),
    });
    match criterion_7() {
        Some(outcome) => ok &= run("7", "full dataset reproduction", || outcome),
        None => println!("[SKIP] 7 full dataset reproduction: set FACEMTL_UTKFACE and/or FACEMTL_UTKFACE_MASKED to run"),
    }
    if !ok {
        std::process::exit(1);
    }
}
