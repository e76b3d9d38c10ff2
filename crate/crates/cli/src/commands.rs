use std::fmt::Write as _;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::codecs::pnm::{PnmSubtype, SampleEncoding};
use image::{ImageFormat, RgbImage};
use log::{info, warn};
use rayon::prelude::*;

use facemtl::data::synth::write_synth_tree;
use facemtl::data::{
    apply_mask, color_name, decode, load_split, preprocess, tensor_to_image, InMemoryDataset, MaskSpec, SampleSource,
    Split,
};
use facemtl::eval::{grad_cam, render_overlay, write_heatmap_pgm, write_ppm, MetricsReport};
use facemtl::model::{argmax, build_model, build_model_unchecked, forward, ModelSpec, Task};
use facemtl::train::{
    load_checkpoint, load_checkpoint_expecting, multitask_loss, predict, save_checkpoint, train_with, write_log_csv,
    EpochLog,
};
use facemtl::{ParamStore32, Tensor};

use crate::config::RunConfig;

pub const CONFIG_DUMP: &str = "config.txt";
pub const MANIFEST: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "filename,coverage,color,texture,seed";
const AUGMENT_CHUNK: usize = 64;

fn prepare_out(cfg: &mut RunConfig, out: PathBuf) -> Result<PathBuf> {
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    cfg.output_dir = Some(out.clone());
    std::fs::write(out.join(CONFIG_DUMP), cfg.to_text())
        .with_context(|| format!("writing {}", out.join(CONFIG_DUMP).display()))?;
    Ok(out)
}

fn default_out(cfg: &RunConfig, fallback: &str) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

/// Per-image mask seed: depends on the master seed and the relative path only.
pub fn image_seed(master: u64, rel: &str) -> u64 {
    let h = u64::from(crc32fast::hash(rel.as_bytes()));
    (master ^ (h << 32 | h)).wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17)
}

fn encode_like(img: &RgbImage, path: &Path) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    let is_ppm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        let enc = image::codecs::pnm::PnmEncoder::new(&mut buf).with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary));
        img.write_with_encoder(enc)?;
    } else {
        img.write_to(&mut buf, ImageFormat::Png)?;
    }
    Ok(buf.into_inner())
}

fn masked_default(root: &Path) -> PathBuf {
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    root.with_file_name(format!("{name}_masked"))
}

pub fn augment(mut cfg: RunConfig) -> Result<()> {
    cfg.validate()?;
    let root = cfg.dataset_root.clone();
    if !root.is_dir() {
        bail!("dataset root {} is not a directory", root.display());
    }
    let out = cfg.output_dir.clone().unwrap_or_else(|| masked_default(&root));
    let out = prepare_out(&mut cfg, out)?;

    let mut rels: Vec<String> = walkdir::WalkDir::new(&root)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && facemtl::data::dataset::has_image_extension(e.path()))
        .filter_map(|e| {
            e.path()
                .strip_prefix(&root)
                .ok()
                .map(|p| p.to_string_lossy().replace('\\', "/"))
        })
        .collect();
    rels.sort();
    if rels.is_empty() {
        warn!("no images found under {}", root.display());
    }

    let mut manifest = format!("{MANIFEST_HEADER}\n");
    let mut failures = 0usize;
    for chunk in rels.chunks(AUGMENT_CHUNK) {
        let results: Vec<(String, Result<(MaskSpec, Vec<u8>)>)> = chunk
            .par_iter()
            .map(|rel| {
                let work = || -> Result<(MaskSpec, Vec<u8>)> {
                    let src = root.join(rel);
                    let img = decode(&src)?;
                    let spec = cfg.mask.sample(image_seed(cfg.seed, rel));
                    let masked = apply_mask(&img, &spec)?;
                    Ok((spec, encode_like(&masked, &src)?))
                };
                (rel.clone(), work())
            })
            .collect();
        for (rel, res) in results {
            match res {
                Ok((spec, bytes)) => {
                    let dst = out.join(&rel);
                    if let Some(parent) = dst.parent() {
                        std::fs::create_dir_all(parent)?;
                    }
                    std::fs::write(&dst, bytes).with_context(|| format!("writing {}", dst.display()))?;
                    let _ = writeln!(
                        manifest,
                        "{rel},{:.6},{},{},{}",
                        spec.coverage,
                        color_name(spec.color),
                        spec.texture,
                        spec.seed
                    );
                }
                Err(e) => {
                    failures += 1;
                    warn!("skipping {rel}: {e:#}");
                }
            }
        }
    }
    std::fs::write(out.join(MANIFEST), manifest)?;
    if failures > 0 {
        warn!("{failures} of {} images could not be masked", rels.len());
    }
    info!("masked {} images into {}", rels.len() - failures, out.display());
    Ok(())
}

fn load_split_in_memory(root: &Path, split: Split) -> Result<InMemoryDataset> {
    let ds = load_split(root, split)?;
    info!("{split}: {} samples", ds.len());
    Ok(ds.load_into_memory()?)
}

fn labels_of(ds: &InMemoryDataset) -> Vec<facemtl::data::LabelTriple> {
    (0..ds.len()).map(|i| ds.label(i)).collect()
}

const VAL_HEADER: &str = "epoch,total,age_l1,gender_bce,ethnicity_cce,soft_penalty,gender_acc,race_acc";

pub fn train(mut cfg: RunConfig) -> Result<()> {
    cfg.validate()?;
    let spec = cfg.model.clone();
    let params: ParamStore32 = if cfg.enforce_budget {
        build_model(&spec, cfg.seed)?
    } else {
        build_model_unchecked(&spec, cfg.seed)?
    };
    info!("model: {} parameters, {} sharing", params.total_count(), spec.sharing);
    if cfg.train.epochs == 0 {
        let out = default_out(&cfg, "runs");
        let out = prepare_out(&mut cfg, out)?;
        save_checkpoint(&out.join("final.mmtl"), &params, &spec)?;
        info!("epochs = 0: wrote the initialised checkpoint");
        return Ok(());
    }

    let train_set = load_split_in_memory(&cfg.dataset_root, Split::Train)?;
    let val_set = load_split_in_memory(&cfg.dataset_root, Split::Val)?;
    if val_set.is_empty() {
        warn!("validation split is empty; best.mmtl will equal final.mmtl");
    }
    let out = default_out(&cfg, "runs");
    let out = prepare_out(&mut cfg, out)?;
    let val_labels = labels_of(&val_set);
    let mut tcfg = cfg.train.clone();
    tcfg.seed = cfg.seed;

    let mut train_rows: Vec<EpochLog> = Vec::new();
    let mut val_csv = format!("{VAL_HEADER}\n");
    let mut best = f64::INFINITY;
    let outcome = train_with(&spec, params, &train_set, &tcfg, |row, params| {
        train_rows.push(*row);
        write_log_csv(&out.join("train_log.csv"), &train_rows)?;
        if !val_set.is_empty() {
            let pred = predict(params, &spec, &val_set, tcfg.batch_size)?;
            let loss = multitask_loss(&pred, &val_labels, &spec, params, tcfg.soft_lambda)?.to_f64();
            let report = MetricsReport::from_predictions(&pred, &val_labels)?;
            let _ = writeln!(
                val_csv,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                row.epoch,
                loss.total,
                loss.age_l1,
                loss.gender_bce,
                loss.ethnicity_cce,
                loss.soft_penalty,
                report.gender_acc,
                report.race_acc
            );
            std::fs::write(out.join("val_log.csv"), &val_csv)?;
            info!("epoch {} validation {}", row.epoch, report.summary_line());
            if loss.total < best {
                best = loss.total;
                save_checkpoint(&out.join("best.mmtl"), params, &spec)?;
            }
        }
        if cfg.checkpoint_every > 0 && row.epoch % cfg.checkpoint_every == 0 {
            save_checkpoint(&out.join(format!("epoch_{:04}.mmtl", row.epoch)), params, &spec)?;
        }
        Ok(())
    })?;
    write_log_csv(&out.join("train_log.csv"), &outcome.log)?;
    std::fs::write(out.join("val_log.csv"), &val_csv)?;
    save_checkpoint(&out.join("final.mmtl"), &outcome.params, &spec)?;
    if val_set.is_empty() {
        save_checkpoint(&out.join("best.mmtl"), &outcome.params, &spec)?;
    }
    info!("wrote checkpoints and logs to {}", out.display());
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(ParamStore32, ModelSpec)> {
    let ctx = || format!("loading {}", checkpoint.display());
    if cfg.model_explicit {
        let params = load_checkpoint_expecting(checkpoint, &cfg.model).with_context(ctx)?;
        Ok((params, cfg.model.clone()))
    } else {
        Ok(load_checkpoint(checkpoint).with_context(ctx)?)
    }
}

pub fn eval(mut cfg: RunConfig, checkpoint: &Path, split: Split) -> Result<String> {
    let (params, spec) = load_model(&cfg, checkpoint)?;
    let set = load_split_in_memory(&cfg.dataset_root, split)?;
    if set.is_empty() {
        bail!("{split} split is empty");
    }
    let out = default_out(&cfg, "eval");
    let out = prepare_out(&mut cfg, out)?;
    let pred = predict(&params, &spec, &set, cfg.train.batch_size)?;
    let report = MetricsReport::from_predictions(&pred, &labels_of(&set))?;
    std::fs::write(out.join("metrics.csv"), report.to_csv())?;
    std::fs::write(out.join("metrics.txt"), report.to_text())?;
    std::fs::write(out.join("gender_confusion.csv"), report.gender.to_csv())?;
    std::fs::write(out.join("ethnicity_confusion.csv"), report.ethnicity.to_csv())?;
    std::fs::write(out.join("gender_prf1.csv"), report.gender_metrics.to_csv())?;
    std::fs::write(out.join("ethnicity_prf1.csv"), report.ethnicity_metrics.to_csv())?;
    Ok(report.summary_line())
}

/// Class argument as an index or a class name.
pub fn parse_class(head: Task, s: &str) -> Result<usize> {
    let names: &[&str] = match head {
        Task::Age => return Ok(0),
        Task::Gender => &facemtl::data::Gender::NAMES,
        Task::Ethnicity => &facemtl::data::Ethnicity::NAMES,
    };
    let idx = match s.trim().parse::<usize>() {
        Ok(i) => i,
        Err(_) => names
            .iter()
            .position(|n| n.eq_ignore_ascii_case(s.trim()))
            .with_context(|| format!("unknown {head} class `{s}`; expected one of {}", names.join(", ")))?,
    };
    if idx >= names.len() {
        bail!("{head} class {idx} out of range 0..{}", names.len());
    }
    Ok(idx)
}

/// Returns the two written paths.
pub fn cam(
    mut cfg: RunConfig,
    checkpoint: &Path,
    image: &Path,
    head: Task,
    class: Option<&str>,
) -> Result<(PathBuf, PathBuf)> {
    let (params, spec) = load_model(&cfg, checkpoint)?;
    let input: Tensor<f32> = preprocess(&decode(image)?);
    let class = match (head, class) {
        (Task::Age, _) => None,
        (_, Some(c)) => Some(parse_class(head, c)?),
        (_, None) => {
            let batch = input.reshape([1, 3, 48, 48])?;
            let pred = forward(&params, &spec, &batch)?;
            Some(match head {
                Task::Gender => pred.gender_classes()[0],
                _ => argmax(&pred.ethnicity_probs[0]),
            })
        }
    };
    let heat = grad_cam(&params, &spec, &input, head, class)?;
    let out = default_out(&cfg, "cam");
    let out = prepare_out(&mut cfg, out)?;
    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let base = match class {
        Some(c) => format!("{stem}_{head}_{c}"),
        None => format!("{stem}_{head}"),
    };
    let pgm = out.join(format!("{base}_cam.pgm"));
    let ppm = out.join(format!("{base}_overlay.ppm"));
    write_heatmap_pgm(&pgm, &heat)?;
    write_ppm(&ppm, &render_overlay(&tensor_to_image(&input)?, &heat)?)?;
    Ok((pgm, ppm))
}

pub fn synth(cfg: RunConfig, counts: [usize; 3], size: u32) -> Result<PathBuf> {
    let out = cfg.output_dir.clone().unwrap_or_else(|| cfg.dataset_root.clone());
    write_synth_tree(&out, counts, cfg.seed, size)?;
    info!("wrote {} synthetic faces to {}", counts.iter().sum::<usize>(), out.display());
    Ok(out)
}
