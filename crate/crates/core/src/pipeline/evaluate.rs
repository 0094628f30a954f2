use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use log::info;
use rayon::prelude::*;

use crate::array_io::{ArrayData, PortableArray};
use crate::backbone::encode;
use crate::error::{KmtrError, Result};
use crate::heads::{classify, reconstruct, regress, segment, Task, N_PHENOTYPES};
use crate::kspace::{undersample, zero_filled};
use crate::metrics::{binary_metrics, dice, foreground_dice, mean_abs_error, psnr, MetricReport};
use crate::phantom::{SegmentationMap, DISEASE_NAMES, PHENOTYPE_NAMES};
use crate::tokenizer::Domain;

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::data::{Dataset, Split, Subject};
use super::train::{finetune, finetune_stage, EncoderVariant, FinetuneMeta};
use super::{checkpoint_path, report_dir};

pub const PREDICTION_DIR: &str = "predictions";
pub const SWEEP_FILE: &str = "sweep_r.csv";
pub const CLASS_THRESHOLD: f64 = 0.5;
const CLASS_NAMES: [&str; 3] = ["lv", "myo", "rv"];

enum Prediction {
    Regression([f64; N_PHENOTYPES]),
    Classification(Vec<f64>),
    Segmentation(SegmentationMap),
    Reconstruction { image: Vec<f64>, zero_filled: Vec<f64> },
}

fn check_disjoint(meta: &FinetuneMeta, split: Split, subjects: &[&Subject]) -> Result<()> {
    let mut seen: BTreeSet<&str> = meta.train_ids.iter().map(String::as_str).collect();
    if split == Split::Test {
        seen.extend(meta.val_ids.iter().map(String::as_str));
    }
    match subjects.iter().find(|s| seen.contains(s.id())) {
        Some(s) => Err(KmtrError::SplitContamination(format!("{} is in the {split} split but was used to fit the checkpoint", s.id()))),
        None => Ok(()),
    }
}

fn predict(cfg: &ExperimentConfig, data: &Dataset, ckpt: &Checkpoint, meta: &FinetuneMeta, s: &Subject) -> Result<Prediction> {
    let seq = data.kspace_input(s, &data.mask(cfg, s, meta.r, 0)?)?;
    if seq.domain != Domain::Kspace || seq.fully_sampled {
        return Err(KmtrError::DomainViolation(format!("{}: evaluation input must be undersampled k-space", s.id())));
    }
    let p = &ckpt.params;
    Ok(match meta.task {
        Task::Regression => Prediction::Regression(regress(&encode(&seq, p, &meta.encoder)?, p, &meta.target_norm)?.to_array()),
        Task::Classification => Prediction::Classification(classify(&encode(&seq, p, &meta.encoder)?, p)?),
        Task::Segmentation => Prediction::Segmentation(segment(&seq, p, &meta.encoder, &meta.heads)?.map),
        Task::Reconstruction => {
            let xu = undersample(&s.kspace, &data.mask(cfg, s, meta.r, 0)?)?;
            let zf = zero_filled(&xu).magnitude().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
            Prediction::Reconstruction { image: reconstruct(&seq, p, &meta.encoder, &meta.heads)?, zero_filled: zf }
        }
    })
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn export(dir: &Path, task: Task, subjects: &[&Subject], preds: &[Prediction]) -> Result<()> {
    fs::create_dir_all(dir)?;
    match task {
        Task::Regression | Task::Classification => {
            let mut w = csv::Writer::from_path(dir.join(format!("{}.csv", task.name())))?;
            let names: Vec<&str> = if task == Task::Regression { PHENOTYPE_NAMES.to_vec() } else { DISEASE_NAMES.to_vec() };
            let mut header = vec!["subject_id".to_string()];
            header.extend(names.iter().map(|n| format!("pred_{n}")));
            header.extend(names.iter().map(|n| format!("true_{n}")));
            w.write_record(&header)?;
            for (s, p) in subjects.iter().zip(preds) {
                let mut row = vec![s.id().to_string()];
                match p {
                    Prediction::Regression(v) => {
                        row.extend(v.iter().map(|x| format!("{x}")));
                        row.extend(s.phenotypes().iter().map(|x| format!("{x}")));
                    }
                    Prediction::Classification(v) => {
                        row.extend(v.iter().map(|x| format!("{x}")));
                        row.extend(s.disease_labels().iter().map(|&b| (b as u8).to_string()));
                    }
                    _ => unreachable!(),
                }
                w.write_record(&row)?;
            }
            w.flush()?;
        }
        Task::Segmentation | Task::Reconstruction => {
            for (s, p) in subjects.iter().zip(preds) {
                let a = match p {
                    Prediction::Segmentation(m) => m.to_portable(),
                    Prediction::Reconstruction { image, .. } => PortableArray::new(s.kspace.shape().to_vec(), ArrayData::F32(image.iter().map(|&v| v as f32).collect()))?,
                    _ => unreachable!(),
                };
                a.save(&dir.join(format!("{}.kmtr", s.id())))?;
            }
        }
    }
    Ok(())
}

/// Scores a task checkpoint on `split`, writes the report and predictions, and returns the report.
pub fn score(cfg: &ExperimentConfig, data: &Dataset, ckpt: &Checkpoint, split: Split, out: &Path) -> Result<MetricReport> {
    let meta: FinetuneMeta = ckpt.meta("finetune")?;
    let subjects = data.split(split);
    check_disjoint(&meta, split, &subjects)?;
    let preds = subjects.par_iter().map(|s| predict(cfg, data, ckpt, &meta, s)).collect::<Result<Vec<_>>>()?;
    let t = meta.task.name();
    let mut report = MetricReport::new(split.name(), subjects.len(), meta.r, cfg.seed);
    report.tags.insert("task".into(), t.into());
    report.tags.insert("encoder".into(), meta.variant.label().into());
    report.tags.insert("stage".into(), ckpt.header.stage.clone());
    report.tags.insert("config_hash".into(), ckpt.header.config_hash.clone());
    match meta.task {
        Task::Regression => {
            let truth: Vec<[f64; N_PHENOTYPES]> = subjects.iter().map(|s| s.phenotypes()).collect();
            let pred: Vec<[f64; N_PHENOTYPES]> = preds.iter().map(|p| if let Prediction::Regression(v) = p { *v } else { unreachable!() }).collect();
            let (mut maes, mut base) = (vec![], vec![]);
            for (j, name) in PHENOTYPE_NAMES.iter().enumerate() {
                let y: Vec<f64> = truth.iter().map(|r| r[j]).collect();
                let mae = mean_abs_error(&pred.iter().map(|r| r[j]).collect::<Vec<_>>(), &y)?;
                let b = mean_abs_error(&vec![meta.target_norm.mean[j]; y.len()], &y)?;
                let sd = meta.target_norm.std[j];
                report.insert(t, &format!("mae_{name}"), mae);
                report.insert(t, &format!("nmae_{name}"), mae / sd);
                report.insert(t, &format!("baseline_mae_{name}"), b);
                maes.push((mae, mae / sd));
                base.push((b, b / sd));
            }
            report.insert(t, "mean_mae", mean(maes.iter().map(|m| m.0)));
            report.insert(t, "nmae_mean", mean(maes.iter().map(|m| m.1)));
            report.insert(t, "baseline_mean_mae", mean(base.iter().map(|m| m.0)));
            report.insert(t, "baseline_nmae_mean", mean(base.iter().map(|m| m.1)));
        }
        Task::Classification => {
            let scores: Vec<&Vec<f64>> = preds.iter().map(|p| if let Prediction::Classification(v) = p { v } else { unreachable!() }).collect();
            for (d, name) in DISEASE_NAMES.iter().enumerate() {
                let s: Vec<f64> = scores.iter().map(|v| v[d]).collect();
                let y: Vec<bool> = subjects.iter().map(|x| x.disease_labels()[d]).collect();
                let m = binary_metrics(&s, &y, CLASS_THRESHOLD)?;
                report.insert_opt(t, &format!("{name}_auc"), m.auc);
                report.insert_opt(t, &format!("{name}_ap"), m.ap);
                report.insert(t, &format!("{name}_f1"), m.f1);
                report.insert(t, &format!("{name}_recall"), m.recall);
                report.insert(t, &format!("{name}_precision"), m.precision);
                report.insert(t, &format!("{name}_positives"), y.iter().filter(|&&b| b).count() as f64);
            }
        }
        Task::Segmentation => {
            let maps: Vec<&SegmentationMap> = preds.iter().map(|p| if let Prediction::Segmentation(m) = p { m } else { unreachable!() }).collect();
            for (c, name) in CLASS_NAMES.iter().enumerate() {
                let v = maps.iter().zip(&subjects).map(|(m, s)| dice(m, &s.seg, c as u8 + 1)).collect::<Result<Vec<_>>>()?;
                report.insert(t, &format!("dice_{name}"), mean(v));
            }
            let fg = maps.iter().zip(&subjects).map(|(m, s)| foreground_dice(m, &s.seg)).collect::<Result<Vec<_>>>()?;
            report.insert(t, "dice_foreground", mean(fg));
        }
        Task::Reconstruction => {
            let (mut ours, mut zf) = (vec![], vec![]);
            for (p, s) in preds.iter().zip(&subjects) {
                let Prediction::Reconstruction { image, zero_filled } = p else { unreachable!() };
                ours.push(psnr(image, &s.image)?);
                zf.push(psnr(zero_filled, &s.image)?);
            }
            let (a, b) = (mean(ours), mean(zf));
            report.insert(t, "psnr", a);
            report.insert(t, "zero_filled_psnr", b);
            report.insert(t, "psnr_gain", a - b);
        }
    }
    let stem = format!("{}_{}", ckpt.header.stage, split.name());
    export(&out.join(PREDICTION_DIR).join(&stem), meta.task, &subjects, &preds)?;
    let dir = report_dir(out);
    fs::create_dir_all(&dir)?;
    report.save(&dir, &stem)?;
    Ok(report)
}

/// Loads the task checkpoint for (task, variant, R) and scores it on `split`.
pub fn evaluate(cfg: &ExperimentConfig, data: &Dataset, task: Task, variant: EncoderVariant, r: Option<f64>, split: Split, out: &Path) -> Result<MetricReport> {
    let variant = variant.resolve(cfg);
    let r = r.unwrap_or_else(|| cfg.acceleration.for_task(task));
    let ckpt = Checkpoint::load(&checkpoint_path(out, &finetune_stage(task, variant, r)))?;
    if ckpt.header.config_hash != cfg.hash()? {
        return Err(KmtrError::Checkpoint(format!("{} was trained under a different config", ckpt.header.stage)));
    }
    let report = score(cfg, data, &ckpt, split, out)?;
    info!("evaluate {task} {variant} R={r} on {split}: {:?}", report.metrics.get(task.name()));
    Ok(report)
}

/// Regression fine-tune and test evaluation at every sweep acceleration; writes
/// `sweep_r.csv`. Checkpoints already trained under the same config are reused.
pub fn sweep_r(cfg: &ExperimentConfig, data: &Dataset, variant: EncoderVariant, out: &Path) -> Result<Vec<MetricReport>> {
    let t = Task::Regression.name();
    let dir = report_dir(out);
    fs::create_dir_all(&dir)?;
    let mut w = csv::Writer::from_path(dir.join(SWEEP_FILE))?;
    let mut header = vec!["R".to_string()];
    header.extend(PHENOTYPE_NAMES.iter().map(|n| format!("mae_{n}")));
    header.extend(["mean_mae", "nmae_mean", "baseline_mean_mae"].map(String::from));
    w.write_record(&header)?;
    let mut reports = Vec::new();
    for &r in &cfg.acceleration.sweep {
        let existing = checkpoint_path(out, &finetune_stage(Task::Regression, variant.resolve(cfg), r));
        let reusable = existing.exists() && Checkpoint::load(&existing)?.header.config_hash == cfg.hash()?;
        if !reusable {
            finetune(cfg, data, Task::Regression, variant, Some(r), out)?;
        }
        let rep = evaluate(cfg, data, Task::Regression, variant, Some(r), Split::Test, out)?;
        let mut row = vec![format!("{r}")];
        for n in PHENOTYPE_NAMES.iter().map(|n| format!("mae_{n}")).chain(["mean_mae", "nmae_mean", "baseline_mean_mae"].map(String::from)) {
            row.push(format!("{}", rep.get(t, &n).unwrap_or(f64::NAN)));
        }
        w.write_record(&row)?;
        reports.push(rep);
    }
    w.flush()?;
    Ok(reports)
}
