use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use kmtr::align::{contrastive_loss, contrastive_node, projector, projector_init, Activation, ContrastiveParams};
use kmtr::backbone::{init_mae, mae_objective, EncoderConfig, LossPositions};
use kmtr::heads::Task;
use kmtr::kspace::{fft2c, ifft2c, make_mask, undersample, ComplexVolume, MaskParams};
use kmtr::metrics::auc_roc;
use kmtr::nn::{grad_check, Mat, ParameterStore};
use kmtr::pipeline::{self, AlignSummary, Dataset, EncoderVariant, ExperimentConfig, Split};
use kmtr::tokenizer::{detokenize, random_visible_partition, tokenize, Domain, PatchGridSpec};
use kmtr::metrics::MetricReport;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

fn rand_volume(rng: &mut impl Rng, shape: [usize; 4]) -> ComplexVolume {
    let n = shape.iter().product();
    ComplexVolume::from_vec(shape, (0..n).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()).unwrap()
}

fn naive_dft(x: &[Complex64], h: usize, w: usize, sign: f64) -> Vec<Complex64> {
    let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
    let norm = 1.0 / ((h * w) as f64).sqrt();
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for ky in 0..h {
        for kx in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..h {
                for xx in 0..w {
                    let ph = sign * 2.0 * std::f64::consts::PI * ((ky as f64 - ch) * (y as f64 - ch) / h as f64 + (kx as f64 - cw) * (xx as f64 - cw) / w as f64);
                    acc += x[y * w + xx] * Complex64::from_polar(1.0, ph);
                }
            }
            out[ky * w + kx] = acc * norm;
        }
    }
    out
}

fn fft_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut diff, mut parseval) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let x = rand_volume(&mut rng, [1, 1, 8, 8]);
        let y = fft2c(&x);
        for (a, b) in y.data().iter().zip(naive_dft(x.data(), 8, 8, -1.0)) {
            diff = diff.max((a - b).norm());
        }
        for (a, b) in ifft2c(&x).data().iter().zip(naive_dft(x.data(), 8, 8, 1.0)) {
            diff = diff.max((a - b).norm());
        }
        let ex: f64 = x.data().iter().map(|z| z.norm_sqr()).sum();
        let ey: f64 = y.data().iter().map(|z| z.norm_sqr()).sum();
        parseval = parseval.max((ex - ey).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    (diff < 1e-10 && parseval < 1e-10 && secs < 1.0, format!("max |fft - dft| {diff:.2e}, Parseval gap {parseval:.2e}, {secs:.3}s"))
}

fn mask_budget() -> Outcome {
    let t = Instant::now();
    let (s, tt, w) = (2, 8, 128);
    let mut ok = true;
    let mut notes = vec![];
    for r in [2.0, 4.0, 8.0, 16.0] {
        let p = MaskParams { r, ..MaskParams::default() };
        let m = make_mask(s, tt, w, p, 7).unwrap();
        let want = (w as f64 / r).floor() as usize;
        let center: Vec<usize> = (w / 2 - p.center_lines / 2..w / 2 - p.center_lines / 2 + p.center_lines).collect();
        for si in 0..s {
            for ti in 0..tt {
                let n = (0..w).filter(|&c| m.get(si, ti, c)).count();
                ok &= n == want && center.iter().all(|&c| m.get(si, ti, c));
            }
        }
        let again = make_mask(s, tt, w, p, 7).unwrap();
        ok &= again.to_portable().to_bytes() == m.to_portable().to_bytes();
        notes.push(format!("R={r}: {want} cols"));
    }
    let secs = t.elapsed().as_secs_f64();
    (ok && secs < 1.0, format!("{}, {secs:.3}s", notes.join(", ")))
}

fn undersampling_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = 0usize;
    for i in 0..100 {
        let shape = [rng.gen_range(1..3), rng.gen_range(1..5), rng.gen_range(2..9) * 2, rng.gen_range(4..9) * 2];
        let x = rand_volume(&mut rng, shape);
        let r = [2.0, 4.0][i % 2];
        let m = make_mask(shape[0], shape[1], shape[3], MaskParams { r, center_lines: 1, density_sigma: 0.25 }, i as u64).unwrap();
        let u = undersample(&x, &m).unwrap();
        for s in 0..shape[0] {
            for t in 0..shape[1] {
                for h in 0..shape[2] {
                    for w in 0..shape[3] {
                        let (a, b) = (u.get(s, t, h, w), x.get(s, t, h, w));
                        let good = if m.get(s, t, w) { a.re.to_bits() == b.re.to_bits() && a.im.to_bits() == b.im.to_bits() } else { a.re == 0.0 && a.im == 0.0 };
                        bad += usize::from(!good);
                    }
                }
            }
        }
    }
    (bad == 0, format!("100 volumes, {bad} mismatching entries"))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

fn reference_loss(zi: &Mat, zk: &Mat, tau: f64, lambda: f64) -> f64 {
    let n = zi.nrows();
    let row = |m: &Mat, i: usize| m.row(i).to_vec();
    let directional = |a: &Mat, b: &Mat| {
        let mut l = 0.0;
        for m in 0..n {
            let pos = (cosine(&row(a, m), &row(b, m)) / tau).exp();
            let mut den = 0.0;
            for k in 0..n {
                if k != m {
                    den += (cosine(&row(a, m), &row(b, k)) / tau).exp();
                }
            }
            l -= (pos / den).ln();
        }
        l
    };
    lambda * directional(zi, zk) + (1.0 - lambda) * directional(zk, zi)
}

fn contrastive_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = ContrastiveParams { tau: 0.1, lambda: 0.5, include_positive_in_denominator: false };
    let mut worst = 0.0f64;
    for n in [2, 4, 8, 16] {
        for _ in 0..100 {
            let d = rng.gen_range(2..12);
            let zi = Mat::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
            let zk = Mat::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
            worst = worst.max((contrastive_loss(&zi, &zk, p).unwrap() - reference_loss(&zi, &zk, 0.1, 0.5)).abs());
        }
    }
    let e = Mat::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let hand = contrastive_loss(&e, &e, p).unwrap();
    (worst < 1e-6 && (hand + 20.0).abs() < 1e-9, format!("max |vectorized - double loop| {worst:.2e} over 400 batches, hand case {hand}"))
}

fn gradient_checks() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = EncoderConfig { dim: 8, depth: 1, dec_depth: 1, heads: 2, mlp_ratio: 2, grid: PatchGridSpec::new([1, 2, 2], [1, 2, 4, 4]).unwrap(), out_dim: None };
    let store = init_mae(&mut rng, &cfg).unwrap();
    let x = rand_volume(&mut rng, cfg.grid.volume);
    let l = cfg.grid.num_tokens();
    let (vis, hid) = random_visible_partition(l, 0.5, 9).unwrap();
    let seq = tokenize(&x, &cfg.grid, Domain::Kspace, false).unwrap().with_partition(vis, hid).unwrap();
    let target = Mat::from_shape_fn((l, cfg.patch_dim()), |_| rng.gen_range(-1.0..1.0));
    let mae = grad_check(&store, 1e-6, |g, s| mae_objective(g, s, &cfg, &seq, &target, LossPositions::Hidden)).unwrap();

    let mut ps = ParameterStore::new();
    projector_init(&mut ps, &mut rng, "proj_i", 6, 4).unwrap();
    projector_init(&mut ps, &mut rng, "proj_k", 6, 4).unwrap();
    let ci = Mat::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));
    let ck = Mat::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));
    let p = ContrastiveParams { tau: 0.1, lambda: 0.5, include_positive_in_denominator: false };
    let con = grad_check(&ps, 1e-6, |g, s| {
        let a = g.input(ci.clone());
        let b = g.input(ck.clone());
        let zi = projector(g, s, "proj_i", a, Activation::Gelu);
        let zk = projector(g, s, "proj_k", b, Activation::Gelu);
        Ok(contrastive_node(g, zi, zk, p)?.0)
    })
    .unwrap();
    let secs = t.elapsed().as_secs_f64();
    (
        mae.max_rel_error < 1e-4 && con.max_rel_error < 1e-4 && secs < 120.0,
        format!("mae_loss rel {:.2e} ({} params), contrastive rel {:.2e} ({} params), {secs:.1}s", mae.max_rel_error, mae.checked, con.max_rel_error, con.checked),
    )
}

fn tokenizer_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut exact = true;
    for _ in 0..50 {
        let patch = [rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..5)];
        let vol = [rng.gen_range(1..3), patch[0] * rng.gen_range(1..4), patch[1] * rng.gen_range(1..4), patch[2] * rng.gen_range(1..4)];
        let spec = PatchGridSpec::new(patch, vol).unwrap();
        let x = rand_volume(&mut rng, vol);
        let back = detokenize(&tokenize(&x, &spec, Domain::Image, true).unwrap(), &spec).unwrap();
        exact &= back.data().iter().zip(x.data()).all(|(a, b)| a.re.to_bits() == b.re.to_bits() && a.im.to_bits() == b.im.to_bits());
    }
    let mut counts = true;
    for l in [1usize, 7, 10, 33, 64, 128, 768] {
        let (vis, hid) = random_visible_partition(l, 0.70, l as u64).unwrap();
        counts &= hid.len() == (0.70 * l as f64).round() as usize && vis.len() + hid.len() == l;
    }
    (exact && counts, format!("50 random shapes bit-exact: {exact}; hidden == round(0.7 L): {counts}"))
}

struct Pipeline {
    align: AlignSummary,
    align_secs: f64,
    reg_aligned: MetricReport,
    reg_unaligned: MetricReport,
    reg_secs: f64,
    cls: MetricReport,
    seg: MetricReport,
    rec: MetricReport,
    sweep: Vec<MetricReport>,
}

fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> kmtr::Result<Pipeline> {
    let t = Instant::now();
    pipeline::gen_data(cfg, out)?;
    let data = Dataset::load(cfg, out)?;
    pipeline::pretrain(cfg, &data, Domain::Image, out)?;
    pipeline::pretrain(cfg, &data, Domain::Kspace, out)?;
    let (_, align) = pipeline::align(cfg, &data, out)?;
    let align_secs = t.elapsed().as_secs_f64();
    eprintln!("stages I-II done in {align_secs:.0}s");
    let t = Instant::now();
    let mut reg = BTreeMap::new();
    for v in [EncoderVariant::Aligned, EncoderVariant::Unaligned] {
        pipeline::finetune(cfg, &data, Task::Regression, v, None, out)?;
        reg.insert(v, pipeline::evaluate(cfg, &data, Task::Regression, v, None, Split::Test, out)?);
    }
    let reg_secs = t.elapsed().as_secs_f64();
    let task = |task: Task| -> kmtr::Result<MetricReport> {
        let t = Instant::now();
        pipeline::finetune(cfg, &data, task, EncoderVariant::Aligned, None, out)?;
        let r = pipeline::evaluate(cfg, &data, task, EncoderVariant::Aligned, None, Split::Test, out)?;
        eprintln!("{task} done in {:.0}s", t.elapsed().as_secs_f64());
        Ok(r)
    };
    let cls = task(Task::Classification)?;
    let seg = task(Task::Segmentation)?;
    let rec = task(Task::Reconstruction)?;
    let sweep = pipeline::sweep_r(cfg, &data, EncoderVariant::Aligned, out)?;
    Ok(Pipeline {
        align,
        align_secs,
        reg_aligned: reg.remove(&EncoderVariant::Aligned).unwrap(),
        reg_unaligned: reg.remove(&EncoderVariant::Unaligned).unwrap(),
        reg_secs,
        cls,
        seg,
        rec,
        sweep,
    })
}

fn alignment_separation(p: &Pipeline) -> Outcome {
    let (a, u) = (p.align.val_aligned.gap(), p.align.val_unaligned.gap());
    (a >= 0.2 && a > u && p.align_secs <= 1800.0, format!("val separation {a:.4} vs unaligned {u:.4} (stages I-II {:.0}s)", p.align_secs))
}

const PHENOTYPES: [&str; 4] = ["LVEDA", "LVESA", "LVEF", "MYOA"];

fn downstream_ordering(p: &Pipeline) -> Outcome {
    let get = |r: &MetricReport, k: &str| r.get("regression", k).unwrap();
    let wins = PHENOTYPES.iter().filter(|n| get(&p.reg_aligned, &format!("mae_{n}")) <= get(&p.reg_unaligned, &format!("mae_{n}"))).count();
    let base = get(&p.reg_aligned, "baseline_mae_LVEF");
    let (a, u) = (get(&p.reg_aligned, "mae_LVEF"), get(&p.reg_unaligned, "mae_LVEF"));
    let detail = PHENOTYPES.iter().map(|n| format!("{n} {:.3}/{:.3}", get(&p.reg_aligned, &format!("mae_{n}")), get(&p.reg_unaligned, &format!("mae_{n}")))).collect::<Vec<_>>().join(", ");
    (
        wins >= 3 && a < base && u < base && p.reg_aligned.n_subjects == 32 && p.align_secs + p.reg_secs <= 2700.0,
        format!("aligned/unaligned MAE {detail}; {wins}/4 wins; LVEF baseline {base:.3}; n={} ({:.0}s with stages I-II)", p.reg_aligned.n_subjects, p.align_secs + p.reg_secs),
    )
}

fn segmentation(p: &Pipeline) -> Outcome {
    let d = p.seg.get("segmentation", "dice_foreground").unwrap();
    (d >= 0.7 && p.seg.r == 8.0, format!("foreground Dice {d:.4} at R={}", p.seg.r))
}

fn reconstruction(p: &Pipeline) -> Outcome {
    let (a, z) = (p.rec.get("reconstruction", "psnr").unwrap(), p.rec.get("reconstruction", "zero_filled_psnr").unwrap());
    (a - z >= 3.0 && p.rec.r == 4.0, format!("PSNR {a:.2} dB vs zero-filled {z:.2} dB (gain {:.2} dB) at R={}", a - z, p.rec.r))
}

fn r_sweep(p: &Pipeline) -> Outcome {
    let raw: Vec<f64> = p.sweep.iter().map(|r| r.get("regression", "mean_mae").unwrap()).collect();
    let norm: Vec<f64> = p.sweep.iter().map(|r| r.get("regression", "nmae_mean").unwrap()).collect();
    let rs: Vec<f64> = p.sweep.iter().map(|r| r.r).collect();
    let mono = raw.windows(2).all(|w| w[1] >= w[0]);
    (
        mono && rs == [2.0, 4.0, 8.0, 16.0],
        format!("R {rs:?}: mean MAE {:?}; normalized {:?}", raw.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(), norm.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()),
    )
}

fn pair_counting_auc(s: &[f64], y: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] && !y[j] {
                den += 1.0;
                num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
            }
        }
    }
    num / den
}

fn classification(p: &Pipeline) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(2..60);
        let s: Vec<f64> = (0..n).map(|_| (rng.gen_range(0.0..1.0f64) * 8.0).round() / 8.0).collect();
        let mut y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        y[0] = true;
        y[1] = false;
        worst = worst.max((auc_roc(&s, &y).unwrap().unwrap() - pair_counting_auc(&s, &y)).abs());
    }
    match p.cls.get("classification", "reduced_EF_auc") {
        Some(auc) => (auc > 0.6 && worst < 1e-9 && p.cls.r == 4.0, format!("reduced_EF AUC {auc:.4} at R={}; oracle gap {worst:.1e}", p.cls.r)),
        None => (false, format!("reduced_EF AUC undefined on the test split; oracle gap {worst:.1e}")),
    }
}

fn collect_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn cli_reproducibility(work: &Path) -> Outcome {
    let verbs: Vec<Vec<&str>> = vec![
        vec!["gen-data"],
        vec!["pretrain", "--domain", "image"],
        vec!["pretrain", "--domain", "kspace"],
        vec!["align"],
        vec!["finetune", "--task", "regression"],
        vec!["finetune", "--task", "regression", "--encoder", "unaligned"],
        vec!["finetune", "--task", "classification"],
        vec!["finetune", "--task", "segmentation"],
        vec!["finetune", "--task", "reconstruction"],
        vec!["evaluate", "--task", "regression", "--R", "4"],
        vec!["evaluate", "--task", "classification"],
        vec!["evaluate", "--task", "segmentation"],
        vec!["evaluate", "--task", "reconstruction"],
        vec!["sweep-r"],
        vec!["export-embeddings"],
        vec!["plot"],
    ];
    let mut stdout = vec![];
    for run in ["a", "b"] {
        let dir = work.join(run);
        let mut outs = vec![];
        for v in &verbs {
            let o = Command::new(env!("CARGO_BIN_EXE_kmtr")).args(["--preset", "tiny", "--seed", "11", "--out"]).arg(&dir).args(v).env("RUST_LOG", "warn").output().unwrap();
            if !o.status.success() {
                return (false, format!("{} failed: {}", v.join(" "), String::from_utf8_lossy(&o.stderr)));
            }
            outs.push(String::from_utf8_lossy(&o.stdout).replace(&dir.display().to_string(), ""));
        }
        stdout.push(outs);
    }
    let (a, b) = (collect_files(&work.join("a")), collect_files(&work.join("b")));
    let differing: Vec<String> = a.iter().filter(|(k, v)| b.get(*k) != Some(v)).map(|(k, _)| k.display().to_string()).collect();
    let has = |p: &str| a.keys().any(|k| k.starts_with(p));
    let complete = ["data", "logs", "reports", "checkpoints", "predictions"].iter().all(|p| has(p)) && a.len() == b.len();
    (
        differing.is_empty() && complete && stdout[0] == stdout[1],
        format!("{} verbs, {} artifacts compared, {} differ{}", verbs.len(), a.len(), differing.len(), if differing.is_empty() { String::new() } else { format!(": {}", differing.join(", ")) }),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => (false, format!("panicked: {}", e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())),
    }
}

fn main() -> ExitCode {
    let keep = std::env::var_os("KMTR_ACCEPTANCE_OUT").map(PathBuf::from);
    let tmp = tempfile::tempdir().unwrap();
    let root = keep.unwrap_or_else(|| tmp.path().to_path_buf());
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "fft oracle", guarded(fft_oracle)),
        (2, "mask budget", guarded(mask_budget)),
        (3, "undersampling identity", guarded(undersampling_identity)),
        (4, "contrastive oracle", guarded(contrastive_oracle)),
        (5, "gradient checks", guarded(gradient_checks)),
        (6, "tokenizer round trip", guarded(tokenizer_roundtrip)),
    ];
    for (i, name, (ok, d)) in &results {
        println!("{} {i:>2} {name}: {d}", if *ok { "PASS" } else { "FAIL" });
    }
    let t = Instant::now();
    let desk = root.join("compact");
    let _ = fs::remove_dir_all(&desk);
    let piped = catch_unwind(AssertUnwindSafe(|| run_pipeline(&ExperimentConfig::compact(), &desk)));
    eprintln!("compact pipeline finished in {:.0}s", t.elapsed().as_secs_f64());
    let names = ["alignment separation", "downstream ordering", "segmentation dice", "reconstruction psnr", "r-sweep trend", "classification auc"];
    let checks: [fn(&Pipeline) -> Outcome; 6] = [alignment_separation, downstream_ordering, segmentation, reconstruction, r_sweep, classification];
    for (k, (name, check)) in names.iter().zip(checks).enumerate() {
        let o = match &piped {
            Ok(Ok(p)) => guarded(|| check(p)),
            Ok(Err(e)) => (false, format!("pipeline error: {e}")),
            Err(_) => (false, "pipeline panicked".into()),
        };
        println!("{} {:>2} {name}: {}", if o.0 { "PASS" } else { "FAIL" }, k + 7, o.1);
        results.push((k + 7, name, o));
    }
    let cli = root.join("cli");
    let _ = fs::remove_dir_all(&cli);
    let o = guarded(|| cli_reproducibility(&cli));
    println!("{} 13 cli reproducibility: {}", if o.0 { "PASS" } else { "FAIL" }, o.1);
    results.push((13, "cli reproducibility", o));
    let passed = results.iter().filter(|r| r.2 .0).count();
    println!("{passed}/{} acceptance criteria passed", results.len());
    let strict = std::env::var_os("KMTR_ACCEPTANCE_STRICT").is_some_and(|v| v == "1");
    let broken = matches!(piped, Ok(Err(_)) | Err(_));
    if broken || (strict && passed < results.len()) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
