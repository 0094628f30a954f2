use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{project, projector_init, KSPACE_ENCODER, KSPACE_PROJECTOR};
use crate::backbone::encode;
use crate::error::{KmtrError, Result};
use crate::heads::ENCODER;
use crate::nn::ParameterStore;
use crate::phantom::PHENOTYPE_NAMES;

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::data::{Dataset, Split};
use super::train::{encoder_params, stage_seed, EncoderVariant, ALIGN};
use super::{checkpoint_path, report_dir};

const QUARTILE_COLORS: [&str; 4] = ["#2c7bb6", "#abd9e9", "#fdae61", "#d7191c"];

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub variant: EncoderVariant,
    pub split: Split,
    pub ids: Vec<String>,
    pub phenotypes: Vec<[f64; 4]>,
    pub embeddings: Vec<Vec<f64>>,
    /// First two principal-component scores.
    pub projection: Vec<[f64; 2]>,
}

impl EmbeddingTable {
    pub fn path(out: &Path, variant: EncoderVariant, split: Split) -> PathBuf {
        report_dir(out).join(format!("embeddings_{variant}_{split}.csv"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let d = self.embeddings.first().map_or(0, Vec::len);
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["subject_id".to_string()];
        header.extend(PHENOTYPE_NAMES.iter().map(|s| s.to_string()));
        header.extend((0..d).map(|j| format!("z{j}")));
        header.extend(["pc1".to_string(), "pc2".to_string()]);
        w.write_record(&header)?;
        for i in 0..self.ids.len() {
            let mut row = vec![self.ids[i].clone()];
            row.extend(self.phenotypes[i].iter().map(|v| format!("{v}")));
            row.extend(self.embeddings[i].iter().map(|v| format!("{v}")));
            row.extend(self.projection[i].iter().map(|v| format!("{v}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn column(&self, phenotype: usize) -> Vec<f64> {
        self.phenotypes.iter().map(|p| p[phenotype]).collect()
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Scores on the top-k principal directions of the centered rows, each
/// direction's sign chosen so its largest-magnitude coordinate is positive.
pub fn principal_scores(x: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let n = x.len();
    let d = x.first().map_or(0, Vec::len);
    let mu: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let xc: Vec<Vec<f64>> = x.iter().map(|r| r.iter().zip(&mu).map(|(v, m)| v - m).collect()).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in &xc {
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += r[a] * r[b] / n as f64;
            }
        }
    }
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for _ in 0..k.min(d) {
        let mut v: Vec<f64> = (0..d).map(|j| 1.0 + j as f64 / d as f64).collect();
        for _ in 0..2000 {
            let mut w: Vec<f64> = (0..d).map(|a| (0..d).map(|b| cov[a][b] * v[b]).sum()).collect();
            for u in &dirs {
                let p: f64 = w.iter().zip(u).map(|(a, b)| a * b).sum();
                w.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
            let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            w.iter_mut().for_each(|a| *a /= norm);
            let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = w;
            if delta < 1e-13 {
                break;
            }
        }
        let lead = v.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|a| *a = -*a);
        }
        dirs.push(v);
    }
    xc.iter().map(|r| dirs.iter().map(|u| r.iter().zip(u).map(|(a, b)| a * b).sum()).collect()).collect()
}

fn embedding_params(cfg: &ExperimentConfig, out: &Path, variant: EncoderVariant) -> Result<ParameterStore> {
    let enc = cfg.encoder()?;
    if variant == EncoderVariant::Aligned {
        let ck = Checkpoint::load(&checkpoint_path(out, ALIGN))?;
        let mut store = ParameterStore::new();
        for (k, v) in ck.params.iter() {
            if let Some(rest) = k.strip_prefix(&format!("{KSPACE_ENCODER}.")) {
                store.insert(format!("{ENCODER}.{rest}"), v.clone())?;
            } else if k.starts_with(&format!("{KSPACE_PROJECTOR}.")) {
                store.insert(k.clone(), v.clone())?;
            }
        }
        return Ok(store);
    }
    let mut store = encoder_params(cfg, out, variant, &enc)?;
    projector_init(&mut store, &mut ChaCha8Rng::seed_from_u64(stage_seed(cfg, "embedding_projector")), KSPACE_PROJECTOR, enc.dim, cfg.alignment.proj_dim)?;
    Ok(store)
}

/// Projected k-space embeddings of one split at the upstream acceleration,
/// written to `reports/embeddings_<variant>_<split>.csv`.
pub fn export_embeddings(cfg: &ExperimentConfig, data: &Dataset, variant: EncoderVariant, split: Split, out: &Path) -> Result<EmbeddingTable> {
    let variant = variant.resolve(cfg);
    let enc = cfg.encoder()?;
    let store = embedding_params(cfg, out, variant)?;
    let subjects = data.split(split);
    let r = cfg.acceleration.upstream;
    let embeddings = subjects
        .iter()
        .map(|s| {
            let seq = data.kspace_input(s, &data.mask(cfg, s, r, 0)?)?;
            project(&encode(&seq, &store, &enc)?, &store, KSPACE_PROJECTOR, cfg.alignment.activation)
        })
        .collect::<Result<Vec<_>>>()?;
    let projection = principal_scores(&embeddings, 2).into_iter().map(|p| [p.first().copied().unwrap_or(0.0), p.get(1).copied().unwrap_or(0.0)]).collect();
    let table = EmbeddingTable {
        variant,
        split,
        ids: subjects.iter().map(|s| s.id().to_string()).collect(),
        phenotypes: subjects.iter().map(|s| s.phenotypes()).collect(),
        embeddings,
        projection,
    };
    fs::create_dir_all(report_dir(out))?;
    table.write_csv(&EmbeddingTable::path(out, variant, split))?;
    Ok(table)
}

/// Renders the `pc1`/`pc2` columns of an embedding CSV as an SVG scatter,
/// colored by quartile of `color_by`.
pub fn plot(csv_path: &Path, svg_path: &Path, color_by: &str) -> Result<()> {
    let mut r = csv::Reader::from_path(csv_path)?;
    let header = r.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| KmtrError::Format(format!("{}: no column {name:?}", csv_path.display())));
    let (ix, iy, ic) = (col("pc1")?, col("pc2")?, col(color_by)?);
    let mut pts = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let get = |i: usize| rec[i].parse::<f64>().map_err(|e| KmtrError::Format(format!("{}: {e}", csv_path.display())));
        pts.push((get(ix)?, get(iy)?, get(ic)?));
    }
    if pts.is_empty() {
        return Err(KmtrError::Format(format!("{} has no rows", csv_path.display())));
    }
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| pts[a].2.total_cmp(&pts[b].2));
    let mut quartile = vec![0usize; pts.len()];
    for (rank, &i) in order.iter().enumerate() {
        quartile[i] = rank * 4 / pts.len();
    }
    let range = |f: fn(&(f64, f64, f64)) -> f64| {
        let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        (lo, if hi > lo { hi - lo } else { 1.0 })
    };
    let ((x0, xs), (y0, ys)) = (range(|p| p.0), range(|p| p.1));
    let (size, pad) = (480.0, 40.0);
    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#).ok();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).ok();
    writeln!(svg, r#"<text x="{pad}" y="24" font-family="sans-serif" font-size="14">pc1 vs pc2, colored by {color_by} quartile</text>"#).ok();
    for (i, p) in pts.iter().enumerate() {
        let cx = pad + (p.0 - x0) / xs * (size - 2.0 * pad);
        let cy = size - pad - (p.1 - y0) / ys * (size - 2.0 * pad);
        writeln!(svg, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="4" fill="{}" stroke="black" stroke-width="0.5"/>"#, QUARTILE_COLORS[quartile[i]]).ok();
    }
    for (q, c) in QUARTILE_COLORS.iter().enumerate() {
        let y = size - 14.0;
        writeln!(svg, r#"<rect x="{}" y="{}" width="10" height="10" fill="{c}"/><text x="{}" y="{}" font-family="sans-serif" font-size="11">Q{}</text>"#, pad + q as f64 * 50.0, y - 9.0, pad + q as f64 * 50.0 + 14.0, y, q + 1).ok();
    }
    svg.push_str("</svg>\n");
    fs::write(svg_path, svg)?;
    Ok(())
}
