//! Synthetic dynamic cardiac phantom: concentric-ellipse LV/myocardium with an
//! adjacent RV, raised-cosine contraction, analytic phenotypes and rule-based labels.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array_io::{ArrayData, PortableArray};
use crate::error::{KmtrError, Result};
use crate::kspace::ComplexVolume;

pub const REDUCED_EF: &str = "reduced_EF";
pub const HYPERTROPHY: &str = "hypertrophy";
pub const PHENOTYPE_NAMES: [&str; 4] = ["LVEDA", "LVESA", "LVEF", "MYOA"];
pub const DISEASE_NAMES: [&str; 2] = [REDUCED_EF, HYPERTROPHY];

/// Closed interval `[lo, hi]`, serialized as a two-element array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval(pub f64, pub f64);

impl Interval {
    pub fn lo(&self) -> f64 {
        self.0
    }
    pub fn hi(&self) -> f64 {
        self.1
    }
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.gen_range(self.0..=self.1)
        }
    }
    fn valid(&self) -> bool {
        self.0.is_finite() && self.1.is_finite() && self.0 <= self.1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intensities {
    pub background: f64,
    pub lv: f64,
    pub myocardium: f64,
    pub rv: f64,
}

impl Intensities {
    pub fn for_label(&self, label: u8) -> f64 {
        match label {
            1 => self.lv,
            2 => self.myocardium,
            3 => self.rv,
            _ => self.background,
        }
    }
    fn peak(&self) -> f64 {
        self.background.max(self.lv).max(self.myocardium).max(self.rv)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub s: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub seed: u64,
    /// Max LV center displacement from its nominal position (px).
    pub lv_center_jitter: f64,
    /// LV cavity semi-axes at end-diastole along x and y (px).
    pub lv_semi_axis_a: Interval,
    pub lv_semi_axis_b: Interval,
    pub wall_thickness: Interval,
    pub contraction: Interval,
    /// Per-slice geometric scale for slices other than the reference slice 0.
    pub slice_scale: Interval,
    pub rv_enabled: bool,
    pub rv_scale: Interval,
    pub rv_contraction: Interval,
    pub intensities: Intensities,
    /// Additive Gaussian noise std as a fraction of peak intensity.
    pub noise_std: f64,
    /// Target positive ratio for each disease label; `None` samples uniformly.
    pub target_ratios: BTreeMap<String, f64>,
    pub thresholds: BTreeMap<String, f64>,
    pub max_retries: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            s: 3,
            t: 16,
            h: 64,
            w: 64,
            seed: 0,
            lv_center_jitter: 3.0,
            lv_semi_axis_a: Interval(8.0, 11.0),
            lv_semi_axis_b: Interval(7.0, 10.0),
            wall_thickness: Interval(2.0, 4.5),
            contraction: Interval(0.4, 0.85),
            slice_scale: Interval(0.8, 1.0),
            rv_enabled: true,
            rv_scale: Interval(0.85, 1.1),
            rv_contraction: Interval(0.6, 0.85),
            intensities: Intensities { background: 0.1, lv: 0.9, myocardium: 0.35, rv: 0.75 },
            noise_std: 0.02,
            target_ratios: BTreeMap::from([(REDUCED_EF.to_string(), 0.35), (HYPERTROPHY.to_string(), 0.3)]),
            thresholds: default_thresholds(),
            max_retries: 64,
        }
    }
}

pub fn default_thresholds() -> BTreeMap<String, f64> {
    BTreeMap::from([(REDUCED_EF.to_string(), 50.0), (HYPERTROPHY.to_string(), 3.5)])
}

impl PhantomConfig {
    /// Same anatomy rescaled to an `h`×`w` field of view with `s` slices and `t` frames.
    pub fn rescaled(&self, s: usize, t: usize, h: usize, w: usize) -> Self {
        let k = (h.min(w) as f64) / (self.h.min(self.w) as f64);
        let sc = |i: Interval| Interval(i.0 * k, i.1 * k);
        let mut out = self.clone();
        out.s = s;
        out.t = t;
        out.h = h;
        out.w = w;
        out.lv_center_jitter *= k;
        out.lv_semi_axis_a = sc(self.lv_semi_axis_a);
        out.lv_semi_axis_b = sc(self.lv_semi_axis_b);
        out.wall_thickness = sc(self.wall_thickness);
        if let Some(v) = out.thresholds.get_mut(HYPERTROPHY) {
            *v *= k;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KmtrError::InvalidConfig(m));
        if self.s == 0 || self.t == 0 || self.h == 0 || self.w == 0 {
            return bad(format!("phantom dims must be >= 1, got S={} T={} H={} W={}", self.s, self.t, self.h, self.w));
        }
        for (name, r) in [
            ("lv_semi_axis_a", self.lv_semi_axis_a),
            ("lv_semi_axis_b", self.lv_semi_axis_b),
            ("wall_thickness", self.wall_thickness),
            ("contraction", self.contraction),
            ("slice_scale", self.slice_scale),
            ("rv_scale", self.rv_scale),
            ("rv_contraction", self.rv_contraction),
        ] {
            if !r.valid() {
                return bad(format!("{name}: lower bound must not exceed upper bound ({:?})", r));
            }
        }
        if self.lv_semi_axis_a.lo() <= 0.0 || self.lv_semi_axis_b.lo() <= 0.0 {
            return bad("LV semi-axes must be positive".into());
        }
        if self.wall_thickness.lo() < 0.0 {
            return bad("wall thickness must be non-negative".into());
        }
        if self.contraction.lo() <= 0.0 || self.contraction.hi() > 1.0 {
            return bad(format!("contraction fraction must lie in (0, 1], got {:?}", self.contraction));
        }
        if !(self.noise_std >= 0.0) {
            return bad(format!("noise std must be >= 0, got {}", self.noise_std));
        }
        if !(self.lv_center_jitter >= 0.0) {
            return bad("center jitter must be >= 0".into());
        }
        for (k, v) in &self.target_ratios {
            if !(0.0..=1.0).contains(v) {
                return bad(format!("target ratio for {k} must be in [0,1], got {v}"));
            }
        }
        Ok(())
    }
}

/// Ground-truth phenotypes. Areas in px², LVEF in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct PhenotypeVector {
    pub LVEDA: f64,
    pub LVESA: f64,
    pub LVEF: f64,
    pub MYOA: f64,
}

impl PhenotypeVector {
    pub fn to_array(&self) -> [f64; 4] {
        [self.LVEDA, self.LVESA, self.LVEF, self.MYOA]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { LVEDA: v[0], LVESA: v[1], LVEF: v[2], MYOA: v[3] }
    }
}

/// Per-pixel labels {0 background, 1 LV cavity, 2 myocardium, 3 RV cavity} over (S,T,H,W).
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMap {
    pub shape: [usize; 4],
    pub labels: Vec<u8>,
}

impl SegmentationMap {
    pub fn frame(&self, s: usize, t: usize) -> &[u8] {
        let n = self.shape[2] * self.shape[3];
        let o = (s * self.shape[1] + t) * n;
        &self.labels[o..o + n]
    }

    pub fn to_portable(&self) -> PortableArray {
        PortableArray::new(self.shape.to_vec(), ArrayData::U8(self.labels.clone())).expect("consistent shape")
    }

    pub fn from_portable(a: &PortableArray) -> Result<Self> {
        match (&a.data, a.shape.len()) {
            (ArrayData::U8(v), 4) => {
                if v.iter().any(|&l| l > 3) {
                    return Err(KmtrError::Format("segmentation label outside {0,1,2,3}".into()));
                }
                Ok(Self { shape: [a.shape[0], a.shape[1], a.shape[2], a.shape[3]], labels: v.clone() })
            }
            _ => Err(KmtrError::Format(format!("expected rank-4 u8 segmentation, got {:?}", a.shape))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub seed: u64,
    pub params: BTreeMap<String, f64>,
    pub phenotypes: PhenotypeVector,
    pub labels: BTreeMap<String, bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<FileEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<FileEntry>,
}

fn param(params: &BTreeMap<String, f64>, key: &str) -> Result<f64> {
    params.get(key).copied().ok_or_else(|| KmtrError::MissingParameter(key.to_string()))
}

/// Analytic phenotypes from the reference-slice ED geometry.
pub fn compute_phenotypes(params: &BTreeMap<String, f64>) -> Result<PhenotypeVector> {
    let a = param(params, "lv_a")?;
    let b = param(params, "lv_b")?;
    let c = param(params, "contraction")?;
    let w = param(params, "wall_thickness")?;
    for v in [a, b] {
        if !(v > 0.0) {
            return Err(KmtrError::NonPositiveAxis(v));
        }
    }
    Ok(PhenotypeVector {
        LVEDA: PI * a * b,
        LVESA: PI * (c * a) * (c * b),
        LVEF: 100.0 * (1.0 - c * c),
        MYOA: PI * ((a + w) * (b + w) - a * b),
    })
}

/// `reduced_EF`: LVEF below its cutoff. `hypertrophy`: wall thickness above its cutoff.
pub fn assign_labels(
    phenotypes: &PhenotypeVector,
    wall_thickness: f64,
    thresholds: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, bool>> {
    let ef = thresholds.get(REDUCED_EF).ok_or_else(|| KmtrError::MissingThreshold(REDUCED_EF.into()))?;
    let wall = thresholds.get(HYPERTROPHY).ok_or_else(|| KmtrError::MissingThreshold(HYPERTROPHY.into()))?;
    Ok(BTreeMap::from([
        (REDUCED_EF.to_string(), phenotypes.LVEF < *ef),
        (HYPERTROPHY.to_string(), wall_thickness > *wall),
    ]))
}

/// Samples from `range`, splitting it at `cut` so that values above the cut
/// occur with probability `ratio` when the cut lies strictly inside the range.
fn sample_split(range: Interval, cut: f64, ratio: Option<f64>, rng: &mut impl Rng) -> f64 {
    match ratio {
        Some(p) if range.lo() < cut && cut < range.hi() => {
            if rng.gen::<f64>() < p {
                // open at the cut so strict comparisons classify the draw as positive
                let v = rng.gen_range(cut..=range.hi());
                if v == cut { range.hi() } else { v }
            } else {
                rng.gen_range(range.lo()..cut)
            }
        }
        _ => range.sample(rng),
    }
}

#[derive(Clone, Copy, Debug)]
struct SliceGeometry {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    wall: f64,
    contraction: f64,
    rv_rx: f64,
    rv_ry: f64,
    rv_dx: f64,
    rv_contraction: f64,
}

impl SliceGeometry {
    fn cycle(&self, t: usize, frames: usize, c: f64) -> f64 {
        1.0 - (1.0 - c) * (1.0 - (2.0 * PI * t as f64 / frames as f64).cos()) / 2.0
    }

    fn fits(&self, h: usize, w: usize) -> bool {
        // ED is the largest extent for every structure
        let oa = self.a + self.wall;
        let ob = self.b + self.wall;
        let mut xmin = self.cx - oa;
        let xmax = self.cx + oa;
        let mut ymin = self.cy - ob;
        let mut ymax = self.cy + ob;
        if self.rv_rx > 0.0 {
            xmin = xmin.min(self.cx - self.rv_dx - self.rv_rx);
            ymin = ymin.min(self.cy - self.rv_ry);
            ymax = ymax.max(self.cy + self.rv_ry);
        }
        xmin >= 1.0 && ymin >= 1.0 && xmax <= w as f64 - 1.0 && ymax <= h as f64 - 1.0
    }

    fn label_at(&self, x: f64, y: f64, k_lv: f64, k_rv: f64) -> u8 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let (a, b) = (self.a * k_lv, self.b * k_lv);
        if (dx / a).powi(2) + (dy / b).powi(2) <= 1.0 {
            return 1;
        }
        let (oa, ob) = (a + self.wall, b + self.wall);
        if (dx / oa).powi(2) + (dy / ob).powi(2) <= 1.0 {
            return 2;
        }
        if self.rv_rx > 0.0 {
            let rx = self.rv_rx * k_rv;
            let ry = self.rv_ry * k_rv;
            let rdx = x - (self.cx - self.rv_dx);
            if (rdx / rx).powi(2) + (dy / ry).powi(2) <= 1.0 {
                return 3;
            }
        }
        0
    }
}

fn sample_params(config: &PhantomConfig, rng: &mut ChaCha8Rng) -> BTreeMap<String, f64> {
    let ef_cut = config.thresholds.get(REDUCED_EF).copied().unwrap_or(50.0);
    let c_cut = (1.0 - ef_cut / 100.0).max(0.0).sqrt();
    let wall_cut = config.thresholds.get(HYPERTROPHY).copied().unwrap_or(f64::INFINITY);

    let mut p = BTreeMap::new();
    p.insert("lv_a".to_string(), config.lv_semi_axis_a.sample(rng));
    p.insert("lv_b".to_string(), config.lv_semi_axis_b.sample(rng));
    p.insert(
        "wall_thickness".to_string(),
        sample_split(config.wall_thickness, wall_cut, config.target_ratios.get(HYPERTROPHY).copied(), rng),
    );
    p.insert(
        "contraction".to_string(),
        sample_split(config.contraction, c_cut, config.target_ratios.get(REDUCED_EF).copied(), rng),
    );
    for s in 0..config.s {
        let scale = if s == 0 { 1.0 } else { config.slice_scale.sample(rng) };
        p.insert(format!("slice{s}.scale"), scale);
        p.insert(format!("slice{s}.jitter_x"), rng.gen_range(-1.0..=1.0) * config.lv_center_jitter);
        p.insert(format!("slice{s}.jitter_y"), rng.gen_range(-1.0..=1.0) * config.lv_center_jitter);
        p.insert(format!("slice{s}.rv_scale"), config.rv_scale.sample(rng));
        p.insert(format!("slice{s}.rv_contraction"), config.rv_contraction.sample(rng));
    }
    p
}

fn slice_geometry(config: &PhantomConfig, p: &BTreeMap<String, f64>, s: usize) -> SliceGeometry {
    let g = |k: &str| p[k];
    let scale = g(&format!("slice{s}.scale"));
    let (a, b, wall) = (g("lv_a") * scale, g("lv_b") * scale, g("wall_thickness") * scale);
    let (oa, ob) = (a + wall, b + wall);
    let rv = g(&format!("slice{s}.rv_scale"));
    let (rv_rx, rv_ry) = if config.rv_enabled { (0.7 * oa * rv, 1.2 * ob * rv) } else { (0.0, 0.0) };
    SliceGeometry {
        // LV sits right of center so the RV fits on the left
        cx: config.w as f64 * 0.6 + g(&format!("slice{s}.jitter_x")),
        cy: config.h as f64 * 0.5 + g(&format!("slice{s}.jitter_y")),
        a,
        b,
        wall,
        contraction: g("contraction"),
        rv_rx,
        rv_ry,
        rv_dx: oa + 0.5 * rv_rx,
        rv_contraction: g(&format!("slice{s}.rv_contraction")),
    }
}

/// Renders one subject. Identical (config, seed) gives bit-identical output.
pub fn generate_subject(config: &PhantomConfig, subject_seed: u64) -> Result<(SubjectRecord, ComplexVolume, SegmentationMap)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(subject_seed);
    let mut accepted = None;
    for _ in 0..=config.max_retries {
        let p = sample_params(config, &mut rng);
        let geoms: Vec<SliceGeometry> = (0..config.s).map(|s| slice_geometry(config, &p, s)).collect();
        if geoms.iter().all(|g| g.fits(config.h, config.w)) {
            accepted = Some((p, geoms));
            break;
        }
    }
    let (params, geoms) = accepted.ok_or(KmtrError::GeometryOverflow { retries: config.max_retries })?;

    let (s_n, t_n, h, w) = (config.s, config.t, config.h, config.w);
    let mut image = vec![0.0f64; s_n * t_n * h * w];
    let mut seg = vec![0u8; s_n * t_n * h * w];
    let noise_sd = config.noise_std * config.intensities.peak();
    const SUB: [f64; 2] = [0.25, 0.75];
    for (s, g) in geoms.iter().enumerate() {
        for t in 0..t_n {
            let k_lv = g.cycle(t, t_n, g.contraction);
            let k_rv = g.cycle(t, t_n, g.rv_contraction);
            for y in 0..h {
                for x in 0..w {
                    let o = ((s * t_n + t) * h + y) * w + x;
                    seg[o] = g.label_at(x as f64 + 0.5, y as f64 + 0.5, k_lv, k_rv);
                    let mut acc = 0.0;
                    for sy in SUB {
                        for sx in SUB {
                            acc += config.intensities.for_label(g.label_at(x as f64 + sx, y as f64 + sy, k_lv, k_rv));
                        }
                    }
                    image[o] = acc / 4.0;
                }
            }
        }
    }
    if noise_sd > 0.0 {
        for v in image.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += noise_sd * n;
        }
    }
    image.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    let phenotypes = compute_phenotypes(&params)?;
    let labels = assign_labels(&phenotypes, params["wall_thickness"], &config.thresholds)?;
    let record = SubjectRecord {
        subject_id: format!("sub-{subject_seed:016x}"),
        seed: subject_seed,
        params,
        phenotypes,
        labels,
        image: None,
        segmentation: None,
    };
    let shape = [s_n, t_n, h, w];
    Ok((record, ComplexVolume::from_real(shape, &image)?, SegmentationMap { shape, labels: seg }))
}

/// Parameters and labels only, without rendering. Matches `generate_subject`.
pub fn sample_subject_record(config: &PhantomConfig, subject_seed: u64) -> Result<SubjectRecord> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(subject_seed);
    for _ in 0..=config.max_retries {
        let p = sample_params(config, &mut rng);
        if (0..config.s).all(|s| slice_geometry(config, &p, s).fits(config.h, config.w)) {
            let phenotypes = compute_phenotypes(&p)?;
            let labels = assign_labels(&phenotypes, p["wall_thickness"], &config.thresholds)?;
            return Ok(SubjectRecord {
                subject_id: format!("sub-{subject_seed:016x}"),
                seed: subject_seed,
                params: p,
                phenotypes,
                labels,
                image: None,
                segmentation: None,
            });
        }
    }
    Err(KmtrError::GeometryOverflow { retries: config.max_retries })
}

/// SplitMix64 finalizer, used to derive independent per-item seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub version: u32,
    pub seed: u64,
    pub n: usize,
    pub config: PhantomConfig,
    pub units: BTreeMap<String, String>,
    pub subjects: Vec<SubjectRecord>,
}

impl CohortManifest {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(KmtrError::MissingArtifact(path.to_path_buf()));
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn sha256(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?)))
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn units() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("LVEDA".into(), "px^2".into()),
        ("LVESA".into(), "px^2".into()),
        ("LVEF".into(), "%".into()),
        ("MYOA".into(), "px^2".into()),
        (
            "note".into(),
            "phenotypes are 2D areas of the reference slice (slice 0), not volumes".into(),
        ),
    ])
}

fn write_hashed(array: &PortableArray, dir: &Path, name: String, written: &std::sync::Mutex<Vec<PathBuf>>) -> Result<FileEntry> {
    let bytes = array.to_bytes();
    let path = dir.join(&name);
    written.lock().expect("poisoned").push(path.clone());
    fs::write(&path, &bytes)?;
    Ok(FileEntry { path: name, sha256: hex::encode(Sha256::digest(&bytes)) })
}

/// Writes `n` subjects plus `manifest.json` into `out_dir`. On failure every
/// file this call created is removed again.
pub fn generate_cohort(config: &PhantomConfig, n: usize, out_dir: &Path) -> Result<CohortManifest> {
    config.validate()?;
    if n == 0 {
        return Err(KmtrError::InvalidConfig("cohort size must be >= 1".into()));
    }
    fs::create_dir_all(out_dir)?;
    let written = std::sync::Mutex::new(Vec::new());
    let result = (|| -> Result<CohortManifest> {
        let subjects = (0..n)
            .into_par_iter()
            .map(|i| {
                let seed = derive_seed(config.seed, i as u64);
                let (mut rec, img, seg) = generate_subject(config, seed)?;
                rec.subject_id = format!("sub-{i:05}");
                let img_arr = PortableArray::new(
                    img.shape().to_vec(),
                    ArrayData::F32(img.real_part().iter().map(|&v| v as f32).collect()),
                )?;
                rec.image = Some(write_hashed(&img_arr, out_dir, format!("{}_image.kmtr", rec.subject_id), &written)?);
                rec.segmentation = Some(write_hashed(&seg.to_portable(), out_dir, format!("{}_seg.kmtr", rec.subject_id), &written)?);
                Ok(rec)
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = CohortManifest { version: 1, seed: config.seed, n, config: config.clone(), units: units(), subjects };
        let path = out_dir.join(MANIFEST_FILE);
        written.lock().expect("poisoned").push(path.clone());
        fs::write(path, manifest.to_json()?)?;
        Ok(manifest)
    })();
    if result.is_err() {
        for p in written.into_inner().expect("poisoned") {
            let _ = fs::remove_file(p);
        }
    }
    result
}

/// Loads a subject's magnitude image (S,T,H,W) and segmentation, verifying hashes.
pub fn load_subject(dir: &Path, rec: &SubjectRecord) -> Result<(Vec<f64>, [usize; 4], SegmentationMap)> {
    let read = |e: &Option<FileEntry>, what: &str| -> Result<PortableArray> {
        let e = e.as_ref().ok_or_else(|| KmtrError::Format(format!("{} has no {what} file", rec.subject_id)))?;
        let path = dir.join(&e.path);
        if !path.exists() {
            return Err(KmtrError::MissingArtifact(path));
        }
        let bytes = fs::read(&path)?;
        if hex::encode(Sha256::digest(&bytes)) != e.sha256 {
            return Err(KmtrError::Format(format!("hash mismatch for {}", e.path)));
        }
        PortableArray::read_from(&bytes[..])
    };
    let img = read(&rec.image, "image")?;
    if img.shape.len() != 4 {
        return Err(KmtrError::Format(format!("image must be rank 4, got {:?}", img.shape)));
    }
    let shape = [img.shape[0], img.shape[1], img.shape[2], img.shape[3]];
    let seg = SegmentationMap::from_portable(&read(&rec.segmentation, "segmentation")?)?;
    if seg.shape != shape {
        return Err(KmtrError::shape("load_subject", &shape, &seg.shape));
    }
    Ok((img.data.to_f64(), shape, seg))
}
