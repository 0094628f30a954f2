use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array_io::{ArrayData, PortableArray};
use crate::error::{KmtrError, Result};
use crate::kspace::{apply_phase, fft2c, make_mask, simulate_phase, undersample, AccelerationMask, ComplexVolume};
use crate::nn::Mat;
use crate::phantom::{derive_seed, generate_cohort, load_subject, CohortManifest, SegmentationMap, SubjectRecord, DISEASE_NAMES, MANIFEST_FILE};
use crate::tokenizer::{mask_partition, real_patches, tokenize, Domain, PatchGridSpec, PatchSequence};

use super::config::ExperimentConfig;

pub const DATA_DIR: &str = "data";
pub const SPLITS_FILE: &str = "splits.json";
pub const NORM_FILE: &str = "kspace_norm.kmtr";

const PHASE_STREAM: u64 = 0x5048_4153;
const MASK_STREAM: u64 = 0x4d41_534b;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = KmtrError;
    fn from_str(s: &str) -> Result<Self> {
        [Split::Train, Split::Val, Split::Test].into_iter().find(|x| x.name() == s).ok_or_else(|| KmtrError::InvalidConfig(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn ids(&self, s: Split) -> &[String] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id) {
                return Err(KmtrError::SplitContamination(format!("{id} appears in more than one split")));
            }
        }
        Ok(())
    }
}

/// Fixed per-position k-space scaling fitted on the training split:
/// each (h, w) entry is divided by max(rms(h, w), mean rms).
#[derive(Clone, Debug, PartialEq)]
pub struct KspaceNorm {
    pub shape: [usize; 2],
    pub scale: Vec<f64>,
}

impl KspaceNorm {
    pub fn fit(volumes: &[&ComplexVolume]) -> Result<Self> {
        let first = volumes.first().ok_or_else(|| KmtrError::InvalidConfig("no training volumes".into()))?;
        let [_, _, h, w] = first.shape();
        let mut acc = vec![0.0; h * w];
        let mut count = 0usize;
        for v in volumes {
            if v.shape()[2..] != [h, w] {
                return Err(KmtrError::shape("kspace norm", &[h, w], &v.shape()[2..]));
            }
            for (i, z) in v.data().iter().enumerate() {
                acc[i % (h * w)] += z.norm_sqr();
            }
            count += v.shape()[0] * v.shape()[1];
        }
        let rms: Vec<f64> = acc.iter().map(|a| (a / count as f64).sqrt()).collect();
        let floor = rms.iter().sum::<f64>() / rms.len() as f64;
        if !(floor > 0.0) {
            return Err(KmtrError::NonFinite("k-space scale is zero".into()));
        }
        Ok(Self { shape: [h, w], scale: rms.into_iter().map(|r| r.max(floor)).collect() })
    }

    pub fn apply(&self, x: &ComplexVolume) -> ComplexVolume {
        let mut out = x.clone();
        let n = self.scale.len();
        for (i, z) in out.data_mut().iter_mut().enumerate() {
            *z /= self.scale[i % n];
        }
        out
    }

    pub fn to_portable(&self) -> PortableArray {
        PortableArray::new(self.shape.to_vec(), ArrayData::F64(self.scale.clone())).expect("consistent shape")
    }

    pub fn from_portable(a: &PortableArray) -> Result<Self> {
        match (&a.data, a.shape.as_slice()) {
            (ArrayData::F64(v), &[h, w]) => Ok(Self { shape: [h, w], scale: v.clone() }),
            _ => Err(KmtrError::Format(format!("k-space norm must be rank-2 f64, got {:?}", a.shape))),
        }
    }
}

pub fn data_dir(out: &Path) -> PathBuf {
    out.join(DATA_DIR)
}

fn full_kspace(cfg: &ExperimentConfig, rec: &SubjectRecord, image: &[f64]) -> Result<ComplexVolume> {
    let [s, _, h, w] = cfg.volume();
    let phase = simulate_phase(s, h, w, cfg.phase_sigma, cfg.phase_amplitude, derive_seed(rec.seed, PHASE_STREAM))?;
    Ok(fft2c(&apply_phase(&ComplexVolume::from_real(cfg.volume(), image)?, &phase)?))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenDataSummary {
    pub manifest_sha256: String,
    pub n: usize,
    pub splits: Splits,
}

/// Generates the cohort, fixed splits (first n_train, next n_val, last n_test)
/// and the training-split k-space normalization under `out/data`.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<GenDataSummary> {
    cfg.validate()?;
    let dir = data_dir(out);
    let mut phantom = cfg.phantom.clone();
    phantom.seed = cfg.seed;
    let manifest = generate_cohort(&phantom, cfg.n_subjects(), &dir)?;
    let ids: Vec<String> = manifest.subjects.iter().map(|r| r.subject_id.clone()).collect();
    let (a, b) = (cfg.n_train, cfg.n_train + cfg.n_val);
    let splits = Splits { train: ids[..a].to_vec(), val: ids[a..b].to_vec(), test: ids[b..].to_vec() };
    splits.check_disjoint()?;
    fs::write(dir.join(SPLITS_FILE), serde_json::to_string_pretty(&splits)? + "\n")?;
    let train: Vec<ComplexVolume> = manifest.subjects[..a]
        .par_iter()
        .map(|rec| {
            let (img, _, _) = load_subject(&dir, rec)?;
            full_kspace(cfg, rec, &img)
        })
        .collect::<Result<_>>()?;
    let norm = KspaceNorm::fit(&train.iter().collect::<Vec<_>>())?;
    norm.to_portable().save(&dir.join(NORM_FILE))?;
    Ok(GenDataSummary { manifest_sha256: manifest.sha256()?, n: manifest.n, splits })
}

pub struct Subject {
    pub index: usize,
    pub record: SubjectRecord,
    pub image: Vec<f64>,
    pub seg: SegmentationMap,
    /// Fully sampled k-space (with phase), unnormalized.
    pub kspace: ComplexVolume,
}

impl Subject {
    pub fn id(&self) -> &str {
        &self.record.subject_id
    }

    pub fn phenotypes(&self) -> [f64; 4] {
        self.record.phenotypes.to_array()
    }

    pub fn disease_labels(&self) -> [bool; 2] {
        DISEASE_NAMES.map(|d| self.record.labels.get(d).copied().unwrap_or(false))
    }
}

pub struct Dataset {
    pub manifest: CohortManifest,
    pub splits: Splits,
    pub norm: KspaceNorm,
    pub subjects: Vec<Subject>,
    pub grid: PatchGridSpec,
    seed: u64,
}

impl Dataset {
    pub fn load(cfg: &ExperimentConfig, out: &Path) -> Result<Self> {
        let dir = data_dir(out);
        let manifest = CohortManifest::load(&dir.join(MANIFEST_FILE))?;
        let mut expected = cfg.phantom.clone();
        expected.seed = cfg.seed;
        if manifest.config != expected || manifest.n != cfg.n_subjects() {
            return Err(KmtrError::InvalidConfig(format!("cohort in {} was generated with a different config; rerun gen-data", dir.display())));
        }
        let splits_path = dir.join(SPLITS_FILE);
        if !splits_path.exists() {
            return Err(KmtrError::MissingArtifact(splits_path));
        }
        let splits: Splits = serde_json::from_slice(&fs::read(&splits_path)?)?;
        splits.check_disjoint()?;
        let norm = KspaceNorm::from_portable(&PortableArray::load(&dir.join(NORM_FILE))?)?;
        let subjects = manifest
            .subjects
            .par_iter()
            .enumerate()
            .map(|(index, rec)| {
                let (image, _, seg) = load_subject(&dir, rec)?;
                let kspace = full_kspace(cfg, rec, &image)?;
                Ok(Subject { index, record: rec.clone(), image, seg, kspace })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, splits, norm, subjects, grid: cfg.grid()?, seed: cfg.seed })
    }

    pub fn split(&self, s: Split) -> Vec<&Subject> {
        let ids = self.splits.ids(s);
        self.subjects.iter().filter(|x| ids.contains(&x.record.subject_id)).collect()
    }

    /// Acquisition mask of a subject; the same seed is reused across R, and
    /// `epoch` > 0 draws a fresh one.
    pub fn mask(&self, cfg: &ExperimentConfig, subject: &Subject, r: f64, epoch: u64) -> Result<AccelerationMask> {
        let [s, t, _, w] = cfg.volume();
        let seed = derive_seed(derive_seed(self.seed ^ MASK_STREAM, subject.index as u64), epoch);
        make_mask(s, t, w, cfg.mask_params(r), seed)
    }

    /// Magnitude image with every token visible.
    pub fn image_sequence(&self, subject: &Subject) -> Result<PatchSequence> {
        Ok(tokenize(&ComplexVolume::from_real(subject.kspace.shape(), &subject.image)?, &self.grid, Domain::Image, true)?.all_visible())
    }

    /// Normalized undersampled k-space with the acquisition-mask partition.
    pub fn kspace_input(&self, subject: &Subject, mask: &AccelerationMask) -> Result<PatchSequence> {
        let xu = self.norm.apply(&undersample(&subject.kspace, mask)?);
        let (vis, hid) = mask_partition(mask, &self.grid)?;
        let full = mask.sampled_fraction() >= 1.0;
        tokenize(&xu, &self.grid, Domain::Kspace, full)?.with_partition(vis, hid)
    }

    /// Normalized fully sampled k-space patches.
    pub fn kspace_target(&self, subject: &Subject) -> Result<Mat> {
        Ok(tokenize(&self.norm.apply(&subject.kspace), &self.grid, Domain::Kspace, true)?.patches)
    }

    pub fn image_patches(&self, subject: &Subject) -> Result<Mat> {
        real_patches(&subject.image, &self.grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gen_data_is_deterministic_and_split() {
        let cfg = ExperimentConfig::tiny();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = gen_data(&cfg, a.path()).unwrap();
        let sb = gen_data(&cfg, b.path()).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(sa.splits.train.len(), cfg.n_train);
        sa.splits.check_disjoint().unwrap();
        for f in [MANIFEST_FILE, SPLITS_FILE, NORM_FILE] {
            assert_eq!(fs::read(data_dir(a.path()).join(f)).unwrap(), fs::read(data_dir(b.path()).join(f)).unwrap());
        }
        let ds = Dataset::load(&cfg, a.path()).unwrap();
        assert_eq!(ds.split(Split::Test).len(), cfg.n_test);
        let sub = &ds.subjects[0];
        let m = ds.mask(&cfg, sub, 4.0, 0).unwrap();
        assert_eq!(m, ds.mask(&cfg, sub, 4.0, 0).unwrap());
        assert_ne!(m, ds.mask(&cfg, sub, 4.0, 1).unwrap());
        let seq = ds.kspace_input(sub, &m).unwrap();
        assert_eq!(seq.domain, Domain::Kspace);
        assert!(!seq.fully_sampled);
        assert_eq!(seq.visible_idx.len() + seq.hidden_idx.len(), ds.grid.num_tokens());
        let mut other = cfg.clone();
        other.seed = 9;
        assert!(Dataset::load(&other, a.path()).is_err());
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let s = Splits { train: vec!["a".into(), "b".into()], val: vec!["c".into()], test: vec!["b".into()] };
        assert!(matches!(s.check_disjoint(), Err(KmtrError::SplitContamination(_))));
    }

    #[test]
    fn norm_is_linear_per_position() {
        let v = ComplexVolume::from_real([1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let n = KspaceNorm::fit(&[&v]).unwrap();
        let floor = (1.0 + 2.0 + 3.0 + 4.0) / 4.0;
        assert_eq!(n.scale, vec![floor, floor, 3.0, 4.0]);
        let y = n.apply(&v.scaled(num_complex::Complex64::new(2.0, 0.0)));
        assert_eq!(y.get(0, 0, 1, 1).re, 2.0);
        assert_eq!(KspaceNorm::from_portable(&n.to_portable()).unwrap(), n);
    }
}
