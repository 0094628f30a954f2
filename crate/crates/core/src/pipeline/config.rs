use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::AlignConfig;
use crate::backbone::{EncoderConfig, LossPositions};
use crate::error::{KmtrError, Result};
use crate::heads::{HeadConfig, Task};
use crate::kspace::{column_budget, MaskParams};
use crate::phantom::PhantomConfig;
use crate::tokenizer::PatchGridSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub dim: usize,
    pub depth: usize,
    pub dec_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSettings {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub clip_norm: f64,
}

impl StageSettings {
    pub fn new(steps: usize, batch: usize, lr: f64) -> Self {
        Self { steps, batch, lr, weight_decay: 0.05, warmup: steps / 20, clip_norm: 1.0 }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.batch == 0 || !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(KmtrError::InvalidConfig(format!("{what}: batch must be >= 1 and lr, weight_decay, clip_norm >= 0")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccelerationSettings {
    /// Factor used for the k-space branch in pretraining and alignment.
    pub upstream: f64,
    pub regression: f64,
    pub classification: f64,
    pub segmentation: f64,
    pub reconstruction: f64,
    pub sweep: Vec<f64>,
}

impl AccelerationSettings {
    pub fn for_task(&self, task: Task) -> f64 {
        match task {
            Task::Regression => self.regression,
            Task::Classification => self.classification,
            Task::Segmentation => self.segmentation,
            Task::Reconstruction => self.reconstruction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSettings {
    pub regression: StageSettings,
    pub classification: StageSettings,
    pub segmentation: StageSettings,
    pub reconstruction: StageSettings,
    /// Freeze the encoder and train the head only.
    pub linear_probe: bool,
    /// Draw a fresh acquisition mask at every step instead of one per subject.
    pub resample_masks: bool,
    /// Score the val split every this many steps and keep the best
    /// parameters; 0 keeps the final ones.
    #[serde(default)]
    pub eval_every: usize,
}

impl FinetuneSettings {
    pub fn for_task(&self, task: Task) -> &StageSettings {
        match task {
            Task::Regression => &self.regression,
            Task::Classification => &self.classification,
            Task::Segmentation => &self.segmentation,
            Task::Reconstruction => &self.reconstruction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub phase_sigma: f64,
    pub phase_amplitude: f64,
    pub patch: [usize; 3],
    pub model: ModelDims,
    pub mask: MaskParams,
    pub acceleration: AccelerationSettings,
    pub mask_ratio: f64,
    pub loss_positions: LossPositions,
    pub pretrain: StageSettings,
    pub align: StageSettings,
    pub alignment: AlignConfig,
    /// Skip alignment: downstream runs use the pretrained k-space encoder directly.
    pub skip_align: bool,
    /// Draw a fresh k-space acquisition mask per pair at every alignment step.
    #[serde(default)]
    pub align_resample_masks: bool,
    pub finetune: FinetuneSettings,
    pub heads: HeadConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Laptop-scale defaults: 3 slices, 16 frames, 64×64.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            phantom: PhantomConfig::default(),
            n_train: 64,
            n_val: 16,
            n_test: 32,
            phase_sigma: 8.0,
            phase_amplitude: std::f64::consts::FRAC_PI_4,
            patch: [4, 8, 8],
            model: ModelDims { dim: 64, depth: 2, dec_depth: 1, heads: 4, mlp_ratio: 4 },
            mask: MaskParams { r: 4.0, center_lines: 4, density_sigma: 0.25 },
            acceleration: AccelerationSettings { upstream: 4.0, regression: 4.0, classification: 4.0, segmentation: 8.0, reconstruction: 4.0, sweep: vec![2.0, 4.0, 8.0, 16.0] },
            mask_ratio: 0.7,
            loss_positions: LossPositions::Hidden,
            pretrain: StageSettings::new(500, 8, 1e-3),
            align: StageSettings::new(300, 16, 1e-3),
            alignment: AlignConfig::default(),
            skip_align: false,
            align_resample_masks: true,
            finetune: FinetuneSettings {
                regression: StageSettings::new(400, 16, 3e-4),
                classification: StageSettings::new(400, 16, 3e-4),
                segmentation: StageSettings::new(800, 4, 3e-4),
                reconstruction: StageSettings::new(4000, 4, 1e-3),
                linear_probe: false,
                resample_masks: true,
                eval_every: 25,
            },
            heads: HeadConfig::default(),
        }
    }

    /// The desk configuration on a reduced field of view and frame count.
    pub fn rescaled(&self, s: usize, t: usize, h: usize, w: usize) -> Self {
        let mut c = self.clone();
        let k = h.min(w) as f64 / self.phantom.h.min(self.phantom.w) as f64;
        c.phantom = self.phantom.rescaled(s, t, h, w);
        c.phase_sigma = self.phase_sigma * k;
        c.mask.center_lines = ((self.mask.center_lines as f64 * k).round() as usize).max(1);
        c
    }

    /// Desk pipeline on 2×8×32×32 volumes with (2, 8, 8) patches, sized for a
    /// single CPU core. Step counts and model dims match `desk`.
    pub fn compact() -> Self {
        let mut c = Self::desk().rescaled(2, 8, 32, 32);
        c.patch = [2, 8, 8];
        c
    }

    /// Smallest configuration that exercises every stage; used for smoke runs.
    pub fn tiny() -> Self {
        let mut c = Self::desk().rescaled(1, 4, 16, 16);
        c.n_train = 6;
        c.n_val = 2;
        c.n_test = 3;
        c.patch = [2, 4, 4];
        c.mask.center_lines = 1;
        c.model = ModelDims { dim: 16, depth: 1, dec_depth: 1, heads: 2, mlp_ratio: 2 };
        c.acceleration.sweep = vec![2.0, 4.0];
        c.pretrain = StageSettings::new(4, 3, 1e-3);
        c.align = StageSettings::new(4, 3, 1e-3);
        let ft = StageSettings::new(3, 2, 3e-4);
        c.finetune.regression = ft.clone();
        c.finetune.classification = ft.clone();
        c.finetune.segmentation = ft.clone();
        c.finetune.reconstruction = ft;
        c.finetune.eval_every = 2;
        c.alignment.proj_dim = 8;
        c.heads = HeadConfig { reg_hidden: 8, cls_hidden: 8, seg_channels: 8, token_mixing: true, rec_dec_depth: 1 };
        c
    }

    pub fn volume(&self) -> [usize; 4] {
        [self.phantom.s, self.phantom.t, self.phantom.h, self.phantom.w]
    }

    pub fn grid(&self) -> Result<PatchGridSpec> {
        PatchGridSpec::new(self.patch, self.volume())
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        let m = &self.model;
        let c = EncoderConfig { dim: m.dim, depth: m.depth, dec_depth: m.dec_depth, heads: m.heads, mlp_ratio: m.mlp_ratio, grid: self.grid()?, out_dim: None };
        c.validate()?;
        if c.depth == 0 {
            return Err(KmtrError::InvalidConfig("encoder depth must be >= 1".into()));
        }
        Ok(c)
    }

    pub fn mask_params(&self, r: f64) -> MaskParams {
        MaskParams { r, ..self.mask }
    }

    pub fn n_subjects(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    /// Rejects inconsistent settings before any compute happens.
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        let enc = self.encoder()?;
        self.heads.validate(&enc)?;
        self.alignment.validate()?;
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(KmtrError::InvalidConfig("train, val and test splits must be non-empty".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(KmtrError::InvalidConfig(format!("mask_ratio must lie in [0, 1), got {}", self.mask_ratio)));
        }
        if !(self.phase_sigma > 0.0) || !(self.phase_amplitude >= 0.0) {
            return Err(KmtrError::InvalidConfig("phase_sigma must be > 0 and phase_amplitude >= 0".into()));
        }
        let a = &self.acceleration;
        let mut rs = vec![a.upstream, a.regression, a.classification, a.segmentation, a.reconstruction];
        rs.extend(&a.sweep);
        for r in rs {
            if !(r >= 1.0) {
                return Err(KmtrError::InvalidConfig(format!("acceleration factor must be >= 1, got {r}")));
            }
            if self.mask.center_lines > column_budget(self.phantom.w, r) {
                return Err(KmtrError::InvalidConfig(format!("center_lines {} exceeds the column budget at R={r}", self.mask.center_lines)));
            }
        }
        if self.align.batch < 2 {
            return Err(KmtrError::BatchTooSmall(self.align.batch));
        }
        self.pretrain.validate("pretrain")?;
        self.align.validate("align")?;
        for t in Task::ALL {
            self.finetune.for_task(t).validate(t.name())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(KmtrError::MissingArtifact(path.to_path_buf()));
        }
        let c: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ExperimentConfig::desk().validate().unwrap();
        ExperimentConfig::tiny().validate().unwrap();
        ExperimentConfig::compact().validate().unwrap();
        assert_eq!(ExperimentConfig::compact().grid().unwrap().num_tokens(), 128);
    }

    #[test]
    fn json_roundtrip_and_hash() {
        let c = ExperimentConfig::tiny();
        let back: ExperimentConfig = serde_json::from_str(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
        let mut d = c.clone();
        d.seed = 1;
        assert_ne!(d.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn rejects_bad_settings() {
        let mut c = ExperimentConfig::tiny();
        c.alignment.tau = 0.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::tiny();
        c.alignment.lambda = -0.1;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::tiny();
        c.patch = [3, 4, 4];
        assert!(matches!(c.validate(), Err(KmtrError::NotDivisible { .. })));
        let mut c = ExperimentConfig::tiny();
        c.acceleration.sweep.push(0.5);
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::tiny();
        c.n_test = 0;
        assert!(c.validate().is_err());
    }
}
