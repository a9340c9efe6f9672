//! Training configuration: a flat TOML table of documented keys.
//!
//! Every key is optional and falls back to its default, except `manifest`
//! which training requires. Unknown keys are rejected. Relative paths are
//! resolved against the directory holding the configuration file.
//!
//! ```toml
//! seed = 7
//! manifest = "data/train.tsv"
//! out_dir = "runs/seed7"
//! iterations = 2000
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::losses::{FeatureSource, LossOptions, LossWeights};
use crate::model::ModelDims;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Training manifest (`image<TAB>mask[<TAB>infrared]` per line).
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Expected side length of the training images; 0 accepts any size.
    pub image_size: usize,
    /// Side length of the shadow / shadow-free crops.
    pub crop_size: usize,
    pub coverage_hi: f64,
    pub coverage_lo: f64,

    pub embed_dim: usize,
    pub num_heads: usize,
    pub window_size: usize,
    pub patch_size: usize,
    pub num_blocks: usize,
    pub decoder_blocks: usize,
    pub radius: f64,
    /// Predict a correction added to the input's logit.
    pub residual: bool,

    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,

    pub w_ort_visible: f64,
    pub w_ort_infrared: f64,
    pub w_sim: f64,
    pub w_adv: f64,
    pub w_ide: f64,
    pub w_rec: f64,
    /// Normalised absolute Gram inner product instead of the raw one.
    pub ort_normalized: bool,
    /// Min-max normalise features before the similarity SSIM.
    pub ssim_normalize: bool,
    /// `psi` (before the spherical transform) or `psi_hat` (after).
    pub loss_features: String,

    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    /// Steps between progress lines on stderr; 0 disables them.
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let dims = ModelDims::default();
        TrainConfig {
            seed: 0,
            manifest: None,
            out_dir: PathBuf::from("run"),
            image_size: 0,
            crop_size: 32,
            coverage_hi: crate::data::DEFAULT_COVERAGE_HI,
            coverage_lo: crate::data::DEFAULT_COVERAGE_LO,
            embed_dim: dims.embed_dim,
            num_heads: dims.num_heads,
            window_size: dims.window_size,
            patch_size: dims.patch_size,
            num_blocks: dims.num_blocks,
            decoder_blocks: dims.decoder_blocks,
            radius: 1.0,
            residual: true,
            lr: 1e-4,
            batch_size: 2,
            iterations: 2000,
            w_ort_visible: 1.0,
            w_ort_infrared: 1.0,
            w_sim: 1.0,
            w_adv: 1.0,
            w_ide: 1.0,
            w_rec: 1.0,
            ort_normalized: true,
            ssim_normalize: true,
            loss_features: "psi".into(),
            checkpoint_interval: 500,
            log_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a configuration file and resolves its relative paths.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(m) = &self.manifest {
            if m.is_relative() {
                self.manifest = Some(base.join(m));
            }
        }
        if self.out_dir.is_relative() {
            self.out_dir = base.join(&self.out_dir);
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            window_size: self.window_size,
            num_blocks: self.num_blocks,
            patch_size: self.patch_size,
            decoder_blocks: self.decoder_blocks,
        }
    }

    pub fn feature_source(&self) -> Result<FeatureSource> {
        match self.loss_features.as_str() {
            "psi" => Ok(FeatureSource::Psi),
            "psi_hat" => Ok(FeatureSource::PsiHat),
            other => Err(Error::Config(format!(
                "loss_features must be `psi` or `psi_hat`, got `{other}`"
            ))),
        }
    }

    pub fn loss_options(&self) -> Result<LossOptions> {
        Ok(LossOptions {
            weights: LossWeights {
                ort_visible: self.w_ort_visible,
                ort_infrared: self.w_ort_infrared,
                sim: self.w_sim,
                adv: self.w_adv,
                ide: self.w_ide,
                rec: self.w_rec,
            },
            ort_normalized: self.ort_normalized,
            ssim_normalize: self.ssim_normalize,
            features: self.feature_source()?,
        })
    }

    /// Checks values and paths before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.dims().validate()?;
        self.feature_source()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return bad("radius must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.iterations == 0 || self.crop_size == 0 {
            return bad("batch_size, iterations and crop_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.coverage_hi) || !(0.0..=1.0).contains(&self.coverage_lo) {
            return bad("coverage bounds must lie in [0, 1]");
        }
        if self.coverage_lo >= self.coverage_hi {
            return bad("coverage_lo must be below coverage_hi");
        }
        let weights = [
            self.w_ort_visible,
            self.w_ort_infrared,
            self.w_sim,
            self.w_adv,
            self.w_ide,
            self.w_rec,
        ];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("loss weights must be finite and non-negative");
        }
        match &self.manifest {
            None => return bad("`manifest` is required"),
            Some(m) if !m.is_file() => {
                return Err(Error::Config(format!(
                    "manifest {} does not exist",
                    m.display()
                )));
            }
            _ => {}
        }
        Ok(())
    }
}
