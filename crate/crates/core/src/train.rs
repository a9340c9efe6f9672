//! Joint training of the pseudo-shadow renderer and the removal network
//! against a patch discriminator.
//!
//! Each generator step crops a shadow patch `S` and a shadow-free patch `F`
//! from every image in the batch, darkens `F` with the learnable renderer,
//! runs the removal network on the darkened patch (with its infrared
//! companion) and minimises the weighted objective. The discriminator then
//! takes one step on `S` (real) against the darkened patches (fake).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{
    crop_pair, crop_pair_exhaustive, crop_tensor, pseudo_infrared, pseudo_shadow, Coverage,
    Manifest, Sample,
};
use crate::error::{Error, Result};
use crate::losses::{
    discriminator_loss, total_loss, Discriminator, LossInputs, LossOptions, LossReport,
};
use crate::model::{ModelDims, ShadowRemover};
use crate::optim::Adam;
use crate::params::{ParamId, ParamStore, Params};
use crate::tensor::Tensor;

pub const THETA_NAME: &str = "shadow.theta";
pub const LOSS_LOG: &str = "loss_log.csv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Offsets the data stream from the initialisation stream.
const DATA_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

/// Removal network, renderer logits and discriminator with their stores.
pub struct Networks {
    pub remover: ShadowRemover,
    pub theta: ParamId,
    pub generator: ParamStore,
    pub discriminator: Discriminator,
    pub disc_store: ParamStore,
}

impl Networks {
    pub fn new(dims: ModelDims, radius: f64, residual: bool, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut generator = ParamStore::new();
        let mut remover = ShadowRemover::new(dims, radius, &mut generator, &mut rng)?;
        remover.residual = residual;
        let theta = generator.zeros(THETA_NAME, &[3]);
        let mut disc_store = ParamStore::new();
        let discriminator = Discriminator::new(&mut disc_store, "disc", &mut rng);
        Ok(Networks {
            remover,
            theta,
            generator,
            discriminator,
            disc_store,
        })
    }

    pub fn checkpoint(&self, step: usize, seed: u64) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let d = &self.remover.dims;
        for (k, v) in [
            ("embed_dim", d.embed_dim.to_string()),
            ("num_heads", d.num_heads.to_string()),
            ("window_size", d.window_size.to_string()),
            ("patch_size", d.patch_size.to_string()),
            ("num_blocks", d.num_blocks.to_string()),
            ("decoder_blocks", d.decoder_blocks.to_string()),
            ("radius", self.remover.sphere.radius.to_string()),
            ("residual", self.remover.residual.to_string()),
            ("step", step.to_string()),
            ("seed", seed.to_string()),
        ] {
            ck.meta.insert(k.into(), v);
        }
        ck.push(self.generator.iter());
        ck.push(self.disc_store.iter());
        ck
    }

    /// Rebuilds every network from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| -> Result<&str> {
            ck.meta
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Checkpoint(format!("missing meta entry `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            meta(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("meta entry `{k}` is not an integer")))
        };
        let dims = ModelDims {
            embed_dim: num("embed_dim")?,
            num_heads: num("num_heads")?,
            window_size: num("window_size")?,
            patch_size: num("patch_size")?,
            num_blocks: num("num_blocks")?,
            decoder_blocks: num("decoder_blocks")?,
        };
        let radius: f64 = meta("radius")?
            .parse()
            .map_err(|_| Error::Checkpoint("meta entry `radius` is not a number".into()))?;
        let residual = meta("residual")? == "true";
        let mut nets = Networks::new(dims, radius, residual, 0)?;
        nets.generator.load_values(ck.iter())?;
        if ck.iter().any(|(n, _)| n.starts_with("disc.")) {
            nets.disc_store.load_values(ck.iter())?;
        }
        Ok(nets)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Shadow-free estimate for a full image `[3, H, W]`.
    pub fn remove(&self, visible: &Tensor, infrared: &Tensor) -> Result<Tensor> {
        self.remover.infer(&self.generator, visible, infrared)
    }

    /// Current darkening factors of the renderer.
    pub fn gamma(&self) -> [f64; 3] {
        let t = self.generator.get(self.theta).data();
        let g = |x: f64| {
            crate::data::GAMMA_MIN
                + (crate::data::GAMMA_MAX - crate::data::GAMMA_MIN) * crate::autodiff::sigmoid(x)
        };
        [g(t[0]), g(t[1]), g(t[2])]
    }
}

fn fill_missing_grads(store: &mut ParamStore) {
    for t in store.tensors_mut() {
        if t.requires_grad && t.grad().is_none() {
            let z = vec![0.0; t.len()];
            t.accumulate_grad(&z);
        }
    }
}

/// In-memory training state.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub nets: Networks,
    pub opts: LossOptions,
    samples: Vec<Sample>,
    usable: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    adam_g: Adam,
    adam_d: Adam,
    pub step: usize,
}

impl Trainer {
    /// Samples without both kinds of crop window are left out.
    pub fn new(cfg: TrainConfig, samples: Vec<Sample>) -> Result<Self> {
        cfg.dims().validate()?;
        let opts = cfg.loss_options()?;
        for s in &samples {
            let side = s.visible.shape()[1];
            if cfg.image_size != 0
                && (side != cfg.image_size || s.visible.shape()[2] != cfg.image_size)
            {
                return Err(Error::Config(format!(
                    "{} is {}x{}, configuration expects {}x{}",
                    s.path.display(),
                    side,
                    s.visible.shape()[2],
                    cfg.image_size,
                    cfg.image_size
                )));
            }
        }
        let usable: Vec<usize> = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| {
                let (a, b) = Coverage::new(&s.mask).valid_fractions(
                    cfg.crop_size,
                    cfg.coverage_hi,
                    cfg.coverage_lo,
                );
                a > 0.0 && b > 0.0
            })
            .map(|(i, _)| i)
            .collect();
        if usable.is_empty() {
            return Err(Error::Config(format!(
                "no training image has both a shadow and a shadow-free {0}x{0} window",
                cfg.crop_size
            )));
        }
        let nets = Networks::new(cfg.dims(), cfg.radius, cfg.residual, cfg.seed)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DATA_STREAM);
        Ok(Trainer {
            adam_g: Adam::new(cfg.lr),
            adam_d: Adam::new(cfg.lr),
            cfg,
            nets,
            opts,
            samples,
            order: Vec::new(),
            cursor: 0,
            usable,
            rng,
            step: 0,
        })
    }

    pub fn usable_images(&self) -> usize {
        self.usable.len()
    }

    fn next_batch(&mut self) -> Vec<usize> {
        (0..self.cfg.batch_size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order = self.usable.clone();
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }

    /// One generator step followed by one discriminator step.
    pub fn step(&mut self) -> Result<LossReport> {
        let batch = self.next_batch();
        let cfg = &self.cfg;
        let mut crops = Vec::with_capacity(batch.len());
        for &i in &batch {
            let s = &self.samples[i];
            let (hi, lo) = (cfg.coverage_hi, cfg.coverage_lo);
            let pair = match crop_pair(&s.visible, &s.mask, cfg.crop_size, hi, lo, &mut self.rng) {
                Err(Error::NoValidWindow { .. }) => {
                    crop_pair_exhaustive(&s.visible, &s.mask, cfg.crop_size, hi, lo, &mut self.rng)?
                }
                r => r?,
            };
            let ir = (!s.infrared_is_proxy).then(|| {
                crop_tensor(
                    &s.infrared,
                    pair.shadow_free_at.0,
                    pair.shadow_free_at.1,
                    cfg.crop_size,
                )
            });
            crops.push((pair, ir));
        }

        // Generator.
        let mut tape = Tape::new();
        let mut gp = Params::trainable(&self.nets.generator);
        let mut dp = Params::frozen(&self.nets.disc_store);
        let theta = gp.var(&mut tape, self.nets.theta);
        let (mut vis, mut irs, mut restored, mut free, mut fakes, mut reals) = (
            Vec::new(),
            Vec::new(),
            Vec::new(),
            Vec::new(),
            Vec::new(),
            Vec::new(),
        );
        for (pair, ir) in &crops {
            let f = tape.constant(pair.shadow_free.clone());
            let s = tape.constant(pair.shadow.clone());
            let fake = pseudo_shadow(&mut tape, f, theta)?;
            let input = tape.detach(fake);
            let ir_t = match ir {
                Some(t) => t.clone(),
                None => pseudo_infrared(tape.value(input)),
            };
            let ir_v = tape.constant(ir_t);
            let out = self.nets.remover.forward(&mut tape, &mut gp, input, ir_v)?;
            vis.push(out.visible);
            irs.push(out.infrared);
            restored.push(out.image);
            free.push(f);
            fakes.push(fake);
            reals.push(s);
        }
        let d_fake = self
            .nets
            .discriminator
            .forward_batch(&mut tape, &mut dp, &fakes)?;
        let terms = total_loss(
            &mut tape,
            &LossInputs {
                visible: &vis,
                infrared: &irs,
                restored: &restored,
                shadow_free: &free,
                generated_shadow: &fakes,
                shadow: &reals,
                d_fake,
            },
            &self.opts,
        )?;
        let fake_values: Vec<Tensor> = fakes.iter().map(|&v| tape.value(v).clone()).collect();
        let mut report = terms.report(&tape, 0.0);
        if let Some(c) = report.non_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step + 1,
                component: c.into(),
            });
        }
        tape.backward(terms.total)?;
        let grads = gp.grads(&tape);
        drop(gp);
        drop(dp);

        // Discriminator.
        let mut dtape = Tape::new();
        let mut dp = Params::trainable(&self.nets.disc_store);
        let real_v: Vec<_> = crops
            .iter()
            .map(|(p, _)| dtape.constant(p.shadow.clone()))
            .collect();
        let fake_v: Vec<_> = fake_values.into_iter().map(|t| dtape.constant(t)).collect();
        let d_real = self
            .nets
            .discriminator
            .forward_batch(&mut dtape, &mut dp, &real_v)?;
        let d_fake = self
            .nets
            .discriminator
            .forward_batch(&mut dtape, &mut dp, &fake_v)?;
        let d_loss = discriminator_loss(&mut dtape, d_real, d_fake)?;
        report.adv_discriminator = dtape.value(d_loss).item();
        if !report.adv_discriminator.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step + 1,
                component: "adv_discriminator".into(),
            });
        }
        dtape.backward(d_loss)?;
        let dgrads = dp.grads(&dtape);
        drop(dp);

        let store = &mut self.nets.generator;
        store.clear_grads();
        store.accumulate(&grads);
        fill_missing_grads(store);
        self.adam_g.step(store.tensors_mut())?;

        let dstore = &mut self.nets.disc_store;
        dstore.clear_grads();
        dstore.accumulate(&dgrads);
        fill_missing_grads(dstore);
        self.adam_d.step(dstore.tensors_mut())?;

        self.step += 1;
        Ok(report)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.nets.checkpoint(self.step, self.cfg.seed)
    }
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: usize,
    pub loss_log: PathBuf,
    pub checkpoint: PathBuf,
    pub last: LossReport,
    pub usable_images: usize,
}

/// Runs a full training job: validates the configuration, loads the
/// manifest, trains, and writes `loss_log.csv`, periodic checkpoints under
/// `checkpoints/` and the final `model.ckpt` into `out_dir`.
pub fn train(
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(usize, &LossReport),
) -> Result<TrainSummary> {
    cfg.validate()?;
    let manifest = Manifest::load(cfg.manifest.as_ref().expect("validated"))?;
    let samples = manifest.load_samples()?;
    let mut trainer = Trainer::new(cfg.clone(), samples)?;

    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(LOSS_LOG);
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let io = |e| Error::io(&log_path, e);
    writeln!(log, "{}", LossReport::CSV_HEADER).map_err(io)?;

    let mut last = LossReport::default();
    for _ in 0..cfg.iterations {
        let report = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                log.flush().map_err(io)?;
                return Err(e);
            }
        };
        writeln!(log, "{}", report.csv_line(trainer.step)).map_err(io)?;
        if cfg.log_interval > 0 && trainer.step % cfg.log_interval == 0 {
            progress(trainer.step, &report);
        }
        if cfg.checkpoint_interval > 0
            && trainer.step % cfg.checkpoint_interval == 0
            && trainer.step < cfg.iterations
        {
            let dir = out.join(CHECKPOINT_DIR);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            trainer
                .checkpoint()
                .save(dir.join(format!("step_{:06}.ckpt", trainer.step)))?;
        }
        last = report;
    }
    log.flush().map_err(io)?;
    let ck_path = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&ck_path)?;
    Ok(TrainSummary {
        steps: trainer.step,
        loss_log: log_path,
        checkpoint: ck_path,
        last,
        usable_images: trainer.usable_images(),
    })
}
