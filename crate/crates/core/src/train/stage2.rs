//! Second training stage: latent denoising diffusion over the frozen
//! first-stage latent space, conditioned on restyled source latents and
//! target-modality one-hot codes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ae::AeSpec;
use crate::checkpoint::table_hash;
use crate::config::RunConfig;
use crate::diffusion::{standard_normal_like, training_loss, NoiseSchedule};
use crate::error::{Result, VoxError};
use crate::modality::ModalityRegistry;
use crate::optim::AdamW;
use crate::params::{Bank, ParamStore, Session};
use crate::phantom::Split;
use crate::pipeline::{encode_latent, restyle_latent};
use crate::spade::SpadeSpec;
use crate::tensor::array::Array;
use crate::train::{as_input, DataPool};
use crate::unet3d::{register_unet, UNetSpec};

#[derive(Clone, Copy, Debug)]
pub struct Stage2Report {
    pub step: usize,
    pub loss: f64,
}

impl Stage2Report {
    pub const CSV_HEADER: &'static str = "step,loss";

    pub fn csv_row(&self) -> String {
        format!("{},{:.9e}", self.step, self.loss)
    }
}

/// One cached training example: scaled target latent, scaled restyled
/// source latent, and the target modality index.
pub struct LatentPair {
    pub z_tar: Array<f32>,
    pub z_tar_src: Array<f32>,
    pub tar_ix: usize,
}

pub struct Stage2Trainer {
    pub cfg: RunConfig,
    pub registry: ModalityRegistry,
    pub ae_spec: AeSpec,
    pub spade_spec: SpadeSpec,
    pub unet_spec: UNetSpec,
    /// Frozen first-stage weights; hashed to enforce the freeze.
    pub ae: ParamStore<f32>,
    pub ae_hash: String,
    pub unet: ParamStore<f32>,
    pub schedule: NoiseSchedule,
    pub latent_scale: f64,
    pub pairs: Vec<LatentPair>,
    pub opt: AdamW,
    pub step: usize,
    pub log: Vec<Stage2Report>,
    rng: ChaCha8Rng,
}

impl Stage2Trainer {
    pub fn new(cfg: &RunConfig, modalities: &[String], ae: ParamStore<f32>) -> Result<Self> {
        cfg.validate()?;
        let registry = ModalityRegistry::new(modalities)?;
        let unet_spec = cfg.unet_spec(registry.len());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut unet: ParamStore<f32> = ParamStore::new();
        register_unet(&mut unet, &mut rng, &unet_spec)?;
        let ae_hash = table_hash(&ae);
        Ok(Stage2Trainer {
            cfg: cfg.clone(),
            registry,
            ae_spec: cfg.ae_spec(),
            spade_spec: cfg.spade_spec(),
            unet_spec,
            ae,
            ae_hash,
            unet,
            schedule: cfg.schedule()?,
            latent_scale: 1.0,
            pairs: Vec::new(),
            opt: AdamW::new(cfg.optimizer.lr, cfg.optimizer.weight_decay),
            step: 0,
            log: Vec::new(),
            rng,
        })
    }

    /// Encodes the train split through the frozen first stage, caching one
    /// example per ordered modality pair (identity pairs included), then
    /// rescales all latents to unit standard deviation.
    pub fn precompute(&mut self, pool: &DataPool) -> Result<()> {
        let seeds = pool.seeds(Split::Train);
        if seeds.is_empty() {
            return Err(VoxError::data("train split is empty"));
        }
        let m = self.registry.len();
        self.pairs.clear();
        for &seed in &seeds {
            let set = pool.subject(seed)?;
            let mut lat: Vec<Array<f32>> = Vec::with_capacity(m);
            for v in &set.volumes {
                lat.push(encode_latent(&self.ae, &self.ae_spec, &as_input(v)?)?);
            }
            for tar_ix in 0..m {
                let tar_name = self.registry.names()[tar_ix].clone();
                for src_ix in 0..m {
                    let z_tar = lat[tar_ix].clone();
                    let z_tar_src = if !self.unet_spec.use_palette {
                        z_tar.clone()
                    } else if self.cfg.ablation.use_spade {
                        restyle_latent(
                            &self.ae,
                            &self.registry,
                            &self.spade_spec,
                            &lat[src_ix],
                            &tar_name,
                        )?
                    } else {
                        lat[src_ix].clone()
                    };
                    self.pairs.push(LatentPair {
                        z_tar,
                        z_tar_src,
                        tar_ix,
                    });
                }
            }
        }
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        let mut n = 0usize;
        for p in &self.pairs {
            for &v in p.z_tar.data() {
                let v = v as f64;
                sum += v;
                sq += v * v;
                n += 1;
            }
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        let std = var.sqrt();
        self.latent_scale = if std > 1e-12 { 1.0 / std } else { 1.0 };
        let s = self.latent_scale;
        for p in &mut self.pairs {
            p.z_tar = p.z_tar.map(|v| (v as f64 * s) as f32);
            p.z_tar_src = p.z_tar_src.map(|v| (v as f64 * s) as f32);
        }
        Ok(())
    }

    /// One noise-prediction step on a random cached pair and timestep.
    pub fn train_step(&mut self) -> Result<Stage2Report> {
        if self.pairs.is_empty() {
            return Err(VoxError::data("no cached latents: run precompute first"));
        }
        let ix = self.rng.random_range(0..self.pairs.len());
        let t = self.rng.random_range(1..=self.schedule.t_count);
        let shape = self.pairs[ix].z_tar.shape().to_vec();
        let eps = standard_normal_like(&mut self.rng, &shape);
        let y: Array<f32> = self.registry.one_hot(self.pairs[ix].tar_ix)?;

        let mut sess = Session::new(&self.unet, true);
        let loss = training_loss(
            &mut sess,
            Bank::MAIN,
            &self.unet_spec,
            &self.registry,
            &self.schedule,
            &self.pairs[ix].z_tar,
            &self.pairs[ix].z_tar_src,
            t,
            &y,
            &eps,
        )?;
        let v = sess.g.value(loss).data()[0] as f64;
        if !v.is_finite() {
            return Err(VoxError::Numeric(format!(
                "non-finite stage-2 loss at step {}",
                self.step
            )));
        }
        sess.g.backward(loss)?;
        let grads = sess.grad_pairs(Bank::MAIN)?;
        drop(sess);
        self.opt.step(&mut self.unet, &grads);

        let report = Stage2Report {
            step: self.step,
            loss: v,
        };
        self.step += 1;
        Ok(report)
    }

    /// Runs `steps` optimization steps and verifies the first-stage
    /// weights were left untouched.
    pub fn train(&mut self, steps: usize) -> Result<()> {
        for _ in 0..steps {
            let r = self.train_step()?;
            self.log.push(r);
        }
        if table_hash(&self.ae) != self.ae_hash {
            return Err(VoxError::Checkpoint(
                "first-stage weights changed during second-stage training".into(),
            ));
        }
        Ok(())
    }
}
