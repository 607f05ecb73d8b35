//! First training stage: compression autoencoder plus switchable latent
//! restyling, trained against reconstruction, quantization (or KL),
//! self-perceptual, adversarial hinge and cycle objectives.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ae::{
    self, quantize_nearest, register_autoencoder, register_discriminator, AeSpec, Regularizer,
};
use crate::config::RunConfig;
use crate::diffusion::standard_normal_like;
use crate::error::{Result, VoxError};
use crate::modality::ModalityRegistry;
use crate::nn::{hinge_d_loss, hinge_g_loss, l1_mean, mse_mean};
use crate::optim::AdamW;
use crate::params::{Bank, ParamStore, Session};
use crate::phantom::Split;
use crate::spade::{register_style_bank, style_transfer, SpadeSpec};
use crate::tensor::array::Array;
use crate::tensor::graph::TensorId;
use crate::train::{as_input, DataPool};

pub const EMA_DECAY: f64 = 0.99;
pub const DEAD_CODE_STEPS: u64 = 500;
pub const KL_WEIGHT: f64 = 0.01;

#[derive(Clone, Copy, Debug)]
pub struct LossReport {
    pub step: usize,
    pub recon: f64,
    /// Quantization contribution (codebook + commitment), or weighted KL.
    pub quant: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub cycle: f64,
    pub disc: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str =
        "step,recon,quant,perceptual,adversarial,cycle,disc,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.step,
            self.recon,
            self.quant,
            self.perceptual,
            self.adversarial,
            self.cycle,
            self.disc,
            self.total
        )
    }
}

pub struct Stage1Trainer {
    pub cfg: RunConfig,
    pub registry: ModalityRegistry,
    pub ae_spec: AeSpec,
    pub spade_spec: SpadeSpec,
    /// Encoder, decoder, quantizer state and (when enabled) style banks.
    pub ae: ParamStore<f32>,
    pub disc: ParamStore<f32>,
    /// Frozen encoder copy backing the self-perceptual loss.
    pub snapshot: ParamStore<f32>,
    pub opt_g: AdamW,
    pub opt_d: AdamW,
    pub step: usize,
    pub log: Vec<LossReport>,
    rng: ChaCha8Rng,
}

impl Stage1Trainer {
    pub fn new(cfg: &RunConfig, modalities: &[String]) -> Result<Stage1Trainer> {
        cfg.validate()?;
        let registry = ModalityRegistry::new(modalities)?;
        let ae_spec = cfg.ae_spec();
        let spade_spec = cfg.spade_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut ae: ParamStore<f32> = ParamStore::new();
        register_autoencoder(&mut ae, &mut rng, &ae_spec)?;
        if cfg.ablation.use_spade {
            register_style_bank(&mut ae, &mut rng, &spade_spec, &registry)?;
        }
        let mut disc: ParamStore<f32> = ParamStore::new();
        register_discriminator(&mut disc, &mut rng, &ae_spec)?;
        let mut t = Stage1Trainer {
            cfg: cfg.clone(),
            registry,
            ae_spec,
            spade_spec,
            ae,
            disc,
            snapshot: ParamStore::new(),
            opt_g: AdamW::new(cfg.optimizer.lr, cfg.optimizer.weight_decay),
            opt_d: AdamW::new(cfg.optimizer.lr, cfg.optimizer.weight_decay),
            step: 0,
            log: Vec::new(),
            rng,
        };
        t.refresh_snapshot()?;
        Ok(t)
    }

    /// Copies the current encoder weights into the frozen perceptual bank.
    pub fn refresh_snapshot(&mut self) -> Result<()> {
        let names: Vec<String> = self
            .ae
            .names()
            .filter(|n| n.starts_with("enc."))
            .map(|n| n.to_string())
            .collect();
        for name in names {
            let v = self.ae.get(&name)?.clone();
            if self.snapshot.index_of(&name).is_some() {
                self.snapshot.set(&name, v)?;
            } else {
                self.snapshot.add(&name, v)?;
            }
        }
        Ok(())
    }

    fn adv_weight(&self) -> f64 {
        if self.step >= self.cfg.stage1.warmup_steps {
            self.cfg.stage1.adv_weight
        } else {
            0.0
        }
    }

    /// One optimization step on a (source, target) volume pair. Returns the
    /// per-term report; errors on non-finite losses.
    pub fn train_step(
        &mut self,
        x_src: &Array<f32>,
        src_ix: usize,
        x_tar: &Array<f32>,
        tar_ix: usize,
    ) -> Result<LossReport> {
        let cfg = &self.cfg;
        let use_spade = cfg.ablation.use_spade;
        let w_adv = self.adv_weight();
        let use_adv = w_adv > 0.0;
        let w_perc = cfg.stage1.perc_weight;
        let w_cycle = cfg.stage1.cycle_weight;
        let src_name = self.registry.names()[src_ix].clone();
        let tar_name = self.registry.names()[tar_ix].clone();

        let mut kl_eps: Option<Array<f32>> = None;
        if matches!(self.ae_spec.reg, Regularizer::Kl) {
            let e = self.cfg.dataset.extent / 4;
            kl_eps = Some(standard_normal_like(
                &mut self.rng,
                &[1, self.ae_spec.d_emb, e, e, e],
            ));
        }

        let mut sess = Session::new(&self.ae, true);
        let snap_bank = sess.add_bank(&self.snapshot, false);
        let disc_bank = sess.add_bank(&self.disc, false);
        let xs = sess.g.constant(x_src.clone());
        let xt = sess.g.constant(x_tar.clone());

        let enc_out = ae::encode(&mut sess, Bank::MAIN, &self.ae_spec, xs)?;
        let (z, z_dec, reg_graph, reg_weight, reg_value, q) = match self.ae_spec.reg {
            Regularizer::Vq => {
                let q = quantize_nearest(
                    sess.g.value(enc_out),
                    self.ae.get("quant.codebook")?,
                )?;
                let zq = sess.g.straight_through(enc_out, q.z_q.clone())?;
                let e_const = sess.g.constant(q.z_q.clone());
                let commit = mse_mean(&mut sess.g, enc_out, e_const)?;
                let dist = q.dist_mse;
                (
                    enc_out,
                    zq,
                    commit,
                    self.ae_spec.beta_commit,
                    dist * (1.0 + self.ae_spec.beta_commit),
                    Some(q),
                )
            }
            Regularizer::Kl => {
                let (zk, kl) = ae::kl_sample(&mut sess, enc_out, kl_eps.as_ref().unwrap())?;
                let v = sess.g.value(kl).data()[0] as f64;
                (zk, zk, kl, KL_WEIGHT, KL_WEIGHT * v, None)
            }
        };

        let x_rec = ae::decode(&mut sess, Bank::MAIN, &self.ae_spec, z_dec)?;
        let mut recon = l1_mean(&mut sess.g, x_rec, xs)?;

        let (x_fake, compare_ref, cycle_id) = if use_spade {
            let z_cond = style_transfer(
                &mut sess,
                Bank::MAIN,
                &self.registry,
                &self.spade_spec,
                z,
                &tar_name,
            )?;
            let x_trans = ae::decode(&mut sess, Bank::MAIN, &self.ae_spec, z_cond)?;
            let recon_b = l1_mean(&mut sess.g, x_trans, xt)?;
            recon = sess.g.add(recon, recon_b)?;
            let z2 = ae::encode(&mut sess, Bank::MAIN, &self.ae_spec, x_trans)?;
            let z2m = match self.ae_spec.reg {
                Regularizer::Vq => z2,
                Regularizer::Kl => ae::kl_mean(&mut sess, z2)?,
            };
            let z_back = style_transfer(
                &mut sess,
                Bank::MAIN,
                &self.registry,
                &self.spade_spec,
                z2m,
                &src_name,
            )?;
            let x_cyc = ae::decode(&mut sess, Bank::MAIN, &self.ae_spec, z_back)?;
            let cyc = l1_mean(&mut sess.g, x_cyc, xs)?;
            (x_trans, xt, Some(cyc))
        } else {
            (x_rec, xs, None)
        };

        let (_, f_fake) = ae::encode_features(&mut sess, snap_bank, &self.ae_spec, x_fake)?;
        let (_, f_ref) = ae::encode_features(&mut sess, snap_bank, &self.ae_spec, compare_ref)?;
        let mut perc = mse_mean(&mut sess.g, f_fake[0], f_ref[0])?;
        for i in 1..f_fake.len() {
            let m = mse_mean(&mut sess.g, f_fake[i], f_ref[i])?;
            perc = sess.g.add(perc, m)?;
        }
        let perc = sess.g.scale(perc, 1.0 / f_fake.len() as f64);

        let adv_id: Option<TensorId> = if use_adv {
            let logits = ae::discriminate(&mut sess, disc_bank, x_fake)?;
            Some(hinge_g_loss(&mut sess.g, logits))
        } else {
            None
        };

        let reg_term = sess.g.scale(reg_graph, reg_weight);
        let mut total = sess.g.add(recon, reg_term)?;
        let perc_term = sess.g.scale(perc, w_perc);
        total = sess.g.add(total, perc_term)?;
        if let Some(cyc) = cycle_id {
            let c = sess.g.scale(cyc, w_cycle);
            total = sess.g.add(total, c)?;
        }
        if let Some(adv) = adv_id {
            let a = sess.g.scale(adv, w_adv);
            total = sess.g.add(total, a)?;
        }

        let recon_v = sess.g.value(recon).data()[0] as f64;
        let perc_v = sess.g.value(perc).data()[0] as f64;
        let cycle_v = cycle_id.map_or(0.0, |c| sess.g.value(c).data()[0] as f64);
        let adv_v = adv_id.map_or(0.0, |a| sess.g.value(a).data()[0] as f64);
        let total_v = recon_v + reg_value + w_perc * perc_v + w_cycle * cycle_v + w_adv * adv_v;
        if !total_v.is_finite() {
            return Err(VoxError::Numeric(format!(
                "non-finite stage-1 loss at step {}",
                self.step
            )));
        }

        sess.g.backward(total)?;
        let grads = sess.grad_pairs(Bank::MAIN)?;
        let x_fake_host = sess.g.value(x_fake).clone();
        let z_host = match self.ae_spec.reg {
            Regularizer::Vq => Some(sess.g.value(enc_out).clone()),
            Regularizer::Kl => None,
        };
        let real_host = sess.g.value(compare_ref).clone();
        drop(sess);

        self.opt_g.step(&mut self.ae, &grads);
        if let (Some(q), Some(zh)) = (&q, &z_host) {
            ae::codebook_ema_update(
                &mut self.ae,
                q,
                zh,
                &mut self.rng,
                EMA_DECAY,
                DEAD_CODE_STEPS,
            )?;
        }

        let disc_v = if use_adv {
            let mut sd = Session::new(&self.disc, true);
            let real = sd.g.constant(real_host);
            let fake = sd.g.constant(x_fake_host);
            let rl = ae::discriminate(&mut sd, Bank::MAIN, real)?;
            let fl = ae::discriminate(&mut sd, Bank::MAIN, fake)?;
            let dl = hinge_d_loss(&mut sd.g, rl, fl)?;
            let v = sd.g.value(dl).data()[0] as f64;
            if !v.is_finite() {
                return Err(VoxError::Numeric(format!(
                    "non-finite discriminator loss at step {}",
                    self.step
                )));
            }
            sd.g.backward(dl)?;
            let dgrads = sd.grad_pairs(Bank::MAIN)?;
            drop(sd);
            self.opt_d.step(&mut self.disc, &dgrads);
            v
        } else {
            0.0
        };

        let report = LossReport {
            step: self.step,
            recon: recon_v,
            quant: reg_value,
            perceptual: perc_v,
            adversarial: adv_v,
            cycle: cycle_v,
            disc: disc_v,
            total: total_v,
        };
        self.step += 1;
        Ok(report)
    }

    /// Runs `steps` optimization steps over random train-split pairs.
    pub fn train(&mut self, pool: &DataPool, steps: usize) -> Result<()> {
        let seeds = pool.seeds(Split::Train);
        if seeds.is_empty() {
            return Err(VoxError::data("train split is empty"));
        }
        let m = self.registry.len();
        for _ in 0..steps {
            if self.cfg.stage1.snapshot_refresh > 0
                && self.step > 0
                && self.step % self.cfg.stage1.snapshot_refresh == 0
            {
                self.refresh_snapshot()?;
            }
            let seed = seeds[self.rng.random_range(0..seeds.len())];
            let (src_ix, tar_ix) = if m < 2 {
                (0, 0)
            } else {
                let s = self.rng.random_range(0..m);
                let mut t = self.rng.random_range(0..m);
                while t == s {
                    t = self.rng.random_range(0..m);
                }
                (s, t)
            };
            let set = pool.subject(seed)?;
            let xs = as_input(&set.volumes[src_ix])?;
            let xt = as_input(&set.volumes[tar_ix])?;
            let report = self.train_step(&xs, src_ix, &xt, tar_ix)?;
            self.log.push(report);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RegType;
    use crate::phantom::{split_dataset, DatasetManifest};

    fn tiny_cfg(extent: usize) -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.dataset.extent = extent;
        cfg.dataset.subjects = 4;
        cfg.dataset.train_fraction = 0.5;
        cfg.stage1.warmup_steps = 2;
        cfg.stage1.snapshot_refresh = 3;
        cfg
    }

    fn tiny_pool(cfg: &RunConfig) -> DataPool {
        let spec = cfg.phantom_spec();
        let mut manifest = DatasetManifest::new(&spec, cfg.dataset.subjects).unwrap();
        split_dataset(&mut manifest, cfg.dataset.train_fraction, cfg.seed).unwrap();
        DataPool::new(spec, manifest).unwrap()
    }

    #[test]
    fn losses_are_finite_and_total_recomputes() {
        let cfg = tiny_cfg(16);
        let pool = tiny_pool(&cfg);
        let mut t = Stage1Trainer::new(&cfg, pool.modality_names()).unwrap();
        t.train(&pool, 4).unwrap();
        assert_eq!(t.log.len(), 4);
        for (i, r) in t.log.iter().enumerate() {
            assert!(r.total.is_finite());
            let w_adv = if i >= 2 { 0.1 } else { 0.0 };
            let want =
                r.recon + r.quant + 0.5 * r.perceptual + 1.0 * r.cycle + w_adv * r.adversarial;
            assert!(
                (r.total - want).abs() < 1e-12,
                "step {i}: {} vs {want}",
                r.total
            );
            if i < 2 {
                assert_eq!(r.adversarial, 0.0);
                assert_eq!(r.disc, 0.0);
            } else {
                assert!(r.disc != 0.0);
            }
        }
    }

    #[test]
    fn same_seed_reruns_are_bitwise_identical() {
        let cfg = tiny_cfg(16);
        let pool = tiny_pool(&cfg);
        let mut a = Stage1Trainer::new(&cfg, pool.modality_names()).unwrap();
        a.train(&pool, 3).unwrap();
        let mut b = Stage1Trainer::new(&cfg, pool.modality_names()).unwrap();
        b.train(&pool, 3).unwrap();
        for (ra, rb) in a.log.iter().zip(&b.log) {
            assert_eq!(ra.total.to_bits(), rb.total.to_bits());
            assert_eq!(ra.recon.to_bits(), rb.recon.to_bits());
        }
        let mut c = Stage1Trainer::new(&{ let mut c = cfg; c.seed = 8; c }, pool.modality_names())
            .unwrap();
        let pool_c = tiny_pool(&c.cfg.clone());
        c.train(&pool_c, 3).unwrap();
        assert_ne!(a.log[0].total.to_bits(), c.log[0].total.to_bits());
    }

    #[test]
    fn spade_off_trains_reconstruction_only() {
        let mut cfg = tiny_cfg(16);
        cfg.ablation.use_spade = false;
        cfg.ablation.use_palette = false;
        let pool = tiny_pool(&cfg);
        let mut t = Stage1Trainer::new(&cfg, pool.modality_names()).unwrap();
        assert!(t.ae.index_of("spade.in.w").is_none());
        t.train(&pool, 2).unwrap();
        for r in &t.log {
            assert_eq!(r.cycle, 0.0);
            assert!(r.total.is_finite());
        }
    }

    #[test]
    fn kl_row_trains_with_gaussian_regularizer() {
        let mut cfg = tiny_cfg(16);
        cfg.ablation.reg_type = RegType::Kl;
        let pool = tiny_pool(&cfg);
        let mut t = Stage1Trainer::new(&cfg, pool.modality_names()).unwrap();
        assert!(t.ae.index_of("quant.codebook").is_none());
        let enc_out = t.ae.get("enc.out.w").unwrap().shape().to_vec();
        assert_eq!(enc_out[0], 2 * cfg.model.d_emb);
        t.train(&pool, 2).unwrap();
        for r in &t.log {
            assert!(r.quant >= 0.0);
            assert!(r.total.is_finite());
        }
    }

    #[test]
    fn training_reduces_loss_on_one_subject() {
        let mut cfg = tiny_cfg(16);
        cfg.dataset.subjects = 2;
        cfg.stage1.warmup_steps = 100;
        let pool = tiny_pool(&cfg);
        let mut t = Stage1Trainer::new(&cfg, pool.modality_names()).unwrap();
        t.train(&pool, 30).unwrap();
        let first = t.log[0].total;
        let last = t.log.last().unwrap().total;
        assert!(
            last < first,
            "loss should decrease: first {first}, last {last}"
        );
    }
}
