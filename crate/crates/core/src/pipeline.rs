//! Frozen-model inference: latent encoding, restyling, decoding, the full
//! translation path (with or without the diffusion sampler) and the
//! quantized reconstruction used for evaluation.

use crate::ae::{self, quantize_nearest, AeSpec, Regularizer};
use crate::config::RunConfig;
use crate::diffusion::ddpm_sample;
use crate::error::{Result, VoxError};
use crate::modality::ModalityRegistry;
use crate::params::{Bank, ParamStore, Session};
use crate::spade::{style_transfer, SpadeSpec};
use crate::tensor::array::Array;

/// Encodes a `[1,1,d,h,w]` volume to its latent; for the Gaussian
/// regularizer this is the posterior mean.
pub fn encode_latent(
    store: &ParamStore<f32>,
    spec: &AeSpec,
    x: &Array<f32>,
) -> Result<Array<f32>> {
    let mut sess = Session::new(store, false);
    let xid = sess.g.constant(x.clone());
    let z = ae::encode(&mut sess, Bank::MAIN, spec, xid)?;
    let z = match spec.reg {
        Regularizer::Vq => z,
        Regularizer::Kl => ae::kl_mean(&mut sess, z)?,
    };
    Ok(sess.g.value(z).clone())
}

/// Applies the learned per-target style modulation to a latent.
pub fn restyle_latent(
    store: &ParamStore<f32>,
    registry: &ModalityRegistry,
    spec: &SpadeSpec,
    z: &Array<f32>,
    target: &str,
) -> Result<Array<f32>> {
    let mut sess = Session::new(store, false);
    let zid = sess.g.constant(z.clone());
    let zc = style_transfer(&mut sess, Bank::MAIN, registry, spec, zid, target)?;
    Ok(sess.g.value(zc).clone())
}

pub fn decode_latent(
    store: &ParamStore<f32>,
    spec: &AeSpec,
    z: &Array<f32>,
) -> Result<Array<f32>> {
    let mut sess = Session::new(store, false);
    let zid = sess.g.constant(z.clone());
    let x = ae::decode(&mut sess, Bank::MAIN, spec, zid)?;
    Ok(sess.g.value(x).clone())
}

/// Round-trips a volume through the compression stage: encode, regularize
/// (codebook lookup or posterior mean), decode.
pub fn reconstruct(
    store: &ParamStore<f32>,
    spec: &AeSpec,
    x: &Array<f32>,
) -> Result<Array<f32>> {
    let z = encode_latent(store, spec, x)?;
    let z = match spec.reg {
        Regularizer::Vq => quantize_nearest(&z, store.get("quant.codebook")?)?.z_q,
        Regularizer::Kl => z,
    };
    decode_latent(store, spec, &z)
}

#[derive(Debug)]
pub struct TranslateOutcome {
    pub volume: Array<f32>,
    /// Reverse-chain steps executed; zero when the sampler is disabled.
    pub sampling_steps: usize,
}

/// A loaded model pair ready for inference. `unet` and `latent_scale`
/// come from the second-stage checkpoint and are unused when the
/// configuration disables diffusion.
pub struct TranslateModel {
    pub cfg: RunConfig,
    pub registry: ModalityRegistry,
    pub ae: ParamStore<f32>,
    pub unet: Option<ParamStore<f32>>,
    pub latent_scale: f64,
}

impl TranslateModel {
    /// Translates one `[1,1,d,h,w]` volume toward `target`.
    pub fn translate(
        &self,
        x_src: &Array<f32>,
        target: &str,
        seed: u64,
    ) -> Result<TranslateOutcome> {
        let tar_ix = self.registry.index_of(target)?;
        let ae_spec = self.cfg.ae_spec();
        let z = encode_latent(&self.ae, &ae_spec, x_src)?;
        let z_cond = if self.cfg.ablation.use_spade {
            restyle_latent(
                &self.ae,
                &self.registry,
                &self.cfg.spade_spec(),
                &z,
                target,
            )?
        } else {
            z
        };
        if !self.cfg.ablation.use_diffusion {
            let volume = decode_latent(&self.ae, &ae_spec, &z_cond)?;
            return Ok(TranslateOutcome {
                volume,
                sampling_steps: 0,
            });
        }
        let unet = self.unet.as_ref().ok_or_else(|| {
            VoxError::Checkpoint("diffusion enabled but no second-stage weights loaded".into())
        })?;
        let spec = self.cfg.unet_spec(self.registry.len());
        let schedule = self.cfg.schedule()?;
        let s = self.latent_scale;
        if !(s.is_finite() && s > 0.0) {
            return Err(VoxError::Checkpoint(format!(
                "invalid latent scale {s} in second-stage weights"
            )));
        }
        let z_c = z_cond.map(|v| (v as f64 * s) as f32);
        let y: Array<f32> = self.registry.one_hot(tar_ix)?;
        let z0 = ddpm_sample(unet, &spec, &self.registry, &z_c, &y, &schedule, seed)?;
        let z0 = z0.map(|v| (v as f64 / s) as f32);
        let volume = decode_latent(&self.ae, &ae_spec, &z0)?;
        Ok(TranslateOutcome {
            volume,
            sampling_steps: schedule.t_count,
        })
    }
}
