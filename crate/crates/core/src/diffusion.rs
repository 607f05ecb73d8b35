//! DDPM machinery: the scaled-linear noise schedule (linear in sqrt(beta)),
//! the closed-form forward corruption, the noise-prediction training loss,
//! and seeded ancestral sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, VoxError};
use crate::modality::ModalityRegistry;
use crate::nn::mse_mean;
use crate::params::{Bank, ParamStore, Session};
use crate::tensor::array::Array;
use crate::tensor::element::Element;
use crate::tensor::graph::TensorId;
use crate::unet3d::{denoise_predict, UNetSpec};

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    /// Step count T; valid steps are 1..=T.
    pub t_count: usize,
    /// beta_t at index t-1.
    pub beta: Vec<f64>,
    /// 1 - beta_t.
    pub alpha: Vec<f64>,
    /// Running product of alpha up to t.
    pub alpha_bar: Vec<f64>,
    /// Posterior std for ancestral sampling; sigma_1 = 0.
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_at(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma_at(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_count {
            return Err(VoxError::config(format!(
                "diffusion step {t} outside 1..={}",
                self.t_count
            )));
        }
        Ok(())
    }
}

/// Scaled-linear schedule: beta_t interpolates linearly in sqrt(beta)
/// between the endpoints, then squares. Endpoints are taken verbatim so
/// beta_1 and beta_T are exact.
pub fn build_schedule(t_count: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_count < 1 {
        return Err(VoxError::config("schedule needs T >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(VoxError::config(format!(
            "schedule betas must satisfy 0 < start <= end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let rs = beta_start.sqrt();
    let re = beta_end.sqrt();
    let mut beta = Vec::with_capacity(t_count);
    for t in 1..=t_count {
        let b = if t == 1 {
            beta_start
        } else if t == t_count {
            beta_end
        } else {
            let f = (t - 1) as f64 / (t_count - 1) as f64;
            let r = rs + f * (re - rs);
            r * r
        };
        beta.push(b);
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_count);
    let mut prod = 1.0f64;
    for &a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    let mut sigma = Vec::with_capacity(t_count);
    sigma.push(0.0);
    for t in 2..=t_count {
        let var = (1.0 - alpha_bar[t - 2]) / (1.0 - alpha_bar[t - 1]) * beta[t - 1];
        sigma.push(var.sqrt());
    }
    for t in 1..t_count {
        debug_assert!(alpha_bar[t] < alpha_bar[t - 1]);
    }
    Ok(NoiseSchedule {
        t_count,
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

/// `z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_diffuse<T: Element>(
    schedule: &NoiseSchedule,
    z0: &Array<T>,
    t: usize,
    eps: &Array<T>,
) -> Result<Array<T>> {
    schedule.check_step(t)?;
    if z0.shape() != eps.shape() {
        return Err(VoxError::shape(format!(
            "forward_diffuse: z0 {:?} vs eps {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    let ab = schedule.alpha_bar_at(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Array::new(
        z0.shape().to_vec(),
        z0.data()
            .iter()
            .zip(eps.data())
            .map(|(&a, &e)| T::from_f64(sa * a.to_f64() + sb * e.to_f64()))
            .collect(),
    )?)
}

pub fn concat_channels_host<T: Element>(a: &Array<T>, b: &Array<T>) -> Result<Array<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 5 || sb.len() != 5 || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(VoxError::shape(format!(
            "channel concat: incompatible shapes {sa:?} and {sb:?}"
        )));
    }
    let mut shape = sa.to_vec();
    shape[1] += sb[1];
    let sp: usize = sa[2..].iter().product();
    let mut out = Array::zeros(shape);
    for n in 0..sa[0] {
        let dst = out.data_mut();
        let base = n * (sa[1] + sb[1]) * sp;
        dst[base..base + sa[1] * sp]
            .copy_from_slice(&a.data()[n * sa[1] * sp..(n + 1) * sa[1] * sp]);
        dst[base + sa[1] * sp..base + (sa[1] + sb[1]) * sp]
            .copy_from_slice(&b.data()[n * sb[1] * sp..(n + 1) * sb[1] * sp]);
    }
    Ok(out)
}

pub fn standard_normal_like<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<T> {
    Array::from_fn(shape.to_vec(), |_| {
        let v: f64 = StandardNormal.sample(rng);
        T::from_f64(v as f32 as f64)
    })
}

/// Builds the noise-prediction loss graph for one training example:
/// `mean (eps - eps_hat(z_in, t, y))^2` where `z_in` is the corrupted
/// target latent, palette-concatenated with the restyled source latent
/// when enabled.
#[allow(clippy::too_many_arguments)]
pub fn training_loss<T: Element>(
    sess: &mut Session<T>,
    bank: Bank,
    spec: &UNetSpec,
    modalities: &ModalityRegistry,
    schedule: &NoiseSchedule,
    z_tar: &Array<T>,
    z_tar_src: &Array<T>,
    t: usize,
    y: &Array<T>,
    eps: &Array<T>,
) -> Result<TensorId> {
    if z_tar.shape() != z_tar_src.shape() {
        return Err(VoxError::shape(format!(
            "training_loss: latent shapes differ: {:?} vs {:?}",
            z_tar.shape(),
            z_tar_src.shape()
        )));
    }
    let z_t = forward_diffuse(schedule, z_tar, t, eps)?;
    let z_in = if spec.use_palette {
        concat_channels_host(z_tar_src, &z_t)?
    } else {
        z_t
    };
    let z_in_id = sess.g.constant(z_in);
    let eps_hat = denoise_predict(sess, bank, spec, modalities, z_in_id, t, y)?;
    let eps_id = sess.g.constant(eps.clone());
    mse_mean(&mut sess.g, eps_id, eps_hat)
}

/// Ancestral DDPM loop with an injectable denoiser, starting from the
/// given initial noise state. `denoise(z_t, t)` returns the predicted
/// noise for step `t`.
pub fn ddpm_sample_with<T, F>(
    mut denoise: F,
    init: Array<T>,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Array<T>>
where
    T: Element,
    F: FnMut(&Array<T>, usize) -> Result<Array<T>>,
{
    let mut z = init;
    for t in (1..=schedule.t_count).rev() {
        let eps_hat = denoise(&z, t)?;
        if eps_hat.shape() != z.shape() {
            return Err(VoxError::shape(format!(
                "denoiser returned {:?} for state {:?}",
                eps_hat.shape(),
                z.shape()
            )));
        }
        let a = schedule.alpha_at(t);
        let ab = schedule.alpha_bar_at(t);
        let coef = schedule.beta_at(t) / (1.0 - ab).sqrt();
        let inv_sqrt_a = 1.0 / a.sqrt();
        let sigma = schedule.sigma_at(t);
        let noise = if sigma > 0.0 {
            Some(standard_normal_like::<T>(rng, z.shape()))
        } else {
            None
        };
        let mut next = Array::zeros(z.shape().to_vec());
        for i in 0..z.numel() {
            let mut v = inv_sqrt_a * (z.data()[i].to_f64() - coef * eps_hat.data()[i].to_f64());
            if let Some(n) = &noise {
                v += sigma * n.data()[i].to_f64();
            }
            next.data_mut()[i] = T::from_f64(v);
        }
        z = next;
        if !z.all_finite() {
            return Err(VoxError::Numeric(format!(
                "sampling diverged at step {t}: non-finite state"
            )));
        }
    }
    Ok(z)
}

/// Seeded sampling with the trained UNet: draws `z_T ~ N(0,1)`, then runs
/// the ancestral loop, re-concatenating the conditioning latent at every
/// step when the palette flag is on.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_sample<T: Element>(
    store: &ParamStore<T>,
    spec: &UNetSpec,
    modalities: &ModalityRegistry,
    z_tar_src: &Array<T>,
    y: &Array<T>,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Array<T>> {
    let zs = z_tar_src.shape().to_vec();
    if zs.len() != 5 || zs[1] != spec.d_emb {
        return Err(VoxError::shape(format!(
            "ddpm_sample: conditioning latent must be [N,{},d,h,w], got {zs:?}",
            spec.d_emb
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = standard_normal_like::<T>(&mut rng, &zs);
    ddpm_sample_with(
        |z_t, t| {
            let z_in = if spec.use_palette {
                concat_channels_host(z_tar_src, z_t)?
            } else {
                z_t.clone()
            };
            let mut sess = Session::new(store, false);
            let z_id = sess.g.constant(z_in);
            let out = denoise_predict(&mut sess, Bank::MAIN, spec, modalities, z_id, t, y)?;
            Ok(sess.g.value(out).clone())
        },
        init,
        schedule,
        &mut rng,
    )
}
