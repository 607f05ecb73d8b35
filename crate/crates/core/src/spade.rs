//! Multi-switchable spatially adaptive normalization. Latents are
//! instance-normalized, then modulated by spatially varying gamma/beta
//! maps produced by per-target-modality conv stacks; a shared trunk
//! (input conv, two residual blocks, four SPADE blocks, output conv)
//! maps source latents to target-styled latents.

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VoxError};
use crate::modality::ModalityRegistry;
use crate::nn::{self, conv_p, instance_norm, EPS_NORM};
use crate::params::{Bank, ParamStore, Session};
use crate::tensor::array::Array;
use crate::tensor::element::Element;
use crate::tensor::graph::TensorId;

#[derive(Clone, Debug)]
pub struct SpadeSpec {
    pub d_emb: usize,
    /// Channels after the input conv.
    pub c_in: usize,
    /// Channels through the residual trunk and first SPADE blocks.
    pub c_mid: usize,
    /// Channels after the last SPADE block, before the output conv.
    pub c_late: usize,
}

impl SpadeSpec {
    pub fn desk() -> Self {
        SpadeSpec {
            d_emb: 3,
            c_in: 4,
            c_mid: 8,
            c_late: 4,
        }
    }

    /// (site name, channel count) for the two modulation stages of each
    /// of the four SPADE blocks.
    pub fn sites(&self) -> Vec<(String, usize)> {
        let mut v = Vec::new();
        for i in 0..4 {
            let cin = self.c_mid;
            let cout = if i == 3 { self.c_late } else { self.c_mid };
            v.push((format!("blk{i}a"), cin));
            v.push((format!("blk{i}b"), cout));
        }
        v
    }
}

// ---- registration ----

fn register_in_res<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cin: usize,
    cout: usize,
) -> Result<()> {
    nn::add_conv(store, rng, &format!("{prefix}.c1"), cin, cout, 3)?;
    nn::add_conv(store, rng, &format!("{prefix}.c2"), cout, cout, 3)?;
    if cin != cout {
        nn::add_conv(store, rng, &format!("{prefix}.sk"), cin, cout, 1)?;
    }
    Ok(())
}

pub fn register_style_bank<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    spec: &SpadeSpec,
    modalities: &ModalityRegistry,
) -> Result<()> {
    nn::add_conv(store, rng, "spade.in", spec.d_emb, spec.c_in, 7)?;
    register_in_res(store, rng, "spade.res0", spec.c_in, spec.c_mid)?;
    register_in_res(store, rng, "spade.res1", spec.c_mid, spec.c_mid)?;
    for i in 0..4 {
        let cin = spec.c_mid;
        let cout = if i == 3 { spec.c_late } else { spec.c_mid };
        nn::add_conv(store, rng, &format!("spade.blk{i}.c1"), cin, cout, 3)?;
        nn::add_conv(store, rng, &format!("spade.blk{i}.c2"), cout, cout, 3)?;
        if cin != cout {
            nn::add_conv(store, rng, &format!("spade.blk{i}.sk"), cin, cout, 1)?;
        }
    }
    for m in modalities.names() {
        for (site, c) in spec.sites() {
            let p = format!("spade.mod.{m}.{site}");
            nn::add_conv(store, rng, &format!("{p}.sh"), c, c, 3)?;
            nn::add_conv_zero(store, &format!("{p}.ga"), c, c, 3)?;
            nn::add_conv_zero(store, &format!("{p}.be"), c, c, 3)?;
        }
    }
    nn::add_conv(store, rng, "spade.out", spec.c_late, spec.d_emb, 7)?;
    Ok(())
}

// ---- forward passes ----

/// Gamma-residual and beta maps for one (modality, site) pair. Gamma is
/// `1 + residual`, so the returned tensor is the residual part.
fn modulation<T: Element>(
    sess: &mut Session<T>,
    bank: Bank,
    modality: &str,
    site: &str,
    h: TensorId,
) -> Result<(TensorId, TensorId)> {
    let p = format!("spade.mod.{modality}.{site}");
    let m = conv_p(sess, bank, &format!("{p}.sh"), h, 1, 1)?;
    let m = sess.g.relu(m);
    let gamma_res = conv_p(sess, bank, &format!("{p}.ga"), m, 1, 1)?;
    let beta = conv_p(sess, bank, &format!("{p}.be"), m, 1, 1)?;
    Ok((gamma_res, beta))
}

/// Instance-normalizes `h` and applies the target modality's spatially
/// varying affine: `(1 + gamma_res(h)) * IN(h) + beta(h)`.
pub fn spade_apply<T: Element>(
    sess: &mut Session<T>,
    bank: Bank,
    modalities: &ModalityRegistry,
    target: &str,
    site: &str,
    h: TensorId,
) -> Result<TensorId> {
    modalities.index_of(target)?;
    let (gamma_res, beta) = modulation(sess, bank, target, site, h)?;
    let normed = instance_norm(&mut sess.g, h, EPS_NORM)?;
    let scaled = sess.g.mul(normed, gamma_res)?;
    let out = sess.g.add(normed, scaled)?;
    sess.g.add(out, beta)
}

fn in_res_block<T: Element>(
    sess: &mut Session<T>,
    bank: Bank,
    prefix: &str,
    x: TensorId,
) -> Result<TensorId> {
    let cin = sess.g.shape(x)[1];
    let h = instance_norm(&mut sess.g, x, EPS_NORM)?;
    let h = sess.g.relu(h);
    let h = conv_p(sess, bank, &format!("{prefix}.c1"), h, 1, 1)?;
    let cout = sess.g.shape(h)[1];
    let h = instance_norm(&mut sess.g, h, EPS_NORM)?;
    let h = sess.g.relu(h);
    let h = conv_p(sess, bank, &format!("{prefix}.c2"), h, 1, 1)?;
    let skip = if cin != cout {
        conv_p(sess, bank, &format!("{prefix}.sk"), x, 1, 0)?
    } else {
        x
    };
    sess.g.add(skip, h)
}

fn spade_block<T: Element>(
    sess: &mut Session<T>,
    bank: Bank,
    modalities: &ModalityRegistry,
    target: &str,
    block: usize,
    x: TensorId,
) -> Result<TensorId> {
    let cin = sess.g.shape(x)[1];
    let h = spade_apply(sess, bank, modalities, target, &format!("blk{block}a"), x)?;
    let h = sess.g.relu(h);
    let h = conv_p(sess, bank, &format!("spade.blk{block}.c1"), h, 1, 1)?;
    let cout = sess.g.shape(h)[1];
    let h = spade_apply(sess, bank, modalities, target, &format!("blk{block}b"), h)?;
    let h = sess.g.relu(h);
    let h = conv_p(sess, bank, &format!("spade.blk{block}.c2"), h, 1, 1)?;
    let skip = if cin != cout {
        conv_p(sess, bank, &format!("spade.blk{block}.sk"), x, 1, 0)?
    } else {
        x
    };
    sess.g.add(skip, h)
}

/// Full restyling trunk: input conv (k7), two residual blocks, four SPADE
/// blocks with two modulation stages each, output conv (k7) back to the
/// latent channel count.
pub fn style_transfer<T: Element>(
    sess: &mut Session<T>,
    bank: Bank,
    modalities: &ModalityRegistry,
    spec: &SpadeSpec,
    z: TensorId,
    target: &str,
) -> Result<TensorId> {
    modalities.index_of(target)?;
    let s = sess.g.shape(z);
    if s.len() != 5 || s[1] != spec.d_emb {
        return Err(VoxError::shape(format!(
            "style_transfer: latent must be [N,{},d,h,w], got {s:?}",
            spec.d_emb
        )));
    }
    let h = conv_p(sess, bank, "spade.in", z, 1, 3)?;
    let h = in_res_block(sess, bank, "spade.res0", h)?;
    let h = in_res_block(sess, bank, "spade.res1", h)?;
    let mut h = h;
    for i in 0..4 {
        h = spade_block(sess, bank, modalities, target, i, h)?;
    }
    conv_p(sess, bank, "spade.out", h, 1, 3)
}

// ---- identity initialization (for wiring verification) ----

fn delta_kernel<T: Element>(cout: usize, cin: usize, k: usize) -> Array<T> {
    let mut w = Array::zeros(vec![cout, cin, k, k, k]);
    let center = (k / 2) * k * k + (k / 2) * k + k / 2;
    for o in 0..cout.min(cin) {
        w.data_mut()[(o * cin + o) * k * k * k + center] = T::ONE;
    }
    w
}

/// Re-initializes the trunk so the whole `style_transfer` stack is the
/// identity map: in/out and skip convs become channel-preserving delta
/// kernels, every residual branch's final conv becomes zero. Modulation
/// heads are zero-initialized at registration already.
pub fn init_identity_style_transfer<T: Element>(
    store: &mut ParamStore<T>,
    spec: &SpadeSpec,
) -> Result<()> {
    let zero_conv = |store: &mut ParamStore<T>, name: &str, cout: usize, cin: usize| {
        store.set(&format!("{name}.w"), Array::zeros(vec![cout, cin, 3, 3, 3]))?;
        store.set(&format!("{name}.b"), Array::zeros(vec![cout]))
    };
    store.set("spade.in.w", delta_kernel(spec.c_in, spec.d_emb, 7))?;
    store.set("spade.in.b", Array::zeros(vec![spec.c_in]))?;
    store.set("spade.out.w", delta_kernel(spec.d_emb, spec.c_late, 7))?;
    store.set("spade.out.b", Array::zeros(vec![spec.d_emb]))?;
    zero_conv(store, "spade.res0.c2", spec.c_mid, spec.c_mid)?;
    zero_conv(store, "spade.res1.c2", spec.c_mid, spec.c_mid)?;
    if spec.c_in != spec.c_mid {
        store.set("spade.res0.sk.w", delta_kernel(spec.c_mid, spec.c_in, 1))?;
        store.set("spade.res0.sk.b", Array::zeros(vec![spec.c_mid]))?;
    }
    for i in 0..4 {
        let cout = if i == 3 { spec.c_late } else { spec.c_mid };
        zero_conv(store, &format!("spade.blk{i}.c2"), cout, cout)?;
        if cout != spec.c_mid {
            store.set(&format!("spade.blk{i}.sk.w"), delta_kernel(cout, spec.c_mid, 1))?;
            store.set(&format!("spade.blk{i}.sk.b"), Array::zeros(vec![cout]))?;
        }
    }
    Ok(())
}
