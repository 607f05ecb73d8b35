//! Stage-1 compression model: convolutional encoder/decoder with a
//! factor-4 spatial reduction, vector quantization with EMA codebook
//! updates and straight-through gradients, an optional KL head, and a
//! small 3D patch discriminator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VoxError};
use crate::nn::{self, conv_p, group_norm_p, EPS_NORM};
use crate::params::{init_normal, init_zeros, Bank, ParamStore, Session};
use crate::tensor::array::Array;
use crate::tensor::element::Element;
use crate::tensor::graph::TensorId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regularizer {
    Vq,
    Kl,
}

#[derive(Clone, Debug)]
pub struct AeSpec {
    /// Channel ladder `[c0, c1, c2]`: full, half, quarter resolution.
    pub ladder: [usize; 3],
    pub d_emb: usize,
    pub codebook_size: usize,
    pub beta_commit: f64,
    pub groups: usize,
    pub reg: Regularizer,
}

impl AeSpec {
    pub fn desk() -> Self {
        AeSpec {
            ladder: [8, 16, 16],
            d_emb: 3,
            codebook_size: 512,
            beta_commit: 0.25,
            groups: 8,
            reg: Regularizer::Vq,
        }
    }

    /// Encoder head channels: `d_emb`, or mean+logvar pairs in KL mode.
    pub fn enc_out_channels(&self) -> usize {
        match self.reg {
            Regularizer::Vq => self.d_emb,
            Regularizer::Kl => 2 * self.d_emb,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 {
            return Err(VoxError::config("d_emb must be >= 1"));
        }
        if self.codebook_size < 2 {
            return Err(VoxError::config("codebook needs at least 2 entries"));
        }
        for c in self.ladder {
            if c == 0 || c % self.groups != 0 {
                return Err(VoxError::config(format!(
                    "channel ladder {:?} must be divisible by {} norm groups",
                    self.ladder, self.groups
                )));
            }
        }
        Ok(())
    }
}

// ---- parameter registration ----

pub fn register_res_block<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cin: usize,
    cout: usize,
) -> Result<()> {
    nn::add_group_norm(store, &format!("{prefix}.n1"), cin)?;
    nn::add_conv(store, rng, &format!("{prefix}.c1"), cin, cout, 3)?;
    nn::add_group_norm(store, &format!("{prefix}.n2"), cout)?;
    nn::add_conv(store, rng, &format!("{prefix}.c2"), cout, cout, 3)?;
    if cin != cout {
        nn::add_conv(store, rng, &format!("{prefix}.sk"), cin, cout, 1)?;
    }
    Ok(())
}

pub fn register_autoencoder<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    spec: &AeSpec,
) -> Result<()> {
    spec.validate()?;
    let [c0, c1, c2] = spec.ladder;
    nn::add_conv(store, rng, "enc.in", 1, c0, 3)?;
    register_res_block(store, rng, "enc.res0", c0, c0)?;
    nn::add_conv(store, rng, "enc.down0", c0, c1, 4)?;
    register_res_block(store, rng, "enc.res1", c1, c1)?;
    nn::add_conv(store, rng, "enc.down1", c1, c2, 4)?;
    register_res_block(store, rng, "enc.res2", c2, c2)?;
    nn::add_group_norm(store, "enc.out_n", c2)?;
    nn::add_conv(store, rng, "enc.out", c2, spec.enc_out_channels(), 3)?;

    nn::add_conv(store, rng, "dec.in", spec.d_emb, c2, 3)?;
    register_res_block(store, rng, "dec.res2", c2, c2)?;
    nn::add_conv(store, rng, "dec.up1", c2, c1, 3)?;
    register_res_block(store, rng, "dec.res1", c1, c1)?;
    nn::add_conv(store, rng, "dec.up0", c1, c0, 3)?;
    register_res_block(store, rng, "dec.res0", c0, c0)?;
    nn::add_group_norm(store, "dec.out_n", c0)?;
    nn::add_conv(store, rng, "dec.out", c0, 1, 3)?;

    if spec.reg == Regularizer::Vq {
        let k = spec.codebook_size;
        let cb: Array<T> = init_normal(rng, vec![k, spec.d_emb], 0.5);
        store.add("quant.ema_sum", cb.clone())?;
        store.add("quant.codebook", cb)?;
        store.add("quant.ema_count", Array::full(vec![k], T::ONE))?;
        store.add("quant.unused", init_zeros(vec![k]))?;
    }
    Ok(())
}

pub fn register_discriminator<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    spec: &AeSpec,
) -> Result<()> {
    let [c0, c1, _] = spec.ladder;
    nn::add_conv(store, rng, "disc.c0", 1, c0, 4)?;
    nn::add_conv(store, rng, "disc.c1", c0, c1, 4)?;
    nn::add_conv(store, rng, "disc.c2", c1, 1, 3)?;
    Ok(())
}

// ---- forward passes ----

/// GroupNorm → ReLU → conv, twice, plus skip (1x1-projected on channel change).
pub fn res_block<T: Element>(
    sess: &mut Session<T>,
    bank: Bank,
    prefix: &str,
    x: TensorId,
    groups: usize,
) -> Result<TensorId> {
    let cin = sess.g.shape(x)[1];
    let h = group_norm_p(sess, bank, &format!("{prefix}.n1"), x, groups, EPS_NORM)?;
    let h = sess.g.relu(h);
    let h = conv_p(sess, bank, &format!("{prefix}.c1"), h, 1, 1)?;
    let cout = sess.g.shape(h)[1];
    let h = group_norm_p(sess, bank, &format!("{prefix}.n2"), h, groups, EPS_NORM)?;
    let h = sess.g.relu(h);
    let h = conv_p(sess, bank, &format!("{prefix}.c2"), h, 1, 1)?;
    let skip = if cin != cout {
        conv_p(sess, bank, &format!("{prefix}.sk"), x, 1, 0)?
    } else {
        x
    };
    sess.g.add(skip, h)
}

fn check_encode_input<T: Element>(sess: &Session<T>, x: TensorId) -> Result<()> {
    let s = sess.g.shape(x);
    if s.len() != 5 || s[1] != 1 {
        return Err(VoxError::shape(format!(
            "encode: input must be [N,1,D,H,W], got {s:?}"
        )));
    }
    for (axis, &e) in ["depth", "height", "width"].iter().zip(&s[2..]) {
        if e % 4 != 0 {
            let need = 4 - e % 4;
            return Err(VoxError::shape(format!(
                "encode: {axis} extent {e} not divisible by 4; pad with {need} more voxels"
            )));
        }
    }
    let v = sess.g.value(x);
    for &t in v.data() {
        let f = t.to_f64();
        if !(0.0..=1.0).contains(&f) {
            return Err(VoxError::data(format!(
                "encode: intensities must lie in [0,1], found {f}"
            )));
        }
    }
    Ok(())
}

/// Encoder returning the latent plus per-scale activations (used as the
/// feature set for the perceptual loss against a frozen copy).
pub fn encode_features<T: Element>(
    sess: &mut Session<T>,
    bank: Bank,
    spec: &AeSpec,
    x: TensorId,
) -> Result<(TensorId, Vec<TensorId>)> {
    check_encode_input(sess, x)?;
    let groups = spec.groups;
    let h = conv_p(sess, bank, "enc.in", x, 1, 1)?;
    let f0 = res_block(sess, bank, "enc.res0", h, groups)?;
    let h = conv_p(sess, bank, "enc.down0", f0, 2, 1)?;
    let f1 = res_block(sess, bank, "enc.res1", h, groups)?;
    let h = conv_p(sess, bank, "enc.down1", f1, 2, 1)?;
    let f2 = res_block(sess, bank, "enc.res2", h, groups)?;
    let h = group_norm_p(sess, bank, "enc.out_n", f2, groups, EPS_NORM)?;
    let h = sess.g.relu(h);
    let z = conv_p(sess, bank, "enc.out", h, 1, 1)?;
    Ok((z, vec![f0, f1, f2]))
}

pub fn encode<T: Element>(
    sess: &mut Session<T>,
    bank: Bank,
    spec: &AeSpec,
    x: TensorId,
) -> Result<TensorId> {
    Ok(encode_features(sess, bank, spec, x)?.0)
}

pub fn decode<T: Element>(
    sess: &mut Session<T>,
    bank: Bank,
    spec: &AeSpec,
    z: TensorId,
) -> Result<TensorId> {
    let s = sess.g.shape(z);
    if s.len() != 5 || s[1] != spec.d_emb {
        return Err(VoxError::shape(format!(
            "decode: latent must be [N,{},d,h,w], got {s:?}",
            spec.d_emb
        )));
    }
    let groups = spec.groups;
    let h = conv_p(sess, bank, "dec.in", z, 1, 1)?;
    let h = res_block(sess, bank, "dec.res2", h, groups)?;
    let h = sess.g.upsample2(h)?;
    let h = conv_p(sess, bank, "dec.up1", h, 1, 1)?;
    let h = res_block(sess, bank, "dec.res1", h, groups)?;
    let h = sess.g.upsample2(h)?;
    let h = conv_p(sess, bank, "dec.up0", h, 1, 1)?;
    let h = res_block(sess, bank, "dec.res0", h, groups)?;
    let h = group_norm_p(sess, bank, "dec.out_n", h, groups, EPS_NORM)?;
    let h = sess.g.relu(h);
    let h = conv_p(sess, bank, "dec.out", h, 1, 1)?;
    Ok(sess.g.sigmoid(h))
}

/// 3-stage patch discriminator; returns a logit map.
pub fn discriminate<T: Element>(
    sess: &mut Session<T>,
    bank: Bank,
    x: TensorId,
) -> Result<TensorId> {
    let h = conv_p(sess, bank, "disc.c0", x, 2, 1)?;
    let h = sess.g.relu(h);
    let h = conv_p(sess, bank, "disc.c1", h, 2, 1)?;
    let h = nn::instance_norm(&mut sess.g, h, EPS_NORM)?;
    let h = sess.g.relu(h);
    conv_p(sess, bank, "disc.c2", h, 1, 1)
}

// ---- vector quantization ----

pub struct QuantOut<T: Element> {
    /// Latent with every voxel vector replaced by its nearest codebook row.
    pub z_q: Array<T>,
    /// Winning codebook row per voxel, voxel-major.
    pub indices: Vec<u32>,
    /// Voxels assigned to each codebook entry; sums to the voxel count.
    pub counts: Vec<u64>,
    /// Per-entry sum of assigned voxel vectors (for EMA updates), `K * d`.
    pub sums: Vec<f64>,
    /// Mean squared quantization distance, `mean((z - e)^2)` over elements.
    pub dist_mse: f64,
}

/// Nearest-neighbor quantization by L2 distance; ties break to the lowest
/// codebook index.
pub fn quantize_nearest<T: Element>(z: &Array<T>, codebook: &Array<T>) -> Result<QuantOut<T>> {
    let zs = z.shape();
    let cs = codebook.shape();
    if cs.len() != 2 || cs[0] == 0 {
        return Err(VoxError::shape(format!(
            "quantize: codebook must be non-empty [K,d], got {cs:?}"
        )));
    }
    let (k, d) = (cs[0], cs[1]);
    if zs.len() != 5 || zs[1] != d {
        return Err(VoxError::shape(format!(
            "quantize: latent must be [N,{d},d,h,w], got {zs:?}"
        )));
    }
    if !codebook.all_finite() {
        return Err(VoxError::Numeric("codebook contains non-finite entries".into()));
    }
    let n = zs[0];
    let sp: usize = zs[2..].iter().product();
    let mut z_q = Array::zeros(zs.to_vec());
    let mut indices = Vec::with_capacity(n * sp);
    let mut counts = vec![0u64; k];
    let mut sums = vec![0.0f64; k * d];
    let mut dist_acc = 0.0f64;
    let cb = codebook.data();
    let mut voxel = vec![0.0f64; d];
    for b in 0..n {
        let base = b * d * sp;
        for s in 0..sp {
            for (c, vc) in voxel.iter_mut().enumerate() {
                *vc = z.data()[base + c * sp + s].to_f64();
            }
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for e in 0..k {
                let mut dist = 0.0f64;
                for (c, &vc) in voxel.iter().enumerate() {
                    let diff = vc - cb[e * d + c].to_f64();
                    dist += diff * diff;
                }
                if dist < best_d {
                    best_d = dist;
                    best = e;
                }
            }
            indices.push(best as u32);
            counts[best] += 1;
            dist_acc += best_d;
            for (c, &vc) in voxel.iter().enumerate() {
                sums[best * d + c] += vc;
                z_q.data_mut()[base + c * sp + s] = cb[best * d + c];
            }
        }
    }
    let dist_mse = dist_acc / (n * sp * d) as f64;
    Ok(QuantOut {
        z_q,
        indices,
        counts,
        sums,
        dist_mse,
    })
}

/// EMA codebook update with dead-entry reseeding. `z` supplies reseed
/// candidates (random voxels of the current batch).
pub fn codebook_ema_update<T: Element>(
    store: &mut ParamStore<T>,
    q: &QuantOut<T>,
    z: &Array<T>,
    rng: &mut ChaCha8Rng,
    decay: f64,
    reseed_after: u64,
) -> Result<()> {
    let k = q.counts.len();
    let cs = store.get("quant.codebook")?.shape().to_vec();
    let d = cs[1];
    let zs = z.shape().to_vec();
    let n = zs[0];
    let sp: usize = zs[2..].iter().product();

    let mut reseed: Vec<(usize, Vec<f64>)> = Vec::new();
    {
        let uix = store.index_of("quant.unused").unwrap();
        let unused = store.value_mut(uix);
        for e in 0..k {
            let u = &mut unused.data_mut()[e];
            if q.counts[e] == 0 {
                *u = *u + T::ONE;
                if u.to_f64() >= reseed_after as f64 {
                    let b = rng.random_range(0..n);
                    let s = rng.random_range(0..sp);
                    let mut v = vec![0.0f64; d];
                    for (c, vc) in v.iter_mut().enumerate() {
                        *vc = z.data()[b * d * sp + c * sp + s].to_f64();
                    }
                    reseed.push((e, v));
                    *u = T::ZERO;
                }
            } else {
                *u = T::ZERO;
            }
        }
    }

    let count_ix = store.index_of("quant.ema_count").unwrap();
    let sum_ix = store.index_of("quant.ema_sum").unwrap();
    let cb_ix = store.index_of("quant.codebook").unwrap();
    for e in 0..k {
        let nc = decay * store.value(count_ix).data()[e].to_f64()
            + (1.0 - decay) * q.counts[e] as f64;
        store.value_mut(count_ix).data_mut()[e] = T::from_f64(nc);
        for c in 0..d {
            let ns = decay * store.value(sum_ix).data()[e * d + c].to_f64()
                + (1.0 - decay) * q.sums[e * d + c];
            store.value_mut(sum_ix).data_mut()[e * d + c] = T::from_f64(ns);
            store.value_mut(cb_ix).data_mut()[e * d + c] = T::from_f64(ns / nc.max(1e-8));
        }
    }

    for (e, v) in reseed {
        for c in 0..d {
            store.value_mut(cb_ix).data_mut()[e * d + c] = T::from_f64(v[c]);
            store.value_mut(sum_ix).data_mut()[e * d + c] = T::from_f64(v[c]);
        }
        store.value_mut(count_ix).data_mut()[e] = T::ONE;
    }
    Ok(())
}

// ---- KL head ----

/// Splits encoder output into (mean, logvar), draws `z = mean +
/// exp(logvar/2) * eps`, and returns the per-element mean KL divergence
/// from the unit normal.
pub fn kl_sample<T: Element>(
    sess: &mut Session<T>,
    z_params: TensorId,
    eps: &Array<T>,
) -> Result<(TensorId, TensorId)> {
    let s = sess.g.shape(z_params).to_vec();
    if s.len() != 5 || s[1] % 2 != 0 {
        return Err(VoxError::shape(format!(
            "kl_sample: expected [N,2*d,d,h,w], got {s:?}"
        )));
    }
    let d = s[1] / 2;
    let mean = sess.g.slice_channels(z_params, 0, d)?;
    let logvar = sess.g.slice_channels(z_params, d, d)?;
    if eps.shape() != sess.g.shape(mean) {
        return Err(VoxError::shape(format!(
            "kl_sample: eps shape {:?} does not match latent {:?}",
            eps.shape(),
            sess.g.shape(mean)
        )));
    }
    let half_lv = sess.g.scale(logvar, 0.5);
    let std = sess.g.exp(half_lv);
    let eps_id = sess.g.constant(eps.clone());
    let noise = sess.g.mul(std, eps_id)?;
    let z = sess.g.add(mean, noise)?;

    let mean_sq = sess.g.mul(mean, mean)?;
    let var = sess.g.exp(logvar);
    let t = sess.g.add_scalar(logvar, 1.0);
    let t = sess.g.sub(t, mean_sq)?;
    let t = sess.g.sub(t, var)?;
    let m = sess.g.mean_all(t);
    let l_kl = sess.g.scale(m, -0.5);
    Ok((z, l_kl))
}

/// Deterministic KL-mode latent for inference: the predicted mean.
pub fn kl_mean<T: Element>(sess: &mut Session<T>, z_params: TensorId) -> Result<TensorId> {
    let s = sess.g.shape(z_params).to_vec();
    if s.len() != 5 || s[1] % 2 != 0 {
        return Err(VoxError::shape(format!(
            "kl_mean: expected [N,2*d,d,h,w], got {s:?}"
        )));
    }
    sess.g.slice_channels(z_params, 0, s[1] / 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn micro_spec() -> AeSpec {
        AeSpec {
            ladder: [2, 2, 2],
            d_emb: 2,
            codebook_size: 8,
            beta_commit: 0.25,
            groups: 2,
            reg: Regularizer::Vq,
        }
    }

    fn rand_volume(rng: &mut ChaCha8Rng, n: usize, e: usize) -> Array<f64> {
        Array::from_fn(vec![n, 1, e, e, e], |_| rng.random::<f64>())
    }

    #[test]
    fn encode_decode_shapes_are_factor_four_inverses() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = micro_spec();
        let mut store: ParamStore<f64> = ParamStore::new();
        register_autoencoder(&mut store, &mut rng, &spec).unwrap();
        for e in [4usize, 8, 12] {
            let x = rand_volume(&mut rng, 1, e);
            let mut sess = Session::new(&store, false);
            let xid = sess.g.leaf(x, false);
            let z = encode(&mut sess, Bank::MAIN, &spec, xid).unwrap();
            assert_eq!(sess.g.shape(z), &[1, 2, e / 4, e / 4, e / 4]);
            let y = decode(&mut sess, Bank::MAIN, &spec, z).unwrap();
            assert_eq!(sess.g.shape(y), &[1, 1, e, e, e]);
            for &v in sess.g.value(y).data() {
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn encode_rejects_non_divisible_extent_with_padding_hint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = micro_spec();
        let mut store: ParamStore<f64> = ParamStore::new();
        register_autoencoder(&mut store, &mut rng, &spec).unwrap();
        let mut sess = Session::new(&store, false);
        let xid = sess.g.leaf(Array::zeros(vec![1, 1, 6, 8, 8]), false);
        let err = encode(&mut sess, Bank::MAIN, &spec, xid).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("pad") && msg.contains("2"), "got: {msg}");
    }

    #[test]
    fn encode_rejects_out_of_range_intensities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = micro_spec();
        let mut store: ParamStore<f64> = ParamStore::new();
        register_autoencoder(&mut store, &mut rng, &spec).unwrap();
        let mut sess = Session::new(&store, false);
        let xid = sess.g.leaf(Array::full(vec![1, 1, 4, 4, 4], 1.5), false);
        assert!(encode(&mut sess, Bank::MAIN, &spec, xid).is_err());
    }

    #[test]
    fn quantize_nearest_picks_by_inspection_and_breaks_ties_low() {
        let cb: Array<f64> =
            Array::new(vec![2, 3], vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let z: Array<f64> =
            Array::new(vec![1, 3, 1, 1, 1], vec![0.9, 0.8, 0.9]).unwrap();
        let q = quantize_nearest(&z, &cb).unwrap();
        assert_eq!(q.indices, vec![1]);
        assert_eq!(q.z_q.data(), &[1.0, 1.0, 1.0]);

        let mid: Array<f64> = Array::new(vec![1, 3, 1, 1, 1], vec![0.5, 0.5, 0.5]).unwrap();
        let q = quantize_nearest(&mid, &cb).unwrap();
        assert_eq!(q.indices, vec![0], "equidistant voxel must take the lower index");
    }

    #[test]
    fn quantize_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let k = 16;
            let d = 3;
            let cb: Array<f64> =
                Array::from_fn(vec![k, d], |_| rng.random::<f64>() * 2.0 - 1.0);
            let z: Array<f64> =
                Array::from_fn(vec![2, d, 2, 2, 2], |_| rng.random::<f64>() * 2.0 - 1.0);
            let q = quantize_nearest(&z, &cb).unwrap();
            let sp = 8;
            for b in 0..2 {
                for s in 0..sp {
                    let mut best = 0;
                    let mut best_d = f64::INFINITY;
                    for e in 0..k {
                        let mut dist = 0.0;
                        for c in 0..d {
                            let diff = z.data()[b * d * sp + c * sp + s] - cb.data()[e * d + c];
                            dist += diff * diff;
                        }
                        if dist < best_d {
                            best_d = dist;
                            best = e;
                        }
                    }
                    assert_eq!(q.indices[b * sp + s], best as u32);
                }
            }
            let total: u64 = q.counts.iter().sum();
            assert_eq!(total, 16);
        }
    }

    #[test]
    fn quantized_voxels_are_exact_codebook_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cb: Array<f64> = Array::from_fn(vec![8, 2], |_| rng.random::<f64>());
        let z: Array<f64> = Array::from_fn(vec![1, 2, 2, 2, 2], |_| rng.random::<f64>());
        let q = quantize_nearest(&z, &cb).unwrap();
        let sp = 8;
        for (s, &ix) in q.indices.iter().enumerate() {
            for c in 0..2 {
                let got = q.z_q.data()[c * sp + s];
                let want = cb.data()[ix as usize * 2 + c];
                assert!(got == want, "quantized value must be bitwise a codebook row");
            }
        }
    }

    #[test]
    fn ema_update_moves_entries_toward_assigned_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = AeSpec {
            codebook_size: 2,
            d_emb: 1,
            ..micro_spec()
        };
        let mut store: ParamStore<f64> = ParamStore::new();
        register_autoencoder(&mut store, &mut rng, &spec).unwrap();
        store
            .set("quant.codebook", Array::new(vec![2, 1], vec![0.0, 1.0]).unwrap())
            .unwrap();
        store
            .set("quant.ema_sum", Array::new(vec![2, 1], vec![0.0, 1.0]).unwrap())
            .unwrap();
        let z: Array<f64> = Array::full(vec![1, 1, 2, 2, 2], 0.2);
        let q = quantize_nearest(&z, store.get("quant.codebook").unwrap()).unwrap();
        assert_eq!(q.counts, vec![8, 0]);
        codebook_ema_update(&mut store, &q, &z, &mut rng, 0.5, 500).unwrap();
        let e0 = store.get("quant.codebook").unwrap().data()[0];
        let expect = (0.5 * 0.0 + 0.5 * (8.0 * 0.2)) / (0.5 * 1.0 + 0.5 * 8.0);
        assert!((e0 - expect).abs() < 1e-12);
        assert_eq!(store.get("quant.unused").unwrap().data()[1], 1.0);
    }

    #[test]
    fn dead_entries_reseed_from_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let spec = AeSpec {
            codebook_size: 2,
            d_emb: 1,
            ..micro_spec()
        };
        let mut store: ParamStore<f64> = ParamStore::new();
        register_autoencoder(&mut store, &mut rng, &spec).unwrap();
        store
            .set("quant.codebook", Array::new(vec![2, 1], vec![0.0, 50.0]).unwrap())
            .unwrap();
        let z: Array<f64> = Array::full(vec![1, 1, 2, 2, 2], 0.3);
        for _ in 0..3 {
            let q = quantize_nearest(&z, store.get("quant.codebook").unwrap()).unwrap();
            codebook_ema_update(&mut store, &q, &z, &mut rng, 0.99, 3).unwrap();
        }
        let e1 = store.get("quant.codebook").unwrap().data()[1];
        assert!((e1 - 0.3).abs() < 1e-12, "dead entry should reseed to a batch voxel, got {e1}");
    }

    #[test]
    fn straight_through_latent_gradient_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cb: Array<f64> = Array::from_fn(vec![4, 2], |_| rng.random::<f64>());
        let za: Array<f64> = Array::from_fn(vec![1, 2, 2, 2, 2], |_| rng.random::<f64>());
        let q = quantize_nearest(&za, &cb).unwrap();
        let mut g: crate::Graph<f64> = crate::Graph::new();
        let z = g.leaf(za, true);
        let zq = g.straight_through(z, q.z_q).unwrap();
        let s = g.sum_all(zq);
        g.backward(s).unwrap();
        for &v in g.grad(z).unwrap().data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn kl_loss_closed_forms() {
        let spec = AeSpec {
            reg: Regularizer::Kl,
            ..micro_spec()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut store: ParamStore<f64> = ParamStore::new();
        register_autoencoder(&mut store, &mut rng, &spec).unwrap();
        let mut sess = Session::new(&store, false);
        let zp = sess.g.leaf(Array::zeros(vec![1, 4, 2, 2, 2]), false);
        let eps: Array<f64> = Array::zeros(vec![1, 2, 2, 2, 2]);
        let (z, l) = kl_sample(&mut sess, zp, &eps).unwrap();
        assert_eq!(sess.g.value(l).data()[0], 0.0);
        assert_eq!(sess.g.shape(z), &[1, 2, 2, 2, 2]);

        let mut ones = Array::zeros(vec![1, 4, 2, 2, 2]);
        for c in 0..2 {
            for s in 0..8 {
                ones.data_mut()[c * 8 + s] = 1.0;
            }
        }
        let mut sess2 = Session::new(&store, false);
        let zp = sess2.g.leaf(ones, false);
        let (_, l) = kl_sample(&mut sess2, zp, &eps).unwrap();
        assert!((sess2.g.value(l).data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_sampling_uses_mean_plus_scaled_noise() {
        let spec = AeSpec {
            reg: Regularizer::Kl,
            ..micro_spec()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut store: ParamStore<f64> = ParamStore::new();
        register_autoencoder(&mut store, &mut rng, &spec).unwrap();
        let mut zp_arr = Array::zeros(vec![1, 4, 1, 1, 1]);
        zp_arr.data_mut()[0] = 0.7;
        zp_arr.data_mut()[1] = -0.2;
        zp_arr.data_mut()[2] = 2.0_f64.ln();
        zp_arr.data_mut()[3] = 0.0;
        let mut sess = Session::new(&store, false);
        let zp = sess.g.leaf(zp_arr, false);
        let eps: Array<f64> = Array::new(vec![1, 2, 1, 1, 1], vec![1.0, -1.0]).unwrap();
        let (z, _) = kl_sample(&mut sess, zp, &eps).unwrap();
        let v = sess.g.value(z).data();
        assert!((v[0] - (0.7 + 2.0_f64.sqrt())).abs() < 1e-12);
        assert!((v[1] - (-0.2 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn discriminator_produces_patch_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let spec = micro_spec();
        let mut store: ParamStore<f64> = ParamStore::new();
        register_discriminator(&mut store, &mut rng, &spec).unwrap();
        let mut sess = Session::new(&store, false);
        let x = sess.g.leaf(rand_volume(&mut rng, 1, 8), false);
        let d = discriminate(&mut sess, Bank::MAIN, x).unwrap();
        assert_eq!(sess.g.shape(d), &[1, 1, 2, 2, 2]);
    }
}
