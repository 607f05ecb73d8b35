//! Neural-net composites built from graph primitives: linear maps, group
//! and instance normalization, scaled dot-product attention, and the loss
//! functions shared by the training stages. Also provides parameter-bound
//! wrappers that fetch weights from a `Session` by name.

use crate::error::{Result, VoxError};
use crate::params::{init_he, init_ones, init_zeros, Bank, ParamStore, Session};

use crate::tensor::element::Element;
use crate::tensor::graph::{Graph, TensorId};
use rand_chacha::ChaCha8Rng;

pub const EPS_NORM: f64 = 1e-5;

/// `x [M,K] · w [K,N] (+ b [1,N])`.
pub fn linear<T: Element>(
    g: &mut Graph<T>,
    x: TensorId,
    w: TensorId,
    b: Option<TensorId>,
) -> Result<TensorId> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_channel_map(y, b),
        None => Ok(y),
    }
}

/// Per-(n,c) normalization over all spatial axes; no affine.
pub fn instance_norm<T: Element>(g: &mut Graph<T>, x: TensorId, eps: f64) -> Result<TensorId> {
    let mu = g.spatial_mean(x)?;
    let centered = g.sub_channel_map(x, mu)?;
    let sigma = g.spatial_sigma(x, eps)?;
    let inv = g.recip(sigma);
    g.mul_channel_map(centered, inv)
}

/// Group normalization with per-channel affine. `gamma`/`beta` are `[1,C]`.
pub fn group_norm<T: Element>(
    g: &mut Graph<T>,
    x: TensorId,
    groups: usize,
    eps: f64,
    gamma: TensorId,
    beta: TensorId,
) -> Result<TensorId> {
    let s = g.shape(x).to_vec();
    if s.len() < 3 {
        return Err(VoxError::shape(format!(
            "group_norm: input must be [N,C,spatial...], got {s:?}"
        )));
    }
    let (n, c) = (s[0], s[1]);
    if groups == 0 || c % groups != 0 {
        return Err(VoxError::shape(format!(
            "group_norm: {c} channels not divisible by {groups} groups"
        )));
    }
    let sp: usize = s[2..].iter().product();
    let grouped = g.reshape(x, vec![n, groups, (c / groups) * sp])?;
    let normed = instance_norm(g, grouped, eps)?;
    let back = g.reshape(normed, s)?;
    let scaled = g.mul_channel_map(back, gamma)?;
    g.add_channel_map(scaled, beta)
}

/// Scaled dot-product attention. `q [N,S,C]`, `k`/`v` `[N,M,C]`.
/// Returns `(output [N,S,C], attention weights [N,S,M])`.
pub fn attention_core<T: Element>(
    g: &mut Graph<T>,
    q: TensorId,
    k: TensorId,
    v: TensorId,
) -> Result<(TensorId, TensorId)> {
    let qs = g.shape(q).to_vec();
    let ks = g.shape(k).to_vec();
    let vs = g.shape(v).to_vec();
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
        return Err(VoxError::shape(format!(
            "attention: q/k/v must be rank 3, got {qs:?} {ks:?} {vs:?}"
        )));
    }
    let d = qs[2];
    if d == 0 {
        return Err(VoxError::shape("attention: feature dimension is zero"));
    }
    if ks[2] != d || vs[2] != d || ks[1] != vs[1] || ks[0] != qs[0] || vs[0] != qs[0] {
        return Err(VoxError::shape(format!(
            "attention: incompatible shapes q {qs:?}, k {ks:?}, v {vs:?}"
        )));
    }
    let kt = g.permute(k, &[0, 2, 1])?;
    let scores = g.bmm(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.softmax_last(scaled)?;
    let out = g.bmm(weights, v)?;
    Ok((out, weights))
}

// ---- losses ----

/// `mean |a - b|`.
pub fn l1_mean<T: Element>(g: &mut Graph<T>, a: TensorId, b: TensorId) -> Result<TensorId> {
    let d = g.sub(a, b)?;
    let ad = g.abs(d);
    Ok(g.mean_all(ad))
}

/// `mean (a - b)^2`.
pub fn mse_mean<T: Element>(g: &mut Graph<T>, a: TensorId, b: TensorId) -> Result<TensorId> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean_all(sq))
}

/// Hinge discriminator loss: `mean relu(1 - real) + mean relu(1 + fake)`.
pub fn hinge_d_loss<T: Element>(
    g: &mut Graph<T>,
    real_logits: TensorId,
    fake_logits: TensorId,
) -> Result<TensorId> {
    let nr = g.scale(real_logits, -1.0);
    let nr1 = g.add_scalar(nr, 1.0);
    let rr = g.relu(nr1);
    let lr = g.mean_all(rr);
    let f1 = g.add_scalar(fake_logits, 1.0);
    let rf = g.relu(f1);
    let lf = g.mean_all(rf);
    g.add(lr, lf)
}

/// Hinge generator loss: `-mean fake`.
pub fn hinge_g_loss<T: Element>(g: &mut Graph<T>, fake_logits: TensorId) -> TensorId {
    let m = g.mean_all(fake_logits);
    g.scale(m, -1.0)
}

// ---- parameter registration helpers ----

pub fn add_conv<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
) -> Result<()> {
    let fan_in = cin * k * k * k;
    store.add(
        &format!("{prefix}.w"),
        init_he(rng, vec![cout, cin, k, k, k], fan_in),
    )?;
    store.add(&format!("{prefix}.b"), init_zeros(vec![cout]))?;
    Ok(())
}

/// Zero-initialized convolution (weights and bias all zero).
pub fn add_conv_zero<T: Element>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
) -> Result<()> {
    store.add(&format!("{prefix}.w"), init_zeros(vec![cout, cin, k, k, k]))?;
    store.add(&format!("{prefix}.b"), init_zeros(vec![cout]))?;
    Ok(())
}

pub fn add_linear<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    store.add(&format!("{prefix}.w"), init_he(rng, vec![fan_in, fan_out], fan_in))?;
    store.add(&format!("{prefix}.b"), init_zeros(vec![1, fan_out]))?;
    Ok(())
}

pub fn add_group_norm<T: Element>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<()> {
    store.add(&format!("{prefix}.g"), init_ones(vec![1, c]))?;
    store.add(&format!("{prefix}.b"), init_zeros(vec![1, c]))?;
    Ok(())
}

// ---- parameter-bound forward wrappers ----

pub fn conv_p<T: Element>(
    sess: &mut Session<T>,
    bank: Bank,
    prefix: &str,
    x: TensorId,
    stride: usize,
    pad: usize,
) -> Result<TensorId> {
    let w = sess.param(bank, &format!("{prefix}.w"))?;
    let b = sess.param(bank, &format!("{prefix}.b"))?;
    sess.g.conv3d(x, w, Some(b), stride, pad)
}

pub fn linear_p<T: Element>(
    sess: &mut Session<T>,
    bank: Bank,
    prefix: &str,
    x: TensorId,
) -> Result<TensorId> {
    let w = sess.param(bank, &format!("{prefix}.w"))?;
    let b = sess.param(bank, &format!("{prefix}.b"))?;
    linear(&mut sess.g, x, w, Some(b))
}

pub fn group_norm_p<T: Element>(
    sess: &mut Session<T>,
    bank: Bank,
    prefix: &str,
    x: TensorId,
    groups: usize,
    eps: f64,
) -> Result<TensorId> {
    let gamma = sess.param(bank, &format!("{prefix}.g"))?;
    let beta = sess.param(bank, &format!("{prefix}.b"))?;
    group_norm(&mut sess.g, x, groups, eps, gamma, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::array::Array;
    use crate::tensor::graph::Graph;
    use rand::{Rng, SeedableRng};

    fn rand_array(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Array<f64> {
        Array::from_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn linear_matches_hand_product() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Array::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), false);
        let w = g.leaf(Array::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let b = g.leaf(Array::new(vec![1, 2], vec![0.5, -0.5]).unwrap(), false);
        let y = linear(&mut g, x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[7.5, 9.5]);
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(rand_array(&mut rng, vec![2, 4, 3, 3, 3]), false);
        let gamma = g.leaf(Array::full(vec![1, 4], 1.0), false);
        let beta = g.leaf(Array::zeros(vec![1, 4]), false);
        let y = group_norm(&mut g, x, 2, EPS_NORM, gamma, beta).unwrap();
        let v = g.value(y);
        let sp = 27;
        let per_group = 2 * sp;
        for n in 0..2 {
            for grp in 0..2 {
                let base = n * 4 * sp + grp * per_group;
                let seg = &v.data()[base..base + per_group];
                let mean: f64 = seg.iter().sum::<f64>() / per_group as f64;
                let var: f64 =
                    seg.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / per_group as f64;
                assert!(mean.abs() < 1e-12);
                assert!((var.sqrt() - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn group_norm_rejects_bad_group_count() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Array::zeros(vec![1, 6, 2, 2, 2]), false);
        let gamma = g.leaf(Array::full(vec![1, 6], 1.0), false);
        let beta = g.leaf(Array::zeros(vec![1, 6]), false);
        assert!(group_norm(&mut g, x, 4, EPS_NORM, gamma, beta).is_err());
    }

    #[test]
    fn instance_norm_of_constant_input_is_zero() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Array::full(vec![1, 2, 2, 2, 2], 3.25), false);
        let y = instance_norm(&mut g, x, EPS_NORM).unwrap();
        for &v in g.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn attention_matches_brute_force_and_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, s, m, c) = (2, 3, 2, 4);
        let qa = rand_array(&mut rng, vec![n, s, c]);
        let ka = rand_array(&mut rng, vec![n, m, c]);
        let va = rand_array(&mut rng, vec![n, m, c]);
        let mut g: Graph<f64> = Graph::new();
        let q = g.leaf(qa.clone(), false);
        let k = g.leaf(ka.clone(), false);
        let v = g.leaf(va.clone(), false);
        let (out, w) = attention_core(&mut g, q, k, v).unwrap();

        for b in 0..n {
            for i in 0..s {
                let row = &g.value(w).data()[(b * s + i) * m..(b * s + i + 1) * m];
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                let mut scores = vec![0.0f64; m];
                for (j, sc) in scores.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for l in 0..c {
                        dot += qa.data()[(b * s + i) * c + l] * ka.data()[(b * m + j) * c + l];
                    }
                    *sc = dot / (c as f64).sqrt();
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let den: f64 = scores.iter().map(|&x| (x - mx).exp()).sum();
                for l in 0..c {
                    let mut acc = 0.0;
                    for (j, &sc) in scores.iter().enumerate() {
                        acc += (sc - mx).exp() / den * va.data()[(b * m + j) * c + l];
                    }
                    let got = g.value(out).data()[(b * s + i) * c + l];
                    assert!((acc - got).abs() < 1e-12, "attention mismatch: {acc} vs {got}");
                }
            }
        }
    }

    #[test]
    fn attention_rejects_zero_feature_dim() {
        let mut g: Graph<f64> = Graph::new();
        let q = g.leaf(Array::zeros(vec![1, 2, 0]), false);
        let k = g.leaf(Array::zeros(vec![1, 1, 0]), false);
        let v = g.leaf(Array::zeros(vec![1, 1, 0]), false);
        assert!(attention_core(&mut g, q, k, v).is_err());
    }

    #[test]
    fn hinge_losses_match_hand_values() {
        let mut g: Graph<f64> = Graph::new();
        let real = g.leaf(Array::new(vec![2], vec![0.5, 2.0]).unwrap(), false);
        let fake = g.leaf(Array::new(vec![2], vec![-2.0, 0.5]).unwrap(), false);
        let d = hinge_d_loss(&mut g, real, fake).unwrap();
        assert!((g.value(d).data()[0] - (0.25 + 0.75)).abs() < 1e-12);
        let gl = hinge_g_loss(&mut g, fake);
        assert!((g.value(gl).data()[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn l1_and_mse_match_hand_values() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Array::new(vec![2], vec![1.0, -1.0]).unwrap(), false);
        let b = g.leaf(Array::new(vec![2], vec![0.0, 1.0]).unwrap(), false);
        let l1 = l1_mean(&mut g, a, b).unwrap();
        let l2 = mse_mean(&mut g, a, b).unwrap();
        assert!((g.value(l1).data()[0] - 1.5).abs() < 1e-12);
        assert!((g.value(l2).data()[0] - 2.5).abs() < 1e-12);
    }
}
