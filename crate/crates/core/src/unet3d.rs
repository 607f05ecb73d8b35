//! Time-conditioned 3D UNet noise predictor. Three resolution levels with
//! skip connections; sinusoidal time embedding injected additively into
//! every residual block; single-token modality cross-attention at the two
//! coarsest levels.

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VoxError};
use crate::modality::ModalityRegistry;
use crate::nn::{self, attention_core, conv_p, group_norm_p, linear_p, EPS_NORM};
use crate::params::{init_he, Bank, ParamStore, Session};
use crate::tensor::array::Array;
use crate::tensor::element::Element;
use crate::tensor::graph::TensorId;

#[derive(Clone, Debug)]
pub struct UNetSpec {
    pub d_emb: usize,
    /// Channels per resolution level, finest first.
    pub ladder: [usize; 3],
    /// Time-embedding width multiplier over `ladder[0]`.
    pub time_mult: usize,
    /// Concatenate the restyled conditioning latent to the noisy latent.
    pub use_palette: bool,
    /// Enable modality cross-attention sites.
    pub use_conditioning: bool,
    /// Registered modality count (one-hot length).
    pub modalities: usize,
    pub groups: usize,
}

impl UNetSpec {
    pub fn desk(modalities: usize) -> Self {
        UNetSpec {
            d_emb: 3,
            ladder: [16, 32, 48],
            time_mult: 4,
            use_palette: true,
            use_conditioning: true,
            modalities,
            groups: 8,
        }
    }

    pub fn in_channels(&self) -> usize {
        if self.use_palette {
            2 * self.d_emb
        } else {
            self.d_emb
        }
    }

    pub fn time_dim(&self) -> usize {
        self.time_mult * self.ladder[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 || self.modalities == 0 || self.time_mult == 0 {
            return Err(VoxError::config("unet: zero-sized dimension in spec"));
        }
        if self.ladder[0] % 2 != 0 {
            return Err(VoxError::config("unet: base channel count must be even"));
        }
        for (i, c) in self.ladder.iter().enumerate() {
            let doubled = if i == 2 { *c } else { 2 * c };
            if c % self.groups != 0 || doubled % self.groups != 0 {
                return Err(VoxError::config(format!(
                    "unet: ladder {:?} must be divisible by {} norm groups (including skip concats)",
                    self.ladder, self.groups
                )));
            }
        }
        Ok(())
    }
}

/// Sinusoidal position encoding of a diffusion step, `[1, width]`.
pub fn sinusoid_embedding<T: Element>(t: usize, width: usize) -> Result<Array<T>> {
    if width < 2 || width % 2 != 0 {
        return Err(VoxError::config(format!(
            "sinusoid width must be even and >= 2, got {width}"
        )));
    }
    let half = width / 2;
    let mut v = vec![T::ZERO; width];
    for i in 0..half {
        let omega = (10000.0f64).powf(-(i as f64) / half as f64);
        let arg = t as f64 * omega;
        v[i] = T::from_f64(arg.sin());
        v[half + i] = T::from_f64(arg.cos());
    }
    Array::new(vec![1, width], v)
}

// ---- registration ----

fn register_time_res<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cin: usize,
    cout: usize,
    t_dim: usize,
) -> Result<()> {
    nn::add_group_norm(store, &format!("{prefix}.n1"), cin)?;
    nn::add_conv(store, rng, &format!("{prefix}.c1"), cin, cout, 3)?;
    nn::add_linear(store, rng, &format!("{prefix}.tp"), t_dim, cout)?;
    nn::add_group_norm(store, &format!("{prefix}.n2"), cout)?;
    nn::add_conv(store, rng, &format!("{prefix}.c2"), cout, cout, 3)?;
    if cin != cout {
        nn::add_conv(store, rng, &format!("{prefix}.sk"), cin, cout, 1)?;
    }
    Ok(())
}

fn register_attention<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c: usize,
    m: usize,
) -> Result<()> {
    store.add(&format!("{prefix}.wq"), init_he(rng, vec![c, c], c))?;
    store.add(&format!("{prefix}.wk"), init_he(rng, vec![m, c], m))?;
    store.add(&format!("{prefix}.wv"), init_he(rng, vec![m, c], m))?;
    Ok(())
}

pub fn register_unet<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    spec: &UNetSpec,
) -> Result<()> {
    spec.validate()?;
    let [l0, l1, l2] = spec.ladder;
    let td = spec.time_dim();
    let m = spec.modalities;
    nn::add_linear(store, rng, "unet.t1", l0, td)?;
    nn::add_linear(store, rng, "unet.t2", td, td)?;
    nn::add_conv(store, rng, "unet.in", spec.in_channels(), l0, 3)?;
    register_time_res(store, rng, "unet.enc0", l0, l0, td)?;
    nn::add_conv(store, rng, "unet.down0", l0, l1, 4)?;
    register_time_res(store, rng, "unet.enc1", l1, l1, td)?;
    nn::add_conv(store, rng, "unet.down1", l1, l2, 4)?;
    register_time_res(store, rng, "unet.mid1", l2, l2, td)?;
    register_time_res(store, rng, "unet.mid2", l2, l2, td)?;
    nn::add_conv(store, rng, "unet.up1", l2, l1, 3)?;
    register_time_res(store, rng, "unet.dec1", 2 * l1, l1, td)?;
    nn::add_conv(store, rng, "unet.up0", l1, l0, 3)?;
    register_time_res(store, rng, "unet.dec0", 2 * l0, l0, td)?;
    if spec.use_conditioning {
        register_attention(store, rng, "unet.att_enc1", l1, m)?;
        register_attention(store, rng, "unet.att_mid", l2, m)?;
        register_attention(store, rng, "unet.att_dec1", l1, m)?;
    }
    nn::add_group_norm(store, "unet.out_n", l0)?;
    nn::add_conv_zero(store, "unet.out", l0, spec.d_emb, 3)?;
    Ok(())
}

// ---- forward ----

fn time_res_block<T: Element>(
    sess: &mut Session<T>,
    bank: Bank,
    prefix: &str,
    x: TensorId,
    temb: TensorId,
    groups: usize,
) -> Result<TensorId> {
    let cin = sess.g.shape(x)[1];
    let h = group_norm_p(sess, bank, &format!("{prefix}.n1"), x, groups, EPS_NORM)?;
    let h = sess.g.silu(h);
    let h = conv_p(sess, bank, &format!("{prefix}.c1"), h, 1, 1)?;
    let cout = sess.g.shape(h)[1];
    let ts = sess.g.silu(temb);
    let tproj = linear_p(sess, bank, &format!("{prefix}.tp"), ts)?;
    let h = sess.g.add_channel_map(h, tproj)?;
    let h = group_norm_p(sess, bank, &format!("{prefix}.n2"), h, groups, EPS_NORM)?;
    let h = sess.g.silu(h);
    let h = conv_p(sess, bank, &format!("{prefix}.c2"), h, 1, 1)?;
    let skip = if cin != cout {
        conv_p(sess, bank, &format!("{prefix}.sk"), x, 1, 0)?
    } else {
        x
    };
    sess.g.add(skip, h)
}

/// Single-token modality cross-attention with a residual connection.
/// Queries come from the feature map; the key and value are projections
/// of the one-hot modality vector.
fn attention_site<T: Element>(
    sess: &mut Session<T>,
    bank: Bank,
    prefix: &str,
    x: TensorId,
    y: TensorId,
) -> Result<TensorId> {
    let s = sess.g.shape(x).to_vec();
    let (n, c) = (s[0], s[1]);
    if n != 1 {
        return Err(VoxError::shape(
            "attention sites support batch size 1 (one conditioning vector per pass)",
        ));
    }
    let sp: usize = s[2..].iter().product();
    let wq = sess.param(bank, &format!("{prefix}.wq"))?;
    let wk = sess.param(bank, &format!("{prefix}.wk"))?;
    let wv = sess.param(bank, &format!("{prefix}.wv"))?;
    let flat = sess.g.reshape(x, vec![n, c, sp])?;
    let tokens = sess.g.permute(flat, &[0, 2, 1])?;
    let tok2 = sess.g.reshape(tokens, vec![n * sp, c])?;
    let q2 = sess.g.matmul(tok2, wq)?;
    let q = sess.g.reshape(q2, vec![n, sp, c])?;
    let k2 = sess.g.matmul(y, wk)?;
    let k = sess.g.reshape(k2, vec![n, 1, c])?;
    let v2 = sess.g.matmul(y, wv)?;
    let v = sess.g.reshape(v2, vec![n, 1, c])?;
    let (att, _) = attention_core(&mut sess.g, q, k, v)?;
    let back = sess.g.permute(att, &[0, 2, 1])?;
    let back = sess.g.reshape(back, s)?;
    sess.g.add(x, back)
}

/// Predicts the injected noise for a (possibly palette-concatenated)
/// latent at diffusion step `t`, conditioned on the one-hot modality `y`.
pub fn denoise_predict<T: Element>(
    sess: &mut Session<T>,
    bank: Bank,
    spec: &UNetSpec,
    modalities: &ModalityRegistry,
    z_in: TensorId,
    t: usize,
    y: &Array<T>,
) -> Result<TensorId> {
    let s = sess.g.shape(z_in).to_vec();
    if s.len() != 5 {
        return Err(VoxError::shape(format!(
            "denoise: input must be [N,C,d,h,w], got {s:?}"
        )));
    }
    if s[1] != spec.in_channels() {
        return Err(VoxError::shape(format!(
            "denoise: expected {} input channels (palette {}), got {}",
            spec.in_channels(),
            if spec.use_palette { "on" } else { "off" },
            s[1]
        )));
    }
    for &e in &s[2..] {
        if e % 4 != 0 {
            return Err(VoxError::shape(format!(
                "denoise: spatial extent {e} must be divisible by 4 (two downsamplings)"
            )));
        }
    }
    if t < 1 {
        return Err(VoxError::config("denoise: step t must be >= 1"));
    }
    if modalities.len() != spec.modalities {
        return Err(VoxError::config(format!(
            "denoise: registry has {} modalities, spec expects {}",
            modalities.len(),
            spec.modalities
        )));
    }
    modalities.check_one_hot(y)?;

    let groups = spec.groups;
    let sin = sinusoid_embedding::<T>(t, spec.ladder[0])?;
    let sin_id = sess.g.constant(sin);
    let temb = linear_p(sess, bank, "unet.t1", sin_id)?;
    let temb = sess.g.silu(temb);
    let temb = linear_p(sess, bank, "unet.t2", temb)?;

    let y_id = sess.g.constant(y.clone());
    let cond = spec.use_conditioning;

    let h = conv_p(sess, bank, "unet.in", z_in, 1, 1)?;
    let e0 = time_res_block(sess, bank, "unet.enc0", h, temb, groups)?;
    let h = conv_p(sess, bank, "unet.down0", e0, 2, 1)?;
    let mut e1 = time_res_block(sess, bank, "unet.enc1", h, temb, groups)?;
    if cond {
        e1 = attention_site(sess, bank, "unet.att_enc1", e1, y_id)?;
    }
    let h = conv_p(sess, bank, "unet.down1", e1, 2, 1)?;
    let h = time_res_block(sess, bank, "unet.mid1", h, temb, groups)?;
    let h = if cond {
        attention_site(sess, bank, "unet.att_mid", h, y_id)?
    } else {
        h
    };
    let h = time_res_block(sess, bank, "unet.mid2", h, temb, groups)?;

    let h = sess.g.upsample2(h)?;
    let h = conv_p(sess, bank, "unet.up1", h, 1, 1)?;
    let h = sess.g.concat_channels(&[h, e1])?;
    let mut h = time_res_block(sess, bank, "unet.dec1", h, temb, groups)?;
    if cond {
        h = attention_site(sess, bank, "unet.att_dec1", h, y_id)?;
    }
    let h = sess.g.upsample2(h)?;
    let h = conv_p(sess, bank, "unet.up0", h, 1, 1)?;
    let h = sess.g.concat_channels(&[h, e0])?;
    let h = time_res_block(sess, bank, "unet.dec0", h, temb, groups)?;

    let h = group_norm_p(sess, bank, "unet.out_n", h, groups, EPS_NORM)?;
    let h = sess.g.silu(h);
    conv_p(sess, bank, "unet.out", h, 1, 1)
}

/// Tiny two-downsampling UNet used for whole-network gradient checks.
pub fn micro_spec(modalities: usize) -> UNetSpec {
    UNetSpec {
        d_emb: 2,
        ladder: [4, 6, 8],
        time_mult: 2,
        use_palette: true,
        use_conditioning: true,
        modalities,
        groups: 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init_normal;
    use crate::tensor::gradcheck::fd_vs_analytic;
    use rand::{Rng, SeedableRng};

    fn reg2() -> ModalityRegistry {
        ModalityRegistry::new(&["A".into(), "B".into()]).unwrap()
    }

    fn randomize_out_conv(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, spec: &UNetSpec) {
        let shape = vec![spec.d_emb, spec.ladder[0], 3, 3, 3];
        store
            .set("unet.out.w", init_normal(rng, shape, 0.2))
            .unwrap();
    }

    #[test]
    fn time_embedding_is_deterministic_and_distinct() {
        let a: Array<f64> = sinusoid_embedding(17, 8).unwrap();
        let b: Array<f64> = sinusoid_embedding(17, 8).unwrap();
        let c: Array<f64> = sinusoid_embedding(18, 8).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
        assert!(sinusoid_embedding::<f64>(1, 7).is_err());
    }

    #[test]
    fn output_shape_matches_latent_with_half_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let reg = reg2();
        let spec = micro_spec(2);
        let mut store: ParamStore<f64> = ParamStore::new();
        register_unet(&mut store, &mut rng, &spec).unwrap();
        let mut sess = Session::new(&store, false);
        let z = sess.g.leaf(Array::zeros(vec![1, 4, 4, 4, 4]), false);
        let y = reg.one_hot::<f64>(0).unwrap();
        let out = denoise_predict(&mut sess, Bank::MAIN, &spec, &reg, z, 5, &y).unwrap();
        assert_eq!(sess.g.shape(out), &[1, 2, 4, 4, 4]);
    }

    #[test]
    fn palette_flag_changes_required_input_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let reg = reg2();
        let mut spec = micro_spec(2);
        spec.use_palette = false;
        let mut store: ParamStore<f64> = ParamStore::new();
        register_unet(&mut store, &mut rng, &spec).unwrap();
        let mut sess = Session::new(&store, false);
        let z4 = sess.g.leaf(Array::zeros(vec![1, 4, 4, 4, 4]), false);
        let y = reg.one_hot::<f64>(0).unwrap();
        assert!(denoise_predict(&mut sess, Bank::MAIN, &spec, &reg, z4, 5, &y).is_err());
        let z2 = sess.g.leaf(Array::zeros(vec![1, 2, 4, 4, 4]), false);
        let out = denoise_predict(&mut sess, Bank::MAIN, &spec, &reg, z2, 5, &y).unwrap();
        assert_eq!(sess.g.shape(out), &[1, 2, 4, 4, 4]);
    }

    #[test]
    fn conditioning_off_ignores_y_and_skips_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let reg = reg2();
        let mut spec = micro_spec(2);
        spec.use_conditioning = false;
        let mut store: ParamStore<f64> = ParamStore::new();
        register_unet(&mut store, &mut rng, &spec).unwrap();
        randomize_out_conv(&mut store, &mut rng, &spec);
        let z_arr: Array<f64> = Array::from_fn(vec![1, 4, 4, 4, 4], |_| rng.random::<f64>());
        let run = |hot: usize| -> Vec<f64> {
            let mut sess = Session::new(&store, false);
            let z = sess.g.leaf(z_arr.clone(), false);
            let y = reg.one_hot::<f64>(hot).unwrap();
            let out = denoise_predict(&mut sess, Bank::MAIN, &spec, &reg, z, 3, &y).unwrap();
            assert!(!sess.bound_names(Bank::MAIN).iter().any(|n| n.contains("att")));
            sess.g.value(out).data().to_vec()
        };
        assert_eq!(run(0), run(1));
    }

    #[test]
    fn conditioning_on_distinguishes_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let reg = reg2();
        let spec = micro_spec(2);
        let mut store: ParamStore<f64> = ParamStore::new();
        register_unet(&mut store, &mut rng, &spec).unwrap();
        randomize_out_conv(&mut store, &mut rng, &spec);
        let z_arr: Array<f64> = Array::from_fn(vec![1, 4, 4, 4, 4], |_| rng.random::<f64>());
        let run = |hot: usize| -> Vec<f64> {
            let mut sess = Session::new(&store, false);
            let z = sess.g.leaf(z_arr.clone(), false);
            let y = reg.one_hot::<f64>(hot).unwrap();
            let out = denoise_predict(&mut sess, Bank::MAIN, &spec, &reg, z, 3, &y).unwrap();
            sess.g.value(out).data().to_vec()
        };
        let a = run(0);
        let b = run(1);
        let l2: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!(l2 > 1e-12, "different modalities should change the output, L2 = {l2}");
    }

    #[test]
    fn malformed_one_hot_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(89);
        let reg = reg2();
        let spec = micro_spec(2);
        let mut store: ParamStore<f64> = ParamStore::new();
        register_unet(&mut store, &mut rng, &spec).unwrap();
        let mut sess = Session::new(&store, false);
        let z = sess.g.leaf(Array::zeros(vec![1, 4, 4, 4, 4]), false);
        let y: Array<f64> = Array::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert!(denoise_predict(&mut sess, Bank::MAIN, &spec, &reg, z, 3, &y).is_err());
    }

    #[test]
    fn micro_unet_passes_whole_network_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let reg = reg2();
        let spec = micro_spec(2);
        let mut store64: ParamStore<f64> = ParamStore::new();
        register_unet(&mut store64, &mut rng, &spec).unwrap();
        randomize_out_conv(&mut store64, &mut rng, &spec);
        let store32: ParamStore<f32> = store64.cast();
        let y64: Array<f64> = reg.one_hot(1).unwrap();
        let x0: Array<f64> = Array::from_fn(vec![1, 4, 4, 4, 4], |_| {
            (rng.random::<f64>() * 2.0 - 1.0) as f32 as f64
        });
        let cot: Array<f64> = Array::from_fn(vec![1, 2, 4, 4, 4], |_| {
            (rng.random::<f64>() + 0.25) as f32 as f64
        });

        let eval_input = |x: &Array<f64>| -> crate::Result<f64> {
            let mut sess = Session::new(&store64, false);
            let z = sess.g.leaf(x.clone(), false);
            let out = denoise_predict(&mut sess, Bank::MAIN, &spec, &reg, z, 7, &y64)?;
            let c = sess.g.constant(cot.clone());
            let w = sess.g.mul(out, c)?;
            let l = sess.g.sum_all(w);
            Ok(sess.g.value(l).data()[0])
        };

        // f64 analytic vs f64 central differences.
        let mut sess64 = Session::new(&store64, true);
        let z64 = sess64.g.leaf(x0.clone(), true);
        let out = denoise_predict(&mut sess64, Bank::MAIN, &spec, &reg, z64, 7, &y64).unwrap();
        let c = sess64.g.constant(cot.clone());
        let w = sess64.g.mul(out, c).unwrap();
        let l = sess64.g.sum_all(w);
        sess64.g.backward(l).unwrap();
        let analytic64 = sess64.g.grad(z64).unwrap().clone();
        let err = fd_vs_analytic(&x0, eval_input, &analytic64, 1e-5).unwrap();
        assert!(err < 1e-6, "micro unet f64 input gradcheck rel err {err}");

        // Parameter-side check on a few small tensors.
        for pname in ["unet.att_mid.wk", "unet.out.b", "unet.t2.b"] {
            let p0 = store64.get(pname).unwrap().clone();
            let ix = store64.index_of(pname).unwrap();
            let analytic = sess64
                .grad_pairs(Bank::MAIN)
                .unwrap()
                .into_iter()
                .find(|(i, _)| *i == ix)
                .unwrap()
                .1;
            let eval_param = |p: &Array<f64>| -> crate::Result<f64> {
                let mut st = store64.cast::<f64>();
                st.set(pname, p.clone())?;
                let mut sess = Session::new(&st, false);
                let z = sess.g.leaf(x0.clone(), false);
                let out = denoise_predict(&mut sess, Bank::MAIN, &spec, &reg, z, 7, &y64)?;
                let c = sess.g.constant(cot.clone());
                let w = sess.g.mul(out, c)?;
                let l = sess.g.sum_all(w);
                Ok(sess.g.value(l).data()[0])
            };
            let err = fd_vs_analytic(&p0, eval_param, &analytic, 1e-5).unwrap();
            assert!(err < 1e-6, "micro unet f64 param {pname} gradcheck rel err {err}");
        }

        // f32 analytic vs f64 central differences.
        let mut sess32 = Session::new(&store32, false);
        let z32 = sess32.g.leaf(x0.to_f32(), true);
        let y32 = y64.to_f32();
        let out = denoise_predict(&mut sess32, Bank::MAIN, &spec, &reg, z32, 7, &y32).unwrap();
        let c = sess32.g.constant(cot.to_f32());
        let w = sess32.g.mul(out, c).unwrap();
        let l = sess32.g.sum_all(w);
        sess32.g.backward(l).unwrap();
        let analytic32 = sess32.g.grad(z32).unwrap().to_f64();
        let err = fd_vs_analytic(&x0, eval_input, &analytic32, 1e-5).unwrap();
        assert!(err < 1e-4, "micro unet f32 input gradcheck rel err {err}");
    }
}
