//! Reverse-mode differentiation over a flat operation tape.
//!
//! A `Graph` owns every tensor produced during one forward evaluation.
//! Operations append nodes and return `TensorId` handles; `backward`
//! replays the tape in reverse and accumulates adjoints into every
//! grad-flagged leaf. Reductions accumulate in f64 regardless of the
//! element type so f32 training keeps usable precision.

use crate::error::{Result, VoxError};
use crate::tensor::array::{strides_of, Array};
use crate::tensor::conv::{
    conv3d_forward, conv3d_grad_bias, conv3d_grad_input, conv3d_grad_weight, ConvDims,
};
use crate::tensor::element::Element;

/// Handle to a node in a `Graph`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId, f64),
    Relu(TensorId),
    Silu(TensorId),
    Sigmoid(TensorId),
    Exp(TensorId),
    Abs(TensorId),
    Recip(TensorId),
    Conv3d {
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        dims: ConvDims,
    },
    Upsample2(TensorId),
    SpatialMean(TensorId),
    SpatialSigma {
        x: TensorId,
        eps: f64,
    },
    AddChannelMap {
        x: TensorId,
        m: TensorId,
    },
    SubChannelMap {
        x: TensorId,
        m: TensorId,
    },
    MulChannelMap {
        x: TensorId,
        m: TensorId,
    },
    Matmul(TensorId, TensorId),
    Bmm(TensorId, TensorId),
    SoftmaxLast(TensorId),
    Reshape(TensorId),
    Permute {
        x: TensorId,
        perm: Vec<usize>,
    },
    ConcatChannels(Vec<TensorId>),
    SliceChannels {
        x: TensorId,
        start: usize,
        len: usize,
    },
    SumAll(TensorId),
    MeanAll(TensorId),
    StraightThrough(TensorId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Silu(..) => "silu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Abs(..) => "abs",
            Op::Recip(..) => "recip",
            Op::Conv3d { .. } => "conv3d",
            Op::Upsample2(..) => "upsample2",
            Op::SpatialMean(..) => "spatial_mean",
            Op::SpatialSigma { .. } => "spatial_sigma",
            Op::AddChannelMap { .. } => "add_channel_map",
            Op::SubChannelMap { .. } => "sub_channel_map",
            Op::MulChannelMap { .. } => "mul_channel_map",
            Op::Matmul(..) => "matmul",
            Op::Bmm(..) => "bmm",
            Op::SoftmaxLast(..) => "softmax_last",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::ConcatChannels(..) => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::StraightThrough(..) => "straight_through",
        }
    }
}

pub struct Graph<T: Element> {
    ops: Vec<Op>,
    values: Vec<Array<T>>,
    grads: Vec<Option<Array<T>>>,
    requires: Vec<bool>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            ops: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op, value: Array<T>, requires: bool) -> TensorId {
        let id = TensorId(self.ops.len());
        self.ops.push(op);
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        id
    }

    fn req(&self, id: TensorId) -> bool {
        self.requires[id.0]
    }

    pub fn value(&self, id: TensorId) -> &Array<T> {
        &self.values[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.values[id.0].shape()
    }

    pub fn grad(&self, id: TensorId) -> Option<&Array<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn op_name(&self, id: TensorId) -> &'static str {
        self.ops[id.0].name()
    }

    /// Replaces the stored value of a leaf; used to re-run a graph shape
    /// against perturbed inputs is not supported — finite differences
    /// rebuild the graph instead. This exists for in-place weight surgery
    /// in tests.
    pub fn set_leaf_value(&mut self, id: TensorId, value: Array<T>) -> Result<()> {
        if !matches!(self.ops[id.0], Op::Leaf) {
            return Err(VoxError::shape("set_leaf_value target is not a leaf"));
        }
        if value.shape() != self.values[id.0].shape() {
            return Err(VoxError::shape("set_leaf_value shape mismatch"));
        }
        self.values[id.0] = value;
        Ok(())
    }

    // ---- node constructors ----

    pub fn leaf(&mut self, value: Array<T>, requires_grad: bool) -> TensorId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Array<T>) -> TensorId {
        self.push(Op::Leaf, value, false)
    }

    fn check_same_shape(&self, what: &str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(VoxError::shape(format!(
                "{what}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("add", a, b)?;
        let v = zip_map(&self.values[a.0], &self.values[b.0], |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v, self.req(a) || self.req(b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("sub", a, b)?;
        let v = zip_map(&self.values[a.0], &self.values[b.0], |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v, self.req(a) || self.req(b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("mul", a, b)?;
        let v = zip_map(&self.values[a.0], &self.values[b.0], |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v, self.req(a) || self.req(b)))
    }

    pub fn scale(&mut self, a: TensorId, s: f64) -> TensorId {
        let sv = T::from_f64(s);
        let v = self.values[a.0].map(|x| x * sv);
        let r = self.req(a);
        self.push(Op::Scale(a, s), v, r)
    }

    pub fn add_scalar(&mut self, a: TensorId, s: f64) -> TensorId {
        let sv = T::from_f64(s);
        let v = self.values[a.0].map(|x| x + sv);
        let r = self.req(a);
        self.push(Op::AddScalar(a, s), v, r)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let v = self.values[a.0].map(|x| if x > T::ZERO { x } else { T::ZERO });
        let r = self.req(a);
        self.push(Op::Relu(a), v, r)
    }

    pub fn silu(&mut self, a: TensorId) -> TensorId {
        let v = self.values[a.0].map(|x| x * stable_sigmoid(x));
        let r = self.req(a);
        self.push(Op::Silu(a), v, r)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let v = self.values[a.0].map(stable_sigmoid);
        let r = self.req(a);
        self.push(Op::Sigmoid(a), v, r)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let v = self.values[a.0].map(|x| x.exp());
        let r = self.req(a);
        self.push(Op::Exp(a), v, r)
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let v = self.values[a.0].map(|x| x.abs());
        let r = self.req(a);
        self.push(Op::Abs(a), v, r)
    }

    pub fn recip(&mut self, a: TensorId) -> TensorId {
        let v = self.values[a.0].map(|x| T::ONE / x);
        let r = self.req(a);
        self.push(Op::Recip(a), v, r)
    }

    pub fn conv3d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 {
            return Err(VoxError::shape(format!(
                "conv3d: input must be [N,C,D,H,W], got {xs:?}"
            )));
        }
        if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(VoxError::shape(format!(
                "conv3d: weight must be [Cout,Cin,k,k,k], got {ws:?}"
            )));
        }
        if xs[1] != ws[1] {
            return Err(VoxError::shape(format!(
                "conv3d: input has {} channels but weight expects {} (input {xs:?}, weight {ws:?})",
                xs[1], ws[1]
            )));
        }
        let k = ws[2];
        if k < 1 || stride < 1 {
            return Err(VoxError::shape("conv3d: kernel and stride must be >= 1"));
        }
        for &e in &xs[2..] {
            if e + 2 * pad < k {
                return Err(VoxError::shape(format!(
                    "conv3d: extent {e} + 2*pad {pad} smaller than kernel {k}"
                )));
            }
        }
        if let Some(bid) = b {
            let bs = self.shape(bid);
            if bs != [ws[0]] {
                return Err(VoxError::shape(format!(
                    "conv3d: bias shape {bs:?} does not match Cout {}",
                    ws[0]
                )));
            }
        }
        let dims = ConvDims::new(xs[0], xs[1], xs[2], xs[3], xs[4], ws[0], k, stride, pad);
        let mut out = Array::zeros(vec![dims.n, dims.cout, dims.od, dims.oh, dims.ow]);
        {
            let bias = b.map(|bid| self.values[bid.0].data());
            conv3d_forward(
                self.values[x.0].data(),
                self.values[w.0].data(),
                bias,
                &dims,
                out.data_mut(),
            );
        }
        let r = self.req(x) || self.req(w) || b.is_some_and(|bid| self.req(bid));
        Ok(self.push(Op::Conv3d { x, w, b, dims }, out, r))
    }

    pub fn upsample2(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 5 {
            return Err(VoxError::shape(format!(
                "upsample2: input must be [N,C,D,H,W], got {s:?}"
            )));
        }
        let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let mut out = Array::zeros(vec![n, c, 2 * d, 2 * h, 2 * w]);
        {
            let src = self.values[a.0].data();
            let dst = out.data_mut();
            for nc in 0..n * c {
                let sb = nc * d * h * w;
                let db = nc * 8 * d * h * w;
                for dd in 0..2 * d {
                    for hh in 0..2 * h {
                        let srow = sb + ((dd / 2) * h + hh / 2) * w;
                        let drow = db + (dd * 2 * h + hh) * 2 * w;
                        for ww in 0..2 * w {
                            dst[drow + ww] = src[srow + ww / 2];
                        }
                    }
                }
            }
        }
        let r = self.req(a);
        Ok(self.push(Op::Upsample2(a), out, r))
    }

    fn stat_dims(&self, what: &str, a: TensorId) -> Result<(usize, usize, usize)> {
        let s = self.shape(a);
        if s.len() < 3 {
            return Err(VoxError::shape(format!(
                "{what}: input must have rank >= 3 ([N,C,spatial...]), got {s:?}"
            )));
        }
        let n = s[0];
        let c = s[1];
        let sp: usize = s[2..].iter().product();
        Ok((n, c, sp))
    }

    /// Per-(n,c) mean over all trailing axes: `[N,C,...] -> [N,C]`.
    pub fn spatial_mean(&mut self, a: TensorId) -> Result<TensorId> {
        let (n, c, sp) = self.stat_dims("spatial_mean", a)?;
        let src = self.values[a.0].data();
        let mut out = Array::zeros(vec![n, c]);
        for i in 0..n * c {
            let seg = &src[i * sp..(i + 1) * sp];
            // Constant segments keep their value bitwise (zero-variance
            // guard path for normalization layers).
            if seg.iter().all(|v| *v == seg[0]) {
                out.data_mut()[i] = seg[0];
                continue;
            }
            let mut acc = 0.0f64;
            for v in seg {
                acc += v.to_f64();
            }
            out.data_mut()[i] = T::from_f64(acc / sp as f64);
        }
        let r = self.req(a);
        Ok(self.push(Op::SpatialMean(a), out, r))
    }

    /// Per-(n,c) standard deviation `sqrt(var + eps)` over trailing axes.
    pub fn spatial_sigma(&mut self, a: TensorId, eps: f64) -> Result<TensorId> {
        let (n, c, sp) = self.stat_dims("spatial_sigma", a)?;
        let src = self.values[a.0].data();
        let mut out = Array::zeros(vec![n, c]);
        for i in 0..n * c {
            let seg = &src[i * sp..(i + 1) * sp];
            if seg.iter().all(|v| *v == seg[0]) {
                out.data_mut()[i] = T::from_f64(eps.sqrt());
                continue;
            }
            let mut acc = 0.0f64;
            for v in seg {
                acc += v.to_f64();
            }
            let mu = acc / sp as f64;
            let mut var = 0.0f64;
            for v in seg {
                let d = v.to_f64() - mu;
                var += d * d;
            }
            var /= sp as f64;
            out.data_mut()[i] = T::from_f64((var + eps).sqrt());
        }
        let r = self.req(a);
        Ok(self.push(Op::SpatialSigma { x: a, eps }, out, r))
    }

    fn cmap_dims(&self, what: &str, x: TensorId, m: TensorId) -> Result<(usize, usize, usize, bool)> {
        let xs = self.shape(x);
        let ms = self.shape(m);
        if xs.len() < 2 {
            return Err(VoxError::shape(format!(
                "{what}: tensor must have rank >= 2, got {xs:?}"
            )));
        }
        if ms.len() != 2 {
            return Err(VoxError::shape(format!(
                "{what}: map must be [N,C] or [1,C], got {ms:?}"
            )));
        }
        let n = xs[0];
        let c = xs[1];
        let sp: usize = xs[2..].iter().product();
        if ms[1] != c || (ms[0] != n && ms[0] != 1) {
            return Err(VoxError::shape(format!(
                "{what}: map shape {ms:?} incompatible with tensor {xs:?}"
            )));
        }
        Ok((n, c, sp, ms[0] == 1))
    }

    /// `out[n,c,...] = x[n,c,...] + m[n,c]` (or `m[0,c]` broadcast over n).
    pub fn add_channel_map(&mut self, x: TensorId, m: TensorId) -> Result<TensorId> {
        let (n, c, sp, bcast) = self.cmap_dims("add_channel_map", x, m)?;
        let v = cmap_forward(&self.values[x.0], &self.values[m.0], n, c, sp, bcast, |a, b| a + b);
        let r = self.req(x) || self.req(m);
        Ok(self.push(Op::AddChannelMap { x, m }, v, r))
    }

    pub fn sub_channel_map(&mut self, x: TensorId, m: TensorId) -> Result<TensorId> {
        let (n, c, sp, bcast) = self.cmap_dims("sub_channel_map", x, m)?;
        let v = cmap_forward(&self.values[x.0], &self.values[m.0], n, c, sp, bcast, |a, b| a - b);
        let r = self.req(x) || self.req(m);
        Ok(self.push(Op::SubChannelMap { x, m }, v, r))
    }

    pub fn mul_channel_map(&mut self, x: TensorId, m: TensorId) -> Result<TensorId> {
        let (n, c, sp, bcast) = self.cmap_dims("mul_channel_map", x, m)?;
        let v = cmap_forward(&self.values[x.0], &self.values[m.0], n, c, sp, bcast, |a, b| a * b);
        let r = self.req(x) || self.req(m);
        Ok(self.push(Op::MulChannelMap { x, m }, v, r))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(VoxError::shape(format!(
                "matmul: incompatible shapes {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Array::zeros(vec![m, n]);
        matmul_acc(
            self.values[a.0].data(),
            self.values[b.0].data(),
            out.data_mut(),
            m,
            k,
            n,
            false,
            false,
        );
        let r = self.req(a) || self.req(b);
        Ok(self.push(Op::Matmul(a, b), out, r))
    }

    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(VoxError::shape(format!(
                "bmm: incompatible shapes {sa:?} x {sb:?}"
            )));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = Array::zeros(vec![bt, m, n]);
        for i in 0..bt {
            matmul_acc(
                &self.values[a.0].data()[i * m * k..(i + 1) * m * k],
                &self.values[b.0].data()[i * k * n..(i + 1) * k * n],
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
                false,
                false,
            );
        }
        let r = self.req(a) || self.req(b);
        Ok(self.push(Op::Bmm(a, b), out, r))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        let last = *s.last().ok_or_else(|| VoxError::shape("softmax_last: rank 0 input"))?;
        if last == 0 {
            return Err(VoxError::shape("softmax_last: empty last axis"));
        }
        let src = self.values[a.0].data();
        let mut out = Array::zeros(s.clone());
        let rows = src.len() / last;
        for rix in 0..rows {
            let seg = &src[rix * last..(rix + 1) * last];
            let mut mx = seg[0];
            for &v in seg {
                mx = mx.max(v);
            }
            let mut denom = 0.0f64;
            let dst = &mut out.data_mut()[rix * last..(rix + 1) * last];
            for (d, &v) in dst.iter_mut().zip(seg.iter()) {
                let e = (v - mx).exp();
                *d = e;
                denom += e.to_f64();
            }
            for d in dst.iter_mut() {
                *d = T::from_f64(d.to_f64() / denom);
            }
        }
        let r = self.req(a);
        Ok(self.push(Op::SoftmaxLast(a), out, r))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let v = self.values[a.0].clone().reshaped(shape)?;
        let r = self.req(a);
        Ok(self.push(Op::Reshape(a), v, r))
    }

    pub fn permute(&mut self, a: TensorId, perm: &[usize]) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if perm.len() != s.len() {
            return Err(VoxError::shape(format!(
                "permute: perm {perm:?} does not match rank of {s:?}"
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= s.len() || seen[p] {
                return Err(VoxError::shape(format!("permute: {perm:?} is not a permutation")));
            }
            seen[p] = true;
        }
        let v = permute_array(&self.values[a.0], perm);
        let r = self.req(a);
        Ok(self.push(
            Op::Permute {
                x: a,
                perm: perm.to_vec(),
            },
            v,
            r,
        ))
    }

    pub fn concat_channels(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(VoxError::shape("concat_channels: no inputs"));
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() < 2 {
            return Err(VoxError::shape("concat_channels: inputs must have rank >= 2"));
        }
        let mut c_total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(VoxError::shape(format!(
                    "concat_channels: shape {s:?} incompatible with {first:?}"
                )));
            }
            c_total += s[1];
        }
        let n = first[0];
        let sp: usize = first[2..].iter().product();
        let mut shape = first.clone();
        shape[1] = c_total;
        let mut out = Array::zeros(shape);
        {
            let dst = out.data_mut();
            let mut c_off = 0usize;
            for &p in parts {
                let c_p = self.values[p.0].shape()[1];
                let src = self.values[p.0].data();
                for b in 0..n {
                    let d_base = (b * c_total + c_off) * sp;
                    let s_base = b * c_p * sp;
                    dst[d_base..d_base + c_p * sp].copy_from_slice(&src[s_base..s_base + c_p * sp]);
                }
                c_off += c_p;
            }
        }
        let r = parts.iter().any(|&p| self.req(p));
        Ok(self.push(Op::ConcatChannels(parts.to_vec()), out, r))
    }

    pub fn slice_channels(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(VoxError::shape("slice_channels: input must have rank >= 2"));
        }
        if start + len > s[1] || len == 0 {
            return Err(VoxError::shape(format!(
                "slice_channels: range {start}..{} out of {} channels",
                start + len,
                s[1]
            )));
        }
        let n = s[0];
        let c = s[1];
        let sp: usize = s[2..].iter().product();
        let mut shape = s.clone();
        shape[1] = len;
        let mut out = Array::zeros(shape);
        {
            let src = self.values[a.0].data();
            let dst = out.data_mut();
            for b in 0..n {
                let s_base = (b * c + start) * sp;
                let d_base = b * len * sp;
                dst[d_base..d_base + len * sp].copy_from_slice(&src[s_base..s_base + len * sp]);
            }
        }
        let r = self.req(a);
        Ok(self.push(Op::SliceChannels { x: a, start, len }, out, r))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let mut acc = 0.0f64;
        for v in self.values[a.0].data() {
            acc += v.to_f64();
        }
        let r = self.req(a);
        self.push(Op::SumAll(a), Array::scalar(T::from_f64(acc)), r)
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.values[a.0].numel();
        let mut acc = 0.0f64;
        for v in self.values[a.0].data() {
            acc += v.to_f64();
        }
        let r = self.req(a);
        self.push(Op::MeanAll(a), Array::scalar(T::from_f64(acc / n as f64)), r)
    }

    /// Forward: the externally supplied `value`. Backward: identity into `a`.
    pub fn straight_through(&mut self, a: TensorId, value: Array<T>) -> Result<TensorId> {
        if value.shape() != self.shape(a) {
            return Err(VoxError::shape(format!(
                "straight_through: value shape {:?} differs from input {:?}",
                value.shape(),
                self.shape(a)
            )));
        }
        let r = self.req(a);
        Ok(self.push(Op::StraightThrough(a), value, r))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Every grad-flagged leaf ends up
    /// with a gradient; leaves the loss cannot reach get zeros.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(VoxError::shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(Array::full(self.values[loss.0].shape().to_vec(), T::ONE));

        for i in (0..=loss.0).rev() {
            if !self.requires[i] {
                continue;
            }
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(go) = self.grads[i].take() else {
                continue;
            };
            self.accumulate(i, &go);
        }

        for i in 0..self.ops.len() {
            if matches!(self.ops[i], Op::Leaf) && self.requires[i] && self.grads[i].is_none() {
                self.grads[i] = Some(Array::zeros(self.values[i].shape().to_vec()));
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, i: usize, go: &Array<T>) {
        let op = self.ops[i].clone();
        let values = &self.values;
        let requires = &self.requires;
        let grads = &mut self.grads;

        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if requires[a.0] {
                    axpy(ensure_grad(grads, values, a), go.data(), T::ONE);
                }
                if requires[b.0] {
                    axpy(ensure_grad(grads, values, b), go.data(), T::ONE);
                }
            }
            Op::Sub(a, b) => {
                if requires[a.0] {
                    axpy(ensure_grad(grads, values, a), go.data(), T::ONE);
                }
                if requires[b.0] {
                    axpy(ensure_grad(grads, values, b), go.data(), T::ZERO - T::ONE);
                }
            }
            Op::Mul(a, b) => {
                if requires[a.0] {
                    let vb = values[b.0].data();
                    let ga = ensure_grad(grads, values, a);
                    for j in 0..ga.len() {
                        ga[j] += go.data()[j] * vb[j];
                    }
                }
                if requires[b.0] {
                    let va = values[a.0].data();
                    let gb = ensure_grad(grads, values, b);
                    for j in 0..gb.len() {
                        gb[j] += go.data()[j] * va[j];
                    }
                }
            }
            Op::Scale(a, s) => {
                if requires[a.0] {
                    axpy(ensure_grad(grads, values, a), go.data(), T::from_f64(s));
                }
            }
            Op::AddScalar(a, _) => {
                if requires[a.0] {
                    axpy(ensure_grad(grads, values, a), go.data(), T::ONE);
                }
            }
            Op::Relu(a) => {
                if requires[a.0] {
                    let va = values[a.0].data();
                    let ga = ensure_grad(grads, values, a);
                    for j in 0..ga.len() {
                        if va[j] > T::ZERO {
                            ga[j] += go.data()[j];
                        }
                    }
                }
            }
            Op::Silu(a) => {
                if requires[a.0] {
                    let va = values[a.0].data();
                    let ga = ensure_grad(grads, values, a);
                    for j in 0..ga.len() {
                        let s = stable_sigmoid(va[j]);
                        let d = s * (T::ONE + va[j] * (T::ONE - s));
                        ga[j] += go.data()[j] * d;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if requires[a.0] {
                    let y = values[i].data();
                    let ga = ensure_grad(grads, values, a);
                    for j in 0..ga.len() {
                        ga[j] += go.data()[j] * y[j] * (T::ONE - y[j]);
                    }
                }
            }
            Op::Exp(a) => {
                if requires[a.0] {
                    let y = values[i].data();
                    let ga = ensure_grad(grads, values, a);
                    for j in 0..ga.len() {
                        ga[j] += go.data()[j] * y[j];
                    }
                }
            }
            Op::Abs(a) => {
                if requires[a.0] {
                    let va = values[a.0].data();
                    let ga = ensure_grad(grads, values, a);
                    for j in 0..ga.len() {
                        if va[j] > T::ZERO {
                            ga[j] += go.data()[j];
                        } else if va[j] < T::ZERO {
                            ga[j] -= go.data()[j];
                        }
                    }
                }
            }
            Op::Recip(a) => {
                if requires[a.0] {
                    let y = values[i].data();
                    let ga = ensure_grad(grads, values, a);
                    for j in 0..ga.len() {
                        ga[j] -= go.data()[j] * y[j] * y[j];
                    }
                }
            }
            Op::Conv3d { x, w, b, dims } => {
                if requires[x.0] {
                    let gw = values[w.0].data();
                    conv3d_grad_input(go.data(), gw, &dims, ensure_grad(grads, values, x));
                }
                if requires[w.0] {
                    let vx = values[x.0].data();
                    conv3d_grad_weight(vx, go.data(), &dims, ensure_grad(grads, values, w));
                }
                if let Some(bid) = b {
                    if requires[bid.0] {
                        conv3d_grad_bias(go.data(), &dims, ensure_grad(grads, values, bid));
                    }
                }
            }
            Op::Upsample2(a) => {
                if requires[a.0] {
                    let s = values[a.0].shape().to_vec();
                    let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
                    let ga = ensure_grad(grads, values, a);
                    let gox = go.data();
                    for nc in 0..n * c {
                        let sb = nc * d * h * w;
                        let db = nc * 8 * d * h * w;
                        for dd in 0..2 * d {
                            for hh in 0..2 * h {
                                let srow = sb + ((dd / 2) * h + hh / 2) * w;
                                let drow = db + (dd * 2 * h + hh) * 2 * w;
                                for ww in 0..2 * w {
                                    ga[srow + ww / 2] += gox[drow + ww];
                                }
                            }
                        }
                    }
                }
            }
            Op::SpatialMean(a) => {
                if requires[a.0] {
                    let sp: usize = values[a.0].shape()[2..].iter().product();
                    let inv = T::from_f64(1.0 / sp as f64);
                    let ga = ensure_grad(grads, values, a);
                    for (row, &g) in go.data().iter().enumerate() {
                        let gs = g * inv;
                        for v in &mut ga[row * sp..(row + 1) * sp] {
                            *v += gs;
                        }
                    }
                }
            }
            Op::SpatialSigma { x, eps: _ } => {
                if requires[x.0] {
                    let sp: usize = values[x.0].shape()[2..].iter().product();
                    let vx = values[x.0].data();
                    let sigma = values[i].data();
                    let ga = ensure_grad(grads, values, x);
                    for (row, &g) in go.data().iter().enumerate() {
                        let seg = &vx[row * sp..(row + 1) * sp];
                        let mut acc = 0.0f64;
                        for v in seg {
                            acc += v.to_f64();
                        }
                        let mu = T::from_f64(acc / sp as f64);
                        let coef = g / (T::from_f64(sp as f64) * sigma[row]);
                        let gseg = &mut ga[row * sp..(row + 1) * sp];
                        for (gv, &xv) in gseg.iter_mut().zip(seg.iter()) {
                            *gv += coef * (xv - mu);
                        }
                    }
                }
            }
            Op::AddChannelMap { x, m } | Op::SubChannelMap { x, m } => {
                let sign = if matches!(self.ops[i], Op::SubChannelMap { .. }) {
                    -1.0
                } else {
                    1.0
                };
                let shape = values[x.0].shape().to_vec();
                let n = shape[0];
                let c = shape[1];
                let sp: usize = shape[2..].iter().product();
                let bcast = values[m.0].shape()[0] == 1;
                if requires[x.0] {
                    axpy(ensure_grad(grads, values, x), go.data(), T::ONE);
                }
                if requires[m.0] {
                    let gm = ensure_grad(grads, values, m);
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * sp;
                            let mut acc = 0.0f64;
                            for v in &go.data()[base..base + sp] {
                                acc += v.to_f64();
                            }
                            let idx = if bcast { ch } else { b * c + ch };
                            gm[idx] += T::from_f64(sign * acc);
                        }
                    }
                }
            }
            Op::MulChannelMap { x, m } => {
                let shape = values[x.0].shape().to_vec();
                let n = shape[0];
                let c = shape[1];
                let sp: usize = shape[2..].iter().product();
                let bcast = values[m.0].shape()[0] == 1;
                if requires[x.0] {
                    let vm = values[m.0].data();
                    let gx = ensure_grad(grads, values, x);
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * sp;
                            let mv = vm[if bcast { ch } else { b * c + ch }];
                            let seg = &mut gx[base..base + sp];
                            for (gv, &g) in seg.iter_mut().zip(go.data()[base..base + sp].iter()) {
                                *gv += g * mv;
                            }
                        }
                    }
                }
                if requires[m.0] {
                    let vx = values[x.0].data();
                    let gm = ensure_grad(grads, values, m);
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * sp;
                            let mut acc = 0.0f64;
                            for (g, xv) in go.data()[base..base + sp].iter().zip(vx[base..base + sp].iter()) {
                                acc += g.to_f64() * xv.to_f64();
                            }
                            let idx = if bcast { ch } else { b * c + ch };
                            gm[idx] += T::from_f64(acc);
                        }
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (values[a.0].shape()[0], values[a.0].shape()[1]);
                let n = values[b.0].shape()[1];
                if requires[a.0] {
                    // dA = dOut * B^T
                    matmul_acc(go.data(), values[b.0].data(), ensure_grad(grads, values, a), m, n, k, false, true);
                }
                if requires[b.0] {
                    // dB = A^T * dOut
                    matmul_acc(values[a.0].data(), go.data(), ensure_grad(grads, values, b), k, m, n, true, false);
                }
            }
            Op::Bmm(a, b) => {
                let sa = values[a.0].shape().to_vec();
                let sb = values[b.0].shape().to_vec();
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if requires[a.0] {
                    let vb = values[b.0].data();
                    let ga = ensure_grad(grads, values, a);
                    for t in 0..bt {
                        matmul_acc(
                            &go.data()[t * m * n..(t + 1) * m * n],
                            &vb[t * k * n..(t + 1) * k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                            false,
                            true,
                        );
                    }
                }
                if requires[b.0] {
                    let va = values[a.0].data();
                    let gb = ensure_grad(grads, values, b);
                    for t in 0..bt {
                        matmul_acc(
                            &va[t * m * k..(t + 1) * m * k],
                            &go.data()[t * m * n..(t + 1) * m * n],
                            &mut gb[t * k * n..(t + 1) * k * n],
                            k,
                            m,
                            n,
                            true,
                            false,
                        );
                    }
                }
            }
            Op::SoftmaxLast(a) => {
                if requires[a.0] {
                    let last = *values[i].shape().last().unwrap();
                    let y = values[i].data();
                    let ga = ensure_grad(grads, values, a);
                    let rows = y.len() / last;
                    for rix in 0..rows {
                        let yseg = &y[rix * last..(rix + 1) * last];
                        let gseg = &go.data()[rix * last..(rix + 1) * last];
                        let mut dot = 0.0f64;
                        for (yv, gv) in yseg.iter().zip(gseg.iter()) {
                            dot += yv.to_f64() * gv.to_f64();
                        }
                        let out = &mut ga[rix * last..(rix + 1) * last];
                        for j in 0..last {
                            out[j] += T::from_f64(yseg[j].to_f64() * (gseg[j].to_f64() - dot));
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if requires[a.0] {
                    axpy(ensure_grad(grads, values, a), go.data(), T::ONE);
                }
            }
            Op::Permute { x, perm } => {
                if requires[x.0] {
                    // adjoint of permute is permute by the inverse
                    let mut inv = vec![0usize; perm.len()];
                    for (j, &p) in perm.iter().enumerate() {
                        inv[p] = j;
                    }
                    let gp = permute_array(go, &inv);
                    axpy(ensure_grad(grads, values, x), gp.data(), T::ONE);
                }
            }
            Op::ConcatChannels(parts) => {
                let out_shape = values[i].shape().to_vec();
                let n = out_shape[0];
                let c_total = out_shape[1];
                let sp: usize = out_shape[2..].iter().product();
                let mut c_off = 0usize;
                for &p in &parts {
                    let c_p = values[p.0].shape()[1];
                    if requires[p.0] {
                        let gp = ensure_grad(grads, values, p);
                        for b in 0..n {
                            let s_base = (b * c_total + c_off) * sp;
                            let d_base = b * c_p * sp;
                            axpy(
                                &mut gp[d_base..d_base + c_p * sp],
                                &go.data()[s_base..s_base + c_p * sp],
                                T::ONE,
                            );
                        }
                    }
                    c_off += c_p;
                }
            }
            Op::SliceChannels { x, start, len } => {
                if requires[x.0] {
                    let xs = values[x.0].shape().to_vec();
                    let n = xs[0];
                    let c = xs[1];
                    let sp: usize = xs[2..].iter().product();
                    let gx = ensure_grad(grads, values, x);
                    for b in 0..n {
                        let d_base = (b * c + start) * sp;
                        let s_base = b * len * sp;
                        axpy(
                            &mut gx[d_base..d_base + len * sp],
                            &go.data()[s_base..s_base + len * sp],
                            T::ONE,
                        );
                    }
                }
            }
            Op::SumAll(a) => {
                if requires[a.0] {
                    let g = go.data()[0];
                    for v in ensure_grad(grads, values, a) {
                        *v += g;
                    }
                }
            }
            Op::MeanAll(a) => {
                if requires[a.0] {
                    let n = values[a.0].numel();
                    let g = T::from_f64(go.data()[0].to_f64() / n as f64);
                    for v in ensure_grad(grads, values, a) {
                        *v += g;
                    }
                }
            }
            Op::StraightThrough(a) => {
                if requires[a.0] {
                    axpy(ensure_grad(grads, values, a), go.data(), T::ONE);
                }
            }
        }
    }
}

// ---- kernels shared by forward and backward ----

fn ensure_grad<'a, T: Element>(
    grads: &'a mut [Option<Array<T>>],
    values: &[Array<T>],
    id: TensorId,
) -> &'a mut [T] {
    grads[id.0]
        .get_or_insert_with(|| Array::zeros(values[id.0].shape().to_vec()))
        .data_mut()
}

#[inline]
fn stable_sigmoid<T: Element>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (T::ZERO - x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn zip_map<T: Element>(a: &Array<T>, b: &Array<T>, f: impl Fn(T, T) -> T) -> Array<T> {
    let mut out = Array::zeros(a.shape().to_vec());
    for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *o = f(x, y);
    }
    out
}

/// `dst += s * src`, elementwise.
#[inline]
fn axpy<T: Element>(dst: &mut [T], src: &[T], s: T) {
    debug_assert_eq!(dst.len(), src.len());
    if s == T::ONE {
        for (d, &v) in dst.iter_mut().zip(src.iter()) {
            *d += v;
        }
    } else {
        for (d, &v) in dst.iter_mut().zip(src.iter()) {
            *d += s * v;
        }
    }
}

fn cmap_forward<T: Element>(
    x: &Array<T>,
    m: &Array<T>,
    n: usize,
    c: usize,
    sp: usize,
    bcast: bool,
    f: impl Fn(T, T) -> T,
) -> Array<T> {
    let mut out = Array::zeros(x.shape().to_vec());
    let xd = x.data();
    let md = m.data();
    let od = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * sp;
            let mv = md[if bcast { ch } else { b * c + ch }];
            for j in base..base + sp {
                od[j] = f(xd[j], mv);
            }
        }
    }
    out
}

/// `out (+)= opt_transpose(a) * opt_transpose(b)` for row-major matrices.
/// `m, k, n` describe the logical (post-transpose) product: out is m x n,
/// the contraction length is k. Accumulates into `out`.
#[allow(clippy::too_many_arguments)]
fn matmul_acc<T: Element>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    // a is m x k logically; stored m x k, or k x m when ta.
    // b is k x n logically; stored k x n, or n x k when tb.
    for i in 0..m {
        for l in 0..k {
            let av = if ta { a[l * m + i] } else { a[i * k + l] };
            if av == T::ZERO {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            if tb {
                for (j, o) in orow.iter_mut().enumerate() {
                    *o += av * b[j * k + l];
                }
            } else {
                let brow = &b[l * n..(l + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        }
    }
}

fn permute_array<T: Element>(x: &Array<T>, perm: &[usize]) -> Array<T> {
    let in_shape = x.shape();
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides_of(in_shape);
    // stride in the input for a unit step of each output axis
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Array::zeros(out_shape.clone());
    let od = out.data_mut();
    let xd = x.data();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in od.iter_mut() {
        *o = xd[src];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            src -= step[ax] * out_shape[ax];
        }
    }
    out
}
