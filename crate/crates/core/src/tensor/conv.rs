//! 3D convolution kernels: forward, and adjoints w.r.t. input, weight and
//! bias. All three are computed through a patch matrix (im2col) so the hot
//! loops run over long contiguous rows regardless of the spatial extent;
//! short output rows at coarse resolutions would otherwise starve the
//! vector units.

use super::element::Element;

/// Output extent of a convolution axis.
#[inline]
pub fn conv_out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub od: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        cin: usize,
        d: usize,
        h: usize,
        w: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        ConvDims {
            n,
            cin,
            d,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            od: conv_out_extent(d, k, stride, pad),
            oh: conv_out_extent(h, k, stride, pad),
            ow: conv_out_extent(w, k, stride, pad),
        }
    }

    fn in_sp(&self) -> usize {
        self.d * self.h * self.w
    }

    fn out_sp(&self) -> usize {
        self.od * self.oh * self.ow
    }

    /// Patch rows: one per (input channel, kernel tap).
    fn patch_rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }
}

/// Valid output range along one axis for a given kernel offset: all `o` with
/// `0 <= o*stride + ko - pad < extent`.
#[inline]
fn valid_out_range(extent: usize, ko: usize, stride: usize, pad: usize, out_extent: usize) -> (usize, usize) {
    // o*stride + ko - pad >= 0  =>  o >= ceil((pad - ko) / stride)
    let lo = if pad > ko { (pad - ko).div_ceil(stride) } else { 0 };
    // o*stride + ko - pad <= extent - 1  =>  o <= (extent - 1 + pad - ko) / stride
    let hi = if extent + pad > ko {
        ((extent - 1 + pad - ko) / stride + 1).min(out_extent)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Spatial tile of the flattened output, sized so a handful of accumulator
/// rows stay resident in L1.
const S_TILE: usize = 1024;
/// Output rows computed per pass over a patch tile.
const CB: usize = 4;

/// Writes the patch matrix `p[r][s]` for one batch element: row `r` indexes
/// (input channel, kernel tap), column `s` the flattened output voxel, with
/// zeros where the tap falls outside the padded input. Every element of `p`
/// is overwritten.
fn fill_patches<T: Element>(x: &[T], dims: &ConvDims, p: &mut [T]) {
    let ConvDims {
        cin,
        d,
        h,
        w,
        k,
        stride,
        pad,
        od,
        oh,
        ow,
        ..
    } = *dims;
    let out_sp = dims.out_sp();
    let mut r = 0usize;
    for ci in 0..cin {
        let x_c = ci * d * h * w;
        for kd in 0..k {
            let (dlo, dhi) = valid_out_range(d, kd, stride, pad, od);
            for kh in 0..k {
                let (hlo, hhi) = valid_out_range(h, kh, stride, pad, oh);
                for kw in 0..k {
                    let (wlo, whi) = valid_out_range(w, kw, stride, pad, ow);
                    let row = &mut p[r * out_sp..(r + 1) * out_sp];
                    r += 1;
                    row[..dlo * oh * ow].fill(T::ZERO);
                    row[dhi * oh * ow..].fill(T::ZERO);
                    for o_d in dlo..dhi {
                        let id = o_d * stride + kd - pad;
                        let slab = &mut row[o_d * oh * ow..(o_d + 1) * oh * ow];
                        slab[..hlo * ow].fill(T::ZERO);
                        slab[hhi * ow..].fill(T::ZERO);
                        for o_h in hlo..hhi {
                            let ih = o_h * stride + kh - pad;
                            let dst = &mut slab[o_h * ow..(o_h + 1) * ow];
                            let x_row = x_c + (id * h + ih) * w;
                            dst[..wlo].fill(T::ZERO);
                            dst[whi..].fill(T::ZERO);
                            if stride == 1 {
                                let src_lo = x_row + wlo + kw - pad;
                                dst[wlo..whi].copy_from_slice(&x[src_lo..src_lo + (whi - wlo)]);
                            } else {
                                for (o_w, slot) in dst[wlo..whi].iter_mut().enumerate() {
                                    *slot = x[x_row + (wlo + o_w) * stride + kw - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adds each patch-matrix row back into the input gradient (the transpose
/// of `fill_patches`); zero-padding columns are skipped.
fn scatter_patches_acc<T: Element>(p: &[T], dims: &ConvDims, gx: &mut [T]) {
    let ConvDims {
        cin,
        d,
        h,
        w,
        k,
        stride,
        pad,
        od,
        oh,
        ow,
        ..
    } = *dims;
    let out_sp = dims.out_sp();
    let mut r = 0usize;
    for ci in 0..cin {
        let x_c = ci * d * h * w;
        for kd in 0..k {
            let (dlo, dhi) = valid_out_range(d, kd, stride, pad, od);
            for kh in 0..k {
                let (hlo, hhi) = valid_out_range(h, kh, stride, pad, oh);
                for kw in 0..k {
                    let (wlo, whi) = valid_out_range(w, kw, stride, pad, ow);
                    let row = &p[r * out_sp..(r + 1) * out_sp];
                    r += 1;
                    for o_d in dlo..dhi {
                        let id = o_d * stride + kd - pad;
                        let slab = &row[o_d * oh * ow..(o_d + 1) * oh * ow];
                        for o_h in hlo..hhi {
                            let ih = o_h * stride + kh - pad;
                            let seg = &slab[o_h * ow + wlo..o_h * ow + whi];
                            let x_row = x_c + (id * h + ih) * w;
                            if stride == 1 {
                                let dst_lo = x_row + wlo + kw - pad;
                                for (gv, &pv) in gx[dst_lo..dst_lo + seg.len()].iter_mut().zip(seg) {
                                    *gv += pv;
                                }
                            } else {
                                for (o_w, &pv) in seg.iter().enumerate() {
                                    gx[x_row + (wlo + o_w) * stride + kw - pad] += pv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with four rotating accumulator banks so the multiply-add
/// chains pipeline; fixed reduction order keeps results reproducible.
fn row_dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut banks = [[T::ZERO; 8]; 4];
    let mut i = 0usize;
    let mut ac = a.chunks_exact(8);
    let mut bc = b.chunks_exact(8);
    for (a8, b8) in (&mut ac).zip(&mut bc) {
        let bank = &mut banks[i & 3];
        i += 1;
        for l in 0..8 {
            bank[l] += a8[l] * b8[l];
        }
    }
    let mut tail = T::ZERO;
    for (&av, &bv) in ac.remainder().iter().zip(bc.remainder()) {
        tail += av * bv;
    }
    let mut total = tail;
    for bank in banks {
        for v in bank {
            total += v;
        }
    }
    total
}

pub fn conv3d_forward<T: Element>(x: &[T], wt: &[T], bias: Option<&[T]>, dims: &ConvDims, out: &mut [T]) {
    let (n, cout) = (dims.n, dims.cout);
    let (in_sp, out_sp, kk) = (dims.in_sp(), dims.out_sp(), dims.patch_rows());
    debug_assert_eq!(out.len(), n * cout * out_sp);
    let cin_sp = dims.cin * in_sp;
    let mut p = vec![T::ZERO; kk * out_sp];
    for b in 0..n {
        fill_patches(&x[b * cin_sp..(b + 1) * cin_sp], dims, &mut p);
        let out_b = &mut out[b * cout * out_sp..(b + 1) * cout * out_sp];
        for co0 in (0..cout).step_by(CB) {
            let nb = (cout - co0).min(CB);
            for s0 in (0..out_sp).step_by(S_TILE) {
                let tl = (out_sp - s0).min(S_TILE);
                let mut acc = [[T::ZERO; S_TILE]; CB];
                for (ks, prow_full) in p.chunks_exact(out_sp).enumerate() {
                    let prow = &prow_full[s0..s0 + tl];
                    for (j, accj) in acc[..nb].iter_mut().enumerate() {
                        let wv = wt[(co0 + j) * kk + ks];
                        for (av, &pv) in accj[..tl].iter_mut().zip(prow) {
                            *av += wv * pv;
                        }
                    }
                }
                for (j, accj) in acc[..nb].iter().enumerate() {
                    let off = bias.map_or(T::ZERO, |bv| bv[co0 + j]);
                    let orow = &mut out_b[(co0 + j) * out_sp + s0..(co0 + j) * out_sp + s0 + tl];
                    for (ov, &av) in orow.iter_mut().zip(&accj[..tl]) {
                        *ov = av + off;
                    }
                }
            }
        }
    }
}

/// Accumulates the gradient w.r.t. the convolution input.
pub fn conv3d_grad_input<T: Element>(grad_out: &[T], wt: &[T], dims: &ConvDims, grad_in: &mut [T]) {
    let (n, cout) = (dims.n, dims.cout);
    let (in_sp, out_sp, kk) = (dims.in_sp(), dims.out_sp(), dims.patch_rows());
    debug_assert_eq!(grad_in.len(), n * dims.cin * in_sp);
    let cin_sp = dims.cin * in_sp;
    let mut g = vec![T::ZERO; kk * out_sp];
    for b in 0..n {
        let go_b = &grad_out[b * cout * out_sp..(b + 1) * cout * out_sp];
        for ks0 in (0..kk).step_by(CB) {
            let nb = (kk - ks0).min(CB);
            for s0 in (0..out_sp).step_by(S_TILE) {
                let tl = (out_sp - s0).min(S_TILE);
                let mut acc = [[T::ZERO; S_TILE]; CB];
                for (c, grow_full) in go_b.chunks_exact(out_sp).enumerate() {
                    let grow = &grow_full[s0..s0 + tl];
                    for (j, accj) in acc[..nb].iter_mut().enumerate() {
                        let wv = wt[c * kk + ks0 + j];
                        for (av, &gv) in accj[..tl].iter_mut().zip(grow) {
                            *av += wv * gv;
                        }
                    }
                }
                for (j, accj) in acc[..nb].iter().enumerate() {
                    let grow = &mut g[(ks0 + j) * out_sp + s0..(ks0 + j) * out_sp + s0 + tl];
                    grow.copy_from_slice(&accj[..tl]);
                }
            }
        }
        scatter_patches_acc(&g, dims, &mut grad_in[b * cin_sp..(b + 1) * cin_sp]);
    }
}

/// Accumulates the gradient w.r.t. the convolution weight.
pub fn conv3d_grad_weight<T: Element>(x: &[T], grad_out: &[T], dims: &ConvDims, grad_w: &mut [T]) {
    let (n, cout) = (dims.n, dims.cout);
    let (in_sp, out_sp, kk) = (dims.in_sp(), dims.out_sp(), dims.patch_rows());
    debug_assert_eq!(grad_w.len(), cout * kk);
    let cin_sp = dims.cin * in_sp;
    let mut p = vec![T::ZERO; kk * out_sp];
    for b in 0..n {
        fill_patches(&x[b * cin_sp..(b + 1) * cin_sp], dims, &mut p);
        let go_b = &grad_out[b * cout * out_sp..(b + 1) * cout * out_sp];
        for s0 in (0..out_sp).step_by(S_TILE) {
            let tl = (out_sp - s0).min(S_TILE);
            for (c, grow_full) in go_b.chunks_exact(out_sp).enumerate() {
                let grow = &grow_full[s0..s0 + tl];
                for (ks, prow_full) in p.chunks_exact(out_sp).enumerate() {
                    let prow = &prow_full[s0..s0 + tl];
                    grad_w[c * kk + ks] += row_dot(grow, prow);
                }
            }
        }
    }
}

/// Gradient w.r.t. the bias: sum of `grad_out` over batch and spatial axes.
pub fn conv3d_grad_bias<T: Element>(grad_out: &[T], dims: &ConvDims, grad_b: &mut [T]) {
    let out_sp = dims.od * dims.oh * dims.ow;
    for b in 0..dims.n {
        for co in 0..dims.cout {
            let base = (b * dims.cout + co) * out_sp;
            let mut acc = 0.0f64;
            for v in &grad_out[base..base + out_sp] {
                acc += v.to_f64();
            }
            grad_b[co] += T::from_f64(acc);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Naive triple-loop references used as the correctness oracle for the
    // patch-matrix kernels.
    fn ref_forward(x: &[f64], wt: &[f64], bias: Option<&[f64]>, dims: &ConvDims, out: &mut [f64]) {
        let (n, cin, cout, k) = (dims.n, dims.cin, dims.cout, dims.k);
        let (in_sp, out_sp) = (dims.in_sp(), dims.out_sp());
        for b in 0..n {
            for co in 0..cout {
                for o_d in 0..dims.od {
                    for o_h in 0..dims.oh {
                        for o_w in 0..dims.ow {
                            let mut acc = bias.map_or(0.0, |bv| bv[co]);
                            for ci in 0..cin {
                                for kd in 0..k {
                                    for kh in 0..k {
                                        for kw in 0..k {
                                            let id = (o_d * dims.stride + kd) as isize - dims.pad as isize;
                                            let ih = (o_h * dims.stride + kh) as isize - dims.pad as isize;
                                            let iw = (o_w * dims.stride + kw) as isize - dims.pad as isize;
                                            if id < 0 || ih < 0 || iw < 0 {
                                                continue;
                                            }
                                            let (id, ih, iw) = (id as usize, ih as usize, iw as usize);
                                            if id >= dims.d || ih >= dims.h || iw >= dims.w {
                                                continue;
                                            }
                                            let xi = (b * cin + ci) * in_sp + (id * dims.h + ih) * dims.w + iw;
                                            let wi = ((co * cin + ci) * k * k + kd * k + kh) * k + kw;
                                            acc += x[xi] * wt[wi];
                                        }
                                    }
                                }
                            }
                            out[(b * cout + co) * out_sp + (o_d * dims.oh + o_h) * dims.ow + o_w] = acc;
                        }
                    }
                }
            }
        }
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 33) as f64 / (1u64 << 31) as f64) - 0.5
    }

    fn rand_vec(n: usize, seed: &mut u64) -> Vec<f64> {
        (0..n).map(|_| lcg(seed)).collect()
    }

    #[test]
    fn out_extent_formula() {
        // floor((4 + 2*1 - 3)/2) + 1 = 2
        assert_eq!(conv_out_extent(4, 3, 2, 1), 2);
        assert_eq!(conv_out_extent(4, 3, 1, 1), 4);
        assert_eq!(conv_out_extent(4, 1, 1, 0), 4);
        assert_eq!(conv_out_extent(4, 4, 2, 1), 2);
    }

    #[test]
    fn all_ones_center_voxel_sums_kernel_support() {
        // 1x1x4x4x4 input of ones, 3^3 kernel of ones, pad 1: the center
        // voxels see the full 27-tap support.
        let dims = ConvDims::new(1, 1, 4, 4, 4, 1, 3, 1, 1);
        let x = vec![1.0f64; 64];
        let wt = vec![1.0f64; 27];
        let mut out = vec![0.0f64; 64];
        conv3d_forward(&x, &wt, None, &dims, &mut out);
        // voxel (1,1,1) in the 4^3 output grid
        let idx = (1 * 4 + 1) * 4 + 1;
        assert_eq!(out[idx], 27.0);
        // corner voxel (0,0,0) sees 2x2x2 of the kernel
        assert_eq!(out[0], 8.0);
    }

    #[test]
    fn stride_two_halves_extent() {
        let dims = ConvDims::new(1, 1, 4, 4, 4, 1, 3, 2, 1);
        assert_eq!((dims.od, dims.oh, dims.ow), (2, 2, 2));
    }

    #[test]
    fn forward_matches_naive_reference_across_shapes() {
        let mut seed = 11u64;
        for &(n, cin, sp, cout, k, stride, pad) in &[
            (1usize, 1usize, 4usize, 2usize, 3usize, 1usize, 1usize),
            (1, 3, 5, 4, 3, 1, 1),
            (2, 2, 6, 3, 3, 2, 1),
            (1, 4, 4, 2, 4, 2, 1),
            (1, 2, 7, 5, 1, 1, 0),
            (1, 2, 8, 2, 7, 1, 3),
            (1, 5, 5, 5, 3, 1, 0),
        ] {
            let dims = ConvDims::new(n, cin, sp, sp, sp, cout, k, stride, pad);
            let x = rand_vec(n * cin * sp * sp * sp, &mut seed);
            let wt = rand_vec(cout * cin * k * k * k, &mut seed);
            let bias = rand_vec(cout, &mut seed);
            let mut got = vec![0.0; n * cout * dims.out_sp()];
            let mut want = vec![0.0; got.len()];
            conv3d_forward(&x, &wt, Some(&bias), &dims, &mut got);
            ref_forward(&x, &wt, Some(&bias), &dims, &mut want);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "shape {dims:?}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn input_gradient_matches_transpose_of_forward() {
        // <conv(x), g> must equal <x, grad_input(g)> for the adjoint to be
        // the exact transpose.
        let mut seed = 23u64;
        for &(cin, sp, cout, k, stride, pad) in &[
            (2usize, 5usize, 3usize, 3usize, 1usize, 1usize),
            (3, 6, 2, 4, 2, 1),
            (1, 4, 4, 1, 1, 0),
            (2, 8, 2, 7, 1, 3),
        ] {
            let dims = ConvDims::new(1, cin, sp, sp, sp, cout, k, stride, pad);
            let x = rand_vec(cin * sp * sp * sp, &mut seed);
            let wt = rand_vec(cout * cin * k * k * k, &mut seed);
            let g = rand_vec(cout * dims.out_sp(), &mut seed);
            let mut y = vec![0.0; g.len()];
            conv3d_forward(&x, &wt, None, &dims, &mut y);
            let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
            let mut gx = vec![0.0; x.len()];
            conv3d_grad_input(&g, &wt, &dims, &mut gx);
            let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn weight_gradient_matches_directional_derivative() {
        // d/de <conv(x; w + e*dw), g> at e=0 equals <grad_w, dw>.
        let mut seed = 37u64;
        for &(cin, sp, cout, k, stride, pad) in &[
            (2usize, 5usize, 3usize, 3usize, 1usize, 1usize),
            (2, 6, 2, 4, 2, 1),
            (3, 4, 2, 1, 1, 0),
        ] {
            let dims = ConvDims::new(1, cin, sp, sp, sp, cout, k, stride, pad);
            let x = rand_vec(cin * sp * sp * sp, &mut seed);
            let wt = rand_vec(cout * cin * k * k * k, &mut seed);
            let dw = rand_vec(wt.len(), &mut seed);
            let g = rand_vec(cout * dims.out_sp(), &mut seed);
            let mut gw = vec![0.0; wt.len()];
            conv3d_grad_weight(&x, &g, &dims, &mut gw);
            let got: f64 = gw.iter().zip(&dw).map(|(a, b)| a * b).sum();
            let mut y = vec![0.0; g.len()];
            let wplus: Vec<f64> = wt.iter().zip(&dw).map(|(a, b)| a + 1e-6 * b).collect();
            conv3d_forward(&x, &wplus, None, &dims, &mut y);
            let fplus: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
            conv3d_forward(&x, &wt, None, &dims, &mut y);
            let f0: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
            let fd = (fplus - f0) / 1e-6;
            assert!(
                (got - fd).abs() < 1e-4 * (1.0 + got.abs()),
                "{got} vs fd {fd}"
            );
        }
    }

    #[test]
    fn gradient_kernels_accumulate_into_existing_buffers() {
        let dims = ConvDims::new(1, 1, 3, 3, 3, 1, 3, 1, 1);
        let x = vec![1.0f64; 27];
        let wt = vec![1.0f64; 27];
        let g = vec![1.0f64; 27];
        let mut gx = vec![5.0f64; 27];
        conv3d_grad_input(&g, &wt, &dims, &mut gx);
        let mut gx2 = vec![0.0f64; 27];
        conv3d_grad_input(&g, &wt, &dims, &mut gx2);
        for (a, b) in gx.iter().zip(&gx2) {
            assert!((a - (b + 5.0)).abs() < 1e-12);
        }
        let mut gw = vec![2.0f64; 27];
        conv3d_grad_weight(&x, &g, &dims, &mut gw);
        let mut gw2 = vec![0.0f64; 27];
        conv3d_grad_weight(&x, &g, &dims, &mut gw2);
        for (a, b) in gw.iter().zip(&gw2) {
            assert!((a - (b + 2.0)).abs() < 1e-12);
        }
    }
}
