//! Whole-volume quality metrics: PSNR, NMSE, and windowed SSIM, plus the
//! per-subject report with mean/std aggregation and CSV export.

use crate::error::{Result, VoxError};
use crate::tensor::array::Array;
use crate::tensor::element::Element;

pub const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_same_shape<T: Element>(x: &Array<T>, r: &Array<T>, what: &str) -> Result<()> {
    if x.shape() != r.shape() {
        return Err(VoxError::shape(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            x.shape(),
            r.shape()
        )));
    }
    Ok(())
}

/// `10 * log10(peak^2 / MSE)` in dB; identical volumes report +infinity.
pub fn psnr<T: Element>(x: &Array<T>, reference: &Array<T>, peak: f64) -> Result<f64> {
    check_same_shape(x, reference, "psnr")?;
    if peak <= 0.0 {
        return Err(VoxError::config(format!("psnr peak must be > 0, got {peak}")));
    }
    let mut se = 0.0f64;
    for (a, b) in x.data().iter().zip(reference.data()) {
        let d = a.to_f64() - b.to_f64();
        se += d * d;
    }
    let mse = se / x.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// `||x - ref||^2 / ||ref||^2`.
pub fn nmse<T: Element>(x: &Array<T>, reference: &Array<T>) -> Result<f64> {
    check_same_shape(x, reference, "nmse")?;
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (a, b) in x.data().iter().zip(reference.data()) {
        let (av, bv) = (a.to_f64(), b.to_f64());
        let d = av - bv;
        num += d * d;
        den += bv * bv;
    }
    if den == 0.0 {
        return Err(VoxError::config(
            "nmse: reference volume is identically zero",
        ));
    }
    Ok(num / den)
}

/// 3D summed-area table with a zero slab prepended on each axis, so box
/// sums become eight lookups.
struct Sat {
    d: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Sat {
    fn build(shape: &[usize], values: impl Iterator<Item = f64>) -> Sat {
        let (d, h, w) = (shape[0], shape[1], shape[2]);
        let (hd, hh, hw) = (d + 1, h + 1, w + 1);
        let mut s = vec![0.0f64; hd * hh * hw];
        let mut src = values;
        for z in 1..hd {
            for y in 1..hh {
                for x in 1..hw {
                    let v = src.next().unwrap();
                    let at = |zz: usize, yy: usize, xx: usize| s[(zz * hh + yy) * hw + xx];
                    s[(z * hh + y) * hw + x] = v
                        + at(z - 1, y, x)
                        + at(z, y - 1, x)
                        + at(z, y, x - 1)
                        - at(z - 1, y - 1, x)
                        - at(z - 1, y, x - 1)
                        - at(z, y - 1, x - 1)
                        + at(z - 1, y - 1, x - 1);
                }
            }
        }
        Sat { d, h, w, data: s }
    }

    fn box_sum(&self, z0: usize, y0: usize, x0: usize, k: usize) -> f64 {
        debug_assert!(z0 + k <= self.d && y0 + k <= self.h && x0 + k <= self.w);
        let (hh, hw) = (self.h + 1, self.w + 1);
        let at = |zz: usize, yy: usize, xx: usize| self.data[(zz * hh + yy) * hw + xx];
        let (z1, y1, x1) = (z0 + k, y0 + k, x0 + k);
        at(z1, y1, x1) - at(z0, y1, x1) - at(z1, y0, x1) - at(z1, y1, x0)
            + at(z0, y0, x1)
            + at(z0, y1, x0)
            + at(z1, y0, x0)
            - at(z0, y0, x0)
    }
}

/// Mean over all stride-1 7^3 windows of the standard luminance/contrast/
/// structure product with C1 = 0.01^2, C2 = 0.03^2 (peak 1).
pub fn ssim<T: Element>(x: &Array<T>, reference: &Array<T>) -> Result<f64> {
    check_same_shape(x, reference, "ssim")?;
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(VoxError::shape(format!(
            "ssim expects a rank-3 volume, got {shape:?}"
        )));
    }
    let k = SSIM_WINDOW;
    if shape.iter().any(|&e| e < k) {
        return Err(VoxError::shape(format!(
            "ssim: volume {shape:?} smaller than the {k}^3 window"
        )));
    }
    let xs = Sat::build(shape, x.data().iter().map(|v| v.to_f64()));
    let ys = Sat::build(shape, reference.data().iter().map(|v| v.to_f64()));
    let xxs = Sat::build(shape, x.data().iter().map(|v| v.to_f64() * v.to_f64()));
    let yys = Sat::build(
        shape,
        reference.data().iter().map(|v| v.to_f64() * v.to_f64()),
    );
    let xys = Sat::build(
        shape,
        x.data()
            .iter()
            .zip(reference.data())
            .map(|(a, b)| a.to_f64() * b.to_f64()),
    );
    let n = (k * k * k) as f64;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for z in 0..=shape[0] - k {
        for y in 0..=shape[1] - k {
            for xw in 0..=shape[2] - k {
                let mx = xs.box_sum(z, y, xw, k) / n;
                let my = ys.box_sum(z, y, xw, k) / n;
                let vx = xxs.box_sum(z, y, xw, k) / n - mx * mx;
                let vy = yys.box_sum(z, y, xw, k) / n - my * my;
                let cov = xys.box_sum(z, y, xw, k) / n - mx * my;
                let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug)]
pub struct MetricRow {
    pub subject: String,
    pub src: String,
    pub tar: String,
    pub psnr: f64,
    pub nmse: f64,
    pub ssim: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(vals: &[f64]) -> MeanStd {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    pub fn aggregate(&self) -> Option<(MeanStd, MeanStd, MeanStd)> {
        if self.rows.is_empty() {
            return None;
        }
        let p: Vec<f64> = self.rows.iter().map(|r| r.psnr).collect();
        let n: Vec<f64> = self.rows.iter().map(|r| r.nmse).collect();
        let s: Vec<f64> = self.rows.iter().map(|r| r.ssim).collect();
        Some((mean_std(&p), mean_std(&n), mean_std(&s)))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject_id,src,tar,psnr,nmse,ssim\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6e},{:.6}\n",
                r.subject, r.src, r.tar, r.psnr, r.nmse, r.ssim
            ));
        }
        if let Some((p, n, s)) = self.aggregate() {
            out.push_str(&format!(
                "aggregate,,,{:.3} \u{b1} {:.3},{:.3e} \u{b1} {:.3e},{:.3} \u{b1} {:.3}\n",
                p.mean, p.std, n.mean, n.std, s.mean, s.std
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vol(shape: [usize; 3], f: impl FnMut(usize) -> f64) -> Array<f64> {
        Array::from_fn(shape.to_vec(), f)
    }

    #[test]
    fn psnr_identity_is_infinite() {
        let x = vol([4, 4, 4], |i| i as f64 / 63.0);
        assert!(psnr(&x, &x, 1.0).unwrap().is_infinite());
    }

    #[test]
    fn psnr_constant_offset_is_twenty_db() {
        let x = vol([5, 5, 5], |_| 0.6);
        let r = vol([5, 5, 5], |_| 0.5);
        let db = psnr(&x, &r, 1.0).unwrap();
        assert!((db - 20.0).abs() < 1e-9, "got {db}");
    }

    #[test]
    fn psnr_rejects_bad_inputs() {
        let x = vol([2, 2, 2], |_| 0.0);
        let y = vol([2, 2, 3], |_| 0.0);
        assert!(psnr(&x, &y, 1.0).is_err());
        assert!(psnr(&x, &x, 0.0).is_err());
    }

    #[test]
    fn nmse_closed_forms() {
        let r = vol([3, 3, 3], |i| 0.1 + (i % 7) as f64 * 0.1);
        assert_eq!(nmse(&r, &r).unwrap(), 0.0);
        let zero = vol([3, 3, 3], |_| 0.0);
        assert!((nmse(&zero, &r).unwrap() - 1.0).abs() < 1e-12);
        let double = Array::new(
            r.shape().to_vec(),
            r.data().iter().map(|v| 2.0 * v).collect(),
        )
        .unwrap();
        assert!((nmse(&double, &r).unwrap() - 1.0).abs() < 1e-12);
        assert!(nmse(&r, &zero).is_err());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = vol([8, 8, 8], |_| rng.random::<f64>());
        let y = vol([8, 8, 8], |_| rng.random::<f64>());
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        let s = ssim(&x, &y).unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn ssim_rejects_small_volumes() {
        let x = vol([6, 8, 8], |_| 0.5);
        assert!(ssim(&x, &x).is_err());
        let r5 = Array::<f64>::zeros(vec![1, 1, 8, 8, 8]);
        assert!(ssim(&r5, &r5).is_err());
    }

    fn ssim_brute_force(x: &Array<f64>, y: &Array<f64>) -> f64 {
        let sh = x.shape();
        let k = SSIM_WINDOW;
        let n = (k * k * k) as f64;
        let idx = |z: usize, yy: usize, xx: usize| (z * sh[1] + yy) * sh[2] + xx;
        let mut total = 0.0;
        let mut count = 0;
        for z0 in 0..=sh[0] - k {
            for y0 in 0..=sh[1] - k {
                for x0 in 0..=sh[2] - k {
                    let mut wx = Vec::with_capacity(k * k * k);
                    let mut wy = Vec::with_capacity(k * k * k);
                    for dz in 0..k {
                        for dy in 0..k {
                            for dx in 0..k {
                                wx.push(x.data()[idx(z0 + dz, y0 + dy, x0 + dx)]);
                                wy.push(y.data()[idx(z0 + dz, y0 + dy, x0 + dx)]);
                            }
                        }
                    }
                    let mx = wx.iter().sum::<f64>() / n;
                    let my = wy.iter().sum::<f64>() / n;
                    let vx = wx.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / n;
                    let vy = wy.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / n;
                    let cov = wx
                        .iter()
                        .zip(&wy)
                        .map(|(a, b)| (a - mx) * (b - my))
                        .sum::<f64>()
                        / n;
                    let num = (2.0 * mx * my + 1e-4) * (2.0 * cov + 9e-4);
                    let den = (mx * mx + my * my + 1e-4) * (vx + vy + 9e-4);
                    total += num / den;
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_per_window_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let x = vol([9, 9, 9], |_| rng.random::<f64>());
            let y = vol([9, 9, 9], |_| rng.random::<f64>());
            let fast = ssim(&x, &y).unwrap();
            let slow = ssim_brute_force(&x, &y);
            assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
        }
    }

    #[test]
    fn metrics_invariant_under_identical_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = vol([8, 8, 8], |_| rng.random::<f64>());
        let y = vol([8, 8, 8], |_| 0.2 + 0.6 * rng.random::<f64>());
        let perm = |a: &Array<f64>| {
            let mut out = Array::<f64>::zeros(a.shape().to_vec());
            let sh = a.shape().to_vec();
            for z in 0..sh[0] {
                for yy in 0..sh[1] {
                    for xx in 0..sh[2] {
                        let src = (z * sh[1] + yy) * sh[2] + xx;
                        let dst = (xx * sh[1] + z) * sh[2] + yy;
                        out.data_mut()[dst] = a.data()[src];
                    }
                }
            }
            out
        };
        let (xp, yp) = (perm(&x), perm(&y));
        assert!((psnr(&x, &y, 1.0).unwrap() - psnr(&xp, &yp, 1.0).unwrap()).abs() < 1e-12);
        assert!((nmse(&x, &y).unwrap() - nmse(&xp, &yp).unwrap()).abs() < 1e-12);
        assert!((ssim(&x, &y).unwrap() - ssim(&xp, &yp).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn report_aggregate_recomputes_from_rows() {
        let mut rep = MetricReport::default();
        for (i, (p, n, s)) in [(30.0, 0.01, 0.9), (28.0, 0.02, 0.8), (26.0, 0.04, 0.7)]
            .iter()
            .enumerate()
        {
            rep.push(MetricRow {
                subject: format!("s{i}"),
                src: "A".into(),
                tar: "B".into(),
                psnr: *p,
                nmse: *n,
                ssim: *s,
            });
        }
        let (p, n, s) = rep.aggregate().unwrap();
        assert!((p.mean - 28.0).abs() < 1e-12);
        let want_var: f64 = [30.0f64, 28.0, 26.0]
            .iter()
            .map(|v| (v - 28.0) * (v - 28.0))
            .sum::<f64>()
            / 3.0;
        assert!((p.std - want_var.sqrt()).abs() < 1e-12);
        assert!((n.mean - 0.07 / 3.0).abs() < 1e-12);
        assert!((s.mean - 0.8).abs() < 1e-12);
        let csv = rep.to_csv();
        assert!(csv.starts_with("subject_id,src,tar,psnr,nmse,ssim\n"));
        assert!(csv.lines().count() == 5);
        assert!(csv.contains("aggregate"));
        assert!(csv.contains('\u{b1}'));
    }
}
