//! Activation functions used between encoder scores and concept weights.
//!
//! Sparsemax is the Euclidean projection of a score vector onto the
//! probability simplex. It has a closed form: sort the scores in descending
//! order, take the largest `k` for which
//! `z_(k) + (1 - Σ_{i≤k} z_(i)) / k > 0`, set `τ = (Σ_{i≤k} z_(i) - 1) / k`,
//! and output `max(z - τ, 0)`. The result is exactly sparse and sums to one.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Output of [`sparsemax`]: the projected point together with its support
/// and threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    pub values: Vec<f64>,
    /// Indices with strictly positive mass, ascending.
    pub support: Vec<usize>,
    pub threshold: f64,
}

impl SparseCode {
    pub fn support_size(&self) -> usize {
        self.support.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_finite(z: &[f64], what: &'static str) -> Result<()> {
    if z.is_empty() {
        return Err(Error::invalid(format!("{what} needs at least one score")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

/// Indices sorted by descending score; equal scores keep ascending index order.
fn descending_order(z: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..z.len()).collect();
    idx.sort_by(|&a, &b| {
        z[b].partial_cmp(&z[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

pub fn sparsemax(z: &[f64]) -> Result<SparseCode> {
    check_finite(z, "sparsemax")?;
    let order = descending_order(z);

    let mut cumsum = 0.0;
    let mut k = 0;
    let mut cumsum_k = 0.0;
    for (r, &i) in order.iter().enumerate() {
        cumsum += z[i];
        let rank = (r + 1) as f64;
        if z[i] + (1.0 - cumsum) / rank > 0.0 {
            k = r + 1;
            cumsum_k = cumsum;
        }
    }
    // r = 1 always satisfies the condition, so k >= 1.
    debug_assert!(k >= 1);
    let tau = (cumsum_k - 1.0) / k as f64;

    let mut values = vec![0.0; z.len()];
    let mut support = Vec::with_capacity(k);
    for &i in &order[..k] {
        let v = z[i] - tau;
        if v > 0.0 {
            values[i] = v;
            support.push(i);
        }
    }
    support.sort_unstable();
    Ok(SparseCode {
        values,
        support,
        threshold: tau,
    })
}

/// Vector-Jacobian product of sparsemax at the point that produced `code`.
///
/// On the support the Jacobian is `I - 11ᵀ/k`; off the support it is zero.
pub fn sparsemax_vjp(code: &SparseCode, upstream: &[f64]) -> Result<Vec<f64>> {
    if upstream.len() != code.values.len() {
        return Err(Error::shape(
            "sparsemax_vjp",
            (1, code.values.len()),
            (1, upstream.len()),
        ));
    }
    let mut grad = vec![0.0; upstream.len()];
    if code.support.is_empty() {
        return Ok(grad);
    }
    let mean = code.support.iter().map(|&i| upstream[i]).sum::<f64>() / code.support.len() as f64;
    for &i in &code.support {
        grad[i] = upstream[i] - mean;
    }
    Ok(grad)
}

/// Brute-force reference for [`sparsemax`], built directly from the KKT
/// conditions of the simplex projection.
///
/// Every nonempty support `S` is tried; `τ_S = (Σ_{i∈S} z_i - 1)/|S|` is
/// feasible when `z_i > τ_S` on `S` and `z_j ≤ τ_S` off `S`. Exponential in
/// the dimension, so it is capped at 16 coordinates and meant for
/// verification only.
pub mod oracle {
    use super::SparseCode;
    use crate::error::{Error, Result};

    pub const MAX_DIM: usize = 16;

    pub fn sparsemax_oracle(z: &[f64]) -> Result<SparseCode> {
        let m = z.len();
        if m == 0 || m > MAX_DIM {
            return Err(Error::invalid(format!(
                "oracle handles 1..={MAX_DIM} coordinates, got {m}"
            )));
        }
        // sums[mask] = Σ_{i∈mask} z_i, built from the mask without its lowest bit.
        let mut sums = vec![0.0; 1usize << m];
        let mut best: Option<(f64, u32, f64)> = None;
        for mask in 1u32..(1u32 << m) {
            let low = mask.trailing_zeros() as usize;
            let sum = sums[(mask & (mask - 1)) as usize] + z[low];
            sums[mask as usize] = sum;
            let tau = (sum - 1.0) / mask.count_ones() as f64;
            // Largest KKT violation; feasible candidates score <= 0.
            let bound = best.map_or(f64::INFINITY, |(b, _, _)| b);
            let mut violation = f64::NEG_INFINITY;
            for (i, &zi) in z.iter().enumerate() {
                let v = if mask >> i & 1 == 1 {
                    tau - zi
                } else {
                    zi - tau
                };
                violation = violation.max(v);
                if violation >= bound {
                    break;
                }
            }
            if violation < bound {
                best = Some((violation, mask, tau));
            }
        }
        let (_, mask, tau) = best.expect("at least one candidate support");
        let support: Vec<usize> = (0..m).filter(|i| mask >> i & 1 == 1).collect();
        let mut values = vec![0.0; m];
        for &i in &support {
            values[i] = z[i] - tau;
        }
        Ok(SparseCode {
            values,
            support,
            threshold: tau,
        })
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `g_i = p_i (u_i - Σ_j p_j u_j)`.
pub fn softmax_vjp(probs: &[f64], upstream: &[f64]) -> Vec<f64> {
    let inner: f64 = probs.iter().zip(upstream).map(|(p, u)| p * u).sum();
    probs
        .iter()
        .zip(upstream)
        .map(|(p, u)| p * (u - inner))
        .collect()
}

pub fn relu(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| v.max(0.0)).collect()
}

/// Gradient mask of ReLU (zero at the kink).
pub fn relu_vjp(z: &[f64], upstream: &[f64]) -> Vec<f64> {
    z.iter()
        .zip(upstream)
        .map(|(&v, &u)| if v > 0.0 { u } else { 0.0 })
        .collect()
}

pub const DEFAULT_JUMPRELU_BANDWIDTH: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct JumpReluParams {
    pub thresholds: Vec<f64>,
    pub bandwidth: f64,
}

impl JumpReluParams {
    pub fn new(thresholds: Vec<f64>, bandwidth: f64) -> Result<Self> {
        if thresholds.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::invalid("JumpReLU thresholds must be nonnegative"));
        }
        if !(bandwidth > 0.0) {
            return Err(Error::invalid("JumpReLU bandwidth must be positive"));
        }
        Ok(Self {
            thresholds,
            bandwidth,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JumpReluOutput {
    pub values: Vec<f64>,
    /// Rectangle-kernel density `1[|z - θ| < ε/2] / ε` per coordinate.
    ///
    /// The straight-through pseudo-derivatives are
    /// `∂H(z-θ)/∂θ ≈ -kernel` and `∂(z·H(z-θ))/∂θ ≈ -θ·kernel`.
    pub kernel: Vec<f64>,
}

impl JumpReluOutput {
    /// Threshold gradient of `Σ_i H(z_i - θ_i)` (the L0 count).
    pub fn l0_threshold_grad(&self) -> Vec<f64> {
        self.kernel.iter().map(|k| -k).collect()
    }
}

pub fn jumprelu(z: &[f64], params: &JumpReluParams) -> Result<JumpReluOutput> {
    if z.len() != params.thresholds.len() {
        return Err(Error::shape(
            "jumprelu",
            (1, z.len()),
            (1, params.thresholds.len()),
        ));
    }
    let eps = params.bandwidth;
    let mut values = Vec::with_capacity(z.len());
    let mut kernel = Vec::with_capacity(z.len());
    for (&v, &theta) in z.iter().zip(&params.thresholds) {
        values.push(if v > theta { v } else { 0.0 });
        kernel.push(if (v - theta).abs() < 0.5 * eps {
            1.0 / eps
        } else {
            0.0
        });
    }
    Ok(JumpReluOutput { values, kernel })
}

/// Indices of the `k` largest entries; ties go to the lower index.
fn top_indices(z: &[f64], k: usize) -> Vec<usize> {
    let mut order = descending_order(z);
    order.truncate(k);
    order
}

/// Keeps the `k` largest entries of `relu(z)` and zeros the rest.
pub fn topk(z: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > z.len() {
        return Err(Error::invalid(format!(
            "top-k needs 1 <= k <= {}, got {k}",
            z.len()
        )));
    }
    let mut out = vec![0.0; z.len()];
    for i in top_indices(z, k) {
        out[i] = z[i].max(0.0);
    }
    Ok(out)
}

/// Keeps the `n·k` largest entries of `relu(z)` across the whole batch.
///
/// Ties at the cut go to the entry that comes first in row-major order.
pub fn batch_topk(z: &Matrix, k: usize) -> Result<Matrix> {
    let (n, m) = z.shape();
    if k == 0 || k > m {
        return Err(Error::invalid(format!(
            "batch top-k needs 1 <= k <= {m}, got {k}"
        )));
    }
    let mut out = Matrix::zeros(n, m);
    let flat = z.as_slice();
    for i in top_indices(flat, n * k) {
        out.as_mut_slice()[i] = flat[i].max(0.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::oracle::sparsemax_oracle;
    use super::*;
    use crate::numeric::Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn sparsemax_uniform_on_ties() {
        let c = sparsemax(&[0.0, 0.0]).unwrap();
        assert_eq!(c.values, vec![0.5, 0.5]);
        assert_eq!(c.threshold, -0.5);
        assert_eq!(c.support_size(), 2);
    }

    #[test]
    fn sparsemax_one_hot_on_unit_margin() {
        let c = sparsemax(&[2.0, 0.5]).unwrap();
        assert_eq!(c.values, vec![1.0, 0.0]);
        assert_eq!(c.threshold, 1.0);
        assert_eq!(c.support, vec![0]);

        let c = sparsemax(&[1.5, 0.3, 0.2]).unwrap();
        assert_eq!(c.values, vec![1.0, 0.0, 0.0]);
        assert_eq!(c.threshold, 0.5);
        assert_eq!(c.support_size(), 1);
    }

    #[test]
    fn sparsemax_three_way_split() {
        let z = [0.6, 0.5, 0.1];
        let c = sparsemax(&z).unwrap();
        let expected = [8.0 / 15.0, 6.5 / 15.0, 0.5 / 15.0];
        assert!(close(&c.values, &expected, 1e-12), "{:?}", c.values);
        assert!((c.threshold - 1.0 / 15.0).abs() < 1e-12);
        assert_eq!(c.support_size(), 3);
        let o = sparsemax_oracle(&z).unwrap();
        assert!(close(&c.values, &o.values, 1e-12));
        let o = sparsemax_oracle(&[1.5, 0.3, 0.2]).unwrap();
        assert_eq!(o.values, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn sparsemax_rejects_bad_input() {
        assert!(sparsemax(&[]).is_err());
        assert!(matches!(
            sparsemax(&[0.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(sparsemax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn oracle_bounds() {
        assert!(sparsemax_oracle(&[0.0; 17]).is_err());
        assert!(sparsemax_oracle(&[]).is_err());
        assert_eq!(
            sparsemax_oracle(&[0.0, 0.0]).unwrap().values,
            vec![0.5, 0.5]
        );
        assert_eq!(
            sparsemax_oracle(&[2.0, 0.5]).unwrap().values,
            vec![1.0, 0.0]
        );
    }

    #[test]
    fn sparsemax_agrees_with_oracle() {
        let mut rng = Rng::new(5);
        for trial in 0..300 {
            let m = 2 + trial % 11;
            let z: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
            let a = sparsemax(&z).unwrap();
            let b = sparsemax_oracle(&z).unwrap();
            assert!(close(&a.values, &b.values, 1e-9));
            assert_eq!(a.support, b.support);
        }
    }

    #[test]
    fn vjp_annihilates_constants_on_full_support() {
        let c = sparsemax(&[0.1, 0.0, -0.05, 0.02]).unwrap();
        assert_eq!(c.support_size(), 4);
        let g = sparsemax_vjp(&c, &[3.0; 4]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn vjp_ignores_dead_coordinates() {
        let c = sparsemax(&[2.0, 0.5, -1.0]).unwrap();
        let g = sparsemax_vjp(&c, &[0.0, 4.0, -2.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
        assert!(sparsemax_vjp(&c, &[1.0]).is_err());
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = Rng::new(17);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 50 {
            let z: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let code = sparsemax(&z).unwrap();
            if z.iter().any(|v| (v - code.threshold).abs() < 1e-3) {
                continue;
            }
            let u: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let g = sparsemax_vjp(&code, &u).unwrap();
            for j in 0..8 {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[j] += h;
                zm[j] -= h;
                let fp: f64 = sparsemax(&zp)
                    .unwrap()
                    .values
                    .iter()
                    .zip(&u)
                    .map(|(p, u)| p * u)
                    .sum();
                let fm: f64 = sparsemax(&zm)
                    .unwrap()
                    .values
                    .iter()
                    .zip(&u)
                    .map(|(p, u)| p * u)
                    .sum();
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-5, "coord {j}: fd {fd} vs {}", g[j]);
            }
            checked += 1;
        }
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[1000.0, 0.0]);
        assert_eq!(p[0], 1.0);
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]);
        assert!(close(&p, &[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0], 1e-15));
    }

    #[test]
    fn softmax_vjp_matches_finite_differences() {
        let z = [0.3, -1.2, 0.8, 0.1];
        let u = [1.0, -0.5, 2.0, 0.25];
        let g = softmax_vjp(&softmax(&z), &u);
        let h = 1e-6;
        for j in 0..4 {
            let mut zp = z;
            let mut zm = z;
            zp[j] += h;
            zm[j] -= h;
            let f = |v: &[f64]| softmax(v).iter().zip(&u).map(|(p, u)| p * u).sum::<f64>();
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(relu(&[-3.0, -0.1]), vec![0.0, 0.0]);
        let z = [-0.7, 0.4, 1.3];
        let g = relu_vjp(&z, &[1.0, 1.0, 1.0]);
        let h = 1e-6;
        for j in 0..3 {
            let mut zp = z;
            let mut zm = z;
            zp[j] += h;
            zm[j] -= h;
            let fd = (relu(&zp).iter().sum::<f64>() - relu(&zm).iter().sum::<f64>()) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn jumprelu_cases() {
        let zero = JumpReluParams::new(vec![0.0; 3], 1e-3).unwrap();
        let z = [0.5, 2.0, 0.1];
        assert_eq!(jumprelu(&z, &zero).unwrap().values, relu(&z));

        let p = JumpReluParams::new(vec![1.0, 1.0], 1e-3).unwrap();
        assert_eq!(jumprelu(&[0.5, 2.0], &p).unwrap().values, vec![0.0, 2.0]);

        assert!(JumpReluParams::new(vec![-0.1], 1e-3).is_err());
        assert!(JumpReluParams::new(vec![0.1], 0.0).is_err());
    }

    #[test]
    fn jumprelu_threshold_pseudo_gradient_by_hand() {
        // ε = 0.1: only coordinates within 0.05 of their threshold get kernel 10.
        let p = JumpReluParams::new(vec![1.0, 0.5, 0.2], 0.1).unwrap();
        let out = jumprelu(&[1.04, 0.3, 0.17], &p).unwrap();
        assert_eq!(out.values, vec![1.04, 0.0, 0.0]);
        assert_eq!(out.kernel, vec![10.0, 0.0, 10.0]);
        assert_eq!(out.l0_threshold_grad(), vec![-10.0, 0.0, -10.0]);
    }

    #[test]
    fn topk_cases() {
        assert_eq!(topk(&[3.0, 1.0, 2.0], 2).unwrap(), vec![3.0, 0.0, 2.0]);
        assert_eq!(topk(&[1.0, 1.0, 1.0], 1).unwrap(), vec![1.0, 0.0, 0.0]);
        let z = [0.4, -1.0, 2.0];
        assert_eq!(topk(&z, 3).unwrap(), relu(&z));
        assert!(topk(&z, 0).is_err());
        assert!(topk(&z, 4).is_err());
    }

    #[test]
    fn batch_topk_cases() {
        let z = Matrix::from_rows(&[[5.0, 0.1], [4.0, 3.0]]).unwrap();
        let out = batch_topk(&z, 1).unwrap();
        assert_eq!(out, Matrix::from_rows(&[[5.0, 0.0], [4.0, 0.0]]).unwrap());

        // Oracle: sort every entry and cut at n·k.
        let mut all: Vec<f64> = z.as_slice().to_vec();
        all.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let cut = all[1];
        for (&o, &v) in out.as_slice().iter().zip(z.as_slice()) {
            assert_eq!(o, if v >= cut { v } else { 0.0 });
        }

        let row = [0.3, 2.0, -1.0, 0.9];
        let single = batch_topk(&Matrix::row_vector(&row), 2).unwrap();
        assert_eq!(single.as_slice(), topk(&row, 2).unwrap().as_slice());
        assert!(batch_topk(&z, 3).is_err());
    }
}
