//! Forward kernels. The tape wraps these with vector-Jacobian products; they
//! are also usable directly on frozen tensors.

use std::cmp::Ordering;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Rows with L2 norm below this are left unchanged and flagged as degenerate.
pub const EPS_NORM: f64 = 1e-12;
/// Floor applied to probabilities before taking logs.
pub const EPS_PROB: f64 = 1e-7;
/// Floor on `q` inside KL; only guards against underflowed zeros.
pub const EPS_KL: f64 = f64::MIN_POSITIVE;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_matrix("matmul")?;
    b.expect_matrix("matmul")?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::raw(m, n, out))
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let (m, n) = (a.rows(), b.rows());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            out[i * n + j] = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    Ok(Tensor::raw(m, n, out))
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let ar = a.row(p);
        let br = b.row(p);
        for (i, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::raw(m, n, out))
}

pub fn row_softmax(x: &Tensor) -> Result<Tensor> {
    x.expect_matrix("row_softmax")?;
    if !x.is_finite() {
        return Err(Error::NonFinite("row_softmax"));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Normalized rows plus, per row, its original norm and whether it was degenerate.
pub struct Normalized {
    pub values: Tensor,
    pub norms: Vec<f64>,
    pub degenerate: Vec<bool>,
}

pub fn l2_normalize_rows(x: &Tensor) -> Normalized {
    let mut values = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    let mut degenerate = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = values.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms.push(norm);
        if norm < EPS_NORM {
            degenerate.push(true);
        } else {
            degenerate.push(false);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    Normalized {
        values,
        norms,
        degenerate,
    }
}

pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::shape("cosine_similarity", a.shape(), b.shape()));
    }
    let na = l2_normalize_rows(a).values;
    let nb = l2_normalize_rows(b).values;
    matmul_nt(&na, &nb)
}

/// Per-row top-`k` column indices and values, largest first; ties go to the lower index.
pub fn topk_rows(x: &Tensor, k: usize) -> Result<(Vec<Vec<usize>>, Vec<Vec<f64>>)> {
    if k == 0 || k > x.cols() {
        return Err(Error::invalid(format!(
            "top-k: k = {k} outside 1..={}",
            x.cols()
        )));
    }
    let mut indices = Vec::with_capacity(x.rows());
    let mut values = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&i, &j| {
            row[j]
                .partial_cmp(&row[i])
                .unwrap_or(Ordering::Equal)
                .then(i.cmp(&j))
        });
        order.truncate(k);
        values.push(order.iter().map(|&i| row[i]).collect());
        indices.push(order);
    }
    Ok((indices, values))
}

fn check_probability_row(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid(format!("{what} has negative or non-finite mass")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

/// `Σ pᵢ log(pᵢ/qᵢ)` with `0·log 0 = 0` and `q` floored at [`EPS_KL`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("kl_divergence", &[p.len()], &[q.len()]));
    }
    check_probability_row(p, "p")?;
    check_probability_row(q, "q")?;
    Ok(kl_unchecked(p, q))
}

pub(crate) fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, &qi)| pi > 0.0 && pi != qi)
        .map(|(&pi, &qi)| pi * (pi / qi.max(EPS_KL)).ln())
        .sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary focal term for probability `p` against target `y ∈ {0, 1}`.
pub fn focal_term(p: f64, y: f64, alpha: f64, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("focal: probability {p} outside [0, 1]")));
    }
    if y != 0.0 && y != 1.0 {
        return Err(Error::invalid(format!("focal: target {y} is not binary")));
    }
    let p = p.clamp(EPS_PROB, 1.0 - EPS_PROB);
    Ok(focal_unchecked(p, y, alpha, gamma))
}

pub(crate) fn focal_unchecked(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    if y == 1.0 {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// Derivative of the focal term with respect to the pre-sigmoid logit.
pub(crate) fn focal_dlogit(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    if y == 1.0 {
        let q = 1.0 - p;
        alpha * (gamma * p * q.powf(gamma) * p.ln() - q.powf(gamma + 1.0))
    } else {
        let q = 1.0 - p;
        (1.0 - alpha) * (p.powf(gamma + 1.0) - gamma * p.powf(gamma) * q * q.ln())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_cases() {
        let b = Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
        let a = Tensor::from_rows(&[vec![1., 0.]]).unwrap();
        let c = Tensor::from_rows(&[vec![2.], vec![5.]]).unwrap();
        assert_eq!(matmul(&a, &c).unwrap().data(), &[2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = Tensor::randn(3, 4, 1.0, &mut rng);
            let b = Tensor::randn(4, 2, 1.0, &mut rng);
            let fast = matmul(&a, &b).unwrap();
            let slow = naive_matmul(&a, &b);
            for (x, y) in fast.data().iter().zip(slow.data()) {
                assert!((x - y).abs() < 1e-12);
            }
            let nt = matmul_nt(&a, &b.transpose()).unwrap();
            let tn = matmul_tn(&a.transpose(), &b).unwrap();
            for ((x, y), z) in fast.data().iter().zip(nt.data()).zip(tn.data()) {
                assert!((x - y).abs() < 1e-12 && (x - z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let err = matmul(&Tensor::zeros(2, 3), &Tensor::zeros(2, 3))
            .unwrap_err()
            .to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_cases() {
        let x = Tensor::from_rows(&[vec![0., 0., 0.], vec![1., 2., 3.]]).unwrap();
        let s = row_softmax(&x).unwrap();
        for v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let want = [0.09003, 0.24473, 0.66524];
        for (v, w) in s.row(1).iter().zip(want) {
            assert!((v - w).abs() < 1e-4);
        }
        let big = row_softmax(&Tensor::from_rows(&[vec![1000., 0.]]).unwrap()).unwrap();
        assert!(big.is_finite());
        assert!((big.get(0, 0) - 1.0).abs() < 1e-12 && big.get(0, 1) < 1e-12);
    }

    #[test]
    fn normalize_cases() {
        let n = l2_normalize_rows(&Tensor::from_rows(&[vec![3., 4.], vec![0., 0.]]).unwrap());
        assert_eq!(n.values.row(0), &[0.6, 0.8]);
        assert_eq!(n.values.row(1), &[0.0, 0.0]);
        assert_eq!(n.degenerate, vec![false, true]);
        let again = l2_normalize_rows(&Tensor::from_rows(&[vec![0.6, 0.8]]).unwrap());
        assert!((again.values.get(0, 0) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn cosine_cases() {
        let a = Tensor::from_rows(&[vec![1., 1.]]).unwrap();
        let b = Tensor::from_rows(&[vec![1., 0.], vec![0., 1.], vec![2., 2.]]).unwrap();
        let s = cosine_similarity(&a, &b).unwrap();
        assert!((s.get(0, 0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((s.get(0, 2) - 1.0).abs() < 1e-12);
        let o = cosine_similarity(
            &Tensor::from_rows(&[vec![1., 0.]]).unwrap(),
            &Tensor::from_rows(&[vec![0., 1.]]).unwrap(),
        )
        .unwrap();
        assert_eq!(o.item(), 0.0);
        assert!(cosine_similarity(&a, &Tensor::zeros(1, 3)).is_err());
    }

    #[test]
    fn topk_cases() {
        let x = Tensor::from_rows(&[vec![0.1, 0.7, 0.2], vec![0.5, 0.5, 0.5]]).unwrap();
        let (idx, vals) = topk_rows(&x, 2).unwrap();
        assert_eq!(idx[0], vec![1, 2]);
        assert_eq!(vals[0], vec![0.7, 0.2]);
        assert_eq!(topk_rows(&x, 1).unwrap().0[1], vec![0]);
        assert!(topk_rows(&x, 0).is_err());
        assert!(topk_rows(&x, 4).is_err());
    }

    #[test]
    fn kl_cases() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        assert!(kl_divergence(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(kl_divergence(&[-0.5, 1.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn focal_cases() {
        assert!((focal_term(0.5, 1.0, 1.0, 0.0).unwrap() - 2f64.ln()).abs() < 1e-12);
        let v = focal_term(0.5, 1.0, 0.25, 2.0).unwrap();
        assert!((v - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((v - 0.04332).abs() < 1e-5);
        assert!(focal_term(1.0 - 1e-12, 1.0, 0.25, 2.0).unwrap() < 1e-15);
        assert!(focal_term(1.5, 1.0, 0.25, 2.0).is_err());
        assert!(focal_term(0.5, 0.5, 0.25, 2.0).is_err());
    }

    #[test]
    fn focal_dlogit_matches_difference() {
        for &y in &[0.0, 1.0] {
            for &x in &[-2.0, -0.3, 0.0, 0.7, 2.5] {
                let h = 1e-6;
                let f = |z: f64| focal_unchecked(sigmoid(z), y, 0.25, 2.0);
                let fd = (f(x + h) - f(x - h)) / (2.0 * h);
                let an = focal_dlogit(sigmoid(x), y, 0.25, 2.0);
                assert!((fd - an).abs() < 1e-8, "y={y} x={x} {fd} {an}");
            }
        }
    }
}
