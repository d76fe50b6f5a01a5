use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{min_eigenvalue, psd_factor, symmetrize, PSD_TOL};
use crate::autodiff::gemm;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Zero-mean Gaussian pair `(b, b̃)` for a linear map `v -> Wᵀ v` with
/// `Cov(b) = Cov(b̃) = Σ_b` and `Cov(b, b̃) = Σ_b + Wᵀ diag(s_l) W − diag(s_next)`.
#[derive(Clone, Debug)]
pub struct BiasPairModel {
    /// `d_l x d_next`.
    pub w: DMatrix<f64>,
    pub s_l: Vec<f64>,
    pub s_next: Vec<f64>,
    pub sigma_b: DMatrix<f64>,
    // b = p + q, b̃ = p − q with p, q independent
    p_factor: DMatrix<f64>,
    q_factor: DMatrix<f64>,
}

impl BiasPairModel {
    pub fn new(w: DMatrix<f64>, s_l: Vec<f64>, s_next: Vec<f64>, sigma_b: DMatrix<f64>) -> Result<Self> {
        let (dl, dn) = w.shape();
        if s_l.len() != dl || s_next.len() != dn || sigma_b.shape() != (dn, dn) {
            return Err(Error::invalid(format!(
                "bias pair shapes disagree: W {dl}x{dn}, s_l {}, s_next {}, sigma_b {:?}",
                s_l.len(),
                s_next.len(),
                sigma_b.shape()
            )));
        }
        let mut m = Self {
            w,
            s_l,
            s_next,
            sigma_b,
            p_factor: DMatrix::zeros(0, 0),
            q_factor: DMatrix::zeros(0, 0),
        };
        let lam = min_eigenvalue(&m.joint_covariance());
        if lam < -PSD_TOL {
            return Err(Error::NotPsd { min_eigenvalue: lam });
        }
        let k = m.coupling();
        m.p_factor = psd_factor(&(&m.sigma_b + &k * 0.5))?;
        m.q_factor = psd_factor(&(&k * -0.5))?;
        Ok(m)
    }

    /// Feasible default: `s_next` from the absolute row sums of `Wᵀ diag(s_l) W`
    /// (so `diag(s_next) − Wᵀ diag(s_l) W` is diagonally dominant), and
    /// `Σ_b = c I` with `c` the smallest power of ten covering the remaining
    /// negative curvature.
    pub fn with_default_bias(w: DMatrix<f64>, s_l: Vec<f64>) -> Result<Self> {
        if s_l.len() != w.nrows() {
            return Err(Error::invalid("s_l length must match W rows"));
        }
        let kp = transformed_s(&w, &s_l);
        let dn = w.ncols();
        let s_next: Vec<f64> = (0..dn).map(|i| kp.row(i).iter().map(|v| v.abs()).sum()).collect();
        let mut gap = -&kp;
        for (i, s) in s_next.iter().enumerate() {
            gap[(i, i)] += s;
        }
        let need = nalgebra::SymmetricEigen::new(symmetrize(&gap)).eigenvalues.max() / 2.0;
        let c = if need > 0.0 { 10f64.powf(need.log10().ceil()) } else { 0.0 };
        Self::new(w, s_l, s_next, DMatrix::identity(dn, dn) * c)
    }

    pub fn dim(&self) -> usize {
        self.s_next.len()
    }

    /// `Wᵀ diag(s_l) W − diag(s_next)`.
    pub fn coupling(&self) -> DMatrix<f64> {
        let mut k = transformed_s(&self.w, &self.s_l);
        for (i, s) in self.s_next.iter().enumerate() {
            k[(i, i)] -= s;
        }
        k
    }

    pub fn off_diagonal(&self) -> DMatrix<f64> {
        &self.sigma_b + self.coupling()
    }

    pub fn joint_covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        let off = self.off_diagonal();
        let mut j = DMatrix::zeros(2 * d, 2 * d);
        j.view_mut((0, 0), (d, d)).copy_from(&self.sigma_b);
        j.view_mut((d, d), (d, d)).copy_from(&self.sigma_b);
        j.view_mut((0, d), (d, d)).copy_from(&off);
        j.view_mut((d, 0), (d, d)).copy_from(&off.transpose());
        symmetrize(&j)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let mut b = vec![0.0; d];
        let mut bt = vec![0.0; d];
        self.sample_into(rng, &mut b, &mut bt);
        (b, bt)
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, b: &mut [f64], bt: &mut [f64]) {
        let d = self.dim();
        let zp: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let zq: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..d {
            let mut p = 0.0;
            let mut q = 0.0;
            for k in 0..d {
                p += self.p_factor[(i, k)] * zp[k];
                q += self.q_factor[(i, k)] * zq[k];
            }
            b[i] = p + q;
            bt[i] = p - q;
        }
    }
}

impl BiasPairModel {
    /// `rows` independent pairs, row-major `rows x dim` each.
    pub fn sample_rows<R: Rng + ?Sized>(&self, rng: &mut R, rows: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let zp: Vec<f64> = (0..rows * d).map(|_| rng.sample(StandardNormal)).collect();
        let zq: Vec<f64> = (0..rows * d).map(|_| rng.sample(StandardNormal)).collect();
        let mut p = vec![0.0; rows * d];
        let mut q = vec![0.0; rows * d];
        // z Lᵀ with L column-major
        let (di, one) = (d as isize, 1isize);
        gemm(rows, d, d, &zp, di, one, self.p_factor.as_slice(), di, one, 0.0, &mut p, di, one);
        gemm(rows, d, d, &zq, di, one, self.q_factor.as_slice(), di, one, 0.0, &mut q, di, one);
        let b = p.iter().zip(&q).map(|(a, c)| a + c).collect();
        let bt = p.iter().zip(&q).map(|(a, c)| a - c).collect();
        (b, bt)
    }
}

fn transformed_s(w: &DMatrix<f64>, s: &[f64]) -> DMatrix<f64> {
    let mut sw = w.clone();
    for (i, &si) in s.iter().enumerate() {
        sw.row_mut(i).scale_mut(si);
    }
    symmetrize(&(w.transpose() * sw))
}

/// Per-feature knockoff gap `Var(a) − Cov(a, ã)` from matched samples,
/// clamped at zero. Rank-2 inputs give one value per column; NCHW inputs
/// pool over examples and positions to give one value per channel.
pub fn estimate_feature_s(real: &Tensor, knockoff: &Tensor) -> Result<Vec<f64>> {
    real.expect_same_shape(knockoff, "estimate_feature_s")?;
    let shape = real.shape();
    let (groups, inner) = match shape.len() {
        2 => (shape[1], 1),
        4 => (shape[1], shape[2] * shape[3]),
        _ => {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "expected N x D or N x C x H x W".into(),
            })
        }
    };
    let n = shape[0];
    let count = (n * inner) as f64;
    if count < 2.0 {
        return Err(Error::invalid("need at least two samples per feature"));
    }
    let mut sr = vec![0.0; groups];
    let mut sk = vec![0.0; groups];
    let mut srr = vec![0.0; groups];
    let mut srk = vec![0.0; groups];
    let (r, k) = (real.data(), knockoff.data());
    for i in 0..n {
        for g in 0..groups {
            let off = (i * groups + g) * inner;
            for t in off..off + inner {
                sr[g] += r[t];
                sk[g] += k[t];
                srr[g] += r[t] * r[t];
                srk[g] += r[t] * k[t];
            }
        }
    }
    Ok((0..groups)
        .map(|g| {
            let (mr, mk) = (sr[g] / count, sk[g] / count);
            let var = srr[g] / count - mr * mr;
            let cov = srk[g] / count - mr * mk;
            (var - cov).max(0.0)
        })
        .collect())
}
