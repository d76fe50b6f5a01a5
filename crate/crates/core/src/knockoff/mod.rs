//! Second-order Gaussian knockoffs for inputs, Gaussian bias pairs for
//! linear maps, and moment-level exchangeability checks.

mod bias;
mod cache;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::gemm;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::indexed_stream;
use crate::tensor::Tensor;

pub use bias::{estimate_feature_s, BiasPairModel};
pub use cache::{decode_knockoff_cache, encode_knockoff_cache, read_knockoff_cache, write_knockoff_cache, CACHE_MAGIC};

/// Default ridge, relative to the mean diagonal of the sample covariance.
pub const DEFAULT_RIDGE: f64 = 1e-3;
/// Eigenvalue floor used for every PSD assertion.
pub const PSD_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct KnockoffModel {
    pub mu: Vec<f64>,
    pub sigma: DMatrix<f64>,
    pub s: Vec<f64>,
    /// Absolute ridge added to the diagonal of `sigma`.
    pub ridge: f64,
    // diag(s) * sigma^-1
    shrink: DMatrix<f64>,
    // lower factor of the conditional covariance
    cond_factor: DMatrix<f64>,
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `L` with `L Lᵀ = m` for symmetric PSD `m`: Cholesky when it succeeds,
/// otherwise eigenvectors scaled by clamped square-root eigenvalues.
pub fn psd_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = symmetrize(m);
    if let Some(ch) = m.clone().cholesky() {
        return Ok(ch.l());
    }
    let eig = SymmetricEigen::new(m);
    let min = eig.eigenvalues.min();
    let scale = eig.eigenvalues.amax().max(1.0);
    if min < -PSD_TOL * scale {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    let mut v = eig.eigenvectors;
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let r = lam.max(0.0).sqrt();
        v.column_mut(j).scale_mut(r);
    }
    Ok(v)
}

/// Equicorrelated diagonal: `min(2 λ_min(corr), 1)` on the correlation scale,
/// mapped back to covariance units.
pub fn choose_s_equicorrelated(sigma: &DMatrix<f64>) -> Vec<f64> {
    let d = sigma.nrows();
    let sd: Vec<f64> = (0..d).map(|i| sigma[(i, i)].max(0.0).sqrt()).collect();
    let corr = DMatrix::from_fn(d, d, |i, j| {
        if sd[i] == 0.0 || sd[j] == 0.0 {
            if i == j {
                1.0
            } else {
                0.0
            }
        } else {
            sigma[(i, j)] / (sd[i] * sd[j])
        }
    });
    let lam = min_eigenvalue(&symmetrize(&corr)).max(0.0);
    let common = (2.0 * lam).min(1.0);
    sd.iter().map(|s| common * s * s).collect()
}

fn check_matrix_rows(data: &Tensor) -> Result<(usize, usize)> {
    if data.rank() < 2 {
        return Err(Error::InvalidShape {
            shape: data.shape().to_vec(),
            reason: "expected one row per observation".into(),
        });
    }
    Ok((data.shape()[0], data.row_len()))
}

/// Sample mean and unbiased covariance of the rows of `data`.
pub fn mean_and_covariance(data: &Tensor) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let (n, d) = check_matrix_rows(data)?;
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 observations, got {n}")));
    }
    let x = data.data();
    let mut mu = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (m, v) in mu.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut centered = x.to_vec();
    for row in centered.chunks_exact_mut(d) {
        for (v, m) in row.iter_mut().zip(&mu) {
            *v -= m;
        }
    }
    // column-major d x d result of Xcᵀ Xc
    let mut cov = vec![0.0; d * d];
    gemm(d, n, d, &centered, 1, d as isize, &centered, d as isize, 1, 0.0, &mut cov, 1, d as isize);
    let mut sigma = DMatrix::from_vec(d, d, cov) / (n - 1) as f64;
    sigma = symmetrize(&sigma);
    Ok((mu, sigma))
}

/// Fits mean, ridged covariance and equicorrelated `s` to observation rows.
/// Labels are deliberately not an input.
pub fn fit_knockoff_model(data: &Tensor, relative_ridge: f64) -> Result<KnockoffModel> {
    if let Some(index) = data.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    if relative_ridge < 0.0 || !relative_ridge.is_finite() {
        return Err(Error::invalid(format!("ridge must be a non-negative number, got {relative_ridge}")));
    }
    let (mu, mut sigma) = mean_and_covariance(data)?;
    let d = mu.len();
    let mean_diag = (0..d).map(|i| sigma[(i, i)]).sum::<f64>() / d as f64;
    let mut ridge = relative_ridge * mean_diag;
    if ridge == 0.0 && relative_ridge > 0.0 {
        // all-constant data: fall back to an absolute ridge
        ridge = relative_ridge;
    }
    for i in 0..d {
        sigma[(i, i)] += ridge;
    }
    let s = choose_s_equicorrelated(&sigma);
    KnockoffModel::from_moments(mu, sigma, s, ridge)
}

impl KnockoffModel {
    pub fn from_moments(mu: Vec<f64>, sigma: DMatrix<f64>, s: Vec<f64>, ridge: f64) -> Result<Self> {
        let d = mu.len();
        if sigma.nrows() != d || sigma.ncols() != d || s.len() != d {
            return Err(Error::invalid(format!(
                "knockoff moments disagree: mu {d}, sigma {}x{}, s {}",
                sigma.nrows(),
                sigma.ncols(),
                s.len()
            )));
        }
        if s.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::invalid("knockoff diagonal must be non-negative"));
        }
        let (shrink, cond_factor) = if s.iter().all(|&v| v == 0.0) {
            (DMatrix::zeros(d, d), DMatrix::zeros(d, d))
        } else {
            let chol = sigma.clone().cholesky().ok_or_else(|| {
                Error::LinAlg("covariance is singular; refit with a positive ridge".into())
            })?;
            let sdiag = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&s));
            // sigma^-1 diag(s) = (diag(s) sigma^-1)ᵀ
            let shrink = chol.solve(&sdiag).transpose();
            let cond = &sdiag * 2.0 - &shrink * &sdiag;
            (shrink, psd_factor(&cond)?)
        };
        let model = Self {
            mu,
            sigma,
            s,
            ridge,
            shrink,
            cond_factor,
        };
        let lam = model.joint_min_eigenvalue();
        if lam < -PSD_TOL {
            return Err(Error::NotPsd { min_eigenvalue: lam });
        }
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Smallest eigenvalue of `2Σ − diag(s)`.
    pub fn joint_min_eigenvalue(&self) -> f64 {
        let mut m = &self.sigma * 2.0;
        for (i, s) in self.s.iter().enumerate() {
            m[(i, i)] -= s;
        }
        min_eigenvalue(&symmetrize(&m))
    }

    /// Target covariance of `[x, x̃]`.
    pub fn joint_covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut off = self.sigma.clone();
        for (i, s) in self.s.iter().enumerate() {
            off[(i, i)] -= s;
        }
        let mut j = DMatrix::zeros(2 * d, 2 * d);
        j.view_mut((0, 0), (d, d)).copy_from(&self.sigma);
        j.view_mut((d, d), (d, d)).copy_from(&self.sigma);
        j.view_mut((0, d), (d, d)).copy_from(&off);
        j.view_mut((d, 0), (d, d)).copy_from(&off);
        j
    }

    /// One draw of x̃ given x.
    pub fn sample<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let t = Tensor::from_parts(vec![1, x.len()], x.to_vec())?;
        let z: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        Ok(self.sample_rows_with_noise(&t, &z)?.into_data())
    }

    /// Knockoffs for every row of `x`; row `i` draws its noise from the
    /// `(seed, name, i + offset)` stream, so results do not depend on batching.
    pub fn sample_rows(&self, x: &Tensor, seed: u64, name: &str, offset: u64) -> Result<Tensor> {
        let (n, d) = check_matrix_rows(x)?;
        if d != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "sample_knockoff",
                lhs: vec![d],
                rhs: vec![self.dim()],
            });
        }
        let mut z = Vec::with_capacity(n * d);
        for i in 0..n {
            let mut rng = indexed_stream(seed, name, offset + i as u64);
            z.extend((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        }
        self.sample_rows_with_noise(x, &z)
    }

    fn sample_rows_with_noise(&self, x: &Tensor, z: &[f64]) -> Result<Tensor> {
        let (n, d) = check_matrix_rows(x)?;
        if d != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "sample_knockoff",
                lhs: vec![d],
                rhs: vec![self.dim()],
            });
        }
        let mut out = x.data().to_vec();
        let mut centered = x.data().to_vec();
        for row in centered.chunks_exact_mut(d) {
            for (v, m) in row.iter_mut().zip(&self.mu) {
                *v -= m;
            }
        }
        // out = x - (x - mu) shrinkᵀ + z Lᵀ, all row-major n x d
        let mut delta = vec![0.0; n * d];
        let sh = self.shrink.as_slice();
        let l = self.cond_factor.as_slice();
        // column-major shrink read with row stride d is shrinkᵀ
        gemm(n, d, d, &centered, d as isize, 1, sh, d as isize, 1, 0.0, &mut delta, d as isize, 1);
        let mut noise = vec![0.0; n * d];
        gemm(n, d, d, z, d as isize, 1, l, d as isize, 1, 0.0, &mut noise, d as isize, 1);
        for ((o, dl), nz) in out.iter_mut().zip(&delta).zip(&noise) {
            *o = *o - dl + nz;
        }
        Tensor::from_parts(x.shape().to_vec(), out)
    }
}

/// Max absolute difference between the empirical mean and covariance of
/// `[real, knockoff]` and of the same matrix with columns `j` and `d + j`
/// exchanged for every `j` in `subset`.
pub fn swap_moment_test(real: &Tensor, knockoff: &Tensor, subset: &[usize]) -> Result<f64> {
    real.expect_same_shape(knockoff, "swap_moment_test")?;
    let (n, d) = check_matrix_rows(real)?;
    if let Some(&j) = subset.iter().find(|&&j| j >= d) {
        return Err(Error::invalid(format!("swap index {j} out of range for dimension {d}")));
    }
    if subset.is_empty() {
        return Ok(0.0);
    }
    let mut joint = Vec::with_capacity(n * 2 * d);
    for (r, k) in real.data().chunks_exact(d).zip(knockoff.data().chunks_exact(d)) {
        joint.extend_from_slice(r);
        joint.extend_from_slice(k);
    }
    let joint = Tensor::from_parts(vec![n, 2 * d], joint)?;
    let (mu, cov) = mean_and_covariance(&joint)?;
    let mut perm: Vec<usize> = (0..2 * d).collect();
    for &j in subset {
        perm.swap(j, d + j);
    }
    let mut worst = 0.0f64;
    for a in 0..2 * d {
        worst = worst.max((mu[a] - mu[perm[a]]).abs());
        for b in 0..2 * d {
            worst = worst.max((cov[(a, b)] - cov[(perm[a], perm[b])]).abs());
        }
    }
    Ok(worst)
}

/// Knockoff counterpart of every example, rounded to the cache's `f32`
/// precision and clamped to the dataset's valid range.
pub fn generate_knockoff_dataset(
    model: &KnockoffModel,
    dataset: &Dataset,
    seed: u64,
    cache_path: Option<&std::path::Path>,
) -> Result<Dataset> {
    let n = dataset.len();
    let d = dataset.example_dim();
    if d != model.dim() {
        return Err(Error::ShapeMismatch {
            op: "generate_knockoff_dataset",
            lhs: dataset.example_shape().to_vec(),
            rhs: vec![model.dim()],
        });
    }
    let bounds = dataset.value_bounds();
    let spatial = d / dataset.channels();
    let mut out = Vec::with_capacity(n * d);
    const CHUNK: usize = 1024;
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let rows = dataset.images.select_rows(&idx)?;
        let rows = rows.reshape(&[idx.len(), d])?;
        let k = model.sample_rows(&rows, seed, "knockoff", start as u64)?;
        for row in k.data().chunks_exact(d) {
            for (j, &v) in row.iter().enumerate() {
                let v = match &bounds {
                    Some(b) => v.clamp(b[j / spatial].0, b[j / spatial].1),
                    None => v,
                };
                out.push(v as f32 as f64);
            }
        }
    }
    let images = Tensor::from_parts(dataset.images.shape().to_vec(), out)?;
    if let Some(path) = cache_path {
        write_knockoff_cache(path, &images)?;
    }
    Ok(Dataset {
        images,
        ..dataset.clone()
    })
}
