//! Normal-Inverse-Wishart prior over a Gaussian's `(mean, covariance)`,
//! its conjugate update and point estimates.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{cholesky, LowerTriangular, Matrix};

/// Lower bound on the diagonal of the trainable scale factor.
pub const DIAG_FLOOR: f64 = 1e-6;

/// NIW prior `(m, κ, S = L Lᵀ, ν)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NiwPrior {
    pub(crate) mean: Vec<f64>,
    pub(crate) kappa: f64,
    pub(crate) scale_factor: LowerTriangular,
    pub(crate) nu: f64,
}

impl NiwPrior {
    pub fn new(mean: Vec<f64>, kappa: f64, scale_factor: LowerTriangular, nu: f64) -> Result<Self> {
        let prior = NiwPrior {
            mean,
            kappa,
            scale_factor,
            nu,
        };
        prior.validate()?;
        Ok(prior)
    }

    /// The untrained starting point: `m = 0, κ = 1, S = I, ν = d`.
    pub fn standard(dim: usize) -> Self {
        assert!(dim >= 1, "prior dimension must be at least 1");
        NiwPrior {
            mean: vec![0.0; dim],
            kappa: 1.0,
            scale_factor: LowerTriangular::identity(dim),
            nu: dim as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::InvalidPrior("dimension must be at least 1".into()));
        }
        if self.scale_factor.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: self.scale_factor.dim(),
            });
        }
        if !self.mean.iter().all(|v| v.is_finite()) || !self.scale_factor.is_finite() {
            return Err(Error::InvalidPrior("non-finite parameter".into()));
        }
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(Error::InvalidPrior(format!("kappa = {} must be positive", self.kappa)));
        }
        if !(self.nu > d as f64 - 1.0) || !self.nu.is_finite() {
            return Err(Error::InvalidPrior(format!(
                "nu = {} must exceed d - 1 = {}",
                self.nu,
                d - 1
            )));
        }
        if let Some(v) = self.scale_factor.diag().find(|v| !(*v >= DIAG_FLOOR)) {
            return Err(Error::InvalidPrior(format!(
                "scale factor diagonal entry {v:e} below floor {DIAG_FLOOR:e}"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    /// Cholesky factor `L` of the scale matrix.
    pub fn scale_factor(&self) -> &LowerTriangular {
        &self.scale_factor
    }

    /// Scale matrix `S = L Lᵀ`.
    pub fn scale(&self) -> Matrix {
        self.scale_factor.gram()
    }

    /// Parameters as one flat vector `[m, packed L, κ, ν]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(flat_len(self.dim()));
        out.extend_from_slice(&self.mean);
        out.extend_from_slice(self.scale_factor.packed());
        out.push(self.kappa);
        out.push(self.nu);
        out
    }

    /// Inverse of [`NiwPrior::flatten`]; validates the result.
    pub fn from_flat(dim: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != flat_len(dim) {
            return Err(Error::DimensionMismatch {
                expected: flat_len(dim),
                found: flat.len(),
            });
        }
        let tri = dim * (dim + 1) / 2;
        NiwPrior::new(
            flat[..dim].to_vec(),
            flat[dim + tri],
            LowerTriangular::from_packed(dim, flat[dim..dim + tri].to_vec())?,
            flat[dim + tri + 1],
        )
    }

    /// Draws `(μ, Σ)`: `Σ ~ IW(S, ν)` by Bartlett decomposition, then
    /// `μ | Σ ~ N(m, Σ / κ)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Matrix) {
        let sigma = sample_inverse_wishart(&self.scale_factor, self.nu, rng);
        let chol = cholesky(&sigma).expect("inverse-Wishart draw is positive definite");
        let z: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let lz = chol.mul_vec(&z);
        let s = self.kappa.sqrt().recip();
        let mu = self.mean.iter().zip(&lz).map(|(m, v)| m + s * v).collect();
        (mu, sigma)
    }
}

/// Length of [`NiwPrior::flatten`] in `dim` dimensions.
pub fn flat_len(dim: usize) -> usize {
    dim + dim * (dim + 1) / 2 + 2
}

/// `Σ ~ IW(S, ν)` with `S = L Lᵀ`.
///
/// Uses `Σ⁻¹ = L⁻ᵀ A Aᵀ L⁻¹ ~ W(S⁻¹, ν)` with `A` the Bartlett factor
/// (`A_ii² ~ χ²(ν − i)`, standard normal below the diagonal), so
/// `Σ = (L A⁻ᵀ)(L A⁻ᵀ)ᵀ`.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(scale_factor: &LowerTriangular, nu: f64, rng: &mut R) -> Matrix {
    let d = scale_factor.dim();
    assert!(nu > d as f64 - 1.0, "inverse-Wishart needs nu > d - 1");
    let mut a = LowerTriangular::zeros(d);
    for i in 0..d {
        let chi = ChiSquared::new(nu - i as f64).expect("positive chi-square dof");
        a.set(i, i, chi.sample(rng).sqrt());
        for j in 0..i {
            a.set(i, j, rng.sample(StandardNormal));
        }
    }
    // Rows of A⁻¹ are the columns of A⁻ᵀ.
    let mut b = Matrix::zeros(d, d); // b = A⁻ᵀ
    let mut e = vec![0.0; d];
    for j in 0..d {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = a.solve_lower(&e); // column j of A⁻¹ = row j of A⁻ᵀ
        for (i, v) in col.into_iter().enumerate() {
            b[(j, i)] = v;
        }
    }
    // m = L b
    let mut m = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            m[(i, j)] = (0..=i).map(|k| scale_factor.get(i, k) * b[(k, j)]).sum();
        }
    }
    let mut sigma = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            let v: f64 = (0..d).map(|k| m[(i, k)] * m[(j, k)]).sum();
            sigma[(i, j)] = v;
            sigma[(j, i)] = v;
        }
    }
    sigma
}

/// Posterior NIW parameters for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPosterior {
    pub mean: Vec<f64>,
    pub kappa: f64,
    /// `S_j`, dense symmetric.
    pub scale: Matrix,
    pub nu: f64,
    pub scale_chol: LowerTriangular,
    /// Number of support samples absorbed.
    pub count: usize,
    pub sample_mean: Vec<f64>,
    /// Scatter of the support about its own mean.
    pub scatter: Matrix,
}

impl ClassPosterior {
    #[inline]
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Reinterprets the posterior as a prior for further updates.
    pub fn as_prior(&self) -> NiwPrior {
        NiwPrior {
            mean: self.mean.clone(),
            kappa: self.kappa,
            scale_factor: self.scale_chol.clone(),
            nu: self.nu,
        }
    }
}

/// Gaussian point estimate `(μ, Σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub sigma: Matrix,
    pub chol_sigma: LowerTriangular,
}

impl GaussianParams {
    pub fn new(mu: Vec<f64>, sigma: Matrix) -> Result<Self> {
        let chol_sigma = cholesky(&sigma)?;
        Ok(GaussianParams { mu, sigma, chol_sigma })
    }
}

/// Sample mean and scatter `Σ (x − x̄)(x − x̄)ᵀ`.
pub(crate) fn mean_and_scatter<S: AsRef<[f64]>>(samples: &[S], dim: usize) -> Result<(Vec<f64>, Matrix)> {
    if samples.is_empty() {
        return Err(Error::EmptySupport);
    }
    let mut mean = vec![0.0; dim];
    for s in samples {
        let s = s.as_ref();
        if s.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: s.len(),
            });
        }
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    let k = samples.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    let mut scatter = Matrix::zeros(dim, dim);
    let mut r = vec![0.0; dim];
    for s in samples {
        for ((ri, v), m) in r.iter_mut().zip(s.as_ref()).zip(&mean) {
            *ri = v - m;
        }
        scatter.add_outer(1.0, &r, &r);
    }
    Ok((mean, scatter))
}

/// Conjugate update of `prior` with the `K ≥ 1` samples of one class.
pub fn niw_posterior<S: AsRef<[f64]>>(prior: &NiwPrior, samples: &[S]) -> Result<ClassPosterior> {
    let d = prior.dim();
    let (sample_mean, scatter) = mean_and_scatter(samples, d)?;
    let k = samples.len() as f64;
    let kappa_n = prior.kappa + k;
    let mean: Vec<f64> = prior
        .mean
        .iter()
        .zip(&sample_mean)
        .map(|(m, x)| (prior.kappa * m + k * x) / kappa_n)
        .collect();
    let diff: Vec<f64> = sample_mean.iter().zip(&prior.mean).map(|(x, m)| x - m).collect();
    let mut scale = prior.scale();
    scale.add_assign(&scatter);
    scale.add_outer(prior.kappa * k / kappa_n, &diff, &diff);
    let scale_chol = cholesky(&scale)?;
    Ok(ClassPosterior {
        mean,
        kappa: kappa_n,
        scale,
        nu: prior.nu + k,
        scale_chol,
        count: samples.len(),
        sample_mean,
        scatter,
    })
}

/// Posterior mode: `μ = m_j`, `Σ = S_j / (ν_j + d + 1)`.
pub fn map_estimate(post: &ClassPosterior) -> Result<GaussianParams> {
    let d = post.dim() as f64;
    let denom = post.nu + d + 1.0;
    let sigma = post.scale.scaled(1.0 / denom);
    GaussianParams::new(post.mean.clone(), sigma)
}

/// Diagonal loading used by the maximum-likelihood baseline.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Ridge {
    /// `1e-6 · tr(Σ̂) / d`, or `1e-6` when the sample covariance vanishes.
    #[default]
    Auto,
    Fixed(f64),
}

/// Per-class maximum-likelihood Gaussians (sample mean, biased sample
/// covariance) with diagonal loading.
pub fn mle_qda<S: AsRef<[f64]>>(classes: &[Vec<S>], ridge: Ridge) -> Result<Vec<GaussianParams>> {
    let dim = classes
        .iter()
        .flat_map(|c| c.first())
        .map(|s| s.as_ref().len())
        .next()
        .ok_or(Error::EmptyInput)?;
    classes
        .iter()
        .map(|samples| {
            let (mu, scatter) = mean_and_scatter(samples, dim)?;
            let mut sigma = scatter.scaled(1.0 / samples.len() as f64);
            let load = match ridge {
                Ridge::Fixed(r) => r,
                Ridge::Auto => {
                    let t = sigma.trace() / dim as f64;
                    if t > 0.0 {
                        1e-6 * t
                    } else {
                        1e-6
                    }
                }
            };
            for i in 0..dim {
                sigma[(i, i)] += load;
            }
            GaussianParams::new(mu, sigma)
        })
        .collect()
}
