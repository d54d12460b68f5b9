//! QDA models built from a prior and a support set.
//!
//! Three decision rules share one model type:
//! - [`Mode::Map`]: Gaussian class-conditionals at the posterior mode.
//! - [`Mode::FullBayes`]: Student-t posterior predictives with the
//!   parameters integrated out.
//! - [`Mode::TiedLda`]: per-class posterior means with one covariance
//!   pooled across classes.
//!
//! Class priors are uniform, so scores are class-conditional
//! log-densities and probabilities come from normalizing
//! `log_scores / temperature`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::niw::{map_estimate, niw_posterior, ClassPosterior, GaussianParams, NiwPrior};
use crate::numerics::{cholesky, mvn_logpdf, softmax, student_t_log_norm, LowerTriangular, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Mode {
    Map,
    #[default]
    FullBayes,
    TiedLda,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Map => "map",
            Mode::FullBayes => "fb",
            Mode::TiedLda => "lda",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "map" => Ok(Mode::Map),
            "fb" | "full-bayes" | "fullbayes" => Ok(Mode::FullBayes),
            "lda" | "tied-lda" | "tiedlda" => Ok(Mode::TiedLda),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?} (map | fb | lda)"))),
        }
    }
}

/// Class-conditional log-density evaluator.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum ClassDensity {
    Gaussian {
        mean: Vec<f64>,
        chol: LowerTriangular,
    },
    StudentT {
        loc: Vec<f64>,
        chol: LowerTriangular,
        dof: f64,
        log_norm: f64,
    },
}

impl ClassDensity {
    fn gaussian(params: &GaussianParams) -> Self {
        ClassDensity::Gaussian {
            mean: params.mu.clone(),
            chol: params.chol_sigma.clone(),
        }
    }

    /// Posterior predictive `T(m_j, (κ_j + 1) / (κ_j (ν_j − d + 1)) S_j, ν_j − d + 1)`.
    fn student_t(post: &ClassPosterior) -> Self {
        let d = post.dim();
        let dof = post.nu - d as f64 + 1.0;
        let c = (post.kappa + 1.0) / (post.kappa * dof);
        ClassDensity::StudentT {
            loc: post.mean.clone(),
            chol: post.scale_chol.scaled(c.sqrt()),
            dof,
            log_norm: student_t_log_norm(dof, d),
        }
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        match self {
            ClassDensity::Gaussian { mean, chol } => mvn_logpdf(x, mean, chol),
            ClassDensity::StudentT {
                loc,
                chol,
                dof,
                log_norm,
            } => {
                if x.len() != loc.len() {
                    return Err(Error::DimensionMismatch {
                        expected: loc.len(),
                        found: x.len(),
                    });
                }
                let r: Vec<f64> = x.iter().zip(loc).map(|(a, b)| a - b).collect();
                let q = chol.mahalanobis_sq(&r);
                let d = x.len() as f64;
                Ok(log_norm - chol.log_det() - 0.5 * (dof + d) * (q / dof).ln_1p())
            }
        }
    }
}

#[derive(Debug, Clone)]
struct ClassEntry {
    id: ClassId,
    posterior: Option<Arc<ClassPosterior>>,
    density: Arc<ClassDensity>,
}

/// Class probabilities and the log-scores they were normalized from.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub log_scores: Vec<f64>,
}

impl Prediction {
    fn from_scores(log_scores: Vec<f64>, temperature: f64) -> Result<Self> {
        let scaled: Vec<f64> = log_scores.iter().map(|s| s / temperature).collect();
        let probs = softmax(&scaled)?;
        Ok(Prediction { probs, log_scores })
    }

    /// Index of the highest-scoring class (first on ties).
    pub fn argmax(&self) -> usize {
        argmax(&self.log_scores)
    }

    pub fn confidence(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// A fitted classifier. Cloning is cheap; per-class state is shared.
#[derive(Debug, Clone)]
pub struct QdaModel {
    classes: Vec<ClassEntry>,
    mode: Mode,
    temperature: f64,
    dim: usize,
    /// Kept for the tied variant, whose shared scale depends on every class.
    prior: Option<Arc<NiwPrior>>,
}

impl QdaModel {
    /// Fits one posterior per class, with class ids `0..C` in order.
    pub fn fit<S: AsRef<[f64]>>(prior: &NiwPrior, support: &[Vec<S>], mode: Mode) -> Result<Self> {
        Self::fit_labeled(
            prior,
            support
                .iter()
                .enumerate()
                .map(|(i, s)| (ClassId(i as u32), s.as_slice())),
            mode,
        )
    }

    pub fn fit_labeled<'a, S, I>(prior: &NiwPrior, support: I, mode: Mode) -> Result<Self>
    where
        S: AsRef<[f64]> + 'a,
        I: IntoIterator<Item = (ClassId, &'a [S])>,
    {
        prior.validate()?;
        let mut model = QdaModel {
            classes: Vec::new(),
            mode,
            temperature: 1.0,
            dim: prior.dim(),
            prior: (mode == Mode::TiedLda).then(|| Arc::new(prior.clone())),
        };
        for (id, samples) in support {
            if model.position(id).is_some() {
                return Err(Error::DuplicateClass(id.0));
            }
            let post = niw_posterior(prior, samples)?;
            model.push_posterior(id, post)?;
        }
        if model.classes.is_empty() {
            return Err(Error::EmptyInput);
        }
        if mode == Mode::TiedLda {
            model.rebuild_tied()?;
        }
        Ok(model)
    }

    /// Wraps point estimates (e.g. the maximum-likelihood baseline) as a
    /// Gaussian model with class ids `0..C`.
    pub fn from_gaussians(params: &[GaussianParams]) -> Result<Self> {
        let dim = params.first().ok_or(Error::EmptyInput)?.mu.len();
        let classes = params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if p.mu.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        found: p.mu.len(),
                    });
                }
                Ok(ClassEntry {
                    id: ClassId(i as u32),
                    posterior: None,
                    density: Arc::new(ClassDensity::gaussian(p)),
                })
            })
            .collect::<Result<_>>()?;
        Ok(QdaModel {
            classes,
            mode: Mode::Map,
            temperature: 1.0,
            dim,
            prior: None,
        })
    }

    fn push_posterior(&mut self, id: ClassId, post: ClassPosterior) -> Result<()> {
        let density = match self.mode {
            Mode::Map => ClassDensity::gaussian(&map_estimate(&post)?),
            Mode::FullBayes => ClassDensity::student_t(&post),
            // Placeholder until the pooled scale is known.
            Mode::TiedLda => ClassDensity::Gaussian {
                mean: post.mean.clone(),
                chol: post.scale_chol.clone(),
            },
        };
        self.classes.push(ClassEntry {
            id,
            posterior: Some(Arc::new(post)),
            density: Arc::new(density),
        });
        Ok(())
    }

    /// Shared covariance `(S + Σ_j W_j) / (ν + N + d + 1)` with `W_j` the
    /// within-class scatter and `N` the total support count.
    fn rebuild_tied(&mut self) -> Result<()> {
        let prior = self.prior.as_ref().expect("tied model keeps its prior");
        let d = self.dim;
        let mut pooled = prior.scale();
        let mut total = 0usize;
        for entry in &self.classes {
            let post = entry.posterior.as_ref().expect("tied model has posteriors");
            pooled.add_assign(&post.scatter);
            total += post.count;
        }
        let nu = prior.nu() + total as f64;
        let sigma: Matrix = pooled.scaled(1.0 / (nu + d as f64 + 1.0));
        let chol = cholesky(&sigma)?;
        for entry in &mut self.classes {
            let post = entry.posterior.as_ref().expect("tied model has posteriors");
            entry.density = Arc::new(ClassDensity::Gaussian {
                mean: post.mean.clone(),
                chol: chol.clone(),
            });
        }
        Ok(())
    }

    fn position(&self, id: ClassId) -> Option<usize> {
        self.classes.iter().position(|c| c.id == id)
    }

    /// Returns a new model with one more class. Existing posteriors are
    /// shared, not recomputed; under [`Mode::TiedLda`] the pooled
    /// covariance is refreshed for every class.
    pub fn add_class<S: AsRef<[f64]>>(&self, prior: &NiwPrior, id: ClassId, samples: &[S]) -> Result<Self> {
        if self.position(id).is_some() {
            return Err(Error::DuplicateClass(id.0));
        }
        if prior.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: prior.dim(),
            });
        }
        let mut next = self.clone();
        next.push_posterior(id, niw_posterior(prior, samples)?)?;
        if next.mode == Mode::TiedLda {
            next.rebuild_tied()?;
        }
        Ok(next)
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature {temperature} must be positive"
            )));
        }
        self.temperature = temperature;
        Ok(self)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.classes.iter().map(|c| c.id)
    }

    pub fn posterior(&self, id: ClassId) -> Option<&ClassPosterior> {
        self.position(id).and_then(|i| self.classes[i].posterior.as_deref())
    }

    /// Class-conditional log-densities in class order.
    pub fn log_scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.classes.iter().map(|c| c.density.log_density(x)).collect()
    }

    /// Prediction under the model's own rule.
    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        Prediction::from_scores(self.log_scores(x)?, self.temperature)
    }

    /// Gaussian rule; valid for [`Mode::Map`] and [`Mode::TiedLda`].
    pub fn predict_map(&self, x: &[f64]) -> Result<Prediction> {
        if self.mode == Mode::FullBayes {
            return Err(Error::ModeMismatch {
                expected: "map",
                found: self.mode.as_str(),
            });
        }
        self.predict(x)
    }

    /// Student-t rule; valid for [`Mode::FullBayes`].
    pub fn predict_fb(&self, x: &[f64]) -> Result<Prediction> {
        if self.mode != Mode::FullBayes {
            return Err(Error::ModeMismatch {
                expected: "fb",
                found: self.mode.as_str(),
            });
        }
        self.predict(x)
    }
}
