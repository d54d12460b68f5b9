//! Episodic meta-learning of the NIW prior.
//!
//! The episode loss is differentiated analytically: per-class gradients
//! with respect to the posterior parameters `(m_j, S_j, κ_j, ν_j)` are
//! pulled back through the conjugate update to `(m, κ, S, ν)` and then
//! through `S = L Lᵀ` to the factor `L`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::classifier::Mode;
use crate::episodes::{episode_rng, sample_episode, Episode, FeatureDataset};
use crate::error::{Error, Result};
use crate::niw::{flat_len, niw_posterior, ClassPosterior, NiwPrior, DIAG_FLOOR};
use crate::numerics::{digamma, dot, log_sum_exp, student_t_log_norm, LowerTriangular, Matrix};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    /// Negative true-class log-density of each query.
    #[default]
    Generative,
    /// Negative log posterior class probability of each query.
    Discriminative,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "generative" | "gen" => Ok(LossKind::Generative),
            "discriminative" | "disc" => Ok(LossKind::Discriminative),
            other => Err(Error::InvalidConfig(format!(
                "unknown loss {other:?} (generative | discriminative)"
            ))),
        }
    }
}

/// Gradient of a scalar loss with respect to the prior parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorGradient {
    pub mean: Vec<f64>,
    pub scale_factor: LowerTriangular,
    pub kappa: f64,
    pub nu: f64,
}

impl PriorGradient {
    pub fn zeros(dim: usize) -> Self {
        PriorGradient {
            mean: vec![0.0; dim],
            scale_factor: LowerTriangular::zeros(dim),
            kappa: 0.0,
            nu: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Same layout as [`NiwPrior::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(flat_len(self.dim()));
        out.extend_from_slice(&self.mean);
        out.extend_from_slice(self.scale_factor.packed());
        out.push(self.kappa);
        out.push(self.nu);
        out
    }

    pub fn add_scaled(&mut self, other: &PriorGradient, weight: f64) {
        for (a, b) in self.mean.iter_mut().zip(&other.mean) {
            *a += weight * b;
        }
        for (a, b) in self
            .scale_factor
            .packed_mut()
            .iter_mut()
            .zip(other.scale_factor.packed())
        {
            *a += weight * b;
        }
        self.kappa += weight * other.kappa;
        self.nu += weight * other.nu;
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Lower bounds applied after every parameter update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constraints {
    pub kappa_min: f64,
    /// `ν` is kept at or above `d − 1 + nu_margin`.
    pub nu_margin: f64,
    pub diag_floor: f64,
}

impl Default for Constraints {
    fn default() -> Self {
        Constraints {
            kappa_min: 1e-3,
            nu_margin: 1e-3,
            diag_floor: DIAG_FLOOR,
        }
    }
}

/// Keeps the lower triangle of `m` and floors its diagonal.
pub fn project_scale_factor(m: &Matrix, diag_floor: f64) -> LowerTriangular {
    let mut l = LowerTriangular::from_lower(m);
    for i in 0..l.dim() {
        let v = l.get(i, i);
        l.set(i, i, v.max(diag_floor));
    }
    l
}

fn project(prior: &mut NiwPrior, c: &Constraints) {
    let d = prior.dim() as f64;
    prior.kappa = prior.kappa.max(c.kappa_min);
    prior.nu = prior.nu.max(d - 1.0 + c.nu_margin);
    for i in 0..prior.dim() {
        let v = prior.scale_factor.get(i, i);
        prior.scale_factor.set(i, i, v.max(c.diag_floor));
    }
}

fn prior_from_flat_unchecked(dim: usize, flat: &[f64]) -> NiwPrior {
    let tri = dim * (dim + 1) / 2;
    NiwPrior {
        mean: flat[..dim].to_vec(),
        scale_factor: LowerTriangular::from_packed(dim, flat[dim..dim + tri].to_vec()).expect("packed length"),
        kappa: flat[dim + tri],
        nu: flat[dim + tri + 1],
    }
}

/// One plain gradient step `φ ← φ − α ∇φ` followed by projection onto the
/// valid parameter set.
pub fn apply_update(prior: &NiwPrior, grad: &PriorGradient, learning_rate: f64, constraints: &Constraints) -> NiwPrior {
    assert_eq!(prior.dim(), grad.dim());
    let mut flat = prior.flatten();
    for (p, g) in flat.iter_mut().zip(grad.flatten()) {
        *p -= learning_rate * g;
    }
    let mut next = prior_from_flat_unchecked(prior.dim(), &flat);
    project(&mut next, constraints);
    next
}

fn check_training_mode(mode: Mode) -> Result<()> {
    if mode == Mode::TiedLda {
        return Err(Error::InvalidConfig(
            "meta-training supports the map and fb modes only".into(),
        ));
    }
    Ok(())
}

fn check_episode(prior: &NiwPrior, episode: &Episode) -> Result<()> {
    let ways = episode.support.len();
    if ways == 0 {
        return Err(Error::EmptyInput);
    }
    for (x, label) in &episode.query {
        if *label >= ways {
            return Err(Error::LabelOutOfRange {
                label: *label,
                classes: ways,
            });
        }
        if x.len() != prior.dim() {
            return Err(Error::DimensionMismatch {
                expected: prior.dim(),
                found: x.len(),
            });
        }
    }
    Ok(())
}

/// Per-class quantities shared by the loss and its gradient.
struct ClassTerms {
    post: ClassPosterior,
    scale_inv: Matrix,
    /// MAP: `ν_j + d + 1`. FB: Student-t dof `ν_j − d + 1`.
    shape: f64,
    /// FB scale multiplier `(κ_j + 1) / (κ_j dof)`; 1 under MAP.
    c: f64,
    /// `x`-independent part of the log-density.
    constant: f64,
}

impl ClassTerms {
    fn new(prior: &NiwPrior, samples: &[Vec<f64>], mode: Mode) -> Result<Self> {
        let post = niw_posterior(prior, samples)?;
        let d = prior.dim() as f64;
        let log_det_factor = post.scale_chol.log_det();
        let scale_inv = post.scale_chol.inverse_gram();
        let (shape, c, constant) = match mode {
            Mode::FullBayes => {
                let dof = post.nu - d + 1.0;
                let c = (post.kappa + 1.0) / (post.kappa * dof);
                let constant = student_t_log_norm(dof, prior.dim()) - log_det_factor - 0.5 * d * c.ln();
                (dof, c, constant)
            }
            _ => {
                let a = post.nu + d + 1.0;
                (a, 1.0, -0.5 * d * LN_2PI - log_det_factor + 0.5 * d * a.ln())
            }
        };
        Ok(ClassTerms {
            post,
            scale_inv,
            shape,
            c,
            constant,
        })
    }

    /// Returns `(log-density, r, u = S_j⁻¹ r, q0 = rᵀ S_j⁻¹ r)`.
    fn eval(&self, x: &[f64], mode: Mode) -> (f64, Vec<f64>, Vec<f64>, f64) {
        let r: Vec<f64> = x.iter().zip(&self.post.mean).map(|(a, b)| a - b).collect();
        let u = self.post.scale_chol.solve(&r);
        let q0 = dot(&r, &u);
        let d = x.len() as f64;
        let s = match mode {
            Mode::FullBayes => {
                let n = self.shape;
                self.constant - 0.5 * (n + d) * (q0 / (self.c * n)).ln_1p()
            }
            _ => self.constant - 0.5 * self.shape * q0,
        };
        (s, r, u, q0)
    }
}

/// Per-class accumulated gradient with respect to `(m_j, S_j, κ_j, ν_j)`.
struct ClassGrad {
    mean: Vec<f64>,
    /// Coefficient of `S_j⁻¹` in the `S_j` gradient.
    inv_weight: f64,
    /// Rank-one part of the `S_j` gradient.
    outer: Matrix,
    kappa: f64,
    nu: f64,
}

impl ClassGrad {
    fn zeros(d: usize) -> Self {
        ClassGrad {
            mean: vec![0.0; d],
            inv_weight: 0.0,
            outer: Matrix::zeros(d, d),
            kappa: 0.0,
            nu: 0.0,
        }
    }

    /// Adds `weight · ∂s/∂(m_j, S_j, κ_j, ν_j)` for one query point.
    fn accumulate(&mut self, terms: &ClassTerms, weight: f64, u: &[f64], q0: f64, mode: Mode) {
        let d = u.len() as f64;
        match mode {
            Mode::FullBayes => {
                let n = terms.shape;
                let c = terms.c;
                let q = q0 / c;
                let beta = (n + d) / (2.0 * (n + q));
                let coef_m = 2.0 * beta / c;
                for (g, ui) in self.mean.iter_mut().zip(u) {
                    *g += weight * coef_m * ui;
                }
                self.inv_weight += -0.5 * weight;
                self.outer.add_outer(weight * beta / c, u, u);
                let ds_dc = -d / (2.0 * c) + beta * q0 / (c * c);
                let ds_dn =
                    0.5 * digamma(0.5 * (n + d)) - 0.5 * digamma(0.5 * n) - d / (2.0 * n) - 0.5 * (q / n).ln_1p()
                        + (n + d) * q / (2.0 * n * (n + q));
                let kj = terms.post.kappa;
                self.kappa += weight * ds_dc * (-1.0 / (kj * kj * n));
                self.nu += weight * (ds_dn - ds_dc * c / n);
            }
            _ => {
                let a = terms.shape;
                for (g, ui) in self.mean.iter_mut().zip(u) {
                    *g += weight * a * ui;
                }
                self.inv_weight += -0.5 * weight;
                self.outer.add_outer(0.5 * weight * a, u, u);
                self.nu += weight * (d / (2.0 * a) - 0.5 * q0);
            }
        }
    }
}

/// Episode loss under `mode`, summed over the query set.
pub fn episode_loss(prior: &NiwPrior, episode: &Episode, mode: Mode, loss: LossKind) -> Result<f64> {
    evaluate(prior, episode, mode, loss, false).map(|(l, _)| l)
}

/// Exact gradient of [`episode_loss`] with respect to `(m, L, κ, ν)`.
pub fn grad(prior: &NiwPrior, episode: &Episode, mode: Mode, loss: LossKind) -> Result<PriorGradient> {
    evaluate(prior, episode, mode, loss, true).map(|(_, g)| g.expect("gradient requested"))
}

pub fn loss_and_grad(prior: &NiwPrior, episode: &Episode, mode: Mode, loss: LossKind) -> Result<(f64, PriorGradient)> {
    evaluate(prior, episode, mode, loss, true).map(|(l, g)| (l, g.expect("gradient requested")))
}

fn evaluate(
    prior: &NiwPrior,
    episode: &Episode,
    mode: Mode,
    loss_kind: LossKind,
    want_grad: bool,
) -> Result<(f64, Option<PriorGradient>)> {
    check_training_mode(mode)?;
    check_episode(prior, episode)?;
    let d = prior.dim();
    let terms: Vec<ClassTerms> = episode
        .support
        .iter()
        .map(|s| ClassTerms::new(prior, s, mode))
        .collect::<Result<_>>()?;
    let mut class_grads: Vec<ClassGrad> = if want_grad {
        (0..terms.len()).map(|_| ClassGrad::zeros(d)).collect()
    } else {
        Vec::new()
    };

    let mut loss = 0.0;
    for (x, label) in &episode.query {
        match loss_kind {
            LossKind::Generative => {
                let t = &terms[*label];
                let (s, _, u, q0) = t.eval(x, mode);
                loss -= s;
                if want_grad {
                    class_grads[*label].accumulate(t, -1.0, &u, q0, mode);
                }
            }
            LossKind::Discriminative => {
                let evals: Vec<_> = terms.iter().map(|t| t.eval(x, mode)).collect();
                let scores: Vec<f64> = evals.iter().map(|e| e.0).collect();
                let lse = log_sum_exp(&scores)?;
                loss -= scores[*label] - lse;
                if want_grad {
                    for (j, ((t, e), g)) in terms.iter().zip(&evals).zip(&mut class_grads).enumerate() {
                        let p = (e.0 - lse).exp();
                        let w = p - if j == *label { 1.0 } else { 0.0 };
                        g.accumulate(t, w, &e.2, e.3, mode);
                    }
                }
            }
        }
    }
    if !want_grad {
        return Ok((loss, None));
    }

    // Pull back through the conjugate update.
    let kappa = prior.kappa;
    let mut out = PriorGradient::zeros(d);
    let mut g_scale = Matrix::zeros(d, d);
    for (t, g) in terms.iter().zip(&class_grads) {
        let k = t.post.count as f64;
        let kn = kappa + k;
        let e: Vec<f64> = t.post.sample_mean.iter().zip(&prior.mean).map(|(x, m)| x - m).collect();
        // G_j = inv_weight · S_j⁻¹ + outer
        let mut g_j = g.outer.clone();
        g_j.add_assign(&t.scale_inv.scaled(g.inv_weight));
        let g_e = g_j.mul_vec(&e);
        let shrink = kappa * k / kn;
        for i in 0..d {
            out.mean[i] += kappa / kn * g.mean[i] - 2.0 * shrink * g_e[i];
        }
        // ∂m_j/∂κ = K (m − x̄) / (κ + K)², ∂(κK/(κ+K))/∂κ = K² / (κ + K)²
        let dm_dk = -k / (kn * kn);
        out.kappa += dm_dk * dot(&g.mean, &e) + k * k / (kn * kn) * dot(&e, &g_e) + g.kappa;
        out.nu += g.nu;
        g_scale.add_assign(&g_j);
    }
    // S = L Lᵀ with symmetric G: ∂/∂L = 2 G L, lower triangle.
    let l = &prior.scale_factor;
    for i in 0..d {
        for j in 0..=i {
            let v: f64 = (j..d).map(|k| g_scale[(i, k)] * l.get(k, j)).sum();
            out.scale_factor.set(i, j, 2.0 * v);
        }
    }
    Ok((loss, Some(out)))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Optimizer {
    Sgd,
    Momentum {
        beta: f64,
    },
    #[default]
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Optimizer::Sgd),
            "momentum" => Ok(Optimizer::Momentum { beta: 0.9 }),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::InvalidConfig(format!(
                "unknown optimizer {other:?} (sgd | momentum | adam)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    Constant,
    Cosine,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(Error::InvalidConfig(format!(
                "unknown schedule {other:?} (constant | cosine)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub schedule: Schedule,
    pub batch_episodes: usize,
    pub loss: LossKind,
    pub mode: Mode,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub seed: u64,
    pub constraints: Constraints,
    pub freeze_mean: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            iterations: 2000,
            learning_rate: 3e-4,
            optimizer: Optimizer::Adam,
            schedule: Schedule::Constant,
            batch_episodes: 1,
            loss: LossKind::Generative,
            mode: Mode::FullBayes,
            ways: 5,
            shots: 1,
            queries: 15,
            seed: 0,
            constraints: Constraints::default(),
            freeze_mean: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        check_training_mode(self.mode)?;
        if self.ways == 0 || self.shots == 0 || self.queries == 0 || self.batch_episodes == 0 {
            return Err(Error::InvalidConfig(
                "ways, shots, queries and batch size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        let c = &self.constraints;
        if !(c.kappa_min > 0.0 && c.nu_margin > 0.0 && c.diag_floor > 0.0) {
            return Err(Error::InvalidConfig("constraint margins must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub kappa: f64,
    pub nu: f64,
}

impl fmt::Display for LogRecord {
    /// Tab-separated `iteration loss grad-norm kappa nu`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}",
            self.iteration, self.loss, self.grad_norm, self.kappa, self.nu
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub prior: NiwPrior,
    pub log: Vec<LogRecord>,
}

struct OptimizerState {
    kind: Optimizer,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

impl OptimizerState {
    fn new(kind: Optimizer, len: usize) -> Self {
        OptimizerState {
            kind,
            first: vec![0.0; len],
            second: vec![0.0; len],
            steps: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.steps += 1;
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Momentum { beta } => {
                for ((p, g), v) in params.iter_mut().zip(grad).zip(&mut self.first) {
                    *v = beta * *v + g;
                    *p -= lr * *v;
                }
            }
            Optimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                let c1 = 1.0 - B1.powi(self.steps);
                let c2 = 1.0 - B2.powi(self.steps);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.first).zip(&mut self.second) {
                    *m = B1 * *m + (1.0 - B1) * g;
                    *v = B2 * *v + (1.0 - B2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                }
            }
        }
    }
}

/// Mean loss and gradient over a batch. Episodes are evaluated in
/// parallel and reduced in index order.
pub fn batch_loss_and_grad(
    prior: &NiwPrior,
    episodes: &[Episode],
    mode: Mode,
    loss: LossKind,
) -> Result<(f64, PriorGradient)> {
    let parts: Vec<(f64, PriorGradient)> = episodes
        .par_iter()
        .map(|ep| loss_and_grad(prior, ep, mode, loss))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut g = PriorGradient::zeros(prior.dim());
    let w = 1.0 / episodes.len().max(1) as f64;
    for (l, pg) in &parts {
        total += l;
        g.add_scaled(pg, w);
    }
    Ok((total * w, g))
}

/// Runs episodic training from the standard prior.
pub fn meta_train(dataset: &FeatureDataset, config: &TrainerConfig) -> Result<TrainOutcome> {
    meta_train_from(NiwPrior::standard(dataset.dim()), dataset, config, |_| {})
}

/// Runs episodic training from `init`, calling `on_record` after each
/// iteration. Episode `b` of iteration `t` draws from stream
/// `t · batch + b` of the seed, so results do not depend on thread count.
pub fn meta_train_from<F: FnMut(&LogRecord)>(
    init: NiwPrior,
    dataset: &FeatureDataset,
    config: &TrainerConfig,
    mut on_record: F,
) -> Result<TrainOutcome> {
    config.validate()?;
    init.validate()?;
    if init.dim() != dataset.dim() {
        return Err(Error::DimensionMismatch {
            expected: dataset.dim(),
            found: init.dim(),
        });
    }
    // Surface sampler errors before training starts.
    sample_episode(
        dataset,
        config.ways,
        config.shots,
        config.queries,
        &mut episode_rng(config.seed, u64::MAX),
    )?;

    let dim = dataset.dim();
    let mut prior = init;
    let mut state = OptimizerState::new(config.optimizer, flat_len(dim));
    let mut log = Vec::with_capacity(config.iterations);
    let batch = config.batch_episodes as u64;
    for t in 0..config.iterations {
        let episodes: Vec<Episode> = (0..batch)
            .into_par_iter()
            .map(|b| {
                let mut rng = episode_rng(config.seed, t as u64 * batch + b);
                sample_episode(dataset, config.ways, config.shots, config.queries, &mut rng)
            })
            .collect::<Result<_>>()?;
        let (loss, mut g) = batch_loss_and_grad(&prior, &episodes, config.mode, config.loss)?;
        if config.freeze_mean {
            g.mean.iter_mut().for_each(|v| *v = 0.0);
        }
        let lr = match config.schedule {
            Schedule::Constant => config.learning_rate,
            Schedule::Cosine => 0.5 * config.learning_rate * (1.0 + (PI * t as f64 / config.iterations as f64).cos()),
        };
        let mut flat = prior.flatten();
        state.step(&mut flat, &g.flatten(), lr);
        prior = prior_from_flat_unchecked(dim, &flat);
        project(&mut prior, &config.constraints);
        debug_assert!(prior.validate().is_ok());

        let record = LogRecord {
            iteration: t + 1,
            loss,
            grad_norm: g.norm(),
            kappa: prior.kappa,
            nu: prior.nu,
        };
        on_record(&record);
        log.push(record);
    }
    Ok(TrainOutcome { prior, log })
}
