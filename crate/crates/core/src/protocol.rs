//! Evaluation protocols: standard episodic accuracy with confidence
//! intervals, calibration over episodes, and few-shot class-incremental
//! sessions.

use std::fmt;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::calibration::{self, records_at, CalibrationReport, ScoredQuery};
use crate::classifier::{argmax, ClassId, Mode, QdaModel};
use crate::episodes::{episode_rng, sample_episode, Episode, FeatureDataset};
use crate::error::{Error, Result};
use crate::niw::{mle_qda, NiwPrior, Ridge};

/// How a classifier is built from an episode's support set.
#[derive(Debug, Clone, PartialEq)]
pub enum Estimator {
    Bayes {
        prior: NiwPrior,
        mode: Mode,
    },
    /// Per-class maximum likelihood with diagonal loading.
    RidgeMle(Ridge),
}

impl Estimator {
    pub fn fit(&self, support: &[Vec<Vec<f64>>]) -> Result<QdaModel> {
        match self {
            Estimator::Bayes { prior, mode } => QdaModel::fit(prior, support, *mode),
            Estimator::RidgeMle(ridge) => QdaModel::from_gaussians(&mle_qda(support, *ridge)?),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeConfig {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            ways: 5,
            shots: 1,
            queries: 15,
            episodes: 600,
            seed: 0,
        }
    }
}

/// Mean episode accuracy with a 95% interval `1.96 · σ / √E`, using the
/// population standard deviation over episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub mean: f64,
    pub ci95: f64,
    pub episodes: usize,
    /// Per-episode accuracy in percent, in episode order.
    pub accuracies: Vec<f64>,
}

impl EvalResult {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Result<Self> {
        if accuracies.is_empty() {
            return Err(Error::EmptyInput);
        }
        let e = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / e;
        let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / e;
        Ok(EvalResult {
            mean,
            ci95: 1.96 * var.sqrt() / e.sqrt(),
            episodes: accuracies.len(),
            accuracies,
        })
    }
}

impl fmt::Display for EvalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "acc {:.2} ± {:.2}", self.mean, self.ci95)
    }
}

/// Samples the protocol's episodes; episode `i` uses stream `i` of the seed.
pub fn sample_episodes(dataset: &FeatureDataset, config: &EpisodeConfig) -> Result<Vec<Episode>> {
    (0..config.episodes as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = episode_rng(config.seed, i);
            sample_episode(dataset, config.ways, config.shots, config.queries, &mut rng)
        })
        .collect()
}

/// Fits the estimator on each episode and scores every query.
pub fn score_episodes(estimator: &Estimator, episodes: &[Episode]) -> Result<Vec<Vec<ScoredQuery>>> {
    episodes
        .par_iter()
        .map(|ep| {
            let model = estimator.fit(&ep.support)?;
            ep.query
                .iter()
                .map(|(x, label)| {
                    Ok(ScoredQuery {
                        log_scores: model.log_scores(x)?,
                        label: *label,
                    })
                })
                .collect()
        })
        .collect()
}

pub fn accuracy_of(scored: &[Vec<ScoredQuery>]) -> Result<EvalResult> {
    let accs = scored
        .iter()
        .map(|ep| {
            let hits = ep.iter().filter(|q| argmax(&q.log_scores) == q.label).count();
            100.0 * hits as f64 / ep.len().max(1) as f64
        })
        .collect();
    EvalResult::from_accuracies(accs)
}

/// Standard episodic evaluation. Temperature rescales probabilities but
/// never changes the argmax, so it does not enter the accuracy.
pub fn evaluate(estimator: &Estimator, dataset: &FeatureDataset, config: &EpisodeConfig) -> Result<EvalResult> {
    let episodes = sample_episodes(dataset, config)?;
    accuracy_of(&score_episodes(estimator, &episodes)?)
}

/// ECE of all pooled queries at `temperature`.
pub fn calibration_at(scored: &[Vec<ScoredQuery>], temperature: f64, bins: usize) -> Result<CalibrationReport> {
    let flat: Vec<ScoredQuery> = scored.iter().flatten().cloned().collect();
    let mut report = calibration::ece(&records_at(&flat, temperature)?, bins)?;
    report.temperature_used = temperature;
    Ok(report)
}

/// Fits a temperature on validation episodes.
pub fn fit_temperature(estimator: &Estimator, validation: &[Episode], bins: usize) -> Result<CalibrationReport> {
    if validation.is_empty() {
        return Err(Error::EmptyInput);
    }
    let scored = score_episodes(estimator, validation)?;
    let flat: Vec<ScoredQuery> = scored.into_iter().flatten().collect();
    calibration::fit_temperature(&flat, bins)
}

/// Support and test samples of one class in an incremental protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassData {
    pub id: ClassId,
    pub support: Vec<Vec<f64>>,
    pub test: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalProtocol {
    pub base: Vec<ClassData>,
    pub sessions: Vec<Vec<ClassData>>,
}

impl IncrementalProtocol {
    /// Splits a dataset: classes `0..base_classes` form session 0 and the
    /// rest arrive `session_ways` at a time. Each class's rows are shuffled
    /// with `seed`; the first `base_shots` (base) or `shots` (novel) become
    /// support and up to `test_per_class` of the remainder become test.
    pub fn from_dataset(
        dataset: &FeatureDataset,
        base_classes: usize,
        session_ways: usize,
        base_shots: usize,
        shots: usize,
        test_per_class: usize,
        seed: u64,
    ) -> Result<Self> {
        if base_classes == 0 || session_ways == 0 || base_classes > dataset.class_count() {
            return Err(Error::InvalidConfig(format!(
                "need 1 ≤ base classes ≤ {} and session ways ≥ 1",
                dataset.class_count()
            )));
        }
        let split = |class: u32, k: usize| -> Result<ClassData> {
            let mut rows = dataset.class_rows(class).to_vec();
            if rows.len() < k + 1 {
                return Err(Error::InsufficientSamplesPerClass {
                    class,
                    available: rows.len(),
                    required: k + 1,
                });
            }
            rows.shuffle(&mut episode_rng(seed, class as u64));
            let support = rows[..k].iter().map(|&r| dataset.row(r).to_vec()).collect();
            let test = rows[k..]
                .iter()
                .take(test_per_class)
                .map(|&r| dataset.row(r).to_vec())
                .collect();
            Ok(ClassData {
                id: ClassId(class),
                support,
                test,
            })
        };
        let base = (0..base_classes as u32)
            .map(|c| split(c, base_shots))
            .collect::<Result<_>>()?;
        let novel: Vec<u32> = (base_classes as u32..dataset.class_count() as u32).collect();
        let sessions = novel
            .chunks(session_ways)
            .map(|chunk| chunk.iter().map(|&c| split(c, shots)).collect())
            .collect::<Result<_>>()?;
        Ok(IncrementalProtocol { base, sessions })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionResult {
    pub session: usize,
    pub ways: usize,
    pub accuracy: f64,
    pub tested: usize,
}

impl fmt::Display for SessionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "session {} ({} ways): {:.2}", self.session, self.ways, self.accuracy)
    }
}

fn session_accuracy(model: &QdaModel, seen: &[&ClassData]) -> Result<(f64, usize)> {
    let ids: Vec<ClassId> = model.class_ids().collect();
    let (hits, total) = seen
        .par_iter()
        .map(|class| {
            let mut hits = 0usize;
            for x in &class.test {
                let scores = model.log_scores(x)?;
                hits += (ids[argmax(&scores)] == class.id) as usize;
            }
            Ok((hits, class.test.len()))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold((0, 0), |(h, t), (a, b)| (h + a, t + b));
    Ok((100.0 * hits as f64 / total.max(1) as f64, total))
}

/// Grows one model with [`QdaModel::add_class`] and scores each session on
/// the test sets of every class seen so far.
pub fn evaluate_incremental(
    prior: &NiwPrior,
    mode: Mode,
    protocol: &IncrementalProtocol,
) -> Result<Vec<SessionResult>> {
    let mut model = QdaModel::fit_labeled(prior, protocol.base.iter().map(|c| (c.id, c.support.as_slice())), mode)?;
    let mut seen: Vec<&ClassData> = protocol.base.iter().collect();
    let mut results = Vec::with_capacity(protocol.sessions.len() + 1);
    let (acc, tested) = session_accuracy(&model, &seen)?;
    results.push(SessionResult {
        session: 0,
        ways: model.num_classes(),
        accuracy: acc,
        tested,
    });
    for (s, session) in protocol.sessions.iter().enumerate() {
        for class in session {
            model = model.add_class(prior, class.id, &class.support)?;
            seen.push(class);
        }
        let (acc, tested) = session_accuracy(&model, &seen)?;
        results.push(SessionResult {
            session: s + 1,
            ways: model.num_classes(),
            accuracy: acc,
            tested,
        });
    }
    Ok(results)
}
