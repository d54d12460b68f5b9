//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! with its measured values; the process exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use metaqda_core::calibration::{ece, records_at, DEFAULT_BINS};
use metaqda_core::classifier::ClassId;
use metaqda_core::episodes::generate_synthetic;
use metaqda_core::format::{Normalization, PriorCheckpoint};
use metaqda_core::niw::{map_estimate, mle_qda, niw_posterior};
use metaqda_core::numerics::{cholesky, log_sum_exp, mvn_logpdf, mvt_logpdf};
use metaqda_core::protocol::{
    calibration_at, evaluate, evaluate_incremental, sample_episodes, score_episodes, EpisodeConfig, Estimator,
    IncrementalProtocol,
};
use metaqda_core::trainer::{episode_loss, grad, meta_train};
use metaqda_core::{
    episode_rng, Episode, Error, FeatureDataset, LossKind, LowerTriangular, Matrix, Mode, NiwPrior, QdaModel, Ridge,
    SyntheticTaskSpec, TrainerConfig,
};

type Check = std::result::Result<String, String>;

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// Shared synthetic benchmark

const DIM: usize = 16;

struct Benchmark {
    spec: SyntheticTaskSpec,
    train: FeatureDataset,
    test: FeatureDataset,
    trained: NiwPrior,
    train_config: TrainerConfig,
    eval_config: EpisodeConfig,
}

fn benchmark_train_config() -> TrainerConfig {
    TrainerConfig {
        iterations: 2000,
        mode: Mode::FullBayes,
        loss: LossKind::Generative,
        ways: 5,
        shots: 5,
        queries: 15,
        seed: 0,
        ..TrainerConfig::default()
    }
}

fn benchmark() -> &'static Benchmark {
    static CELL: OnceLock<Benchmark> = OnceLock::new();
    CELL.get_or_init(|| {
        let spec = SyntheticTaskSpec::benchmark(DIM);
        let train = generate_synthetic(&spec, spec.class_pool, 200, &mut episode_rng(0, 1)).unwrap();
        let test = generate_synthetic(&spec, spec.class_pool, 200, &mut episode_rng(0, 2)).unwrap();
        let train_config = benchmark_train_config();
        let trained = meta_train(&train, &train_config).unwrap().prior;
        Benchmark {
            spec,
            train,
            test,
            trained,
            train_config,
            eval_config: EpisodeConfig {
                ways: 5,
                shots: 5,
                queries: 15,
                episodes: 600,
                seed: 0,
            },
        }
    })
}

// ---------------------------------------------------------------------------
// 1. Predictive density against importance sampling of the NIW integral

/// One draw from NIW(0, κ, I, ν) in two dimensions, returned as the mean and
/// the Bartlett factor `A` of the precision `Λ = A Aᵀ`.
fn draw_niw_2d(kappa: f64, nu: f64, rng: &mut ChaCha8Rng) -> ([f64; 2], [f64; 3]) {
    let a11 = ChiSquared::new(nu).unwrap().sample(rng).sqrt();
    let a22 = ChiSquared::new(nu - 1.0).unwrap().sample(rng).sqrt();
    let a21: f64 = rng.sample(StandardNormal);
    // μ = A⁻ᵀ z / √κ, so that Cov(μ) = (A Aᵀ)⁻¹ / κ = Σ / κ.
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    let s = kappa.sqrt().recip();
    let y2 = z2 / a22;
    let y1 = (z1 - a21 * y2) / a11;
    ([s * y1, s * y2], [a11, a21, a22])
}

fn gauss_logpdf_2d(x: &[f64], mu: &[f64; 2], a: &[f64; 3]) -> f64 {
    let [a11, a21, a22] = *a;
    let r = [x[0] - mu[0], x[1] - mu[1]];
    let t1 = a11 * r[0] + a21 * r[1];
    let t2 = a22 * r[1];
    -(2.0 * std::f64::consts::PI).ln() + (a11 * a22).ln() - 0.5 * (t1 * t1 + t2 * t2)
}

fn conjugacy_oracle() -> Check {
    const DRAWS: usize = 1_000_000;
    let prior = NiwPrior::standard(2);
    let mut rng = episode_rng(7, 0);
    let centers = [[-1.5, 0.0], [1.5, 0.0], [0.0, 1.5]];
    let support: Vec<Vec<Vec<f64>>> = centers
        .iter()
        .map(|c| {
            (0..3)
                .map(|_| {
                    let z: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                    vec![c[0] + 0.7 * z[0], c[1] + 0.7 * z[1]]
                })
                .collect()
        })
        .collect();
    let queries = [[0.0, 0.0], [0.5, 0.5], [-0.5, 0.3], [0.0, 0.7], [1.0, 0.2], [-1.0, 1.0]];

    // log w_n(class) + log N(x_q | θ_n) for each class and query.
    let mut log_w: Vec<Vec<f64>> = (0..3).map(|_| Vec::with_capacity(DRAWS)).collect();
    let mut log_joint: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|_| (0..queries.len()).map(|_| Vec::with_capacity(DRAWS)).collect())
        .collect();
    let mut draw_rng = episode_rng(7, 1);
    for _ in 0..DRAWS {
        let (mu, a) = draw_niw_2d(prior.kappa(), prior.nu(), &mut draw_rng);
        for (j, class) in support.iter().enumerate() {
            let lw: f64 = class.iter().map(|x| gauss_logpdf_2d(x, &mu, &a)).sum();
            log_w[j].push(lw);
            for (q, x) in queries.iter().enumerate() {
                log_joint[j][q].push(lw + gauss_logpdf_2d(x, &mu, &a));
            }
        }
    }
    let mut min_ess = f64::INFINITY;
    for w in &log_w {
        let lse = log_sum_exp(w).unwrap();
        let lse2 = log_sum_exp(&w.iter().map(|v| 2.0 * v).collect::<Vec<_>>()).unwrap();
        min_ess = min_ess.min((2.0 * lse - lse2).exp());
    }

    let model = QdaModel::fit(&prior, &support, Mode::FullBayes).unwrap();
    let mut worst = 0.0f64;
    for (q, x) in queries.iter().enumerate() {
        let log_pred: Vec<f64> = (0..3)
            .map(|j| log_sum_exp(&log_joint[j][q]).unwrap() - log_sum_exp(&log_w[j]).unwrap())
            .collect();
        let norm = log_sum_exp(&log_pred).unwrap();
        let probs = model.predict_fb(x).unwrap().probs;
        for j in 0..3 {
            let oracle = (log_pred[j] - norm).exp();
            worst = worst.max((probs[j] - oracle).abs() / oracle);
        }
    }
    ensure(
        worst < 0.02,
        format!("max relative error {worst:.2e} (tol 2e-2), min ESS {min_ess:.0} of {DRAWS}"),
    )
}

// ---------------------------------------------------------------------------
// 2. Analytic gradients against central finite differences

fn random_prior(d: usize, rng: &mut ChaCha8Rng) -> NiwPrior {
    let mean = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut l = LowerTriangular::zeros(d);
    for i in 0..d {
        l.set(i, i, rng.random_range(0.6..1.4));
        for j in 0..i {
            l.set(i, j, 0.3 * rng.sample::<f64, _>(StandardNormal));
        }
    }
    NiwPrior::new(
        mean,
        rng.random_range(0.5..2.0),
        l,
        d as f64 + rng.random_range(0.5..3.0),
    )
    .unwrap()
}

fn random_episode(d: usize, classes: usize, shots: usize, queries: usize, rng: &mut ChaCha8Rng) -> Episode {
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..d).map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let point = |c: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        centers[c]
            .iter()
            .map(|m| m + rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let support = (0..classes)
        .map(|c| (0..shots).map(|_| point(c, rng)).collect())
        .collect();
    let query = (0..classes)
        .flat_map(|c| (0..queries).map(move |_| c))
        .map(|c| (point(c, rng), c))
        .collect();
    Episode {
        support,
        query,
        classes: (0..classes as u32).collect(),
        support_rows: vec![Vec::new(); classes],
        query_rows: Vec::new(),
    }
}

fn gradient_finite_differences() -> Check {
    let mut rng = episode_rng(11, 0);
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut coords = 0usize;
    for d in [2usize, 4, 8] {
        let prior = random_prior(d, &mut rng);
        let ep = random_episode(d, 3, 2, 4, &mut rng);
        let base = prior.flatten();
        for mode in [Mode::Map, Mode::FullBayes] {
            for loss in [LossKind::Generative, LossKind::Discriminative] {
                let g = grad(&prior, &ep, mode, loss).unwrap().flatten();
                let f = |theta: &[f64]| episode_loss(&NiwPrior::from_flat(d, theta).unwrap(), &ep, mode, loss).unwrap();
                let scale = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                for i in 0..base.len() {
                    let h = 1e-5 * base[i].abs().max(1.0);
                    let mut up = base.clone();
                    up[i] += h;
                    let mut dn = base.clone();
                    dn[i] -= h;
                    let fd = (f(&up) - f(&dn)) / (2.0 * h);
                    // Coordinates whose derivative is negligible next to the
                    // largest one are compared on that larger scale.
                    let denom = g[i].abs().max(fd.abs()).max(1e-6 * scale);
                    let rel = (g[i] - fd).abs() / denom;
                    coords += 1;
                    if rel > worst {
                        worst = rel;
                        worst_at = format!("d={d} {mode:?}/{loss:?} coord {i}");
                    }
                }
            }
        }
    }
    ensure(
        worst < 1e-4,
        format!("{coords} coordinates, max relative error {worst:.2e} at {worst_at} (tol 1e-4)"),
    )
}

// ---------------------------------------------------------------------------
// 3. Accuracy ordering on the synthetic benchmark

fn accuracy_ordering() -> Check {
    let b = benchmark();
    let acc = |est: Estimator| evaluate(&est, &b.test, &b.eval_config).unwrap();
    let meta = acc(Estimator::Bayes {
        prior: b.trained.clone(),
        mode: Mode::FullBayes,
    });
    let hand = acc(Estimator::Bayes {
        prior: NiwPrior::standard(DIM),
        mode: Mode::FullBayes,
    });
    let mle = acc(Estimator::RidgeMle(Ridge::Auto));
    ensure(
        meta.mean >= hand.mean + 1.0 && hand.mean + 1.0 >= mle.mean + 5.0,
        format!(
            "MetaQDA {:.2} ± {:.2}, hand-crafted prior {:.2} ± {:.2}, ridge MLE {:.2} ± {:.2}",
            meta.mean, meta.ci95, hand.mean, hand.ci95, mle.mean, mle.ci95
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Calibration ordering and temperature fitting

fn calibration_ordering() -> Check {
    let b = benchmark();
    let test_eps = sample_episodes(&b.test, &b.eval_config).unwrap();
    let fit_eps = sample_episodes(
        &b.train,
        &EpisodeConfig {
            episodes: 200,
            seed: 1,
            ..b.eval_config
        },
    )
    .unwrap();
    let estimators = [
        (
            "FB",
            Estimator::Bayes {
                prior: b.trained.clone(),
                mode: Mode::FullBayes,
            },
        ),
        (
            "MAP",
            Estimator::Bayes {
                prior: b.trained.clone(),
                mode: Mode::Map,
            },
        ),
        ("MLE", Estimator::RidgeMle(Ridge::Auto)),
    ];
    let mut eces = Vec::new();
    let mut temp_ok = true;
    let mut temp_detail = Vec::new();
    for (name, est) in &estimators {
        let scored = score_episodes(est, &test_eps).unwrap();
        eces.push(calibration_at(&scored, 1.0, DEFAULT_BINS).unwrap().ece);

        let fit_scored: Vec<_> = score_episodes(est, &fit_eps).unwrap().into_iter().flatten().collect();
        let fitted = metaqda_core::calibration::fit_temperature(&fit_scored, DEFAULT_BINS).unwrap();
        let identity = ece(&records_at(&fit_scored, 1.0).unwrap(), DEFAULT_BINS).unwrap().ece;
        temp_ok &= fitted.ece <= identity;
        temp_detail.push(format!(
            "{name} T={:.3} {:.4}≤{:.4}",
            fitted.temperature_used, fitted.ece, identity
        ));
    }
    ensure(
        eces[0] <= eces[1] && eces[1] <= eces[2] && temp_ok,
        format!(
            "ECE FB {:.4} ≤ MAP {:.4} ≤ MLE {:.4}; fitted: {}",
            eces[0],
            eces[1],
            eces[2],
            temp_detail.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. Incremental class addition equals refitting

fn incremental_exactness() -> Check {
    let b = benchmark();
    let pool = generate_synthetic(&b.spec, 40, 150, &mut episode_rng(0, 3)).unwrap();
    let protocol = IncrementalProtocol::from_dataset(&pool, 20, 5, 50, 5, 50, 0).unwrap();
    let prior = &b.trained;
    let mode = Mode::FullBayes;

    let mut seen: Vec<_> = protocol.base.iter().collect();
    let mut model = QdaModel::fit_labeled(prior, seen.iter().map(|c| (c.id, c.support.as_slice())), mode).unwrap();
    let mut compared = 0usize;
    let mut mismatches = 0usize;
    for session in 0..=protocol.sessions.len() {
        if session > 0 {
            for class in &protocol.sessions[session - 1] {
                model = model.add_class(prior, class.id, &class.support).unwrap();
                seen.push(class);
            }
        }
        let batch = QdaModel::fit_labeled(prior, seen.iter().map(|c| (c.id, c.support.as_slice())), mode).unwrap();
        let ids_a: Vec<ClassId> = model.class_ids().collect();
        let ids_b: Vec<ClassId> = batch.class_ids().collect();
        if ids_a != ids_b {
            return Err(format!("class order differs at session {session}"));
        }
        for class in &seen {
            for x in &class.test {
                let a = model.log_scores(x).unwrap();
                let b = batch.log_scores(x).unwrap();
                compared += 1;
                if a.iter().zip(&b).any(|(u, v)| u.to_bits() != v.to_bits()) {
                    mismatches += 1;
                }
            }
        }
    }

    let results = evaluate_incremental(prior, mode, &protocol).unwrap();
    let accs: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    let monotone = accs.windows(2).all(|w| w[1] <= w[0]);
    let shown: Vec<String> = results
        .iter()
        .map(|r| format!("{}w {:.2}", r.ways, r.accuracy))
        .collect();
    ensure(
        mismatches == 0 && monotone,
        format!(
            "{mismatches} of {compared} score vectors differ; accuracy {}",
            shown.join(" → ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Full-Bayes predictions approach plug-in MAP predictions

fn fb_map_convergence() -> Check {
    let truths = [
        (vec![0.0, 0.0], Matrix::from_rows(&[&[1.0, 0.3], &[0.3, 0.8]])),
        (vec![1.2, 0.4], Matrix::from_rows(&[&[0.6, -0.2], &[-0.2, 1.1]])),
        (vec![-0.3, 1.3], Matrix::from_rows(&[&[1.4, 0.5], &[0.5, 0.9]])),
    ];
    let mut rng = episode_rng(5, 0);
    let draw = |mu: &[f64], sigma: &Matrix, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let l = cholesky(sigma).unwrap();
        let z: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        l.mul_vec(&z).iter().zip(mu).map(|(a, b)| a + b).collect()
    };
    let pools: Vec<Vec<Vec<f64>>> = truths
        .iter()
        .map(|(mu, s)| (0..2000).map(|_| draw(mu, s, &mut rng)).collect())
        .collect();
    let queries: Vec<Vec<f64>> = (0..300)
        .map(|i| draw(&truths[i % 3].0, &truths[i % 3].1, &mut rng))
        .collect();

    let prior = NiwPrior::standard(2);
    let mut gaps = Vec::new();
    for k in [10usize, 100, 1000, 2000] {
        let support: Vec<Vec<Vec<f64>>> = pools.iter().map(|p| p[..k].to_vec()).collect();
        let fb = QdaModel::fit(&prior, &support, Mode::FullBayes).unwrap();
        let map = QdaModel::fit(&prior, &support, Mode::Map).unwrap();
        let gap = queries.iter().fold(0.0f64, |g, x| {
            let a = fb.predict_fb(x).unwrap().probs;
            let b = map.predict_map(x).unwrap().probs;
            a.iter().zip(&b).fold(g, |g, (u, v)| g.max((u - v).abs()))
        });
        gaps.push((k, gap));
    }
    let decreasing = gaps.windows(2).all(|w| w[1].1 < w[0].1);
    let last = gaps.last().unwrap().1;
    let shown: Vec<String> = gaps.iter().map(|(k, g)| format!("K={k} {g:.2e}")).collect();
    ensure(decreasing && last < 1e-2, format!("max gap {}", shown.join(", ")))
}

// ---------------------------------------------------------------------------
// 7. Determinism and checkpoint round trip

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

fn determinism() -> Check {
    let b = benchmark();
    let checkpoint = |prior: NiwPrior| {
        PriorCheckpoint {
            prior,
            mode: Mode::FullBayes,
            normalization: Normalization::None,
        }
        .to_text()
    };
    let reference = checkpoint(b.trained.clone());
    let one = checkpoint(in_pool(1, || meta_train(&b.train, &b.train_config).unwrap().prior));
    let four = checkpoint(in_pool(4, || meta_train(&b.train, &b.train_config).unwrap().prior));

    let est = Estimator::Bayes {
        prior: b.trained.clone(),
        mode: Mode::FullBayes,
    };
    let eval_one = in_pool(1, || evaluate(&est, &b.test, &b.eval_config).unwrap());
    let eval_four = in_pool(4, || evaluate(&est, &b.test, &b.eval_config).unwrap());
    let eval_again = evaluate(&est, &b.test, &b.eval_config).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first.prior");
    let second = dir.path().join("second.prior");
    let ck = PriorCheckpoint {
        prior: b.trained.clone(),
        mode: Mode::FullBayes,
        normalization: Normalization::Cl2n {
            center: b.test.feature_mean(),
        },
    };
    ck.save(&first).unwrap();
    let loaded = PriorCheckpoint::load(&first).unwrap();
    loaded.save(&second).unwrap();
    let bytes_equal = std::fs::read(&first).unwrap() == std::fs::read(&second).unwrap();

    let train_equal = reference == one && one == four;
    let eval_equal = eval_one == eval_four && eval_one == eval_again;
    ensure(
        train_equal && eval_equal && bytes_equal && loaded == ck,
        format!(
            "checkpoints identical across runs/1/4 threads: {train_equal}; EvalResults identical: {eval_equal}; save/load/save byte-identical: {bytes_equal}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. Worked numerical examples

fn numerics_examples() -> Check {
    let mut failures = Vec::new();
    let mut checks = 0usize;
    let mut check = |ok: bool, what: &str| {
        checks += 1;
        if !ok {
            failures.push(what.to_string());
        }
    };
    let close = |a: f64, b: f64, tol: f64| (a - b).abs() <= tol;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();

    // Cholesky
    let l = cholesky(&Matrix::identity(2)).unwrap();
    check(
        l.to_dense().max_abs_diff(&Matrix::identity(2)) == 0.0,
        "cholesky(I) = I",
    );
    let a = Matrix::from_rows(&[&[4.0, 2.0], &[2.0, 5.0]]);
    let l = cholesky(&a).unwrap();
    check(
        l.to_dense()
            .max_abs_diff(&Matrix::from_rows(&[&[2.0, 0.0], &[1.0, 2.0]]))
            < 1e-12,
        "cholesky([[4,2],[2,5]])",
    );
    check(l.gram().max_abs_diff(&a) < 1e-12, "L Lᵀ reconstructs");
    check(
        matches!(
            cholesky(&Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]])),
            Err(Error::NotPositiveDefinite { .. })
        ),
        "indefinite matrix rejected",
    );

    // Gaussian log-density
    let i2 = LowerTriangular::identity(2);
    check(
        close(mvn_logpdf(&[0.3, -0.2], &[0.3, -0.2], &i2).unwrap(), -ln2pi, 1e-6),
        "mvn at mean, d=2",
    );
    let i1 = LowerTriangular::identity(1);
    check(
        close(mvn_logpdf(&[1.0], &[0.0], &i1).unwrap(), -0.5 - 0.5 * ln2pi, 1e-6),
        "mvn d=1 x=1",
    );
    let two = LowerTriangular::from_packed(1, vec![2.0]).unwrap();
    check(
        close(
            mvn_logpdf(&[0.0], &[0.0], &two).unwrap(),
            -0.5 * (8.0 * std::f64::consts::PI).ln(),
            1e-6,
        ),
        "mvn d=1 σ²=4",
    );

    // Student-t log-density
    check(
        close(
            mvt_logpdf(&[0.0], &[0.0], &i1, 1.0).unwrap(),
            -std::f64::consts::PI.ln(),
            1e-6,
        ),
        "Cauchy at 0",
    );
    check(
        close(mvt_logpdf(&[0.0], &[0.0], &i1, 1e6).unwrap(), -0.918939, 1e-4),
        "t with dof 1e6",
    );
    check(
        close(mvt_logpdf(&[1.0, 2.0], &[1.0, 2.0], &i2, 3.0).unwrap(), -ln2pi, 1e-6),
        "t d=2 dof=3",
    );

    // log-sum-exp
    check(close(log_sum_exp(&[0.0, 0.0]).unwrap(), 2f64.ln(), 1e-12), "lse [0,0]");
    check(
        close(log_sum_exp(&[1000.0, 1000.0]).unwrap(), 1000.0 + 2f64.ln(), 1e-9),
        "lse [1000,1000]",
    );
    check(log_sum_exp(&[0.0, f64::NEG_INFINITY]).unwrap() == 0.0, "lse [0,-inf]");

    // Default prior
    let p = NiwPrior::standard(2);
    check(
        p.mean() == [0.0, 0.0] && p.kappa() == 1.0 && p.nu() == 2.0,
        "default prior d=2",
    );
    check(NiwPrior::standard(1).nu() == 1.0, "default prior d=1");
    check(NiwPrior::standard(640).nu() == 640.0, "default prior d=640");

    // Conjugate update and MAP
    let post = niw_posterior(&p, &[[0.0, 0.0], [0.0, 0.0]]).unwrap();
    check(
        post.mean == [0.0, 0.0]
            && post.kappa == 3.0
            && post.nu == 4.0
            && post.scale.max_abs_diff(&Matrix::identity(2)) < 1e-15,
        "posterior from samples at the prior mean",
    );
    let post = niw_posterior(&p, &[[1.0, 0.0]]).unwrap();
    check(
        close(post.mean[0], 0.5, 1e-15)
            && post.mean[1] == 0.0
            && post.kappa == 2.0
            && post.nu == 3.0
            && post.scale.max_abs_diff(&Matrix::diagonal(&[1.5, 1.0])) < 1e-15,
        "posterior from {(1,0)}",
    );
    let map = map_estimate(&post).unwrap();
    check(
        map.sigma.max_abs_diff(&Matrix::diagonal(&[0.25, 1.0 / 6.0])) < 1e-15 && close(map.mu[0], 0.5, 1e-15),
        "MAP from {(1,0)}",
    );
    let post = niw_posterior(&p, &[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
    check(
        post.mean == [0.0, 0.0]
            && post.kappa == 3.0
            && post.nu == 4.0
            && post.scale.max_abs_diff(&Matrix::diagonal(&[3.0, 1.0])) < 1e-15,
        "posterior from {(1,0),(-1,0)}",
    );
    let map = map_estimate(&post).unwrap();
    check(
        map.sigma.max_abs_diff(&Matrix::diagonal(&[3.0 / 7.0, 1.0 / 7.0])) < 1e-15,
        "MAP from {(1,0),(-1,0)}",
    );
    let iso = NiwPrior::new(
        vec![0.0, 0.0],
        1.0,
        LowerTriangular::identity(2).scaled(3f64.sqrt()),
        2.0,
    )
    .unwrap();
    let post = niw_posterior(&iso, &[[0.0, 0.0]]).unwrap();
    let map = map_estimate(&post).unwrap();
    check(
        map.sigma.max_abs_diff(&Matrix::diagonal(&[3.0 / 6.0, 3.0 / 6.0])) < 1e-14,
        "isotropic MAP",
    );

    // Ridge MLE
    let class = vec![vec![vec![0.0, 0.0], vec![2.0, 0.0]]];
    check(
        matches!(
            mle_qda(&class, Ridge::Fixed(0.0)),
            Err(Error::NotPositiveDefinite { .. })
        ),
        "rank-deficient MLE rejected",
    );
    let g = &mle_qda(&class, Ridge::Fixed(1e-6)).unwrap()[0];
    check(
        g.mu == [1.0, 0.0] && g.sigma.max_abs_diff(&Matrix::diagonal(&[1.0 + 1e-6, 1e-6])) < 1e-15,
        "ridge MLE",
    );

    // Classifier
    let model = QdaModel::from_gaussians(&[
        metaqda_core::GaussianParams::new(vec![0.0], Matrix::identity(1)).unwrap(),
        metaqda_core::GaussianParams::new(vec![2.0], Matrix::identity(1)).unwrap(),
    ])
    .unwrap();
    check(
        close(
            model.predict(&[0.0]).unwrap().probs[0],
            1.0 / (1.0 + (-2f64).exp()),
            1e-12,
        ),
        "two-Gaussian logistic",
    );

    // ECE
    let rec = |confidence, correct| metaqda_core::calibration::CalibrationRecord { confidence, correct };
    check(
        ece(&[rec(1.0, true); 10], 20).unwrap().ece == 0.0,
        "perfect calibration",
    );
    let report = ece(&[rec(0.9, true), rec(0.9, false)], 20).unwrap();
    let bin = report.bins[18];
    check(
        close(report.ece, 0.4, 1e-12) && bin.accuracy == 0.5 && close(bin.confidence, 0.9, 1e-15),
        "ECE hand case",
    );

    // Episode loss at the mode
    let one_d = NiwPrior::new(vec![0.0], 1.0, LowerTriangular::identity(1), 1.0).unwrap();
    let post = niw_posterior(&one_d, &[[0.0]]).unwrap();
    let var = map_estimate(&post).unwrap().sigma[(0, 0)];
    let scaled = NiwPrior::new(
        vec![0.0],
        1.0,
        LowerTriangular::from_packed(1, vec![(1.0 / var).sqrt()]).unwrap(),
        1.0,
    )
    .unwrap();
    let ep = Episode {
        support: vec![vec![vec![0.0]]],
        query: vec![(vec![0.0], 0)],
        classes: vec![0],
        support_rows: vec![vec![]],
        query_rows: vec![],
    };
    let loss = episode_loss(&scaled, &ep, Mode::Map, LossKind::Generative).unwrap();
    check(close(loss, 0.918939, 1e-6), "generative loss at the mode");

    ensure(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{checks} worked examples")
        } else {
            format!("{} of {checks} failed: {}", failures.len(), failures.join("; "))
        },
    )
}

// ---------------------------------------------------------------------------
// Held-out loss of a MAP-trained prior on its own generative process

fn map_training_reduces_heldout_loss() -> Check {
    let b = benchmark();
    let config = TrainerConfig {
        mode: Mode::Map,
        ..b.train_config.clone()
    };
    let trained = meta_train(&b.train, &config).unwrap().prior;
    let episodes = sample_episodes(
        &b.test,
        &EpisodeConfig {
            episodes: 200,
            seed: 2,
            ..b.eval_config
        },
    )
    .unwrap();
    let mean_loss = |prior: &NiwPrior| {
        episodes
            .iter()
            .map(|ep| episode_loss(prior, ep, Mode::Map, LossKind::Generative).unwrap())
            .sum::<f64>()
            / episodes.len() as f64
    };
    let (after, before) = (mean_loss(&trained), mean_loss(&NiwPrior::standard(DIM)));
    ensure(
        after < before,
        format!(
            "held-out loss {after:.2} vs default {before:.2} (margin {:.2})",
            before - after
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let criterion = |name, secs, run| Criterion {
        name,
        budget: Duration::from_secs(secs),
        run,
    };
    let criteria = [
        criterion("conjugacy predictive oracle", 60, conjugacy_oracle),
        criterion("gradient finite differences", 60, gradient_finite_differences),
        criterion("accuracy ordering", 600, accuracy_ordering),
        criterion("calibration ordering", 600, calibration_ordering),
        criterion("incremental exactness", 120, incremental_exactness),
        criterion("FB to MAP convergence", 60, fb_map_convergence),
        criterion("determinism and serialization", 600, determinism),
        criterion("numerics worked examples", 10, numerics_examples),
        criterion("MAP-trained held-out loss", 600, map_training_reduces_heldout_loss),
    ];
    let mut failed = 0;
    for Criterion { name, budget, run } in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if elapsed <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over time budget")),
            Err(d) => (false, d),
        };
        failed += !ok as usize;
        println!(
            "{} {name}: {detail} [{:.2}s / {}s]",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
