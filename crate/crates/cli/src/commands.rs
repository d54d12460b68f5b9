use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use metaqda_core::calibration;
use metaqda_core::episodes::{generate_synthetic, normalize_cl2n};
use metaqda_core::format::{read_feature_file, write_feature_file, Normalization, PriorCheckpoint, MAGIC};
use metaqda_core::protocol::{
    accuracy_of, calibration_at, evaluate, evaluate_incremental, sample_episodes, score_episodes, EpisodeConfig,
    Estimator, IncrementalProtocol,
};
use metaqda_core::trainer::meta_train_from;
use metaqda_core::{episode_rng, FeatureDataset, NiwPrior, Ridge, SyntheticTaskSpec, TrainerConfig};

use crate::{
    CalibrateArgs, CliError, Command, EstimatorArgs, EvalArgs, IncrementalArgs, InspectArgs, MetaTrainArgs, SynthArgs,
};

type Result<T> = std::result::Result<T, CliError>;

/// `println!` that reports a closed stdout as [`CliError::BrokenPipe`]
/// instead of panicking.
macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout().lock(), $($arg)*).map_err(stdout_error)?
    };
}

fn stdout_error(e: std::io::Error) -> CliError {
    if e.kind() == std::io::ErrorKind::BrokenPipe {
        CliError::BrokenPipe
    } else {
        io_error(Path::new("<stdout>"), e)
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::MetaTrain(args) => meta_train(args),
        Command::Eval(args) => eval(args),
        Command::EvalIncremental(args) => eval_incremental(args),
        Command::Calibrate(args) => calibrate(args),
        Command::Synth(args) => synth(args),
        Command::Inspect(args) => inspect(args),
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(metaqda_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn apply_normalization(dataset: FeatureDataset, normalization: &Normalization) -> Result<FeatureDataset> {
    match normalization {
        Normalization::None => Ok(dataset),
        Normalization::Cl2n { center } => Ok(normalize_cl2n(&dataset, center)?),
    }
}

fn meta_train(args: MetaTrainArgs) -> Result<()> {
    let raw = read_feature_file(&args.features)?;
    let (init, normalization) = match &args.init {
        Some(path) => {
            let ck = PriorCheckpoint::load(path)?;
            (ck.prior, ck.normalization)
        }
        None => {
            let normalization = match args.normalize.as_str() {
                "none" => Normalization::None,
                "cl2n" => Normalization::Cl2n {
                    center: raw.feature_mean(),
                },
                other => {
                    return Err(CliError::Usage(format!(
                        "--normalize: unknown value {other:?} (none | cl2n)"
                    )))
                }
            };
            (NiwPrior::standard(raw.dim()), normalization)
        }
    };
    let dataset = apply_normalization(raw, &normalization)?;
    let config = TrainerConfig {
        iterations: args.iters,
        learning_rate: args.lr,
        optimizer: args.optimizer,
        schedule: args.schedule,
        batch_episodes: args.batch,
        loss: args.loss,
        mode: args.mode,
        ways: args.episode.ways,
        shots: args.episode.shots,
        queries: args.episode.queries,
        seed: args.seed,
        freeze_mean: args.freeze_mean,
        ..TrainerConfig::default()
    };

    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".log");
        PathBuf::from(p)
    });
    let file = File::create(&log_path).map_err(|e| io_error(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut write_err = None;
    let outcome = meta_train_from(init, &dataset, &config, |record| {
        if write_err.is_none() {
            if let Err(e) = writeln!(log, "{record}") {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_error(&log_path, e));
    }
    log.flush().map_err(|e| io_error(&log_path, e))?;

    PriorCheckpoint {
        prior: outcome.prior.clone(),
        mode: args.mode,
        normalization,
    }
    .save(&args.out)?;

    let tail = &outcome.log[outcome.log.len().saturating_sub(100)..];
    let smoothed = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64;
    out!(
        "trained {} iterations: loss {:.4} (last {} mean), kappa {:.4}, nu {:.4}",
        outcome.log.len(),
        smoothed,
        tail.len(),
        outcome.prior.kappa(),
        outcome.prior.nu()
    );
    out!("checkpoint {}", args.out.display());
    out!("log {}", log_path.display());
    Ok(())
}

/// The estimator requested on the command line, and the normalization its
/// inputs need.
fn build_estimator(args: &EstimatorArgs) -> Result<(Estimator, Normalization)> {
    match args.estimator.as_str() {
        "metaqda" => {
            let path = args
                .prior
                .as_ref()
                .ok_or_else(|| CliError::Usage("--prior is required with --estimator metaqda".into()))?;
            let ck = PriorCheckpoint::load(path)?;
            let estimator = Estimator::Bayes {
                prior: ck.prior,
                mode: args.mode.unwrap_or(ck.mode),
            };
            Ok((estimator, ck.normalization))
        }
        "mle" => {
            let ridge = match args.ridge.as_str() {
                "auto" => Ridge::Auto,
                v => Ridge::Fixed(v.parse().ok().filter(|r: &f64| *r >= 0.0).ok_or_else(|| {
                    CliError::Usage(format!("--ridge: expected `auto` or a non-negative number, got {v:?}"))
                })?),
            };
            let normalization = match &args.prior {
                Some(path) => PriorCheckpoint::load(path)?.normalization,
                None => Normalization::None,
            };
            Ok((Estimator::RidgeMle(ridge), normalization))
        }
        other => Err(CliError::Usage(format!(
            "--estimator: unknown value {other:?} (metaqda | mle)"
        ))),
    }
}

fn load_features(path: &Path, normalization: &Normalization) -> Result<FeatureDataset> {
    apply_normalization(read_feature_file(path)?, normalization)
}

fn eval(args: EvalArgs) -> Result<()> {
    let (estimator, normalization) = build_estimator(&args.estimator)?;
    let dataset = load_features(&args.features, &normalization)?;
    let config = EpisodeConfig {
        ways: args.episode.ways,
        shots: args.episode.shots,
        queries: args.episode.queries,
        episodes: args.episodes,
        seed: args.seed,
    };
    let result = evaluate(&estimator, &dataset, &config)?;
    if args.per_episode {
        for (i, a) in result.accuracies.iter().enumerate() {
            out!("episode {i}\t{a:.4}");
        }
    }
    out!("{result}");
    Ok(())
}

fn eval_incremental(args: IncrementalArgs) -> Result<()> {
    let ck = PriorCheckpoint::load(&args.prior)?;
    let dataset = load_features(&args.features, &ck.normalization)?;
    let protocol = IncrementalProtocol::from_dataset(
        &dataset,
        args.base_classes,
        args.session_ways,
        args.base_shots,
        args.shots,
        args.test_per_class,
        args.seed,
    )?;
    let results = evaluate_incremental(&ck.prior, args.mode.unwrap_or(ck.mode), &protocol)?;
    for r in &results {
        out!("{r}");
    }
    let mean = results.iter().map(|r| r.accuracy).sum::<f64>() / results.len() as f64;
    out!("mean {mean:.2}");
    Ok(())
}

fn calibrate(args: CalibrateArgs) -> Result<()> {
    let (estimator, normalization) = build_estimator(&args.estimator)?;
    let test = load_features(&args.features, &normalization)?;
    let episode = |episodes, seed| EpisodeConfig {
        ways: args.episode.ways,
        shots: args.episode.shots,
        queries: args.episode.queries,
        episodes,
        seed,
    };
    if args.bins == 0 {
        return Err(CliError::Usage("--bins must be at least 1".into()));
    }
    let bins = args.bins;
    let scored = score_episodes(&estimator, &sample_episodes(&test, &episode(args.episodes, args.seed))?)?;
    let before = calibration_at(&scored, 1.0, bins)?;

    let temperature = match args.temperature {
        Some(t) if t > 0.0 && t.is_finite() => t,
        Some(t) => return Err(CliError::Usage(format!("--temperature must be positive, got {t}"))),
        None => {
            let validation = match &args.validation {
                Some(path) => load_features(path, &normalization)?,
                None => test.clone(),
            };
            let val_episodes = sample_episodes(&validation, &episode(args.val_episodes, args.seed.wrapping_add(1)))?;
            let val_scored: Vec<_> = score_episodes(&estimator, &val_episodes)?
                .into_iter()
                .flatten()
                .collect();
            let fitted = calibration::fit_temperature(&val_scored, bins)?;
            out!(
                "fitted temperature {:.4} (validation ece {:.4} over {} episodes)",
                fitted.temperature_used,
                fitted.ece,
                args.val_episodes
            );
            fitted.temperature_used
        }
    };
    let after = calibration_at(&scored, temperature, bins)?;
    out!("{}", accuracy_of(&scored)?);
    out!("ece {:.4} at temperature 1", before.ece);
    out!("ece {:.4} at temperature {temperature:.4}", after.ece);
    if args.table {
        write!(std::io::stdout().lock(), "{}", after.to_table()).map_err(stdout_error)?;
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    if args.d == 0 {
        return Err(CliError::Usage("--d must be at least 1".into()));
    }
    let mut spec = SyntheticTaskSpec::benchmark(args.d);
    if args.kappa.is_some() || args.nu.is_some() {
        let p = &spec.prior;
        spec.prior = NiwPrior::new(
            p.mean().to_vec(),
            args.kappa.unwrap_or(p.kappa()),
            p.scale_factor().clone(),
            args.nu.unwrap_or(p.nu()),
        )
        .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    spec.noise_scale = args.noise;
    spec.class_pool = args.classes;
    let dataset = generate_synthetic(&spec, args.classes, args.per_class, &mut episode_rng(args.seed, 0))?;
    write_feature_file(&dataset, &args.out)?;
    out!(
        "wrote {}: d={} classes={} rows={}",
        args.out.display(),
        dataset.dim(),
        dataset.class_count(),
        dataset.len()
    );
    Ok(())
}

fn inspect(args: InspectArgs) -> Result<()> {
    let mut head = [0u8; 4];
    let n = File::open(&args.path)
        .and_then(|mut f| f.read(&mut head))
        .map_err(|e| io_error(&args.path, e))?;
    if n == 4 && head == MAGIC {
        let ds = read_feature_file(&args.path)?;
        let sizes: Vec<usize> = (0..ds.class_count() as u32).map(|c| ds.class_rows(c).len()).collect();
        out!("feature file {}", args.path.display());
        out!("d {}", ds.dim());
        out!("classes {}", ds.class_count());
        out!("rows {}", ds.len());
        out!(
            "rows per class {}..{}",
            sizes.iter().min().copied().unwrap_or(0),
            sizes.iter().max().copied().unwrap_or(0)
        );
        return Ok(());
    }
    let text = fs::read_to_string(&args.path).map_err(|e| io_error(&args.path, e))?;
    let ck = PriorCheckpoint::from_text(&text)?;
    let p = &ck.prior;
    out!("prior checkpoint {}", args.path.display());
    out!("d {}", p.dim());
    out!("mode {}", ck.mode);
    match &ck.normalization {
        Normalization::None => out!("normalization none"),
        Normalization::Cl2n { .. } => out!("normalization cl2n"),
    }
    out!("kappa {}", p.kappa());
    out!("nu {}", p.nu());
    out!("log det S {:.6}", 2.0 * p.scale_factor().log_det());
    out!("|m| {:.6}", p.mean().iter().map(|v| v * v).sum::<f64>().sqrt());
    Ok(())
}
