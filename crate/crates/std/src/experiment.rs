//! Experiment configuration and the repeat/method driver.
//!
//! Output layout of an experiment directory:
//!
//! ```text
//! config.json
//! noise/repeat-<r>.csv          frozen noise realization shared by all methods
//! runs/<method>-r<r>/epochs.csv per-epoch metrics
//! runs/<method>-r<r>/steps.csv  per-step ELBO terms (CausalNL)
//! runs/<method>-r<r>/result.json, summary.json, model.ckpt
//! aggregate.csv, aggregate.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use causalnl_core::datasets::{generate_moon, LabeledDataset, NoisyDataset};
use causalnl_core::losses::ElboWeights;
use causalnl_core::metrics::{aggregate, AggregateRow, RunResult};
use causalnl_core::model::Preset;
use causalnl_core::noise::{
    empirical_transition, synthesize, NoiseKind, NoiseSpec, TransitionMatrix, DEFAULT_FLIP_STD,
};
use causalnl_core::rng::{self, stream};
use causalnl_core::train::{self, EpochMetrics, Method, Observer, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Model};
use crate::error::{Error, Result};
use crate::formats::{read_bytes, read_idx_dataset, write_bytes, write_noise_csv, Split};
use crate::logging::{write_epoch_csv, write_json, MetricsLog, Summary};

pub const DEFAULT_REPEATS: usize = 5;

fn default_repeats() -> usize {
    DEFAULT_REPEATS
}
fn default_moon_train() -> usize {
    3000
}
fn default_moon_test() -> usize {
    1000
}
fn default_moon_std() -> f64 {
    0.1
}
fn default_flip_std() -> f64 {
    DEFAULT_FLIP_STD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Two interleaving half circles; the test split uses a derived seed.
    Moon {
        #[serde(default = "default_moon_train")]
        train_size: usize,
        #[serde(default = "default_moon_test")]
        test_size: usize,
        #[serde(default = "default_moon_std")]
        noise_std: f64,
        #[serde(default)]
        seed: u64,
    },
    /// An IDX directory with `train-*` and `t10k-*` files.
    Idx {
        dir: PathBuf,
        #[serde(default)]
        name: Option<String>,
        /// Random training subset size; the whole split when absent.
        #[serde(default)]
        train_subset: Option<usize>,
        #[serde(default)]
        seed: u64,
    },
}

impl DatasetSpec {
    /// 3000 training and 1000 test points with coordinate noise 0.1.
    pub fn moon(seed: u64) -> Self {
        DatasetSpec::Moon {
            train_size: default_moon_train(),
            test_size: default_moon_test(),
            noise_std: default_moon_std(),
            seed,
        }
    }

    pub fn name(&self) -> String {
        match self {
            DatasetSpec::Moon { .. } => "moon".into(),
            DatasetSpec::Idx { dir, name, .. } => name.clone().unwrap_or_else(|| {
                dir.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "idx".into())
            }),
        }
    }

    /// Loads `(train, test)`.
    pub fn load(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match self {
            DatasetSpec::Moon {
                train_size,
                test_size,
                noise_std,
                seed,
            } => Ok((
                generate_moon(*train_size, *noise_std, *seed)?,
                generate_moon(*test_size, *noise_std, rng::derive_seed(*seed, &[stream::TEST_SPLIT]))?,
            )),
            DatasetSpec::Idx {
                dir,
                train_subset,
                seed,
                ..
            } => {
                let name = self.name();
                let mut train = read_idx_dataset(dir, Split::Train, &name)?;
                let test = read_idx_dataset(dir, Split::Test, &name)?;
                if let Some(n) = train_subset {
                    train = train.random_subset(*n, rng::derive_seed(*seed, &[stream::SUBSET]))?;
                }
                Ok((train, test))
            }
        }
    }

    /// Desk-scale defaults for this kind of data.
    pub fn default_train_config(&self, noise_rate: f64, seed: u64) -> TrainConfig {
        match self {
            DatasetSpec::Moon { .. } => TrainConfig::moon(noise_rate, seed),
            DatasetSpec::Idx { .. } => TrainConfig::small_image(noise_rate, seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSettings {
    pub kind: NoiseKind,
    pub rate: f64,
    #[serde(default = "default_flip_std")]
    pub flip_std: f64,
}

impl NoiseSettings {
    pub fn spec(&self, seed: u64) -> NoiseSpec {
        NoiseSpec {
            kind: self.kind,
            rate: self.rate,
            seed,
            flip_std: self.flip_std,
        }
    }
}

/// Optional replacements for the dataset's default [`TrainConfig`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub latent_dim: Option<usize>,
    pub preset: Option<Preset>,
    pub hidden_width: Option<usize>,
    pub augment: Option<bool>,
    pub weights: Option<ElboWeights>,
    /// Co-teaching forget rate; the noise rate when absent.
    pub forget_rate: Option<f64>,
    pub warmup_epochs: Option<usize>,
}

impl TrainOverrides {
    pub fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        cfg.epochs = self.epochs.unwrap_or(cfg.epochs);
        cfg.batch_size = self.batch_size.unwrap_or(cfg.batch_size);
        cfg.learning_rate = self.learning_rate.unwrap_or(cfg.learning_rate);
        cfg.latent_dim = self.latent_dim.unwrap_or(cfg.latent_dim);
        cfg.preset = self.preset.unwrap_or(cfg.preset);
        cfg.hidden_width = self.hidden_width.unwrap_or(cfg.hidden_width);
        cfg.augment = self.augment.unwrap_or(cfg.augment);
        cfg.weights = self.weights.unwrap_or(cfg.weights);
        cfg.schedule.forget_rate = self.forget_rate.unwrap_or(cfg.schedule.forget_rate);
        cfg.schedule.warmup_epochs = self.warmup_epochs.unwrap_or(cfg.schedule.warmup_epochs);
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub noise: NoiseSettings,
    pub methods: Vec<String>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub train: TrainOverrides,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&read_bytes(path)?)?)
    }

    pub fn parsed_methods(&self) -> Result<Vec<Method>> {
        if self.methods.is_empty() {
            return Err(causalnl_core::Error::InvalidArgument("no methods given".into()).into());
        }
        Ok(self
            .methods
            .iter()
            .map(|m| m.parse())
            .collect::<causalnl_core::Result<Vec<_>>>()?)
    }

    /// Seed of repeat `r`.
    pub fn repeat_seed(&self, r: usize) -> u64 {
        self.base_seed.wrapping_add(r as u64)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        self.train
            .apply(self.dataset.default_train_config(self.noise.rate, seed))
    }
}

/// Transition matrix handed to forward correction: the analytic matrix for
/// class-conditional noise, the empirical one for instance-dependent noise.
pub fn oracle_transition(noisy: &NoisyDataset, spec: &NoiseSpec) -> Result<TransitionMatrix> {
    let c = noisy.num_classes();
    Ok(match spec.kind {
        NoiseKind::Symmetric => TransitionMatrix::symmetric(c, spec.rate)?,
        NoiseKind::Pairflip => TransitionMatrix::pairflip(c, spec.rate)?,
        NoiseKind::InstanceDependent => empirical_transition(noisy.clean_labels()?, noisy.noisy_labels(), c)?,
    })
}

/// A trained model with its epoch history; model 0 is the reported one.
pub struct Trained {
    pub model: Model,
    pub history: Vec<EpochMetrics>,
}

pub fn train_method(
    method: Method,
    train_set: &NoisyDataset,
    test: &LabeledDataset,
    cfg: &TrainConfig,
    transition: Option<&TransitionMatrix>,
    observer: &mut dyn Observer,
) -> Result<Trained> {
    let (model, history) = match method {
        Method::CausalNl => {
            let ([b, _], h) = train::train_causalnl(train_set, test, cfg, observer)?;
            (Model::Branch(b), h)
        }
        Method::Ce => {
            let (c, h) = train::train_ce(train_set, test, cfg, observer)?;
            (Model::Classifier(c), h)
        }
        Method::CoTeaching => {
            let ([c, _], h) = train::train_coteaching(train_set, test, cfg, observer)?;
            (Model::Classifier(c), h)
        }
        Method::Forward => {
            let t = transition.ok_or_else(|| {
                causalnl_core::Error::InvalidArgument("forward correction needs a transition matrix".into())
            })?;
            let (c, h) = train::train_forward(train_set, test, cfg, t, observer)?;
            (Model::Classifier(c), h)
        }
    };
    Ok(Trained { model, history })
}

pub fn run_result(
    method: Method,
    dataset: &str,
    noise: NoiseSpec,
    seed: u64,
    history: &[EpochMetrics],
) -> Result<RunResult> {
    let series = |k: usize| history.iter().map(|m| m.test_accuracy[k]).collect::<Vec<_>>();
    let mut result = RunResult::new(method.name(), dataset, noise, seed, series(0))?;
    if history.first().is_some_and(|m| m.test_accuracy.len() > 1) {
        result.peer_accuracy = Some(series(1));
    }
    Ok(result)
}

/// Writes the per-run files into `dir`.
pub fn write_run(dir: &Path, trained: &Trained, result: &RunResult, steps_csv: &[u8]) -> Result<()> {
    write_epoch_csv(&dir.join("epochs.csv"), &trained.history)?;
    if trained.history.first().is_some_and(|m| !m.elbo.is_empty()) {
        write_bytes(&dir.join("steps.csv"), steps_csv)?;
    }
    write_json(&dir.join("result.json"), result)?;
    write_json(&dir.join("summary.json"), &Summary::from(result))?;
    checkpoint::save(&dir.join("model.ckpt"), &trained.model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub method: String,
    pub repeat: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub output_dir: PathBuf,
    pub results: Vec<RunResult>,
    pub failures: Vec<RunFailure>,
    pub aggregate: Vec<AggregateRow>,
}

/// Prepares an output directory, refusing to touch a nonempty one unless forced.
pub fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    let nonempty = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if nonempty {
        if !force {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
        fs::remove_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "method",
        "dataset",
        "noise_kind",
        "rate",
        "repeats",
        "mean",
        "std",
        "epoch_std",
    ])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.dataset.clone(),
            r.noise_kind.clone(),
            r.rate.to_string(),
            r.repeats.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
            r.epoch_std.to_string(),
        ])?;
    }
    Ok(w.into_inner().expect("in-memory writer"))
}

/// Writes `aggregate.csv` and `aggregate.json` for `results` into `dir`.
pub fn write_aggregate(dir: &Path, results: &[RunResult]) -> Result<Vec<AggregateRow>> {
    let rows = if results.is_empty() {
        Vec::new()
    } else {
        aggregate(results)?
    };
    write_bytes(&dir.join("aggregate.csv"), &aggregate_csv(&rows)?)?;
    write_json(&dir.join("aggregate.json"), &rows)?;
    Ok(rows)
}

/// Reads every `runs/*/result.json` below an experiment directory, sorted by path.
pub fn load_results(dir: &Path) -> Result<Vec<RunResult>> {
    let runs = dir.join("runs");
    let mut paths: Vec<PathBuf> = fs::read_dir(&runs)
        .map_err(Error::io(&runs))?
        .filter_map(|e| e.ok().map(|e| e.path().join("result.json")))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| Ok(serde_json::from_slice(&read_bytes(p)?)?))
        .collect()
}

/// Trains every method on every repeat. Failed runs are reported, not fatal.
pub fn run_experiment(cfg: &ExperimentConfig, force: bool, verbose: bool) -> Result<ExperimentReport> {
    let methods = cfg.parsed_methods()?;
    if cfg.repeats == 0 {
        return Err(causalnl_core::Error::InvalidArgument("repeats must be at least 1".into()).into());
    }
    cfg.noise.spec(0).validate()?;
    cfg.train_config(cfg.base_seed).validate()?;

    let out = crate::resolve_output(&cfg.output_dir);
    prepare_output(&out, force)?;
    write_json(&out.join("config.json"), cfg)?;

    let (train_set, test) = cfg.dataset.load()?;
    let dataset = cfg.dataset.name();
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for r in 0..cfg.repeats {
        let seed = cfg.repeat_seed(r);
        let spec = cfg.noise.spec(seed);
        let noisy = synthesize(&train_set, &spec)?;
        write_noise_csv(&out.join("noise").join(format!("repeat-{r}.csv")), &noisy)?;
        let transition = if methods.contains(&Method::Forward) {
            Some(oracle_transition(&noisy, &spec)?)
        } else {
            None
        };
        let noisy = noisy.without_clean_labels();
        let tcfg = cfg.train_config(seed);

        for &method in &methods {
            if verbose {
                eprintln!("{} repeat {} (seed {seed})", method.name(), r + 1);
            }
            let dir = out.join("runs").join(format!("{}-r{r}", method.name()));
            let started = Instant::now();
            let mut log = MetricsLog::new(verbose);
            let outcome =
                train_method(method, &noisy, &test, &tcfg, transition.as_ref(), &mut log).and_then(|trained| {
                    let mut result = run_result(method, &dataset, spec, seed, &trained.history)?;
                    result.wall_time_secs = started.elapsed().as_secs_f64();
                    write_run(&dir, &trained, &result, &log.step_csv()?)?;
                    Ok(result)
                });
            match outcome {
                Ok(result) => results.push(result),
                Err(e) => {
                    write_bytes(&dir.join("error.txt"), format!("{e}\n").as_bytes())?;
                    failures.push(RunFailure {
                        method: method.name().into(),
                        repeat: r,
                        message: e.to_string(),
                    });
                }
            }
        }
    }
    let aggregate = write_aggregate(&out, &results)?;
    Ok(ExperimentReport {
        output_dir: out,
        results,
        failures,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(methods: &[&str], repeats: usize, out: &Path) -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSpec::Moon {
                train_size: 240,
                test_size: 120,
                noise_std: 0.1,
                seed: 1,
            },
            noise: NoiseSettings {
                kind: NoiseKind::InstanceDependent,
                rate: 0.3,
                flip_std: DEFAULT_FLIP_STD,
            },
            methods: methods.iter().map(|m| m.to_string()).collect(),
            repeats,
            base_seed: 10,
            train: TrainOverrides {
                epochs: Some(2),
                batch_size: Some(64),
                hidden_width: Some(16),
                ..TrainOverrides::default()
            },
            output_dir: out.to_path_buf(),
        }
    }

    #[test]
    fn repeats_use_distinct_seeds_and_share_noise_across_methods() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(&["ce", "coteaching", "forward"], 5, dir.path());
        let report = run_experiment(&cfg, true, false).unwrap();
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        assert_eq!(report.results.len(), 15);
        let seeds: std::collections::BTreeSet<u64> = report.results.iter().map(|r| r.seed).collect();
        assert_eq!(seeds.len(), 5);
        for r in 0..5 {
            let noise = report
                .results
                .iter()
                .filter(|x| x.seed == cfg.repeat_seed(r))
                .map(|x| x.noise)
                .collect::<Vec<_>>();
            assert_eq!(noise.len(), 3);
            assert!(noise.iter().all(|n| *n == noise[0]));
            let frozen = crate::formats::read_noise_csv(
                &dir.path().join(format!("noise/repeat-{r}.csv")),
                cfg.dataset.load().unwrap().0,
            )
            .unwrap();
            let fresh = synthesize(&cfg.dataset.load().unwrap().0, &noise[0]).unwrap();
            assert_eq!(frozen.noisy_labels(), fresh.noisy_labels());
        }
        for name in [
            "config.json",
            "aggregate.csv",
            "aggregate.json",
            "runs/ce-r0/epochs.csv",
            "runs/forward-r4/model.ckpt",
            "runs/coteaching-r2/summary.json",
        ] {
            assert!(dir.path().join(name).is_file(), "{name}");
        }
        assert_eq!(report.aggregate.len(), 3);
        assert!(report.aggregate.iter().all(|a| a.repeats == 5));
    }

    #[test]
    fn rerun_gives_identical_aggregate_and_it_matches_the_run_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(&["ce", "causalnl"], 2, dir.path());
        run_experiment(&cfg, false, false).unwrap();
        let first = fs::read(dir.path().join("aggregate.csv")).unwrap();
        let epochs = fs::read(dir.path().join("runs/causalnl-r1/epochs.csv")).unwrap();
        assert!(dir.path().join("runs/causalnl-r1/steps.csv").is_file());
        assert!(!dir.path().join("runs/ce-r1/steps.csv").exists());

        let report = run_experiment(&cfg, true, false).unwrap();
        assert_eq!(fs::read(dir.path().join("aggregate.csv")).unwrap(), first);
        assert_eq!(
            fs::read(dir.path().join("runs/causalnl-r1/epochs.csv")).unwrap(),
            epochs
        );

        let recomputed = aggregate(&load_results(dir.path()).unwrap()).unwrap();
        assert_eq!(aggregate_csv(&recomputed).unwrap(), first);
        assert_eq!(recomputed, report.aggregate);
    }

    #[test]
    fn existing_output_is_not_overwritten_without_force() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("keep.txt"), "x").unwrap();
        let err = run_experiment(&small(&["ce"], 1, dir.path()), false, false).unwrap_err();
        assert!(matches!(err, Error::OutputExists(_)));
        assert!(dir.path().join("keep.txt").is_file());
    }

    #[test]
    fn invalid_configs_fail_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        for cfg in [
            small(&["ce", "mixup"], 1, &out),
            small(&[], 1, &out),
            small(&["ce"], 0, &out),
            ExperimentConfig {
                noise: NoiseSettings {
                    rate: 1.5,
                    ..small(&[], 1, &out).noise
                },
                ..small(&["ce"], 1, &out)
            },
        ] {
            let err = run_experiment(&cfg, false, false).unwrap_err();
            assert!(
                matches!(err, Error::Core(causalnl_core::Error::InvalidArgument(_))),
                "{err}"
            );
            assert!(!out.exists());
        }
    }

    #[test]
    fn config_json_round_trip_with_defaults() {
        let json = r#"{"dataset": {"kind": "moon"}, "noise": {"kind": "symmetric", "rate": 0.2},
            "methods": ["ce"], "output_dir": "runs/x"}"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.repeats, DEFAULT_REPEATS);
        assert_eq!(cfg.dataset, DatasetSpec::moon(0));
        assert_eq!(cfg.train_config(3).epochs, 100);
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<ExperimentConfig>(&json.replace("\"ce\"]", "\"ce\"], \"bogus\": 1")).is_err());
    }
}
