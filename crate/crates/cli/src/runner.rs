//! Experiment grid: arms × site counts × repeats.
//!
//! Data is loaded once per repeat. For every site count `k` the first `k`
//! training sites are preprocessed (feature selection and min-max bounds are
//! fitted on those sites only) and each requested arm is trained on them.
//! The test set does not depend on `k`.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use cyclic_dp_core::data::{
    fit_bounds, generate_multisite, min_max_normalize, top_variance_features,
};
use cyclic_dp_core::federation::{self, Mode, RunRecord};
use cyclic_dp_core::metrics::{summarize_run, ReportRow};
use cyclic_dp_core::rng::{NoiseSource, STREAM_MISC};
use cyclic_dp_core::{SiteDataSpec, SiteDataset, TrainingPlan};

use crate::config::{DataConfig, ExperimentConfig, Shift, SiteConfig, SyntheticConfig};
use crate::csv_io::load_csv;
use crate::error::{CliError, Result};

/// Raw training and test sites for one repeat.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: Vec<SiteDataset>,
    pub test: Vec<SiteDataset>,
}

/// One cell of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Job {
    pub mode: Mode,
    pub n_sites: usize,
    pub repeat: u32,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct JobResult {
    pub job: Job,
    pub row: ReportRow,
    pub record: RunRecord,
}

fn site_spec(s: &SiteConfig, dim: usize) -> SiteDataSpec {
    let mut spec = SiteDataSpec::new(s.id.clone(), s.n, dim);
    spec.feature_shift = match &s.shift {
        Shift::Uniform(v) => vec![*v; dim],
        Shift::PerFeature(v) => v.clone(),
    };
    spec.label_bias = s.label_bias;
    spec.positive_fraction_hint = s.positive_fraction;
    spec
}

/// Ground-truth weights: explicit, or a seeded random direction of the
/// configured norm.
pub fn synthetic_weights(s: &SyntheticConfig, seed: u64) -> Vec<f64> {
    if let Some(w) = &s.weights {
        return w.clone();
    }
    let norm = s.weight_norm.unwrap_or(0.0);
    let mut rng = NoiseSource::for_label(seed, "weights", STREAM_MISC);
    let raw: Vec<f64> = (0..s.dim).map(|_| rng.standard_normal()).collect();
    let len = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if len == 0.0 {
        return vec![0.0; s.dim];
    }
    raw.iter().map(|v| v * norm / len).collect()
}

fn split_all(sites: &[SiteDataset], fraction: f64, seed: u64) -> Result<DataSplit> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in sites {
        let (tr, te) = s.split(fraction, seed)?;
        train.push(tr);
        test.push(te);
    }
    Ok(DataSplit { train, test })
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Generates or reads the data for one repeat.
pub fn load_data(cfg: &ExperimentConfig, base: &Path, seed: u64) -> Result<DataSplit> {
    match &cfg.data {
        DataConfig::Synthetic(s) => {
            let w = synthetic_weights(s, seed);
            let specs: Vec<SiteDataSpec> = s
                .train_sites
                .iter()
                .chain(&s.test_sites)
                .map(|c| site_spec(c, s.dim))
                .collect();
            let mut all = generate_multisite(s.dim, &w, &specs, seed)?;
            let test = all.split_off(s.train_sites.len());
            match s.test_fraction {
                Some(f) => split_all(&all, f, seed),
                None => Ok(DataSplit { train: all, test }),
            }
        }
        DataConfig::Csv(c) => {
            let site_col = c.site_column.as_deref();
            let train = load_csv(&resolve(base, &c.train), &c.label_column, site_col)?;
            match (&c.test, c.test_fraction) {
                (Some(t), _) => {
                    let path = resolve(base, t);
                    let test = load_csv(&path, &c.label_column, site_col)?;
                    if test[0].dim() != train[0].dim() {
                        return Err(CliError::Data {
                            path,
                            message: format!(
                                "{} feature columns, training data has {}",
                                test[0].dim(),
                                train[0].dim()
                            ),
                        });
                    }
                    Ok(DataSplit { train, test })
                }
                (None, Some(f)) => split_all(&train, f, seed),
                (None, None) => Err(CliError::config("data.csv: no test data configured")),
            }
        }
    }
}

fn select_top_k(cfg: &ExperimentConfig) -> Option<usize> {
    match &cfg.data {
        DataConfig::Synthetic(s) => s.select_top_k,
        DataConfig::Csv(c) => c.select_top_k,
    }
}

/// Feature selection and min-max scaling fitted on `train`, applied to both.
pub fn preprocess(
    train: &[SiteDataset],
    test: &[SiteDataset],
    top_k: Option<usize>,
) -> Result<DataSplit> {
    let (train, test) = match top_k {
        Some(k) if k < train[0].dim() => {
            let (cols, filtered) = top_variance_features(train, k)
                .map_err(|e| CliError::config(format!("select_top_k: {e}")))?;
            let test = test
                .iter()
                .map(|t| {
                    SiteDataset::new(
                        t.site_id(),
                        t.features().select_columns(&cols),
                        t.labels().to_vec(),
                        t.provenance(),
                    )
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            (filtered, test)
        }
        _ => (train.to_vec(), test.to_vec()),
    };
    let bounds = fit_bounds(&train)?;
    let norm = |sets: &[SiteDataset]| {
        sets.iter()
            .map(|d| min_max_normalize(d, Some(&bounds)).map(|(n, _)| n))
            .collect::<std::result::Result<Vec<_>, _>>()
    };
    Ok(DataSplit {
        train: norm(&train)?,
        test: norm(&test)?,
    })
}

pub fn plan_for(
    cfg: &ExperimentConfig,
    mode: Mode,
    train: &[SiteDataset],
    seed: u64,
) -> Result<TrainingPlan> {
    Ok(TrainingPlan {
        mode,
        epochs: cfg.training.epochs,
        site_order: train.iter().map(|d| d.site_id().to_string()).collect(),
        dp: cfg.dp_config()?,
        arch: cfg.arch(train[0].dim())?,
        master_seed: seed,
        budget: cfg.budget()?,
        grid: cfg.grid()?,
        budget_check: cfg.budget_check(),
        convergence_tol: cfg.convergence_tol(),
    })
}

/// All jobs in report order: repeat, then site count, then arm.
pub fn jobs(cfg: &ExperimentConfig, available_sites: usize) -> Result<Vec<Job>> {
    let modes = cfg.modes()?;
    let counts = cfg.site_counts_for(available_sites)?;
    let mut out = Vec::new();
    for r in 0..cfg.repeats {
        for &k in &counts {
            for &m in &modes {
                out.push(Job {
                    mode: m,
                    n_sites: k,
                    repeat: r,
                    seed: cfg.seed.wrapping_add(u64::from(r)),
                });
            }
        }
    }
    Ok(out)
}

/// Trains one job on already-preprocessed data and scores it on the test set.
pub fn run_job(cfg: &ExperimentConfig, job: Job, data: &DataSplit) -> Result<JobResult> {
    let plan = plan_for(cfg, job.mode, &data.train, job.seed)?;
    let start = Instant::now();
    let mut record = federation::train(&data.train, &plan)?;
    record.wall_time = Some(start.elapsed());
    let row = summarize_run(&record, &data.test)?;
    Ok(JobResult { job, row, record })
}

/// Runs the whole grid. With `workers > 1` independent jobs run on that many
/// threads; results come back in job order either way.
pub fn run_grid(cfg: &ExperimentConfig, base: &Path, workers: usize) -> Result<Vec<JobResult>> {
    cfg.validate()?;
    let top_k = select_top_k(cfg);
    // Per repeat: the raw split, then one preprocessed split per site count.
    let mut prepared: Vec<(u32, usize, DataSplit)> = Vec::new();
    let mut all_jobs = Vec::new();
    for r in 0..cfg.repeats {
        let seed = cfg.seed.wrapping_add(u64::from(r));
        let raw = load_data(cfg, base, seed)?;
        let counts = cfg.site_counts_for(raw.train.len())?;
        for &k in &counts {
            prepared.push((r, k, preprocess(&raw.train[..k], &raw.test, top_k)?));
        }
        all_jobs.extend(
            jobs(cfg, raw.train.len())?
                .into_iter()
                .filter(|j| j.repeat == r),
        );
    }
    let data_for = |j: &Job| {
        &prepared
            .iter()
            .find(|(r, k, _)| *r == j.repeat && *k == j.n_sites)
            .expect("prepared for every job")
            .2
    };

    if workers <= 1 {
        return all_jobs.iter().map(|j| run_job(cfg, *j, data_for(j))).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<JobResult>>>> =
        Mutex::new((0..all_jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(all_jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(j) = all_jobs.get(i) else { break };
                let res = run_job(cfg, *j, data_for(j));
                slots.lock().unwrap()[i] = Some(res);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}
