//! Cyclical weight transfer: the model visits each active site in a fixed
//! order once per epoch, trains there on local batches, then moves on.
//! Private modes run DP-SGD and keep one RDP ledger per site; a site leaves
//! the rotation when its budget would be overdrawn.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::time::Duration;

use crate::accountant::{budget_exhausted, OrderGrid, PrivacyBudget, RdpLedger};
use crate::data::SiteDataset;
use crate::dp::{noisy_step, plain_step, sample_indices, DpSgdConfig};
use crate::error::{Error, Result};
use crate::nn::{init_params, per_example_gradients_with_loss, ArchitectureSpec, ModelParams};
use crate::rng::{derive_seed, NoiseSource, STREAM_BATCHES, STREAM_NOISE};

/// The four experimental arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Central,
    CentralPrivate,
    Distributed,
    DistributedPrivate,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::Central,
        Mode::CentralPrivate,
        Mode::Distributed,
        Mode::DistributedPrivate,
    ];

    pub fn is_private(self) -> bool {
        matches!(self, Mode::CentralPrivate | Mode::DistributedPrivate)
    }

    pub fn is_central(self) -> bool {
        matches!(self, Mode::Central | Mode::CentralPrivate)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Central => "central",
            Mode::CentralPrivate => "central_private",
            Mode::Distributed => "distributed",
            Mode::DistributedPrivate => "distributed_private",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }
}

/// When the budget is checked relative to the step it guards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetCheck {
    /// Stop before a step whose accounting would reach the target.
    PreStep,
    /// Take the step, then stop if the target has been reached.
    PostStep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPlan {
    pub mode: Mode,
    pub epochs: usize,
    /// Visiting order; must name every site exactly once. Central modes
    /// ignore it beyond that check.
    pub site_order: Vec<String>,
    pub dp: DpSgdConfig,
    pub arch: ArchitectureSpec,
    pub master_seed: u64,
    pub budget: PrivacyBudget,
    pub grid: OrderGrid,
    pub budget_check: BudgetCheck,
    /// Stop after a cycle whose mean loss improved by less than this.
    pub convergence_tol: Option<f64>,
}

impl TrainingPlan {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("epochs", "must be at least 1"));
        }
        self.dp.validate()?;
        if let Some(tol) = self.convergence_tol {
            if !(tol >= 0.0) {
                return Err(Error::param("convergence_tol", format!("{tol} is not >= 0")));
            }
        }
        Ok(())
    }

    fn check_order(&self, datasets: &[SiteDataset]) -> Result<()> {
        if self.site_order.len() != datasets.len() {
            return Err(Error::param(
                "site_order",
                format!(
                    "lists {} sites but {} datasets were given",
                    self.site_order.len(),
                    datasets.len()
                ),
            ));
        }
        for (i, id) in self.site_order.iter().enumerate() {
            if self.site_order[..i].contains(id) {
                return Err(Error::param("site_order", format!("`{id}` appears twice")));
            }
            if !datasets.iter().any(|d| d.site_id() == id) {
                return Err(Error::UnknownSite(id.clone()));
            }
        }
        Ok(())
    }
}

/// One participating institution.
#[derive(Debug, Clone)]
pub struct Site {
    pub id: String,
    pub dataset: SiteDataset,
    pub ledger: RdpLedger,
    pub budget: PrivacyBudget,
    pub active: bool,
    batch_rng: NoiseSource,
    noise_rng: NoiseSource,
}

impl Site {
    /// Ledger rate is `b / |D|`; random streams derive from the master seed
    /// and the site id only.
    pub fn new(dataset: SiteDataset, plan: &TrainingPlan) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let id = String::from(dataset.site_id());
        let q = plan.dp.sampling_rate(dataset.len());
        let ledger = RdpLedger::new(plan.grid.clone(), q, plan.dp.noise_multiplier)?;
        let seed = derive_seed(plan.master_seed, &id);
        let mut site = Self {
            batch_rng: NoiseSource::new(seed, STREAM_BATCHES),
            noise_rng: NoiseSource::new(seed, STREAM_NOISE),
            id,
            dataset,
            ledger,
            budget: plan.budget,
            active: true,
        };
        if plan.mode.is_private() && budget_exhausted(&site.ledger, &site.budget)?.exhausted {
            site.active = false;
        }
        Ok(site)
    }

    /// Steps per local epoch: `⌊|D| / b⌋`, at least one.
    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        (self.dataset.len() / batch_size).max(1)
    }

    pub fn epsilon(&self) -> Result<(f64, u32)> {
        self.ledger.to_epsilon(self.budget.delta)
    }
}

/// What one site did during one visit.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteEpochRecord {
    pub epoch: usize,
    pub site_id: String,
    pub steps: usize,
    /// Mean batch loss before each step; empty Poisson draws add no entry.
    pub losses: Vec<f64>,
    /// `(ε, best order)` after the visit; `None` for non-private modes.
    pub epsilon: Option<(f64, u32)>,
    /// Ledger step count after the visit.
    pub ledger_steps: u64,
    pub deactivated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerSnapshot {
    pub site_id: String,
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
    pub epsilon: f64,
    pub best_order: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Completed,
    Converged { epoch: usize },
    AllSitesExhausted { epoch: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub mode: Mode,
    pub n_sites: usize,
    /// `epochs[e]` lists the visits of cycle `e` in visiting order.
    pub epochs: Vec<Vec<SiteEpochRecord>>,
    /// Weights at the end of each completed cycle.
    pub epoch_params: Vec<ModelParams>,
    pub final_params: ModelParams,
    /// Final ledgers; empty for non-private modes.
    pub ledgers: Vec<LedgerSnapshot>,
    pub stop: StopReason,
    /// Filled in by callers that have a clock.
    pub wall_time: Option<Duration>,
}

impl RunRecord {
    pub fn total_steps(&self) -> usize {
        self.epochs.iter().flatten().map(|r| r.steps).sum()
    }

    /// Largest per-site ε, or `None` for non-private runs.
    pub fn max_epsilon(&self) -> Option<f64> {
        self.ledgers
            .iter()
            .map(|l| l.epsilon)
            .fold(None, |m, e| Some(m.map_or(e, |m: f64| m.max(e))))
    }

    /// Mean loss of the last cycle that recorded any.
    pub fn last_cycle_loss(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| cycle_mean_loss(e))
    }
}

fn cycle_mean_loss(records: &[SiteEpochRecord]) -> Option<f64> {
    let (sum, n) = records
        .iter()
        .flat_map(|r| r.losses.iter())
        .fold((0.0, 0usize), |(s, n), l| (s + l, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Runs one visit of `site`: up to `⌊|D|/b⌋` steps starting from `params`.
///
/// Private modes clip, noise and account every step (empty Poisson draws
/// become noise-only steps) and deactivate the site at the budget.
pub fn train_site_epoch(
    params: &ModelParams,
    site: &mut Site,
    plan: &TrainingPlan,
    epoch: usize,
) -> Result<(ModelParams, SiteEpochRecord)> {
    if !site.active {
        return Err(Error::InactiveSite(site.id.clone()));
    }
    let private = plan.mode.is_private();
    let mut params = params.clone();
    let mut losses = Vec::new();
    let mut steps = 0;
    let mut deactivated = false;

    for _ in 0..site.steps_per_epoch(plan.dp.batch_size) {
        if private
            && plan.budget_check == BudgetCheck::PreStep
            && budget_exhausted(&site.ledger, &site.budget)?.next_step_exhausts
        {
            deactivated = true;
            break;
        }

        let batch = sample_indices(site.dataset.len(), &plan.dp, &mut site.batch_rng)?
            .map(|idx| site.dataset.batch(&idx))
            .transpose()?;
        let grads = match &batch {
            Some(b) => {
                let (g, l) = per_example_gradients_with_loss(&params, b)?;
                losses.push(l.iter().sum::<f64>() / l.len() as f64);
                g
            }
            None => Vec::new(),
        };

        if private {
            params = noisy_step(&params, &grads, &plan.dp, &mut site.noise_rng)?;
            site.ledger.accumulate(1);
        } else if !grads.is_empty() {
            params = plain_step(&params, &grads, &plan.dp)?;
        }
        steps += 1;

        if private
            && plan.budget_check == BudgetCheck::PostStep
            && budget_exhausted(&site.ledger, &site.budget)?.exhausted
        {
            deactivated = true;
            break;
        }
    }
    if deactivated {
        site.active = false;
    }
    let record = SiteEpochRecord {
        epoch,
        site_id: site.id.clone(),
        steps,
        losses,
        epsilon: if private { Some(site.epsilon()?) } else { None },
        ledger_steps: site.ledger.steps(),
        deactivated,
    };
    Ok((params, record))
}

fn init_for(plan: &TrainingPlan) -> ModelParams {
    init_params(&plan.arch, derive_seed(plan.master_seed, "init"))
}

fn check_dims(plan: &TrainingPlan, datasets: &[SiteDataset]) -> Result<()> {
    if let Some(d) = datasets.iter().find(|d| d.dim() != plan.arch.input_dim()) {
        return Err(Error::DimensionMismatch {
            expected: plan.arch.input_dim(),
            found: d.dim(),
        });
    }
    Ok(())
}

/// Shared epoch loop over already-built sites, visited in `order`.
fn rotate(mut sites: Vec<Site>, plan: &TrainingPlan, n_sites: usize) -> Result<RunRecord> {
    if sites.iter().all(|s| !s.active) {
        return Err(Error::NoActiveSites);
    }
    let mut params = init_for(plan);
    let mut epochs = Vec::with_capacity(plan.epochs);
    let mut epoch_params = Vec::with_capacity(plan.epochs);
    let mut stop = StopReason::Completed;
    let mut prev_loss: Option<f64> = None;

    for epoch in 1..=plan.epochs {
        let mut cycle = Vec::new();
        for site in sites.iter_mut().filter(|s| s.active) {
            let (next, rec) = train_site_epoch(&params, site, plan, epoch)?;
            params = next;
            cycle.push(rec);
        }
        let loss = cycle_mean_loss(&cycle);
        epochs.push(cycle);
        epoch_params.push(params.clone());

        if sites.iter().all(|s| !s.active) {
            stop = StopReason::AllSitesExhausted { epoch };
            break;
        }
        if let (Some(tol), Some(prev), Some(cur)) = (plan.convergence_tol, prev_loss, loss) {
            if prev - cur < tol {
                stop = StopReason::Converged { epoch };
                break;
            }
        }
        if loss.is_some() {
            prev_loss = loss;
        }
    }

    let ledgers = if plan.mode.is_private() {
        sites
            .iter()
            .map(|s| {
                let (epsilon, best_order) = s.epsilon()?;
                Ok(LedgerSnapshot {
                    site_id: s.id.clone(),
                    q: s.ledger.q(),
                    sigma: s.ledger.sigma(),
                    steps: s.ledger.steps(),
                    epsilon,
                    best_order,
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    Ok(RunRecord {
        mode: plan.mode,
        n_sites,
        epochs,
        epoch_params,
        final_params: params,
        ledgers,
        stop,
        wall_time: None,
    })
}

/// Trains by passing the weights around `plan.site_order` for up to
/// `plan.epochs` cycles. Inactive sites are skipped; the run stops early when
/// every site is exhausted or the cycle loss stops improving.
pub fn cyclical_train(datasets: &[SiteDataset], plan: &TrainingPlan) -> Result<RunRecord> {
    plan.validate()?;
    if datasets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    plan.check_order(datasets)?;
    check_dims(plan, datasets)?;
    let sites = plan
        .site_order
        .iter()
        .map(|id| {
            let ds = datasets.iter().find(|d| d.site_id() == id).unwrap();
            Site::new(ds.clone(), plan)
        })
        .collect::<Result<Vec<_>>>()?;
    rotate(sites, plan, datasets.len())
}

/// Pools all datasets into one site and trains it alone. A single dataset
/// keeps its id (so its random streams match the one-site cyclical run);
/// several are joined as `a+b+…`.
pub fn central_train(datasets: &[SiteDataset], plan: &TrainingPlan) -> Result<RunRecord> {
    plan.validate()?;
    if datasets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    plan.check_order(datasets)?;
    check_dims(plan, datasets)?;
    let id = plan.site_order.join("+");
    let ordered: Vec<SiteDataset> = plan
        .site_order
        .iter()
        .map(|id| datasets.iter().find(|d| d.site_id() == id).unwrap().clone())
        .collect();
    let pool = SiteDataset::pool(id, &ordered)?;
    let site = Site::new(pool, plan)?;
    rotate(alloc::vec![site], plan, datasets.len())
}

/// Dispatches on `plan.mode`.
pub fn train(datasets: &[SiteDataset], plan: &TrainingPlan) -> Result<RunRecord> {
    if plan.mode.is_central() {
        central_train(datasets, plan)
    } else {
        cyclical_train(datasets, plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_multisite, SiteDataSpec};
    use crate::dp::SamplingMode;
    use crate::nn::Activation;
    use alloc::vec;

    fn datasets(sizes: &[usize]) -> Vec<SiteDataset> {
        let d = 3;
        let specs: Vec<_> = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| SiteDataSpec::new(format!("s{}", i + 1), n, d))
            .collect();
        generate_multisite(d, &[1.0, -1.0, 0.5], &specs, 42).unwrap()
    }

    fn plan(mode: Mode, ids: &[&str]) -> TrainingPlan {
        TrainingPlan {
            mode,
            epochs: 2,
            site_order: ids.iter().map(|s| String::from(*s)).collect(),
            dp: DpSgdConfig {
                noise_multiplier: 1.0,
                batch_size: 100,
                learning_rate: 0.1,
                clip_norm: 1.0,
                sampling_mode: SamplingMode::Poisson,
            },
            arch: ArchitectureSpec::new(vec![3, 4, 1], Activation::Relu).unwrap(),
            master_seed: 9,
            budget: PrivacyBudget::new(10.0, 1e-5).unwrap(),
            grid: OrderGrid::default(),
            budget_check: BudgetCheck::PreStep,
            convergence_tol: None,
        }
    }

    #[test]
    fn floor_division_steps() {
        let ds = datasets(&[250]);
        let p = plan(Mode::Distributed, &["s1"]);
        let mut site = Site::new(ds[0].clone(), &p).unwrap();
        assert_eq!(site.steps_per_epoch(100), 2);
        let (_, rec) = train_site_epoch(&init_for(&p), &mut site, &p, 1).unwrap();
        assert_eq!(rec.steps, 2);
    }

    #[test]
    fn inactive_site_is_rejected() {
        let ds = datasets(&[250]);
        let p = plan(Mode::DistributedPrivate, &["s1"]);
        let mut site = Site::new(ds[0].clone(), &p).unwrap();
        site.active = false;
        assert_eq!(
            train_site_epoch(&init_for(&p), &mut site, &p, 1).map(|_| ()),
            Err(Error::InactiveSite("s1".into()))
        );
    }

    #[test]
    fn order_must_be_a_permutation() {
        let ds = datasets(&[150, 150]);
        assert!(cyclical_train(&ds, &plan(Mode::Distributed, &["s1"])).is_err());
        assert!(cyclical_train(&ds, &plan(Mode::Distributed, &["s1", "s1"])).is_err());
        assert_eq!(
            cyclical_train(&ds, &plan(Mode::Distributed, &["s1", "s9"])).map(|_| ()),
            Err(Error::UnknownSite("s9".into()))
        );
    }

    #[test]
    fn budget_below_conversion_floor_leaves_no_sites() {
        let ds = datasets(&[150]);
        let mut p = plan(Mode::DistributedPrivate, &["s1"]);
        p.budget = PrivacyBudget::new(0.01, 1e-5).unwrap();
        assert_eq!(cyclical_train(&ds, &p).map(|_| ()), Err(Error::NoActiveSites));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(Mode::from_name(m.name()), Some(m));
        }
        assert_eq!(Mode::from_name("hybrid"), None);
    }
}
