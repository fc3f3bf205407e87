//! Rényi-DP accountant for the Poisson-subsampled Gaussian mechanism.
//!
//! One DP-SGD step with sampling rate `q` and noise multiplier `σ` has, at
//! integer order `α ≥ 2`, RDP bounded by
//!
//! ```text
//! (1/(α−1)) · ln Σ_{k=0..α} C(α,k) (1−q)^(α−k) q^k exp(k(k−1)/(2σ²))
//! ```
//!
//! Steps compose additively per order, and the ledger converts to `(ε, δ)` by
//! `ε = min_α [ rdp(α) + ln(1/δ)/(α−1) ]`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Strictly increasing integer Rényi orders, all `≥ 2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderGrid(Vec<u32>);

impl OrderGrid {
    pub fn new(orders: Vec<u32>) -> Result<Self> {
        if orders.is_empty() {
            return Err(Error::EmptyGrid);
        }
        if orders[0] < 2 {
            return Err(Error::param("orders", "every order must be >= 2"));
        }
        if orders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param("orders", "orders must be strictly increasing"));
        }
        Ok(Self(orders))
    }

    pub fn orders(&self) -> &[u32] {
        &self.0
    }

    pub fn max_order(&self) -> u32 {
        *self.0.last().unwrap()
    }
}

impl Default for OrderGrid {
    /// `2..=64` plus `128` and `256`.
    fn default() -> Self {
        let mut orders: Vec<u32> = (2..=64).collect();
        orders.extend([128, 256]);
        Self(orders)
    }
}

/// Target `(ε, δ)` for one site. An infinite `epsilon` never exhausts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::param("epsilon", format!("{epsilon} is not > 0")));
        }
        check_delta(delta)?;
        Ok(Self { epsilon, delta })
    }

    pub fn unlimited(delta: f64) -> Self {
        Self {
            epsilon: f64::INFINITY,
            delta,
        }
    }

    fn exceeded_by(&self, epsilon: f64) -> bool {
        self.epsilon.is_finite() && epsilon >= self.epsilon
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::param("delta", format!("{delta} is outside (0, 1)")));
    }
    Ok(())
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + libm::log1p(libm::exp(lo - hi))
}

/// `ln(e^x − 1)` for `x > 0`.
fn log_expm1(x: f64) -> f64 {
    if x > 30.0 {
        x + libm::log1p(-libm::exp(-x))
    } else {
        libm::log(libm::expm1(x))
    }
}

/// RDP of one subsampled-Gaussian step at integer order `alpha`.
///
/// Evaluated in log space as `ln(1 + Σ_{k≥2} C(α,k)(1−q)^(α−k) q^k (e^{k(k−1)/(2σ²)} − 1))`,
/// which equals the binomial form because the un-exponentiated binomial
/// terms sum to one. All summands are positive, so nothing cancels.
pub fn step_rdp(q: f64, sigma: f64, alpha: u32) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::param("q", format!("{q} is outside [0, 1]")));
    }
    if alpha < 2 {
        return Err(Error::param("alpha", format!("order {alpha} is below 2")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::param("sigma", format!("{sigma} is not a finite value >= 0")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    if sigma == 0.0 {
        return Err(Error::UnboundedPrivacyLoss);
    }

    let a = f64::from(alpha);
    let ln_q = libm::log(q);
    let ln_1mq = libm::log1p(-q);
    let two_var = 2.0 * sigma * sigma;

    // ln C(α, k), built up incrementally from ln C(α, 1) = ln α.
    let mut ln_binom = libm::log(a);
    let mut log_sum = f64::NEG_INFINITY;
    for k in 2..=alpha {
        let kf = f64::from(k);
        ln_binom += libm::log((a - kf + 1.0) / kf);
        let rest = alpha - k;
        let ln_weight = if rest == 0 {
            0.0
        } else {
            f64::from(rest) * ln_1mq
        };
        let term = ln_binom + ln_weight + kf * ln_q + log_expm1(kf * (kf - 1.0) / two_var);
        log_sum = log_add(log_sum, term);
    }
    // ln(1 + e^log_sum)
    let ln_total = if log_sum > 0.0 {
        log_sum + libm::log1p(libm::exp(-log_sum))
    } else {
        libm::log1p(libm::exp(log_sum))
    };
    Ok(ln_total / (a - 1.0))
}

/// Per-site cumulative RDP for a fixed `(q, σ)`.
///
/// The cumulative value at each order is `steps × per-step RDP`, so
/// accumulating one step `T` times and `T` steps at once agree exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct RdpLedger {
    grid: OrderGrid,
    per_step: Vec<f64>,
    steps: u64,
    q: f64,
    sigma: f64,
}

impl RdpLedger {
    /// With `σ = 0` (and `q > 0`) every step costs infinite RDP.
    pub fn new(grid: OrderGrid, q: f64, sigma: f64) -> Result<Self> {
        let per_step = grid
            .orders()
            .iter()
            .map(|&a| match step_rdp(q, sigma, a) {
                Err(Error::UnboundedPrivacyLoss) => Ok(f64::INFINITY),
                other => other,
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid,
            per_step,
            steps: 0,
            q,
            sigma,
        })
    }

    pub fn grid(&self) -> &OrderGrid {
        &self.grid
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn cumulative_rdp(&self) -> Vec<f64> {
        if self.steps == 0 {
            return alloc::vec![0.0; self.per_step.len()];
        }
        let t = self.steps as f64;
        self.per_step.iter().map(|r| t * r).collect()
    }

    pub fn accumulate(&mut self, n_steps: u64) {
        self.steps += n_steps;
    }

    /// Copy of the ledger advanced by `n_steps`.
    pub fn accumulated(&self, n_steps: u64) -> Self {
        let mut next = self.clone();
        next.accumulate(n_steps);
        next
    }

    /// `(ε, best order)` at the given `δ`. Ties go to the smaller order.
    pub fn to_epsilon(&self, delta: f64) -> Result<(f64, u32)> {
        check_delta(delta)?;
        let log_inv_delta = -libm::log(delta);
        let mut best = (f64::INFINITY, self.grid.orders()[0]);
        for (&a, r) in self.grid.orders().iter().zip(self.cumulative_rdp()) {
            let eps = r + log_inv_delta / f64::from(a - 1);
            if eps < best.0 {
                best = (eps, a);
            }
        }
        Ok(best)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetStatus {
    /// Spent ε has reached the target.
    pub exhausted: bool,
    /// One more step would reach the target.
    pub next_step_exhausts: bool,
}

pub fn budget_exhausted(ledger: &RdpLedger, budget: &PrivacyBudget) -> Result<BudgetStatus> {
    let (now, _) = ledger.to_epsilon(budget.delta)?;
    let (next, _) = ledger.accumulated(1).to_epsilon(budget.delta)?;
    Ok(BudgetStatus {
        exhausted: budget.exceeded_by(now),
        next_step_exhausts: budget.exceeded_by(next),
    })
}

/// ε after `steps` steps at `(q, σ)` on the default grid.
pub fn epsilon_for(q: f64, sigma: f64, steps: u64, delta: f64) -> Result<(f64, u32)> {
    let mut ledger = RdpLedger::new(OrderGrid::default(), q, sigma)?;
    ledger.accumulate(steps);
    ledger.to_epsilon(delta)
}
