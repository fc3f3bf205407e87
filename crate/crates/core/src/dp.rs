//! DP-SGD step: batch sampling, per-example clipping, Gaussian noise and the
//! parameter update, plus the plain minibatch SGD step used by the
//! non-private arms.

use alloc::format;
use alloc::vec::Vec;

use crate::data::SiteDataset;
use crate::error::{Error, Result};
use crate::nn::{Batch, ModelParams};
use crate::rng::NoiseSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// Each row joins the batch independently with probability `b / n`.
    Poisson,
    /// Exactly `b` rows drawn uniformly with replacement.
    WithReplacement,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpSgdConfig {
    pub noise_multiplier: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// May be `f64::INFINITY` to disable clipping.
    pub clip_norm: f64,
    pub sampling_mode: SamplingMode,
}

impl DpSgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(Error::param(
                "noise_multiplier",
                format!("{} is not a finite value >= 0", self.noise_multiplier),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param(
                "learning_rate",
                format!("{} is not a finite value > 0", self.learning_rate),
            ));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::param(
                "clip_norm",
                format!("{} is not > 0", self.clip_norm),
            ));
        }
        if self.clip_norm.is_infinite() && self.noise_multiplier > 0.0 {
            return Err(Error::param(
                "clip_norm",
                "must be finite when noise_multiplier > 0",
            ));
        }
        Ok(())
    }

    /// Sets `C = σ / b`, the coupling written in the original parameter list.
    pub fn with_clip_from_noise(mut self) -> Self {
        self.clip_norm = self.noise_multiplier / self.batch_size as f64;
        self
    }

    /// `q = b / n`, capped at 1.
    pub fn sampling_rate(&self, n: usize) -> f64 {
        (self.batch_size as f64 / n as f64).min(1.0)
    }
}

/// Draws a batch from `dataset`. Returns `None` when a Poisson draw selects
/// no rows.
pub fn sample_batch(
    dataset: &SiteDataset,
    cfg: &DpSgdConfig,
    rng: &mut NoiseSource,
) -> Result<Option<Batch>> {
    Ok(sample_indices(dataset.len(), cfg, rng)?
        .map(|idx| dataset.batch(&idx))
        .transpose()?)
}

/// Index form of [`sample_batch`].
pub fn sample_indices(
    n: usize,
    cfg: &DpSgdConfig,
    rng: &mut NoiseSource,
) -> Result<Option<Vec<usize>>> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let idx: Vec<usize> = match cfg.sampling_mode {
        SamplingMode::WithReplacement => (0..cfg.batch_size).map(|_| rng.index(n)).collect(),
        SamplingMode::Poisson => {
            let q = cfg.sampling_rate(n);
            (0..n).filter(|_| rng.bernoulli(q)).collect()
        }
    };
    Ok(if idx.is_empty() { None } else { Some(idx) })
}

pub fn l2_norm(g: &[f64]) -> f64 {
    let scale = g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let ss: f64 = g.iter().map(|v| (v / scale) * (v / scale)).sum();
    scale * libm::sqrt(ss)
}

/// Scales `g` by `1 / max(1, ‖g‖₂ / C)`.
///
/// The returned norm never exceeds `C`: if rounding pushes the scaled vector
/// just past `C`, the factor is nudged down one ulp at a time.
pub fn clip_gradient(g: &[f64], clip_norm: f64) -> Result<Vec<f64>> {
    if !g.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    let norm = l2_norm(g);
    if norm <= clip_norm {
        return Ok(g.to_vec());
    }
    let mut factor = clip_norm / norm;
    loop {
        let out: Vec<f64> = g.iter().map(|v| v * factor).collect();
        if l2_norm(&out) <= clip_norm {
            return Ok(out);
        }
        factor = factor.next_down();
    }
}

fn check_lengths(params: &ModelParams, grads: &[Vec<f64>]) -> Result<usize> {
    let p = params.param_count();
    if let Some(g) = grads.iter().find(|g| g.len() != p) {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: g.len(),
        });
    }
    Ok(p)
}

/// `θ − η · (Σ clip(gᵢ, C) + z) / b` with `z ~ N(0, σ²C²I)`.
///
/// The divisor is the configured batch size, not the number of gradients; an
/// empty `grads` list yields a noise-only step. Sums run left to right in
/// batch order.
pub fn noisy_step(
    params: &ModelParams,
    grads: &[Vec<f64>],
    cfg: &DpSgdConfig,
    rng: &mut NoiseSource,
) -> Result<ModelParams> {
    let p = check_lengths(params, grads)?;
    let mut acc = alloc::vec![0.0; p];
    for g in grads {
        let c = clip_gradient(g, cfg.clip_norm)?;
        for (a, v) in acc.iter_mut().zip(&c) {
            *a += v;
        }
    }
    if cfg.noise_multiplier > 0.0 {
        let std = cfg.noise_multiplier * cfg.clip_norm;
        for a in &mut acc {
            *a += std * rng.standard_normal();
        }
    }
    let b = cfg.batch_size as f64;
    let mut out = params.clone();
    out.update_each(|w, i| *w -= cfg.learning_rate * (acc[i] / b));
    Ok(out)
}

/// Unclipped, noiseless minibatch SGD: `θ − η · mean(gᵢ)`.
pub fn plain_step(
    params: &ModelParams,
    grads: &[Vec<f64>],
    cfg: &DpSgdConfig,
) -> Result<ModelParams> {
    let p = check_lengths(params, grads)?;
    if grads.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut acc = alloc::vec![0.0; p];
    for g in grads {
        for (a, v) in acc.iter_mut().zip(g) {
            *a += v;
        }
    }
    let n = grads.len() as f64;
    let mut out = params.clone();
    out.update_each(|w, i| *w -= cfg.learning_rate * (acc[i] / n));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Provenance;
    use crate::matrix::Matrix;
    use crate::nn::{Activation, ArchitectureSpec};
    use crate::rng::STREAM_BATCHES;
    use alloc::vec;

    fn cfg(sigma: f64, b: usize, c: f64, mode: SamplingMode) -> DpSgdConfig {
        DpSgdConfig {
            noise_multiplier: sigma,
            batch_size: b,
            learning_rate: 0.1,
            clip_norm: c,
            sampling_mode: mode,
        }
    }

    fn tiny_params() -> ModelParams {
        let arch = ArchitectureSpec::new(vec![1, 1], Activation::Relu).unwrap();
        ModelParams::unflatten(&arch, &[0.5, -0.25]).unwrap()
    }

    #[test]
    fn config_validation() {
        let ok = cfg(0.5, 10, 1.0, SamplingMode::Poisson);
        assert!(ok.validate().is_ok());
        assert!(DpSgdConfig { batch_size: 0, ..ok }.validate().is_err());
        assert!(DpSgdConfig { noise_multiplier: -1.0, ..ok }.validate().is_err());
        assert!(DpSgdConfig { learning_rate: 0.0, ..ok }.validate().is_err());
        assert!(DpSgdConfig { clip_norm: 0.0, ..ok }.validate().is_err());
        assert!(DpSgdConfig { clip_norm: f64::NAN, ..ok }.validate().is_err());
        assert!(DpSgdConfig { clip_norm: f64::INFINITY, ..ok }.validate().is_err());
        let noiseless = DpSgdConfig { noise_multiplier: 0.0, ..ok };
        assert!(DpSgdConfig { clip_norm: f64::INFINITY, ..noiseless }.validate().is_ok());
        assert_eq!(cfg(0.5, 100, 1.0, SamplingMode::Poisson).with_clip_from_noise().clip_norm, 0.005);
    }

    #[test]
    fn single_row_with_replacement() {
        let ds = SiteDataset::new(
            "one",
            Matrix::from_rows(&[[4.0, 2.0]]).unwrap(),
            vec![1],
            Provenance::Synthetic,
        )
        .unwrap();
        let mut rng = NoiseSource::new(1, STREAM_BATCHES);
        let b = sample_batch(&ds, &cfg(0.0, 3, 1.0, SamplingMode::WithReplacement), &mut rng)
            .unwrap()
            .unwrap();
        assert_eq!(b.len(), 3);
        assert!(b.features().row_iter().all(|r| r == [4.0, 2.0]));
        assert_eq!(b.labels(), &[1, 1, 1]);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        for mode in [SamplingMode::Poisson, SamplingMode::WithReplacement] {
            let c = cfg(0.0, 10, 1.0, mode);
            let a = sample_indices(200, &c, &mut NoiseSource::new(5, STREAM_BATCHES)).unwrap();
            let b = sample_indices(200, &c, &mut NoiseSource::new(5, STREAM_BATCHES)).unwrap();
            assert_eq!(a, b);
        }
        assert_eq!(
            sample_indices(0, &cfg(0.0, 1, 1.0, SamplingMode::Poisson), &mut NoiseSource::new(5, 1)),
            Err(Error::EmptyDataset)
        );
    }

    #[test]
    fn clip_closed_forms() {
        assert_eq!(clip_gradient(&[0.3, 0.4], 1.0).unwrap(), vec![0.3, 0.4]);
        let c = clip_gradient(&[3.0, 4.0], 1.0).unwrap();
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
        assert!(l2_norm(&c) <= 1.0);
        assert_eq!(clip_gradient(&[0.0, 0.0], 1.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(clip_gradient(&[f64::NAN], 1.0), Err(Error::NonFinite("gradient")));
        assert_eq!(clip_gradient(&[1e300, 1e300], f64::INFINITY).unwrap(), vec![1e300, 1e300]);
    }

    #[test]
    fn noiseless_steps_reduce_to_sgd() {
        let p = tiny_params();
        let g = vec![0.2, -0.1];
        let c1 = cfg(0.0, 1, 1.0, SamplingMode::WithReplacement);
        let mut rng = NoiseSource::new(1, 2);
        let n = noisy_step(&p, &[g.clone()], &c1, &mut rng).unwrap();
        assert_eq!(n.flatten(), vec![0.5 - 0.1 * 0.2, -0.25 + 0.1 * 0.1]);

        let c2 = cfg(0.0, 2, 1.0, SamplingMode::WithReplacement);
        let n2 = noisy_step(&p, &[g.clone(), g.clone()], &c2, &mut rng).unwrap();
        assert_eq!(n2.flatten(), n.flatten());

        let plain = plain_step(&p, &[g.clone()], &c1).unwrap();
        assert_eq!(plain, n);
        let unclipped = cfg(0.0, 2, f64::INFINITY, SamplingMode::WithReplacement);
        let big = vec![30.0, -40.0];
        assert_eq!(
            noisy_step(&p, &[big.clone(), g.clone()], &unclipped, &mut rng).unwrap(),
            plain_step(&p, &[big, g], &unclipped).unwrap()
        );
    }

    #[test]
    fn step_errors() {
        let p = tiny_params();
        let c = cfg(0.0, 1, 1.0, SamplingMode::Poisson);
        assert!(noisy_step(&p, &[vec![1.0]], &c, &mut NoiseSource::new(1, 2)).is_err());
        assert!(plain_step(&p, &[vec![1.0, 2.0, 3.0]], &c).is_err());
        assert_eq!(plain_step(&p, &[], &c), Err(Error::EmptyBatch));
    }

    #[test]
    fn empty_batch_is_noise_only() {
        let p = tiny_params();
        let c = cfg(1.0, 10, 1.0, SamplingMode::Poisson);
        let out = noisy_step(&p, &[], &c, &mut NoiseSource::new(1, 2)).unwrap();
        assert_ne!(out, p);
        let quiet = noisy_step(&p, &[], &DpSgdConfig { noise_multiplier: 0.0, ..c }, &mut NoiseSource::new(1, 2))
            .unwrap();
        assert_eq!(quiet, p);
    }
}
