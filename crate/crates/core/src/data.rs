//! Per-site tabular datasets: synthetic multi-site generation with
//! institution-level shift, min-max normalization and top-variance feature
//! selection.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{sigmoid, Batch};
use crate::rng::{derive_seed, NoiseSource, STREAM_MISC};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Synthetic,
    Csv,
}

/// Feature matrix plus binary labels held by one site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteDataset {
    features: Matrix,
    labels: Vec<u8>,
    site_id: String,
    provenance: Provenance,
}

impl SiteDataset {
    pub fn new(
        site_id: impl Into<String>,
        features: Matrix,
        labels: Vec<u8>,
        provenance: Provenance,
    ) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                found: labels.len(),
            });
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features"));
        }
        if let Some(row) = labels.iter().position(|&y| y > 1) {
            return Err(Error::InvalidLabel {
                row,
                value: format!("{}", labels[row]),
            });
        }
        Ok(Self {
            features,
            labels,
            site_id: site_id.into(),
            provenance,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn site_id(&self) -> &str {
        &self.site_id
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn positive_rate(&self) -> f64 {
        self.labels.iter().map(|&y| f64::from(y)).sum::<f64>() / self.len() as f64
    }

    /// Gathers rows (repeats allowed) into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Batch::new(
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.site_id.clone(),
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.provenance,
        )
    }

    pub fn with_site_id(mut self, id: impl Into<String>) -> Self {
        self.site_id = id.into();
        self
    }

    /// Concatenates datasets into one pool under a new id.
    pub fn pool(id: impl Into<String>, parts: &[SiteDataset]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let features = Matrix::vstack(parts.iter().map(|d| &d.features))?;
        let labels = parts.iter().flat_map(|d| d.labels.iter().copied()).collect();
        let provenance = parts[0].provenance;
        Self::new(id, features, labels, provenance)
    }

    /// Deterministic shuffled split: returns `(train, test)` with
    /// `round(n * test_fraction)` rows in the test part.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::param("test_fraction", "must be in [0, 1)"));
        }
        let n = self.len();
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = NoiseSource::for_label(seed, &self.site_id, STREAM_MISC);
        for i in (1..n).rev() {
            let j = rng.index(i + 1);
            idx.swap(i, j);
        }
        let n_test = libm::round(n as f64 * test_fraction) as usize;
        if n_test == 0 || n_test == n {
            return Err(Error::param(
                "test_fraction",
                format!("split of {n} rows leaves an empty side"),
            ));
        }
        let (test, train) = idx.split_at(n_test);
        let mut train = train.to_vec();
        let mut test = test.to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&test)?))
    }
}

/// Recipe for one synthetic site: `x ~ N(shift, I)`,
/// `y ~ Bernoulli(sigmoid(w·x + label_bias))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteDataSpec {
    pub id: String,
    pub n: usize,
    pub feature_shift: Vec<f64>,
    pub label_bias: f64,
    /// When set, `label_bias` is ignored and replaced by the intercept that
    /// makes the site's expected positive rate match this value.
    pub positive_fraction_hint: Option<f64>,
    /// Overrides the per-site seed otherwise derived from `(seed, id)`.
    pub subseed: Option<u64>,
}

impl SiteDataSpec {
    pub fn new(id: impl Into<String>, n: usize, d: usize) -> Self {
        Self {
            id: id.into(),
            n,
            feature_shift: alloc::vec![0.0; d],
            label_bias: 0.0,
            positive_fraction_hint: None,
            subseed: None,
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        if self.n == 0 {
            return Err(Error::param("n", format!("site `{}` has n = 0", self.id)));
        }
        if self.feature_shift.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: self.feature_shift.len(),
            });
        }
        if !self.feature_shift.iter().all(|v| v.is_finite()) || !self.label_bias.is_finite() {
            return Err(Error::NonFinite("site spec"));
        }
        if let Some(h) = self.positive_fraction_hint {
            if !(h > 0.0 && h < 1.0) {
                return Err(Error::param(
                    "positive_fraction_hint",
                    format!("{h} is outside (0, 1)"),
                ));
            }
        }
        Ok(())
    }
}

/// Intercept `b` such that the mean of `sigmoid(logit + b)` equals `target`.
fn calibrate_intercept(logits: &[f64], target: f64) -> f64 {
    let rate = |b: f64| logits.iter().map(|&z| sigmoid(z + b)).sum::<f64>() / logits.len() as f64;
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Generates one dataset per spec; deterministic in `(seed, specs)`.
pub fn generate_multisite(
    d: usize,
    global_weights: &[f64],
    specs: &[SiteDataSpec],
    seed: u64,
) -> Result<Vec<SiteDataset>> {
    if d == 0 {
        return Err(Error::param("d", "dimension must be at least 1"));
    }
    if specs.is_empty() {
        return Err(Error::param("specs", "no sites given"));
    }
    if global_weights.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: global_weights.len(),
        });
    }
    if !global_weights.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("global weights"));
    }
    specs.iter().map(|s| s.validate(d)).collect::<Result<Vec<_>>>()?;

    specs
        .iter()
        .map(|spec| {
            let site_seed = spec.subseed.unwrap_or_else(|| derive_seed(seed, &spec.id));
            let mut rng = NoiseSource::new(site_seed, STREAM_MISC);
            let mut data = Vec::with_capacity(spec.n * d);
            let mut logits = Vec::with_capacity(spec.n);
            for _ in 0..spec.n {
                let mut z = 0.0;
                for (mu, w) in spec.feature_shift.iter().zip(global_weights) {
                    let x = mu + rng.standard_normal();
                    z += w * x;
                    data.push(x);
                }
                logits.push(z);
            }
            let bias = match spec.positive_fraction_hint {
                Some(h) => calibrate_intercept(&logits, h),
                None => spec.label_bias,
            };
            let labels = logits
                .iter()
                .map(|&z| u8::from(rng.bernoulli(sigmoid(z + bias))))
                .collect();
            SiteDataset::new(
                spec.id.clone(),
                Matrix::new(spec.n, d, data)?,
                labels,
                Provenance::Synthetic,
            )
        })
        .collect()
}

/// Closed interval used to rescale one column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnBounds {
    pub min: f64,
    pub max: f64,
}

/// Column-wise min/max over all rows of all datasets.
pub fn fit_bounds(datasets: &[SiteDataset]) -> Result<Vec<ColumnBounds>> {
    let first = datasets.first().ok_or(Error::EmptyDataset)?;
    let d = first.dim();
    let mut bounds = alloc::vec![
        ColumnBounds {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        };
        d
    ];
    for ds in datasets {
        if ds.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: ds.dim(),
            });
        }
        for row in ds.features.row_iter() {
            for (b, &v) in bounds.iter_mut().zip(row) {
                b.min = b.min.min(v);
                b.max = b.max.max(v);
            }
        }
    }
    Ok(bounds)
}

/// Rescales each column to `[0, 1]` via `(x - min) / (max - min)`.
///
/// Without `bounds`, they are fitted on `dataset` itself. Constant columns
/// (`max <= min`) map to 0; values outside the bounds are clamped.
pub fn min_max_normalize(
    dataset: &SiteDataset,
    bounds: Option<&[ColumnBounds]>,
) -> Result<(SiteDataset, Vec<ColumnBounds>)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let bounds = match bounds {
        Some(b) => {
            if b.len() != dataset.dim() {
                return Err(Error::DimensionMismatch {
                    expected: dataset.dim(),
                    found: b.len(),
                });
            }
            b.to_vec()
        }
        None => fit_bounds(core::slice::from_ref(dataset))?,
    };
    let mut features = dataset.features.clone();
    for i in 0..features.rows() {
        for (v, b) in features.row_mut(i).iter_mut().zip(&bounds) {
            let range = b.max - b.min;
            *v = if range > 0.0 {
                ((*v - b.min) / range).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
    }
    let out = SiteDataset {
        features,
        ..dataset.clone()
    };
    Ok((out, bounds))
}

/// Population variance of every column over the pooled rows of `datasets`.
///
/// Sites are combined in site-id order with a pairwise (Chan) merge of
/// per-site Welford moments, so the result does not depend on input order.
pub fn pooled_variances(datasets: &[SiteDataset]) -> Result<Vec<f64>> {
    let first = datasets.first().ok_or(Error::EmptyDataset)?;
    let d = first.dim();
    let mut order: Vec<&SiteDataset> = datasets.iter().collect();
    order.sort_by(|a, b| a.site_id.cmp(&b.site_id));

    let mut count = 0.0;
    let mut mean = alloc::vec![0.0; d];
    let mut m2 = alloc::vec![0.0; d];
    for ds in order {
        if ds.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: ds.dim(),
            });
        }
        let mut n_s = 0.0;
        let mut mean_s = alloc::vec![0.0; d];
        let mut m2_s = alloc::vec![0.0; d];
        for row in ds.features.row_iter() {
            n_s += 1.0;
            for j in 0..d {
                let delta = row[j] - mean_s[j];
                mean_s[j] += delta / n_s;
                m2_s[j] += delta * (row[j] - mean_s[j]);
            }
        }
        let total = count + n_s;
        for j in 0..d {
            let delta = mean_s[j] - mean[j];
            mean[j] += delta * n_s / total;
            m2[j] += m2_s[j] + delta * delta * count * n_s / total;
        }
        count = total;
    }
    Ok(m2.into_iter().map(|v| v / count).collect())
}

/// Keeps the `k` columns with the largest pooled variance (ties go to the
/// lower index), returned in ascending column order, and filters every
/// dataset to them.
pub fn top_variance_features(
    datasets: &[SiteDataset],
    k: usize,
) -> Result<(Vec<usize>, Vec<SiteDataset>)> {
    let variances = pooled_variances(datasets)?;
    let d = variances.len();
    if k == 0 || k > d {
        return Err(Error::param("k", format!("{k} is not in 1..={d}")));
    }
    let mut ranked: Vec<usize> = (0..d).collect();
    ranked.sort_by(|&a, &b| variances[b].total_cmp(&variances[a]).then(a.cmp(&b)));
    let mut columns = ranked[..k].to_vec();
    columns.sort_unstable();
    let filtered = datasets
        .iter()
        .map(|ds| SiteDataset {
            features: ds.features.select_columns(&columns),
            ..ds.clone()
        })
        .collect();
    Ok((columns, filtered))
}
