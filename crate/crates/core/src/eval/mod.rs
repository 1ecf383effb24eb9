//! Transfer evaluation: stratified portions of the target embeddings, a
//! grid-searched SVM, k-fold accuracy and confidence intervals.

mod folds;
mod report;
mod svm;

pub use folds::{stratified_folds, stratified_portion};
pub use report::{
    build_report, confidence_interval, EvalConfig, EvalProtocol, EvalReport, ReportCell,
    ReportMetadata, DEFAULT_PORTIONS,
};
pub use svm::{Gamma, GammaMode, Kernel, SvmModel, SvmParams};

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use svm::{Gram, OvrModel};

/// Hyperparameter axes. Configurations are enumerated kernel-major, then C
/// ascending, then numeric gamma ascending, then the gamma modes in listed
/// order; the first configuration reaching the best score wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmGrid {
    pub kernels: Vec<Kernel>,
    pub c_values: Vec<f64>,
    pub gamma_values: Vec<f64>,
    pub gamma_modes: Vec<GammaMode>,
}

/// {0.001, 0.01, …, 1000}.
pub fn log_grid() -> Vec<f64> {
    (-3..=3).map(|e| 10f64.powi(e)).collect()
}

impl Default for SvmGrid {
    fn default() -> Self {
        SvmGrid {
            kernels: Kernel::ALL.to_vec(),
            c_values: log_grid(),
            gamma_values: log_grid(),
            gamma_modes: vec![GammaMode::Scale, GammaMode::Auto],
        }
    }
}

impl SvmGrid {
    /// A grid holding exactly one configuration.
    pub fn single(params: SvmParams) -> Self {
        let (gamma_values, gamma_modes) = match params.gamma {
            Some(Gamma::Value(v)) => (vec![v], vec![]),
            Some(Gamma::Mode(m)) => (vec![], vec![m]),
            None => (vec![], vec![]),
        };
        SvmGrid {
            kernels: vec![params.kernel],
            c_values: vec![params.c],
            gamma_values,
            gamma_modes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() || self.c_values.is_empty() {
            return Err(Error::Validation(
                "SVM grid needs kernels and C values".into(),
            ));
        }
        if self
            .c_values
            .iter()
            .chain(&self.gamma_values)
            .any(|&v| !(v > 0.0 && v.is_finite()))
        {
            return Err(Error::Validation(
                "C and gamma values must be positive".into(),
            ));
        }
        if self.kernels.iter().any(|k| k.uses_gamma())
            && self.gamma_values.is_empty()
            && self.gamma_modes.is_empty()
        {
            return Err(Error::Validation("gamma axis is empty".into()));
        }
        Ok(())
    }

    fn sorted(v: &[f64]) -> Vec<f64> {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    fn kernel_gamma_pairs(&self) -> Vec<(Kernel, Option<Gamma>)> {
        let mut out = Vec::new();
        for kernel in self.kernels() {
            if kernel.uses_gamma() {
                out.extend(self.gammas().into_iter().map(|g| (kernel, Some(g))));
            } else {
                out.push((kernel, None));
            }
        }
        out
    }

    fn gammas(&self) -> Vec<Gamma> {
        Self::sorted(&self.gamma_values)
            .into_iter()
            .map(Gamma::Value)
            .chain(self.gamma_modes.iter().map(|&m| Gamma::Mode(m)))
            .collect()
    }

    fn kernels(&self) -> Vec<Kernel> {
        let mut k = self.kernels.clone();
        k.sort();
        k.dedup();
        k
    }

    /// Every configuration in tie-break order.
    pub fn configurations(&self) -> Vec<SvmParams> {
        let cs = Self::sorted(&self.c_values);
        let mut out = Vec::new();
        for kernel in self.kernels() {
            for &c in &cs {
                if kernel.uses_gamma() {
                    for g in self.gammas() {
                        out.push(SvmParams {
                            kernel,
                            c,
                            gamma: Some(g),
                        });
                    }
                } else {
                    out.push(SvmParams {
                        kernel,
                        c,
                        gamma: None,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub params: SvmParams,
    /// Pooled inner validation accuracy in [0, 1].
    pub accuracy: f64,
}

/// Standardises `x` with per-column statistics of `fit_rows` (constant
/// columns are only centred).
pub(crate) fn standardize(x: ArrayView2<f64>, fit_rows: &[usize]) -> Array2<f64> {
    let fit = x.select(Axis(0), fit_rows);
    let mean = fit.mean_axis(Axis(0)).expect("non-empty fit rows");
    let std = fit
        .std_axis(Axis(0), 0.0)
        .mapv(|s| if s > 1e-12 { s } else { 1.0 });
    (&x - &mean) / &std
}

fn distinct(labels: &[usize]) -> usize {
    let mut l = labels.to_vec();
    l.sort_unstable();
    l.dedup();
    l.len()
}

/// Pooled inner-CV accuracy of every grid configuration, using `rows` of the
/// Gram as the data.
fn inner_scores(
    gram: &Gram,
    rows: &[usize],
    labels: &[usize],
    grid: &SvmGrid,
    inner_k: usize,
    seed_value: u64,
) -> Result<Vec<f64>> {
    let configs = grid.configurations();
    let k = inner_k.min(rows.len());
    let folds = stratified_folds(labels, k, seed_value)?;
    let index: HashMap<String, usize> = configs
        .iter()
        .enumerate()
        .map(|(i, p)| (p.to_string(), i))
        .collect();
    let cs = SvmGrid::sorted(&grid.c_values);
    let mut correct = vec![0usize; configs.len()];
    for f in 0..k {
        let tr: Vec<usize> = (0..rows.len()).filter(|&i| folds[i] != f).collect();
        let va: Vec<usize> = (0..rows.len()).filter(|&i| folds[i] == f).collect();
        let tr_rows: Vec<usize> = tr.iter().map(|&i| rows[i]).collect();
        let va_rows: Vec<usize> = va.iter().map(|&i| rows[i]).collect();
        let tr_labels: Vec<usize> = tr.iter().map(|&i| labels[i]).collect();
        let va_labels: Vec<usize> = va.iter().map(|&i| labels[i]).collect();
        // One kernel matrix per (kernel, gamma), shared along the C path.
        for (kernel, gamma) in grid.kernel_gamma_pairs() {
            let g = gram.resolve_gamma(gamma, &tr_rows);
            let k_tr = gram.block(kernel, g, &tr_rows, &tr_rows);
            let k_va = gram.block(kernel, g, &tr_rows, &va_rows);
            for (model, &c) in OvrModel::fit_path(&k_tr, &tr_labels, &cs).iter().zip(&cs) {
                let pred = model.predict(&k_va, va_rows.len());
                let ci = index[&SvmParams { kernel, c, gamma }.to_string()];
                correct[ci] += pred.iter().zip(&va_labels).filter(|(a, b)| a == b).count();
            }
        }
    }
    Ok(correct
        .into_iter()
        .map(|c| c as f64 / rows.len() as f64)
        .collect())
}

fn best_of(grid: &SvmGrid, scores: &[f64]) -> GridSearchResult {
    let configs = grid.configurations();
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    GridSearchResult {
        params: configs[best],
        accuracy: scores[best],
    }
}

/// Selects SVM hyperparameters by `inner_k`-fold stratified CV on the given
/// training data (standardised internally).
pub fn grid_search_svm(
    x: ArrayView2<f64>,
    labels: &[usize],
    grid: &SvmGrid,
    inner_k: usize,
    seed_value: u64,
) -> Result<GridSearchResult> {
    grid.validate()?;
    if x.nrows() != labels.len() {
        return Err(Error::Contract(format!(
            "{} rows, {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    if distinct(labels) < 2 {
        return Err(Error::Validation(
            "SVM training data has a single class".into(),
        ));
    }
    let rows: Vec<usize> = (0..x.nrows()).collect();
    let gram = Gram::new(standardize(x, &rows).view());
    let scores = inner_scores(&gram, &rows, labels, grid, inner_k, seed_value)?;
    Ok(best_of(grid, &scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    /// Percent correct on the held-out items.
    pub accuracy: f64,
    pub params: SvmParams,
    pub n_test: usize,
}

/// Trains on `train` (after inner model selection) and scores `test`.
fn train_and_score(
    x: ArrayView2<f64>,
    labels: &[usize],
    train: &[usize],
    test: &[usize],
    grid: &SvmGrid,
    inner_k: usize,
    seed_value: u64,
) -> Result<FoldOutcome> {
    let xs = standardize(x, train);
    let gram = Gram::new(xs.view());
    let tr_labels: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let params = if grid.configurations().len() == 1 {
        grid.configurations()[0]
    } else if distinct(&tr_labels) < 2 {
        // Nothing to tune: every configuration predicts the lone class.
        grid.configurations()[0]
    } else {
        best_of(
            grid,
            &inner_scores(&gram, train, &tr_labels, grid, inner_k, seed_value)?,
        )
        .params
    };
    let g = gram.resolve_gamma(params.gamma, train);
    let model = OvrModel::fit(
        &gram.block(params.kernel, g, train, train),
        &tr_labels,
        params.c,
    );
    let pred = model.predict(&gram.block(params.kernel, g, train, test), test.len());
    let correct = pred
        .iter()
        .zip(test)
        .filter(|(p, &t)| **p == labels[t])
        .count();
    Ok(FoldOutcome {
        accuracy: 100.0 * correct as f64 / test.len() as f64,
        params,
        n_test: test.len(),
    })
}

/// Stratified k-fold accuracy; each fold's hyperparameters come from an
/// inner CV on the other k−1 folds, with standardisation fitted on those
/// folds only. Folds run in parallel; results are in fold order.
pub fn kfold_accuracy(
    x: ArrayView2<f64>,
    labels: &[usize],
    k: usize,
    grid: &SvmGrid,
    inner_k: usize,
    seed_value: u64,
) -> Result<Vec<FoldOutcome>> {
    grid.validate()?;
    if x.nrows() != labels.len() {
        return Err(Error::Contract(format!(
            "{} rows, {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    if distinct(labels) < 2 {
        return Err(Error::Validation(
            "k-fold evaluation needs at least 2 classes".into(),
        ));
    }
    let folds = stratified_folds(labels, k, seed_value)?;
    (0..k)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..labels.len()).filter(|&i| folds[i] != f).collect();
            let test: Vec<usize> = (0..labels.len()).filter(|&i| folds[i] == f).collect();
            let inner_seed = seed::derive_seed(seed_value, &format!("inner-{f}"));
            train_and_score(x, labels, &train, &test, grid, inner_k, inner_seed)
        })
        .collect()
}

/// Alternative protocol: `repeats` fresh stratified portions, each trained
/// on (with inner model selection) and tested on the remaining items.
pub fn portion_holdout_accuracy(
    x: ArrayView2<f64>,
    labels: &[crate::corpus::TissueClass],
    fraction: f64,
    repeats: usize,
    grid: &SvmGrid,
    inner_k: usize,
    seed_value: u64,
) -> Result<Vec<FoldOutcome>> {
    grid.validate()?;
    let idx: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    (0..repeats)
        .into_par_iter()
        .map(|r| {
            let s = seed::derive_seed(seed_value, &format!("holdout-{r}"));
            let train = stratified_portion(labels, fraction, s)?;
            let in_train: std::collections::HashSet<usize> = train.iter().copied().collect();
            let test: Vec<usize> = (0..labels.len())
                .filter(|i| !in_train.contains(i))
                .collect();
            if test.is_empty() {
                return Err(Error::Contract(format!(
                    "portion {fraction} leaves nothing to test on"
                )));
            }
            train_and_score(x, &idx, &train, &test, grid, inner_k, s)
        })
        .collect()
}
