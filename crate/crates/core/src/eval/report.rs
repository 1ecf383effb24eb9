use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    kfold_accuracy, portion_holdout_accuracy, stratified_portion, FoldOutcome, SvmGrid, SvmParams,
};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_PORTIONS: [f64; 5] = [0.05, 0.10, 0.25, 0.50, 1.00];

/// Normal-approximation 95% half-width, `1.96 · s / √k` with the sample
/// standard deviation `s` (Bessel-corrected). Evaluated as `1.96 · √(s²/k)`,
/// one rounding fewer.
pub fn confidence_interval(accuracies: &[f64]) -> Result<f64> {
    let k = accuracies.len();
    if k < 2 {
        return Err(Error::Contract(format!(
            "confidence interval needs 2 folds, got {k}"
        )));
    }
    let mean = accuracies.iter().sum::<f64>() / k as f64;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    Ok(1.96 * (var / k as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalProtocol {
    /// k-fold CV inside each portion subset.
    #[default]
    PortionCv,
    /// k repeats of: train on a fresh portion, test on everything else. The
    /// full portion has no remainder and falls back to k-fold CV.
    PortionTrainRemainderTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub portions: Vec<f64>,
    pub folds: usize,
    pub inner_folds: usize,
    pub seed: u64,
    pub grid: SvmGrid,
    pub protocol: EvalProtocol,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            portions: DEFAULT_PORTIONS.to_vec(),
            folds: 10,
            inner_folds: 3,
            seed: 0,
            grid: SvmGrid::default(),
            protocol: EvalProtocol::PortionCv,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.portions.is_empty() {
            return Err(Error::Validation("no portions".into()));
        }
        for (i, &p) in self.portions.iter().enumerate() {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Validation(format!("portion {p} outside (0, 1]")));
            }
            if self.portions[..i].contains(&p) {
                return Err(Error::Validation(format!("duplicate portion {p}")));
            }
        }
        if self.folds < 2 || self.inner_folds < 2 {
            return Err(Error::Validation("fold counts must be at least 2".into()));
        }
        self.grid.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub model: String,
    pub portion: f64,
    pub n_items: usize,
    /// Percent, one per fold.
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub ci_half_width: f64,
    pub fold_params: Vec<SvmParams>,
    /// Most frequent per-fold choice; ties go to the earliest fold's choice.
    pub params: SvmParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub ci_method: String,
    pub multiclass: String,
    pub model_selection: String,
    pub standardization: String,
    pub protocol: EvalProtocol,
    pub folds: usize,
    pub inner_folds: usize,
    pub seed: u64,
    pub grid_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMetadata,
    pub cells: Vec<ReportCell>,
}

fn modal(params: &[SvmParams]) -> SvmParams {
    let mut best = (0, params[0]);
    for p in params {
        let n = params.iter().filter(|q| *q == p).count();
        if n > best.0 {
            best = (n, *p);
        }
    }
    best.1
}

fn cell(
    model: &str,
    portion: f64,
    n_items: usize,
    outcomes: Vec<FoldOutcome>,
) -> Result<ReportCell> {
    let fold_accuracies: Vec<f64> = outcomes.iter().map(|o| o.accuracy).collect();
    let fold_params: Vec<SvmParams> = outcomes.iter().map(|o| o.params).collect();
    Ok(ReportCell {
        model: model.to_string(),
        portion,
        n_items,
        mean_accuracy: fold_accuracies.iter().sum::<f64>() / fold_accuracies.len() as f64,
        ci_half_width: confidence_interval(&fold_accuracies)?,
        params: modal(&fold_params),
        fold_accuracies,
        fold_params,
    })
}

/// Evaluates every (model, portion) pair. All models see the same portion
/// subsets and fold assignments, so their cells are directly comparable.
pub fn build_report(
    models: &[(String, EmbeddingMatrix)],
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    let (_, first) = models
        .first()
        .ok_or_else(|| Error::Validation("no embedding matrices to evaluate".into()))?;
    for (tag, m) in models {
        if m.item_ids != first.item_ids || m.labels != first.labels {
            return Err(Error::Validation(format!(
                "embeddings for {tag:?} are not aligned with {:?}",
                models[0].0
            )));
        }
    }
    let labels = &first.labels;
    let mut cells: Vec<ReportCell> = Vec::new();
    for (tag, m) in models {
        let x = m.to_f64();
        for &p in &config.portions {
            let pseed = seed::derive_seed(config.seed, &format!("portion-{p}"));
            let holdout = config.protocol == EvalProtocol::PortionTrainRemainderTest && p < 1.0;
            let (n_items, outcomes) = if holdout {
                let outcomes = portion_holdout_accuracy(
                    x.view(),
                    labels,
                    p,
                    config.folds,
                    &config.grid,
                    config.inner_folds,
                    pseed,
                )?;
                let n = stratified_portion(labels, p, seed::derive_seed(pseed, "holdout-0"))?.len();
                (n, outcomes)
            } else {
                let idx = stratified_portion(labels, p, pseed)?;
                let xs = x.select(ndarray::Axis(0), &idx);
                let ys: Vec<usize> = idx.iter().map(|&i| labels[i].index()).collect();
                let outcomes = kfold_accuracy(
                    xs.view(),
                    &ys,
                    config.folds,
                    &config.grid,
                    config.inner_folds,
                    seed::derive_seed(pseed, "folds"),
                )?;
                (idx.len(), outcomes)
            };
            log::info!("eval {tag} portion {p}: {n_items} items");
            cells.push(cell(tag, p, n_items, outcomes)?);
        }
    }
    Ok(EvalReport {
        metadata: ReportMetadata {
            ci_method: "normal 95%: 1.96 * sample std / sqrt(folds)".into(),
            multiclass: "one-vs-rest".into(),
            model_selection: format!(
                "{}-fold stratified inner CV, first maximiser in grid order",
                config.inner_folds
            ),
            standardization: "per-dimension z-score fit on each training split".into(),
            protocol: config.protocol,
            folds: config.folds,
            inner_folds: config.inner_folds,
            seed: config.seed,
            grid_size: config.grid.configurations().len(),
        },
        cells,
    })
}

fn percent(p: f64) -> String {
    format!("{}", (p * 100.0 * 1e6).round() / 1e6)
}

impl EvalReport {
    pub fn cell(&self, model: &str, portion: f64) -> Option<&ReportCell> {
        self.cells
            .iter()
            .find(|c| c.model == model && c.portion == portion)
    }

    /// `model,portion,mean_acc,ci_half_width,kernel,C,gamma` with the portion
    /// in percent.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,portion,mean_acc,ci_half_width,kernel,C,gamma\n");
        for c in &self.cells {
            writeln!(
                s,
                "{},{},{:.4},{:.4},{},{},{}",
                c.model,
                percent(c.portion),
                c.mean_accuracy,
                c.ci_half_width,
                c.params.kernel,
                c.params.c,
                c.params.gamma_label()
            )
            .unwrap();
        }
        s
    }

    /// Models down, portions across, `mean ± ci` in each cell.
    pub fn to_table(&self) -> String {
        let mut models: Vec<&str> = Vec::new();
        let mut portions: Vec<f64> = Vec::new();
        for c in &self.cells {
            if !models.contains(&c.model.as_str()) {
                models.push(&c.model);
            }
            if !portions.contains(&c.portion) {
                portions.push(c.portion);
            }
        }
        let lookup: HashMap<(&str, u64), &ReportCell> = self
            .cells
            .iter()
            .map(|c| ((c.model.as_str(), c.portion.to_bits()), c))
            .collect();
        let mut rows: Vec<Vec<String>> = vec![std::iter::once("model".to_string())
            .chain(portions.iter().map(|p| format!("{}%", percent(*p))))
            .collect()];
        for m in &models {
            let mut row = vec![m.to_string()];
            for p in &portions {
                row.push(match lookup.get(&(*m, p.to_bits())) {
                    Some(c) => format!("{:.2} ± {:.2}", c.mean_accuracy, c.ci_half_width),
                    None => "-".into(),
                });
            }
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (v, &w))| {
                    let pad = w - v.chars().count();
                    if j == 0 {
                        format!("{v}{}", " ".repeat(pad))
                    } else {
                        format!("{}{v}", " ".repeat(pad))
                    }
                })
                .collect();
            writeln!(s, "{}", line.join("  ").trim_end()).unwrap();
        }
        s
    }
}
