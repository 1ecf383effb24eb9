use std::fmt;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Linear,
    Rbf,
    Sigmoid,
    Polynomial,
}

impl Kernel {
    pub const ALL: [Kernel; 4] = [
        Kernel::Linear,
        Kernel::Rbf,
        Kernel::Sigmoid,
        Kernel::Polynomial,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Kernel::Linear => "linear",
            Kernel::Rbf => "rbf",
            Kernel::Sigmoid => "sigmoid",
            Kernel::Polynomial => "polynomial",
        }
    }

    pub fn uses_gamma(self) -> bool {
        self != Kernel::Linear
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Kernel::Linear),
            "rbf" => Ok(Kernel::Rbf),
            "sigmoid" => Ok(Kernel::Sigmoid),
            "polynomial" | "poly" => Ok(Kernel::Polynomial),
            _ => Err(Error::Validation(format!("unknown kernel {s:?}"))),
        }
    }
}

/// Kernel coefficient: a number, or derived from the training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gamma {
    Value(f64),
    Mode(GammaMode),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    /// `1 / (n_features · Var(X))`.
    Scale,
    /// `1 / n_features`.
    Auto,
}

impl fmt::Display for Gamma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gamma::Value(v) => write!(f, "{v}"),
            Gamma::Mode(GammaMode::Scale) => f.write_str("scale"),
            Gamma::Mode(GammaMode::Auto) => f.write_str("auto"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub kernel: Kernel,
    pub c: f64,
    /// `None` for the linear kernel.
    pub gamma: Option<Gamma>,
}

impl SvmParams {
    pub fn gamma_label(&self) -> String {
        self.gamma.map(|g| g.to_string()).unwrap_or_default()
    }
}

impl fmt::Display for SvmParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} C={}", self.kernel, self.c)?;
        if let Some(g) = self.gamma {
            write!(f, " gamma={g}")?;
        }
        Ok(())
    }
}

/// Pairwise dot products and squared norms of a row set; every kernel used
/// here is a function of these.
pub(crate) struct Gram {
    n: usize,
    dots: Vec<f64>,
    sq: Vec<f64>,
    dim: usize,
    x: Array2<f64>,
}

impl Gram {
    pub fn new(x: ArrayView2<f64>) -> Self {
        let (n, dim) = x.dim();
        let mut dots = Array2::<f64>::zeros((n, n));
        general_mat_mul(1.0, &x, &x.t(), 0.0, &mut dots);
        let sq = (0..n).map(|i| dots[[i, i]]).collect();
        Gram {
            n,
            dots: dots.into_raw_vec_and_offset().0,
            sq,
            dim,
            x: x.to_owned(),
        }
    }

    fn dot(&self, i: usize, j: usize) -> f64 {
        self.dots[i * self.n + j]
    }

    /// Numeric gamma for `rows` as the training set.
    pub fn resolve_gamma(&self, gamma: Option<Gamma>, rows: &[usize]) -> f64 {
        let d = self.dim.max(1) as f64;
        match gamma {
            None => 0.0,
            Some(Gamma::Value(v)) => v,
            Some(Gamma::Mode(GammaMode::Auto)) => 1.0 / d,
            Some(Gamma::Mode(GammaMode::Scale)) => {
                let count = (rows.len() * self.dim) as f64;
                let mean = rows.iter().map(|&r| self.x.row(r).sum()).sum::<f64>() / count;
                let var = rows
                    .iter()
                    .map(|&r| {
                        self.x
                            .row(r)
                            .iter()
                            .map(|v| (v - mean).powi(2))
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    / count;
                if var > 0.0 {
                    1.0 / (d * var)
                } else {
                    1.0
                }
            }
        }
    }

    pub fn kernel(&self, kernel: Kernel, gamma: f64, i: usize, j: usize) -> f64 {
        let dot = self.dot(i, j);
        match kernel {
            Kernel::Linear => dot,
            Kernel::Rbf => (-gamma * (self.sq[i] + self.sq[j] - 2.0 * dot).max(0.0)).exp(),
            Kernel::Sigmoid => (gamma * dot).tanh(),
            Kernel::Polynomial => (gamma * dot).powi(3),
        }
    }

    /// Kernel block `rows × cols`, row-major.
    pub fn block(&self, kernel: Kernel, gamma: f64, rows: &[usize], cols: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for &i in rows {
            for &j in cols {
                out.push(self.kernel(kernel, gamma, i, j));
            }
        }
        out
    }
}

const TAU: f64 = 1e-12;
const TOLERANCE: f64 = 1e-3;

/// Dual solution of one binary C-SVM: `coef[i] = α_i y_i` and the offset.
#[derive(Debug, Clone)]
pub(crate) struct BinarySolution {
    pub coef: Vec<f64>,
    pub rho: f64,
}

/// SMO with second-order working-set selection on a precomputed kernel
/// matrix `k` (`l × l`, symmetric). Labels are ±1.
#[cfg(test)]
pub(crate) fn solve_binary(k: &[f64], y: &[f64], c: f64) -> BinarySolution {
    let mut state = SmoState::new(y);
    solve_binary_from(k, y, c, &mut state)
}

/// Dual variables and the signed gradient `y ∘ (Qα − 1)`. Neither depends
/// on C, so a state left by a smaller C is a feasible warm start for a
/// larger one.
#[derive(Debug, Clone)]
pub(crate) struct SmoState {
    alpha: Vec<f64>,
    yg: Vec<f64>,
}

impl SmoState {
    pub fn new(y: &[f64]) -> Self {
        SmoState {
            alpha: vec![0.0; y.len()],
            yg: y.iter().map(|v| -v).collect(),
        }
    }
}

pub(crate) fn solve_binary_from(
    k: &[f64],
    y: &[f64],
    c: f64,
    state: &mut SmoState,
) -> BinarySolution {
    let l = y.len();
    let kd: Vec<f64> = (0..l).map(|i| k[i * l + i]).collect();
    let SmoState { alpha, yg } = state;
    debug_assert!(alpha.iter().all(|&a| a <= c));
    // I_up: α may move so that yα grows; I_low: so that it shrinks.
    let is_up = |a: f64, y: f64| if y > 0.0 { a < c } else { a > 0.0 };
    let is_low = |a: f64, y: f64| if y > 0.0 { a > 0.0 } else { a < c };
    let mut up: Vec<bool> = (0..l).map(|t| is_up(alpha[t], y[t])).collect();
    let mut low: Vec<bool> = (0..l).map(|t| is_low(alpha[t], y[t])).collect();
    let max_iter = (100 * l).max(10_000);
    for _ in 0..max_iter {
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..l {
            if up[t] && -yg[t] >= gmax {
                gmax = -yg[t];
                i = t;
            }
        }
        if i == usize::MAX {
            break;
        }
        let ki = &k[i * l..(i + 1) * l];
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        // Maximise diff² / quad, compared by cross-multiplication.
        let (mut best_num, mut best_den) = (0.0f64, 1.0f64);
        for t in 0..l {
            if !low[t] {
                continue;
            }
            let v = yg[t];
            if v >= gmax2 {
                gmax2 = v;
            }
            let diff = gmax + v;
            if diff > 0.0 {
                let quad = kd[i] + kd[t] - 2.0 * ki[t];
                let quad = if quad > 0.0 { quad } else { TAU };
                let num = diff * diff;
                if num * best_den >= best_num * quad {
                    best_num = num;
                    best_den = quad;
                    j = t;
                }
            }
        }
        if gmax + gmax2 < TOLERANCE || j == usize::MAX {
            break;
        }
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let (gi, gj) = (y[i] * yg[i], y[j] * yg[j]);
        let qij = y[i] * y[j] * ki[j];
        if y[i] != y[j] {
            let quad = (kd[i] + kd[j] + 2.0 * qij).max(TAU);
            let delta = (-gi - gj) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (kd[i] + kd[j] - 2.0 * qij).max(TAU);
            let delta = (gi - gj) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        // Q is symmetric, so read rows i and j rather than columns.
        let (wi, wj) = (y[i] * (alpha[i] - old_i), y[j] * (alpha[j] - old_j));
        let kj = &k[j * l..(j + 1) * l];
        for t in 0..l {
            yg[t] += ki[t] * wi + kj[t] * wj;
        }
        for t in [i, j] {
            up[t] = is_up(alpha[t], y[t]);
            low[t] = is_low(alpha[t], y[t]);
        }
    }
    // Offset from free vectors, else the midpoint of the feasible interval.
    let (mut ub, mut lb, mut sum_free, mut n_free) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0);
    for t in 0..l {
        let v = yg[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(v);
            } else {
                lb = lb.max(v);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(v);
            } else {
                lb = lb.max(v);
            }
        } else {
            n_free += 1;
            sum_free += v;
        }
    }
    let rho = if n_free > 0 {
        sum_free / n_free as f64
    } else {
        (ub + lb) / 2.0
    };
    BinarySolution {
        coef: alpha.iter().zip(y).map(|(a, yy)| a * yy).collect(),
        rho,
    }
}

/// One-vs-rest ensemble over the classes present in training.
pub(crate) struct OvrModel {
    classes: Vec<usize>,
    solutions: Vec<BinarySolution>,
}

impl OvrModel {
    /// `k_train` is the `l × l` kernel over the training rows.
    pub fn fit(k_train: &[f64], labels: &[usize], c: f64) -> Self {
        Self::fit_path(k_train, labels, &[c])
            .pop()
            .expect("one C value")
    }

    /// One model per C, solved in ascending C order with each binary
    /// problem warm-started from the previous solution. `cs` must ascend.
    pub fn fit_path(k_train: &[f64], labels: &[usize], cs: &[f64]) -> Vec<Self> {
        debug_assert!(cs.windows(2).all(|w| w[0] <= w[1]));
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let mut paths: Vec<Vec<BinarySolution>> = vec![Vec::new(); cs.len()];
        if classes.len() >= 2 {
            for &cls in &classes {
                let y: Vec<f64> = labels
                    .iter()
                    .map(|&l| if l == cls { 1.0 } else { -1.0 })
                    .collect();
                let mut state = SmoState::new(&y);
                for (path, &c) in paths.iter_mut().zip(cs) {
                    path.push(solve_binary_from(k_train, &y, c, &mut state));
                }
            }
        }
        paths
            .into_iter()
            .map(|solutions| OvrModel {
                classes: classes.clone(),
                solutions,
            })
            .collect()
    }

    /// Predicts from the `l × m` kernel between training and query rows.
    pub fn predict(&self, k_cross: &[f64], m: usize) -> Vec<usize> {
        if self.solutions.is_empty() {
            return vec![self.classes.first().copied().unwrap_or(0); m];
        }
        (0..m)
            .map(|q| {
                let mut best = (f64::NEG_INFINITY, 0);
                for (cls, sol) in self.classes.iter().zip(&self.solutions) {
                    let score: f64 = sol
                        .coef
                        .iter()
                        .enumerate()
                        .filter(|(_, &a)| a != 0.0)
                        .map(|(i, &a)| a * k_cross[i * m + q])
                        .sum::<f64>()
                        - sol.rho;
                    if score > best.0 {
                        best = (score, *cls);
                    }
                }
                best.1
            })
            .collect()
    }
}

/// A fitted multiclass SVM over owned training rows.
pub struct SvmModel {
    params: SvmParams,
    gamma: f64,
    train: Array2<f64>,
    model: OvrModel,
}

impl SvmModel {
    pub fn fit(x: ArrayView2<f64>, labels: &[usize], params: SvmParams) -> Result<Self> {
        if x.nrows() != labels.len() {
            return Err(Error::Contract(format!(
                "{} rows, {} labels",
                x.nrows(),
                labels.len()
            )));
        }
        let gram = Gram::new(x);
        let rows: Vec<usize> = (0..x.nrows()).collect();
        let gamma = gram.resolve_gamma(params.gamma, &rows);
        let k = gram.block(params.kernel, gamma, &rows, &rows);
        Ok(SvmModel {
            params,
            gamma,
            train: x.to_owned(),
            model: OvrModel::fit(&k, labels, params.c),
        })
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        let l = self.train.nrows();
        let m = x.nrows();
        let mut k = vec![0.0; l * m];
        for i in 0..l {
            let a = self.train.row(i);
            let sa = a.dot(&a);
            for q in 0..m {
                let b = x.row(q);
                let dot = a.dot(&b);
                k[i * m + q] = match self.params.kernel {
                    Kernel::Linear => dot,
                    Kernel::Rbf => (-self.gamma * (sa + b.dot(&b) - 2.0 * dot).max(0.0)).exp(),
                    Kernel::Sigmoid => (self.gamma * dot).tanh(),
                    Kernel::Polynomial => (self.gamma * dot).powi(3),
                };
            }
        }
        self.model.predict(&k, m)
    }
}
