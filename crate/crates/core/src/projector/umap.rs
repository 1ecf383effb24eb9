//! Uniform manifold approximation and projection: fuzzy kNN graph, spectral
//! initialisation, then edge-sampled SGD on the cross-entropy layout loss.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::seed::{self, Rng};

const SMOOTH_K_TOLERANCE: f64 = 1e-5;
const MIN_K_DIST_SCALE: f64 = 1e-3;
const NEGATIVE_SAMPLE_RATE: usize = 5;
const CLIP: f64 = 4.0;
const KNN_BLOCK: usize = 256;

/// `k` nearest neighbours of every row (itself first), row-major `n × k`.
pub(crate) struct Knn {
    pub k: usize,
    pub indices: Vec<usize>,
    pub dists: Vec<f64>,
}

pub(crate) fn exact_knn(x: ArrayView2<f64>, k: usize) -> Knn {
    let n = x.nrows();
    let sq: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r)).collect();
    let rows: Vec<(Vec<usize>, Vec<f64>)> = (0..n)
        .step_by(KNN_BLOCK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .flat_map_iter(|start| {
            let end = (start + KNN_BLOCK).min(n);
            let mut dots = Array2::<f64>::zeros((end - start, n));
            general_mat_mul(1.0, &x.slice(s![start..end, ..]), &x.t(), 0.0, &mut dots);
            let sq = &sq;
            (start..end).map(move |i| {
                let row = dots.row(i - start);
                let mut cand: Vec<(f64, usize)> = (0..n)
                    .map(|j| {
                        let d = if i == j {
                            0.0
                        } else {
                            (sq[i] + sq[j] - 2.0 * row[j]).max(0.0).sqrt()
                        };
                        (d, j)
                    })
                    .collect();
                // Self sorts first even against exact duplicates.
                let key = |&(d, j): &(f64, usize)| (d, j != i, j);
                cand.select_nth_unstable_by(k - 1, |a, b| key(a).partial_cmp(&key(b)).unwrap());
                cand.truncate(k);
                cand.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
                (
                    cand.iter().map(|c| c.1).collect(),
                    cand.iter().map(|c| c.0).collect(),
                )
            })
        })
        .collect();
    let mut indices = Vec::with_capacity(n * k);
    let mut dists = Vec::with_capacity(n * k);
    for (i, d) in rows {
        indices.extend(i);
        dists.extend(d);
    }
    Knn { k, indices, dists }
}

/// Per-point `(rho, sigma)`: distance to the nearest non-self neighbour, and
/// the bandwidth making the neighbour memberships sum to `log2(k)`.
pub(crate) fn smooth_knn_dist(knn: &Knn) -> Vec<(f64, f64)> {
    let k = knn.k;
    let n = knn.dists.len() / k;
    let target = (k as f64).log2();
    let mean_all = knn.dists.iter().sum::<f64>() / knn.dists.len() as f64;
    (0..n)
        .map(|i| {
            let d = &knn.dists[i * k..(i + 1) * k];
            let rho = d.iter().copied().find(|&v| v > 0.0).unwrap_or(0.0);
            let (mut lo, mut hi, mut mid) = (0.0, f64::INFINITY, 1.0);
            for _ in 0..64 {
                let psum: f64 = d[1..]
                    .iter()
                    .map(|&v| {
                        let t = v - rho;
                        if t > 0.0 {
                            (-t / mid).exp()
                        } else {
                            1.0
                        }
                    })
                    .sum();
                if (psum - target).abs() < SMOOTH_K_TOLERANCE {
                    break;
                }
                if psum > target {
                    hi = mid;
                    mid = (lo + hi) / 2.0;
                } else {
                    lo = mid;
                    mid = if hi.is_infinite() {
                        mid * 2.0
                    } else {
                        (lo + hi) / 2.0
                    };
                }
            }
            let floor = MIN_K_DIST_SCALE
                * if rho > 0.0 {
                    d.iter().sum::<f64>() / k as f64
                } else {
                    mean_all
                };
            (rho, mid.max(floor))
        })
        .collect()
}

/// Symmetric fuzzy union `A + Aᵀ − A∘Aᵀ` as sorted `(i, j, w)` triples.
pub(crate) fn fuzzy_graph(knn: &Knn) -> Vec<(usize, usize, f64)> {
    let k = knn.k;
    let params = smooth_knn_dist(knn);
    let mut directed: Vec<(usize, usize, f64, bool)> = Vec::new();
    for (i, &(rho, sigma)) in params.iter().enumerate() {
        for slot in 0..k {
            let j = knn.indices[i * k + slot];
            if j == i {
                continue;
            }
            let t = knn.dists[i * k + slot] - rho;
            let w = if t <= 0.0 || sigma == 0.0 {
                1.0
            } else {
                (-t / sigma).exp()
            };
            directed.push((i, j, w, false));
            directed.push((j, i, w, true));
        }
    }
    directed.sort_by(|a, b| (a.0, a.1, a.3).cmp(&(b.0, b.1, b.3)));
    let mut out: Vec<(usize, usize, f64)> = Vec::new();
    let mut idx = 0;
    while idx < directed.len() {
        let (i, j) = (directed[idx].0, directed[idx].1);
        let (mut a, mut t) = (0.0, 0.0);
        while idx < directed.len() && directed[idx].0 == i && directed[idx].1 == j {
            if directed[idx].3 {
                t = directed[idx].2;
            } else {
                a = directed[idx].2;
            }
            idx += 1;
        }
        let w = a + t - a * t;
        if w > 0.0 {
            out.push((i, j, w));
        }
    }
    out
}

/// Fits `1 / (1 + a·x^{2b})` to the offset-exponential target curve by
/// Levenberg–Marquardt.
pub(crate) fn fit_ab(spread: f64, min_dist: f64) -> (f64, f64) {
    let xs: Vec<f64> = (0..300).map(|i| 3.0 * spread * i as f64 / 299.0).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| {
            if x < min_dist {
                1.0
            } else {
                (-(x - min_dist) / spread).exp()
            }
        })
        .collect();
    let residuals = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| (1.0 / (1.0 + a * x.powf(2.0 * b)) - y).powi(2))
            .sum()
    };
    let (mut a, mut b, mut lambda) = (1.0, 1.0, 1e-3);
    let mut cost = residuals(a, b);
    for _ in 0..200 {
        let (mut jtj, mut jtr) = ([[0.0; 2]; 2], [0.0; 2]);
        for (&x, &y) in xs.iter().zip(&ys) {
            if x == 0.0 {
                continue;
            }
            let p = x.powf(2.0 * b);
            let f = 1.0 / (1.0 + a * p);
            let da = -p * f * f;
            let db = -a * p * 2.0 * x.ln() * f * f;
            let r = f - y;
            jtj[0][0] += da * da;
            jtj[0][1] += da * db;
            jtj[1][1] += db * db;
            jtr[0] += da * r;
            jtr[1] += db * r;
        }
        jtj[1][0] = jtj[0][1];
        let m00 = jtj[0][0] * (1.0 + lambda);
        let m11 = jtj[1][1] * (1.0 + lambda);
        let det = m00 * m11 - jtj[0][1] * jtj[1][0];
        if det.abs() < 1e-300 {
            break;
        }
        let step_a = -(m11 * jtr[0] - jtj[0][1] * jtr[1]) / det;
        let step_b = -(m00 * jtr[1] - jtj[1][0] * jtr[0]) / det;
        let (na, nb) = (a + step_a, b + step_b);
        let next = if na > 0.0 && nb > 0.0 {
            residuals(na, nb)
        } else {
            f64::INFINITY
        };
        if next < cost {
            let done = (cost - next) < 1e-15 * cost.max(1e-300);
            a = na;
            b = nb;
            cost = next;
            lambda *= 0.3;
            if done {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    (a, b)
}

/// The two leading non-trivial eigenvectors of the normalised adjacency
/// `D^{-1/2} W D^{-1/2}`, by subspace iteration on its shifted form.
pub(crate) fn spectral_init(n: usize, graph: &[(usize, usize, f64)], rng: &mut Rng) -> Array2<f64> {
    let mut deg = vec![0.0; n];
    for &(i, _, w) in graph {
        deg[i] += w;
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|&d| 1.0 / d.max(1e-12).sqrt()).collect();
    let trivial = normalized(deg.iter().map(|d| d.sqrt()).collect());
    let apply = |v: &[f64]| -> Vec<f64> {
        // (I + M) / 2 keeps the spectrum in [0, 1].
        let mut out: Vec<f64> = v.iter().map(|x| x / 2.0).collect();
        for &(i, j, w) in graph {
            out[i] += 0.5 * w * inv_sqrt[i] * inv_sqrt[j] * v[j];
        }
        out
    };
    let mut basis: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    for _ in 0..1000 {
        let mut next: Vec<Vec<f64>> = basis.iter().map(|v| apply(v)).collect();
        orthonormalize(&mut next, &trivial);
        let change: f64 = next
            .iter()
            .zip(&basis)
            .map(|(a, b)| 1.0 - dot(a, b).abs())
            .fold(0.0, f64::max);
        basis = next;
        if change < 1e-10 {
            break;
        }
    }
    Array2::from_shape_fn((n, 2), |(i, d)| basis[d][i])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = dot(&v, &v).sqrt().max(1e-300);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn orthonormalize(vs: &mut [Vec<f64>], fixed: &[f64]) {
    for i in 0..vs.len() {
        let p = dot(&vs[i], fixed);
        vs[i].iter_mut().zip(fixed).for_each(|(x, f)| *x -= p * f);
        for j in 0..i {
            let (done, rest) = vs.split_at_mut(i);
            let p = dot(&rest[0], &done[j]);
            rest[0]
                .iter_mut()
                .zip(&done[j])
                .for_each(|(x, f)| *x -= p * f);
        }
        vs[i] = normalized(std::mem::take(&mut vs[i]));
    }
}

pub(crate) struct LayoutParams {
    pub a: f64,
    pub b: f64,
    pub n_epochs: usize,
}

fn clip(v: f64) -> f64 {
    v.clamp(-CLIP, CLIP)
}

/// Edge-sampled SGD; each edge is visited in proportion to its weight and
/// followed by a fixed rate of uniformly drawn negative samples.
pub(crate) fn optimize_layout(
    embedding: &mut Array2<f64>,
    graph: &[(usize, usize, f64)],
    params: &LayoutParams,
    rng: &mut Rng,
) {
    let n = embedding.nrows();
    let dim = embedding.ncols();
    let (a, b) = (params.a, params.b);
    let n_epochs = params.n_epochs as f64;
    let max_w = graph.iter().map(|e| e.2).fold(0.0, f64::max);
    let eps: Vec<f64> = graph.iter().map(|e| max_w / e.2).collect();
    let eps_neg: Vec<f64> = eps
        .iter()
        .map(|e| e / NEGATIVE_SAMPLE_RATE as f64)
        .collect();
    let mut next_sample = eps.clone();
    let mut next_negative = eps_neg.clone();
    let y = embedding.as_slice_mut().expect("standard layout");
    let mut alpha = 1.0;
    for epoch in 0..params.n_epochs {
        let ef = epoch as f64;
        for (e, &(i, j, _)) in graph.iter().enumerate() {
            if next_sample[e] > ef {
                continue;
            }
            let d2: f64 = (0..dim)
                .map(|d| (y[i * dim + d] - y[j * dim + d]).powi(2))
                .sum();
            if d2 > 0.0 {
                let coeff = -2.0 * a * b * d2.powf(b - 1.0) / (a * d2.powf(b) + 1.0);
                for d in 0..dim {
                    let g = clip(coeff * (y[i * dim + d] - y[j * dim + d]));
                    y[i * dim + d] += g * alpha;
                    y[j * dim + d] -= g * alpha;
                }
            }
            next_sample[e] += eps[e];
            let n_neg = ((ef - next_negative[e]) / eps_neg[e]).max(0.0) as usize;
            for _ in 0..n_neg {
                let kk = rng.random_range(0..n);
                let d2: f64 = (0..dim)
                    .map(|d| (y[i * dim + d] - y[kk * dim + d]).powi(2))
                    .sum();
                if d2 > 0.0 {
                    let coeff = 2.0 * b / ((0.001 + d2) * (a * d2.powf(b) + 1.0));
                    for d in 0..dim {
                        let g = clip(coeff * (y[i * dim + d] - y[kk * dim + d]));
                        y[i * dim + d] += g * alpha;
                    }
                }
            }
            next_negative[e] += n_neg as f64 * eps_neg[e];
        }
        alpha = 1.0 - ef / n_epochs;
    }
}

/// Full projection of `x` (rows) to two dimensions.
pub(crate) fn umap(
    x: ArrayView2<f64>,
    n_neighbors: usize,
    min_dist: f64,
    spread: f64,
    n_epochs: usize,
    seed_value: u64,
) -> Array2<f64> {
    let n = x.nrows();
    let knn = exact_knn(x, n_neighbors);
    let mut graph = fuzzy_graph(&knn);
    let max_w = graph.iter().map(|e| e.2).fold(0.0, f64::max);
    graph.retain(|e| e.2 >= max_w / n_epochs as f64);
    let mut rng = seed::rng(seed_value);
    let mut emb = spectral_init(n, &graph, &mut rng);
    let expansion = 10.0 / emb.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let jitter = Normal::new(0.0, 1e-4).expect("positive scale");
    emb.mapv_inplace(|v| v * expansion);
    emb.iter_mut().for_each(|v| *v += jitter.sample(&mut rng));
    for mut col in emb.columns_mut() {
        let (lo, hi) = col
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                (l.min(v), h.max(v))
            });
        let range = (hi - lo).max(1e-12);
        col.mapv_inplace(|v| 10.0 * (v - lo) / range);
    }
    let (a, b) = fit_ab(spread, min_dist);
    optimize_layout(&mut emb, &graph, &LayoutParams { a, b, n_epochs }, &mut rng);
    emb
}
