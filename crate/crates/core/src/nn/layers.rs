use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{ParamStore, Tensor};
use crate::seed::Rng;

/// Images per weight-gradient partial sum in conv backward. Fixed so the
/// reduction order never depends on the thread count.
const GRAD_GROUP: usize = 8;

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

fn view<'a>(rows: usize, cols: usize, data: &'a [f32]) -> ArrayView2<'a, f32> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix view")
}

fn view_mut<'a>(rows: usize, cols: usize, data: &'a mut [f32]) -> ArrayViewMut2<'a, f32> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("matrix view")
}

#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    /// Bias-free convolution (always followed by batch norm here), He-normal
    /// initialised.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = (cin * k * k) as f32;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let w = (0..cout * cin * k * k)
            .map(|_| normal.sample(rng))
            .collect();
        Conv2d {
            w: store.add_param(w),
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [f32]) {
        let p = oh * ow;
        for c in 0..self.cin {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = &mut cols[((c * self.k + ky) * self.k + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let out = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *o = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, oh: usize, ow: usize, gx: &mut [f32]) {
        let p = oh * ow;
        for c in 0..self.cin {
            let plane = &mut gx[c * h * w..(c + 1) * h * w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = &cols[((c * self.k + ky) * self.k + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, &g) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape;
        assert_eq!(c, self.cin, "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let kk = self.cin * self.k * self.k;
        let p = oh * ow;
        let weight = view(self.cout, kk, &store.params[self.w].value);
        let mut y = Tensor::zeros([n, self.cout, oh, ow]);
        y.data
            .par_chunks_mut(self.cout * p)
            .zip(x.data.par_chunks(c * h * w))
            .for_each_init(
                || vec![0.0f32; kk * p],
                |cols, (out, img)| {
                    self.im2col(img, h, w, oh, ow, cols);
                    general_mat_mul(
                        1.0,
                        &weight,
                        &view(kk, p, cols),
                        0.0,
                        &mut view_mut(self.cout, p, out),
                    );
                },
            );
        y
    }

    pub fn backward(&self, store: &mut ParamStore, x: &Tensor, gy: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape;
        let (oh, ow) = self.out_hw(h, w);
        let kk = self.cin * self.k * self.k;
        let p = oh * ow;
        let mut gx = Tensor::zeros(x.shape);
        let partials: Vec<Vec<f32>> = {
            let weight = view(self.cout, kk, &store.params[self.w].value);
            gx.data
                .par_chunks_mut(GRAD_GROUP * c * h * w)
                .zip(x.data.par_chunks(GRAD_GROUP * c * h * w))
                .zip(gy.data.par_chunks(GRAD_GROUP * self.cout * p))
                .map(|((gxs, xs), gys)| {
                    let mut gw = vec![0.0f32; self.cout * kk];
                    let mut cols = vec![0.0f32; kk * p];
                    let mut gcols = vec![0.0f32; kk * p];
                    for ((gxi, xi), gyi) in gxs
                        .chunks_mut(c * h * w)
                        .zip(xs.chunks(c * h * w))
                        .zip(gys.chunks(self.cout * p))
                    {
                        self.im2col(xi, h, w, oh, ow, &mut cols);
                        let gyv = view(self.cout, p, gyi);
                        general_mat_mul(
                            1.0,
                            &gyv,
                            &view(kk, p, &cols).t(),
                            1.0,
                            &mut view_mut(self.cout, kk, &mut gw),
                        );
                        general_mat_mul(
                            1.0,
                            &weight.t(),
                            &gyv,
                            0.0,
                            &mut view_mut(kk, p, &mut gcols),
                        );
                        self.col2im(&gcols, h, w, oh, ow, gxi);
                    }
                    gw
                })
                .collect()
        };
        debug_assert_eq!(partials.len(), n.div_ceil(GRAD_GROUP));
        let grad = &mut store.params[self.w].grad;
        for part in partials {
            for (g, v) in grad.iter_mut().zip(part) {
                *g += v;
            }
        }
        gx
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BatchNorm2d {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
    c: usize,
}

#[derive(Debug)]
pub(crate) struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, c: usize) -> Self {
        BatchNorm2d {
            gamma: store.add_param(vec![1.0; c]),
            beta: store.add_param(vec![0.0; c]),
            mean: store.add_buffer(vec![0.0; c]),
            var: store.add_buffer(vec![1.0; c]),
            c,
        }
    }

    /// Normalises with batch statistics and updates the running estimates.
    pub fn forward_train(&self, store: &mut ParamStore, x: &Tensor) -> (Tensor, BnCache) {
        let [n, c, h, w] = x.shape;
        assert_eq!(c, self.c, "batch norm channels");
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for i in 0..n {
            for ch in 0..c {
                let plane = &x.data[(i * c + ch) * hw..][..hw];
                mean[ch] += plane.iter().map(|&v| f64::from(v)).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|s| *s /= m);
        for i in 0..n {
            for ch in 0..c {
                let plane = &x.data[(i * c + ch) * hw..][..hw];
                var[ch] += plane
                    .iter()
                    .map(|&v| (f64::from(v) - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|s| *s /= m);
        let inv_std: Vec<f32> = var
            .iter()
            .map(|&v| (1.0 / (v + f64::from(BN_EPS)).sqrt()) as f32)
            .collect();
        let mut xhat = Tensor::zeros(x.shape);
        let mut y = Tensor::zeros(x.shape);
        let (gamma, beta) = (
            &store.params[self.gamma].value,
            &store.params[self.beta].value,
        );
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                let mu = mean[ch] as f32;
                for k in off..off + hw {
                    let v = (x.data[k] - mu) * inv_std[ch];
                    xhat.data[k] = v;
                    y.data[k] = gamma[ch] * v + beta[ch];
                }
            }
        }
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        let rm = &mut store.buffers[self.mean];
        for (r, &mu) in rm.iter_mut().zip(&mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * mu as f32;
        }
        let rv = &mut store.buffers[self.var];
        for (r, &v) in rv.iter_mut().zip(&var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * (v * unbias) as f32;
        }
        (y, BnCache { xhat, inv_std })
    }

    pub fn infer(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape;
        let hw = h * w;
        let (gamma, beta) = (
            &store.params[self.gamma].value,
            &store.params[self.beta].value,
        );
        let (rm, rv) = (&store.buffers[self.mean], &store.buffers[self.var]);
        let scale: Vec<f32> = (0..c)
            .map(|ch| gamma[ch] / (rv[ch] + BN_EPS).sqrt())
            .collect();
        let shift: Vec<f32> = (0..c).map(|ch| beta[ch] - rm[ch] * scale[ch]).collect();
        let mut y = x.clone();
        for i in 0..n {
            for ch in 0..c {
                for v in &mut y.data[(i * c + ch) * hw..][..hw] {
                    *v = *v * scale[ch] + shift[ch];
                }
            }
        }
        y
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &BnCache, gy: &Tensor) -> Tensor {
        let [n, c, h, w] = gy.shape;
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut sum_g = vec![0.0f64; c];
        let mut sum_gx = vec![0.0f64; c];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                for k in off..off + hw {
                    let g = f64::from(gy.data[k]);
                    sum_g[ch] += g;
                    sum_gx[ch] += g * f64::from(cache.xhat.data[k]);
                }
            }
        }
        let gamma = store.params[self.gamma].value.clone();
        for ch in 0..c {
            store.params[self.gamma].grad[ch] += sum_gx[ch] as f32;
            store.params[self.beta].grad[ch] += sum_g[ch] as f32;
        }
        let mut gx = Tensor::zeros(gy.shape);
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                let a = f64::from(gamma[ch]) * f64::from(cache.inv_std[ch]);
                let mg = sum_g[ch] / m;
                let mgx = sum_gx[ch] / m;
                for k in off..off + hw {
                    let g = f64::from(gy.data[k]);
                    let xh = f64::from(cache.xhat.data[k]);
                    gx.data[k] = (a * (g - mg - xh * mgx)) as f32;
                }
            }
        }
        gx
    }
}

pub(crate) fn relu(mut x: Tensor) -> Tensor {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

/// Gradient through a ReLU given its output.
pub(crate) fn relu_backward(y: &Tensor, mut g: Tensor) -> Tensor {
    for (gv, &yv) in g.data.iter_mut().zip(&y.data) {
        if yv <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

/// 3×3 max pool, stride 2, padding 1.
pub(crate) fn max_pool(x: &Tensor) -> (Tensor, Vec<u32>) {
    let [n, c, h, w] = x.shape;
    let (oh, ow) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let mut arg = vec![0u32; y.data.len()];
    for plane in 0..n * c {
        let src = &x.data[plane * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut at = 0;
                for ky in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        if src[idx] > best {
                            best = src[idx];
                            at = idx;
                        }
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                y.data[o] = best;
                arg[o] = at as u32;
            }
        }
    }
    (y, arg)
}

pub(crate) fn max_pool_backward(in_shape: [usize; 4], arg: &[u32], gy: &Tensor) -> Tensor {
    let [_, _, h, w] = in_shape;
    let per = gy.shape[2] * gy.shape[3];
    let mut gx = Tensor::zeros(in_shape);
    for (o, (&a, &g)) in arg.iter().zip(&gy.data).enumerate() {
        let plane = o / per;
        gx.data[plane * h * w + a as usize] += g;
    }
    gx
}

pub(crate) fn global_avg_pool(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape;
    let hw = h * w;
    let data = x
        .data
        .chunks(hw)
        .map(|p| (p.iter().map(|&v| f64::from(v)).sum::<f64>() / hw as f64) as f32)
        .collect();
    Tensor::from_vec([n, c, 1, 1], data)
}

pub(crate) fn global_avg_pool_backward(in_shape: [usize; 4], gy: &Tensor) -> Tensor {
    let hw = in_shape[2] * in_shape[3];
    let mut gx = Tensor::zeros(in_shape);
    for (plane, &g) in gx.data.chunks_mut(hw).zip(&gy.data) {
        plane.fill(g / hw as f32);
    }
    gx
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    w: usize,
    b: usize,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    /// Uniform(-1/√in, 1/√in) weights and bias.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, inp: usize, out: usize) -> Self {
        let bound = 1.0 / (inp as f32).sqrt();
        let w = (0..inp * out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let b = (0..out).map(|_| rng.random_range(-bound..bound)).collect();
        Linear {
            w: store.add_param(w),
            b: store.add_param(b),
            inp,
            out,
        }
    }

    /// Rows are computed one at a time so a sample's output never depends on
    /// what else is in the batch.
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let n = x.n();
        assert_eq!(x.item_len(), self.inp, "linear input width");
        let w = view(self.out, self.inp, &store.params[self.w].value);
        let b = &store.params[self.b].value;
        let mut y = Tensor::zeros([n, self.out, 1, 1]);
        for (row, out) in x.data.chunks(self.inp).zip(y.data.chunks_mut(self.out)) {
            out.copy_from_slice(b);
            let xv = view(1, self.inp, row);
            general_mat_mul(1.0, &xv, &w.t(), 1.0, &mut view_mut(1, self.out, out));
        }
        y
    }

    pub fn backward(&self, store: &mut ParamStore, x: &Tensor, gy: &Tensor) -> Tensor {
        let n = x.n();
        let gyv = view(n, self.out, &gy.data);
        let xv = view(n, self.inp, &x.data);
        general_mat_mul(
            1.0,
            &gyv.t(),
            &xv,
            1.0,
            &mut view_mut(self.out, self.inp, &mut store.params[self.w].grad),
        );
        for row in gy.data.chunks(self.out) {
            for (g, &v) in store.params[self.b].grad.iter_mut().zip(row) {
                *g += v;
            }
        }
        let mut gx = Tensor::zeros(x.shape);
        general_mat_mul(
            1.0,
            &gyv,
            &view(self.out, self.inp, &store.params[self.w].value),
            0.0,
            &mut view_mut(n, self.inp, &mut gx.data),
        );
        gx
    }
}

/// Row-wise L2 normalisation of an `[n, d, 1, 1]` tensor.
pub(crate) fn l2_normalize(x: &Tensor) -> (Tensor, Vec<f32>) {
    let d = x.item_len();
    let mut y = x.clone();
    let mut norms = Vec::with_capacity(x.n());
    for row in y.data.chunks_mut(d) {
        let norm = row
            .iter()
            .map(|&v| f64::from(v).powi(2))
            .sum::<f64>()
            .sqrt()
            .max(1e-12) as f32;
        row.iter_mut().for_each(|v| *v /= norm);
        norms.push(norm);
    }
    (y, norms)
}

pub(crate) fn l2_normalize_backward(y: &Tensor, norms: &[f32], gy: &Tensor) -> Tensor {
    let d = y.item_len();
    let mut gx = gy.clone();
    for ((g, yr), &norm) in gx.data.chunks_mut(d).zip(y.data.chunks(d)).zip(norms) {
        let dot: f32 = g.iter().zip(yr).map(|(a, b)| a * b).sum();
        for (gv, &yv) in g.iter_mut().zip(yr) {
            *gv = (*gv - yv * dot) / norm;
        }
    }
    gx
}

#[derive(Debug, Clone)]
pub(crate) struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    down: Option<(Conv2d, BatchNorm2d)>,
}

#[derive(Debug)]
pub(crate) struct BlockCache {
    x: Tensor,
    bn1: BnCache,
    r1: Tensor,
    bn2: BnCache,
    down: Option<BnCache>,
    out: Tensor,
}

impl BasicBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let conv1 = Conv2d::new(store, rng, cin, cout, 3, stride, 1);
        let bn1 = BatchNorm2d::new(store, cout);
        let conv2 = Conv2d::new(store, rng, cout, cout, 3, 1, 1);
        let bn2 = BatchNorm2d::new(store, cout);
        let down = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(store, rng, cin, cout, 1, stride, 0),
                BatchNorm2d::new(store, cout),
            )
        });
        BasicBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            down,
        }
    }

    pub fn forward_train(&self, store: &mut ParamStore, x: Tensor) -> (Tensor, BlockCache) {
        let h = self.conv1.forward(store, &x);
        let (h, bn1) = self.bn1.forward_train(store, &h);
        let r1 = relu(h);
        let h = self.conv2.forward(store, &r1);
        let (mut h, bn2) = self.bn2.forward_train(store, &h);
        let down = match &self.down {
            Some((conv, bn)) => {
                let s = conv.forward(store, &x);
                let (s, cache) = bn.forward_train(store, &s);
                add_assign(&mut h, &s);
                Some(cache)
            }
            None => {
                add_assign(&mut h, &x);
                None
            }
        };
        let out = relu(h);
        (
            out.clone(),
            BlockCache {
                x,
                bn1,
                r1,
                bn2,
                down,
                out,
            },
        )
    }

    pub fn infer(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let h = relu(self.bn1.infer(store, &self.conv1.forward(store, x)));
        let mut h = self.bn2.infer(store, &self.conv2.forward(store, &h));
        match &self.down {
            Some((conv, bn)) => add_assign(&mut h, &bn.infer(store, &conv.forward(store, x))),
            None => add_assign(&mut h, x),
        }
        relu(h)
    }

    pub fn backward(&self, store: &mut ParamStore, cache: BlockCache, gy: Tensor) -> Tensor {
        let g = relu_backward(&cache.out, gy);
        let gh = self.bn2.backward(store, &cache.bn2, &g);
        let gr = self.conv2.backward(store, &cache.r1, &gh);
        let gr = relu_backward(&cache.r1, gr);
        let gh = self.bn1.backward(store, &cache.bn1, &gr);
        let mut gx = self.conv1.backward(store, &cache.x, &gh);
        match (&self.down, &cache.down) {
            (Some((conv, bn)), Some(bc)) => {
                let gs = bn.backward(store, bc, &g);
                add_assign(&mut gx, &conv.backward(store, &cache.x, &gs));
            }
            _ => add_assign(&mut gx, &g),
        }
        gx
    }
}

fn add_assign(a: &mut Tensor, b: &Tensor) {
    debug_assert_eq!(a.shape, b.shape);
    for (x, &y) in a.data.iter_mut().zip(&b.data) {
        *x += y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn random_tensor(shape: [usize; 4], rng: &mut Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Loss = Σ y·r for a fixed random r; its input gradient is the layer's
    /// backward applied to r.
    fn check_input_grad(
        x: &Tensor,
        forward: &mut dyn FnMut(&Tensor) -> Tensor,
        analytic: &Tensor,
        r: &Tensor,
        tol: f64,
    ) {
        let loss = |forward: &mut dyn FnMut(&Tensor) -> Tensor, x: &Tensor| -> f64 {
            forward(x)
                .data
                .iter()
                .zip(&r.data)
                .map(|(a, b)| f64::from(*a) * f64::from(*b))
                .sum()
        };
        let mut central = |k: usize, h: f32| {
            let mut xp = x.clone();
            xp.data[k] += h;
            let mut xm = x.clone();
            xm.data[k] -= h;
            (loss(forward, &xp) - loss(forward, &xm)) / (2.0 * f64::from(h))
        };
        let mut worst = 0.0f64;
        let (mut checked, mut total) = (0, 0);
        for k in (0..x.data.len()).step_by((x.data.len() / 40).max(1)) {
            total += 1;
            let num = central(k, 1e-2);
            // A step that straddles a ReLU or max-pool kink disagrees with
            // the half step; such coordinates say nothing about the gradient.
            if (num - central(k, 5e-3)).abs() > 1e-2 * num.abs().max(1e-1) {
                continue;
            }
            checked += 1;
            let ana = f64::from(analytic.data[k]);
            let err = (num - ana).abs() / (num.abs().max(ana.abs()).max(1e-2));
            worst = worst.max(err);
        }
        assert!(
            checked * 2 >= total,
            "only {checked} of {total} coordinates smooth"
        );
        assert!(worst < tol, "worst relative error {worst}");
    }

    #[test]
    fn conv_gradients() {
        let mut rng = seed::rng(1);
        let mut store = ParamStore::default();
        let conv = Conv2d::new(&mut store, &mut rng, 2, 3, 3, 2, 1);
        let x = random_tensor([2, 2, 7, 7], &mut rng);
        let y = conv.forward(&store, &x);
        assert_eq!(y.shape, [2, 3, 4, 4]);
        let r = random_tensor(y.shape, &mut rng);
        let gx = conv.backward(&mut store, &x, &r);
        check_input_grad(&x, &mut |x| conv.forward(&store, x), &gx, &r, 1e-2);

        // Weight gradient against finite differences on a few entries.
        for k in [0usize, 5, 17, 40] {
            let mut s = store.clone();
            s.params[0].value[k] += 1e-2;
            let lp: f32 = conv
                .forward(&s, &x)
                .data
                .iter()
                .zip(&r.data)
                .map(|(a, b)| a * b)
                .sum();
            s.params[0].value[k] -= 2e-2;
            let lm: f32 = conv
                .forward(&s, &x)
                .data
                .iter()
                .zip(&r.data)
                .map(|(a, b)| a * b)
                .sum();
            let num = (lp - lm) / 2e-2;
            let ana = store.params[0].grad[k];
            assert!(
                (num - ana).abs() < 1e-2 * num.abs().max(1.0),
                "{num} vs {ana}"
            );
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = seed::rng(2);
        let mut store = ParamStore::default();
        let conv = Conv2d::new(&mut store, &mut rng, 2, 2, 3, 1, 1);
        let x = random_tensor([1, 2, 5, 5], &mut rng);
        let y = conv.forward(&store, &x);
        let w = &store.params[0].value;
        for co in 0..2 {
            for oy in 0..5 {
                for ox in 0..5 {
                    let mut s = 0.0f32;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) =
                                    (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    s += w[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                        * x.data[(ci * 5 + iy as usize) * 5 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((y.data[(co * 5 + oy) * 5 + ox] - s).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn batch_norm_gradients() {
        let mut rng = seed::rng(3);
        let mut store = ParamStore::default();
        let bn = BatchNorm2d::new(&mut store, 3);
        store.params[0].value = vec![0.5, 1.5, -1.0];
        store.params[1].value = vec![0.1, -0.2, 0.3];
        let x = random_tensor([3, 3, 4, 4], &mut rng);
        let (y, cache) = bn.forward_train(&mut store, &x);
        let r = random_tensor(y.shape, &mut rng);
        let gx = bn.backward(&mut store, &cache, &r);
        let frozen = store.clone();
        check_input_grad(
            &x,
            &mut |x| bn.forward_train(&mut frozen.clone(), x).0,
            &gx,
            &r,
            2e-2,
        );
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::default();
        let bn = BatchNorm2d::new(&mut store, 1);
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        bn.forward_train(&mut store, &x);
        assert!((store.buffers[0][0] - 0.25).abs() < 1e-6);
        // Unbiased variance 5/3, blended with the initial 1.
        assert!((store.buffers[1][0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-6);
    }

    #[test]
    fn pool_linear_normalize_gradients() {
        let mut rng = seed::rng(4);
        let x = random_tensor([2, 2, 6, 6], &mut rng);
        let (y, arg) = max_pool(&x);
        assert_eq!(y.shape, [2, 2, 3, 3]);
        let r = random_tensor(y.shape, &mut rng);
        let gx = max_pool_backward(x.shape, &arg, &r);
        check_input_grad(&x, &mut |x| max_pool(x).0, &gx, &r, 1e-2);

        let g = global_avg_pool(&x);
        let r = random_tensor(g.shape, &mut rng);
        let gx = global_avg_pool_backward(x.shape, &r);
        check_input_grad(&x, &mut global_avg_pool, &gx, &r, 1e-2);

        let mut store = ParamStore::default();
        let lin = Linear::new(&mut store, &mut rng, 72, 5);
        let y = lin.forward(&store, &x);
        let r = random_tensor(y.shape, &mut rng);
        let gx = lin.backward(&mut store, &x, &r);
        check_input_grad(&x, &mut |x| lin.forward(&store, x), &gx, &r, 1e-2);

        let v = random_tensor([3, 4, 1, 1], &mut rng);
        let (y, norms) = l2_normalize(&v);
        let r = random_tensor(y.shape, &mut rng);
        let gx = l2_normalize_backward(&y, &norms, &r);
        check_input_grad(&v, &mut |v| l2_normalize(v).0, &gx, &r, 2e-2);
    }

    #[test]
    fn basic_block_gradients() {
        let mut rng = seed::rng(5);
        let mut store = ParamStore::default();
        let block = BasicBlock::new(&mut store, &mut rng, 2, 4, 2);
        let x = random_tensor([2, 2, 6, 6], &mut rng);
        let frozen = store.clone();
        let (y, cache) = block.forward_train(&mut store, x.clone());
        let r = random_tensor(y.shape, &mut rng);
        let gx = block.backward(&mut store, cache, r.clone());
        check_input_grad(
            &x,
            &mut |x| block.forward_train(&mut frozen.clone(), x.clone()).0,
            &gx,
            &r,
            5e-2,
        );
    }
}
