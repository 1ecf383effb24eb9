use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::layers::{self, BasicBlock, BatchNorm2d, BlockCache, BnCache, Conv2d, Linear};
use super::{ParamStore, Tensor};
use crate::corpus::{TissueClass, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Architecture {
    #[default]
    #[serde(rename = "residual-18", alias = "residual18", alias = "resnet18")]
    Residual18,
    #[serde(rename = "small-conv", alias = "small_conv")]
    SmallConv,
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::Residual18 => "residual-18",
            Architecture::SmallConv => "small-conv",
        })
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Validation(format!("unknown architecture {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Height, width, channels.
    pub input_shape: (usize, usize, usize),
    pub embedding_dim: usize,
    pub architecture: Architecture,
    pub normalize_embeddings: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_shape: (PATCH_SIZE as usize, PATCH_SIZE as usize, 3),
            embedding_dim: 128,
            architecture: Architecture::Residual18,
            normalize_embeddings: false,
        }
    }
}

impl EncoderConfig {
    pub fn small_conv() -> Self {
        EncoderConfig {
            architecture: Architecture::SmallConv,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input_shape;
        if self.embedding_dim == 0 {
            return Err(Error::Validation("embedding_dim must be positive".into()));
        }
        if c != 3 || h < 16 || w < 16 {
            return Err(Error::Validation(format!(
                "input_shape {:?} must be at least 16×16 with 3 channels",
                self.input_shape
            )));
        }
        Ok(())
    }
}

/// Channel widths of the three small-conv blocks.
const SMALL_CONV_WIDTHS: [usize; 3] = [8, 16, 32];

#[derive(Debug, Clone)]
enum Op {
    Conv(Conv2d),
    Bn(BatchNorm2d),
    Relu,
    MaxPool,
    Block(Box<BasicBlock>),
    GlobalAvgPool,
    Linear(Linear),
    L2Normalize,
}

#[derive(Debug)]
enum Cache {
    Input(Tensor),
    Bn(BnCache),
    Output(Tensor),
    Pool([usize; 4], Vec<u32>),
    Block(Box<BlockCache>),
    Shape([usize; 4]),
    Norm(Tensor, Vec<f32>),
}

/// Activations recorded by a training-mode forward pass, consumed by the
/// matching backward pass.
#[derive(Debug)]
pub struct Tape {
    body: Vec<Cache>,
    head: Option<Tensor>,
}

/// Shared-weight encoder mapping 128×128 RGB patches to embeddings, with an
/// optional linear classification head for the cross-entropy baseline.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    store: ParamStore,
    body: Vec<Op>,
    head: Option<Linear>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        Self::build(config, None, seed)
    }

    /// Encoder plus a head over the eight tissue classes.
    pub fn with_classifier(config: EncoderConfig, seed: u64) -> Result<Self> {
        Self::build(config, Some(TissueClass::ALL.len()), seed)
    }

    pub(crate) fn build(config: EncoderConfig, classes: Option<usize>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed);
        let mut store = ParamStore::default();
        let mut body = match config.architecture {
            Architecture::Residual18 => residual18(&mut store, &mut rng, config.embedding_dim),
            Architecture::SmallConv => small_conv(&mut store, &mut rng, config.embedding_dim),
        };
        if config.normalize_embeddings {
            body.push(Op::L2Normalize);
        }
        let head = classes.map(|k| Linear::new(&mut store, &mut rng, config.embedding_dim, k));
        Ok(Encoder {
            config,
            store,
            body,
            head,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.head.as_ref().map(|h| h.out)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (h, w, c) = self.config.input_shape;
        if x.n() == 0 {
            return Err(Error::Contract("empty image batch".into()));
        }
        if x.shape[1..] != [c, h, w] {
            return Err(Error::Contract(format!(
                "image batch has shape {:?}, encoder expects [_, {c}, {h}, {w}]",
                x.shape
            )));
        }
        Ok(())
    }

    fn infer_body(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for op in &self.body {
            h = match op {
                Op::Conv(c) => c.forward(&self.store, &h),
                Op::Bn(bn) => bn.infer(&self.store, &h),
                Op::Relu => layers::relu(h),
                Op::MaxPool => layers::max_pool(&h).0,
                Op::Block(b) => b.infer(&self.store, &h),
                Op::GlobalAvgPool => layers::global_avg_pool(&h),
                Op::Linear(l) => l.forward(&self.store, &h),
                Op::L2Normalize => layers::l2_normalize(&h).0,
            };
        }
        h
    }

    /// Inference-mode embeddings, one row per image. Each image is processed
    /// independently of the rest of the batch.
    pub fn embed_batch(&self, images: &Tensor) -> Result<Array2<f32>> {
        self.check_input(images)?;
        let out = self.infer_body(images);
        let dim = self.config.embedding_dim;
        let m = Array2::from_shape_vec((images.n(), dim), out.data).expect("embedding shape");
        if let Some(row) = m
            .rows()
            .into_iter()
            .position(|r| r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Data {
                index: row,
                message: "non-finite embedding".into(),
            });
        }
        Ok(m)
    }

    /// Inference-mode class logits from the head.
    pub fn logits(&self, images: &Tensor) -> Result<Array2<f32>> {
        self.check_input(images)?;
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Contract("encoder has no classification head".into()))?;
        let out = head.forward(&self.store, &self.infer_body(images));
        Ok(Array2::from_shape_vec((images.n(), head.out), out.data).expect("logit shape"))
    }

    /// Mean softmax negative log-likelihood of the head on `images`.
    pub fn cross_entropy_head(&self, images: &Tensor, labels: &[TissueClass]) -> Result<f64> {
        let logits = self.logits(images)?.mapv(f64::from);
        let labels: Vec<usize> = labels.iter().map(|l| l.index()).collect();
        Ok(super::cross_entropy(logits.view(), &labels)?.value)
    }

    /// Training-mode forward pass (batch statistics; running statistics are
    /// updated). Returns embeddings, or logits when `through_head` is set.
    pub fn forward_train(&mut self, x: &Tensor, through_head: bool) -> Result<(Tensor, Tape)> {
        self.check_input(x)?;
        let store = &mut self.store;
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.body.len());
        for op in &self.body {
            let (next, cache) = match op {
                Op::Conv(c) => {
                    let y = c.forward(store, &h);
                    (y, Cache::Input(h))
                }
                Op::Bn(bn) => {
                    let (y, c) = bn.forward_train(store, &h);
                    (y, Cache::Bn(c))
                }
                Op::Relu => {
                    let y = layers::relu(h);
                    (y.clone(), Cache::Output(y))
                }
                Op::MaxPool => {
                    let (y, arg) = layers::max_pool(&h);
                    (y, Cache::Pool(h.shape, arg))
                }
                Op::Block(b) => {
                    let (y, c) = b.forward_train(store, h);
                    (y, Cache::Block(Box::new(c)))
                }
                Op::GlobalAvgPool => (layers::global_avg_pool(&h), Cache::Shape(h.shape)),
                Op::Linear(l) => {
                    let y = l.forward(store, &h);
                    (y, Cache::Input(h))
                }
                Op::L2Normalize => {
                    let (y, norms) = layers::l2_normalize(&h);
                    (y.clone(), Cache::Norm(y, norms))
                }
            };
            caches.push(cache);
            h = next;
        }
        let mut head_input = None;
        if through_head {
            let head = self
                .head
                .as_ref()
                .ok_or_else(|| Error::Contract("encoder has no classification head".into()))?;
            let y = head.forward(store, &h);
            head_input = Some(h);
            h = y;
        }
        Ok((
            h,
            Tape {
                body: caches,
                head: head_input,
            },
        ))
    }

    /// Accumulates parameter gradients for the loss whose gradient wrt the
    /// forward output is `grad`.
    pub fn backward(&mut self, tape: Tape, grad: Tensor) {
        let store = &mut self.store;
        let mut g = grad;
        if let (Some(head), Some(x)) = (&self.head, &tape.head) {
            g = head.backward(store, x, &g);
        }
        for (op, cache) in self.body.iter().zip(tape.body).rev() {
            g = match (op, cache) {
                (Op::Conv(c), Cache::Input(x)) => c.backward(store, &x, &g),
                (Op::Bn(bn), Cache::Bn(c)) => bn.backward(store, &c, &g),
                (Op::Relu, Cache::Output(y)) => layers::relu_backward(&y, g),
                (Op::MaxPool, Cache::Pool(shape, arg)) => {
                    layers::max_pool_backward(shape, &arg, &g)
                }
                (Op::Block(b), Cache::Block(c)) => b.backward(store, *c, g),
                (Op::GlobalAvgPool, Cache::Shape(shape)) => {
                    layers::global_avg_pool_backward(shape, &g)
                }
                (Op::Linear(l), Cache::Input(x)) => l.backward(store, &x, &g),
                (Op::L2Normalize, Cache::Norm(y, norms)) => {
                    layers::l2_normalize_backward(&y, &norms, &g)
                }
                _ => unreachable!("tape does not match network"),
            };
        }
    }
}

fn small_conv(store: &mut ParamStore, rng: &mut Rng, dim: usize) -> Vec<Op> {
    let mut ops = Vec::new();
    let mut cin = 3;
    for &c in &SMALL_CONV_WIDTHS {
        ops.push(Op::Conv(Conv2d::new(store, rng, cin, c, 3, 2, 1)));
        ops.push(Op::Bn(BatchNorm2d::new(store, c)));
        ops.push(Op::Relu);
        cin = c;
    }
    ops.push(Op::GlobalAvgPool);
    ops.push(Op::Linear(Linear::new(store, rng, cin, dim)));
    ops
}

fn residual18(store: &mut ParamStore, rng: &mut Rng, dim: usize) -> Vec<Op> {
    let mut ops = vec![
        Op::Conv(Conv2d::new(store, rng, 3, 64, 7, 2, 3)),
        Op::Bn(BatchNorm2d::new(store, 64)),
        Op::Relu,
        Op::MaxPool,
    ];
    let mut cin = 64;
    for (stage, &c) in [64, 128, 256, 512].iter().enumerate() {
        let stride = if stage == 0 { 1 } else { 2 };
        ops.push(Op::Block(Box::new(BasicBlock::new(
            store, rng, cin, c, stride,
        ))));
        ops.push(Op::Block(Box::new(BasicBlock::new(store, rng, c, c, 1))));
        cin = c;
    }
    ops.push(Op::GlobalAvgPool);
    ops.push(Op::Linear(Linear::new(store, rng, cin, dim)));
    ops
}

/// Packs RGB images into an `[n, 3, h, w]` tensor scaled to [0, 1].
pub fn images_to_tensor(images: &[&RgbImage]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Contract("empty image batch".into()));
    };
    let (w, h) = first.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut t = Tensor::zeros([images.len(), 3, h, w]);
    let plane = h * w;
    for (i, img) in images.iter().enumerate() {
        if img.dimensions() != first.dimensions() {
            return Err(Error::Contract(format!(
                "image {i} is {:?}, batch is {:?}",
                img.dimensions(),
                first.dimensions()
            )));
        }
        let out = &mut t.data[i * 3 * plane..(i + 1) * 3 * plane];
        for (k, px) in img.pixels().enumerate() {
            for ch in 0..3 {
                out[ch * plane + k] = f32::from(px.0[ch]) / 255.0;
            }
        }
    }
    Ok(t)
}
