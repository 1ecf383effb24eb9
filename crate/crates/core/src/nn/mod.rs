//! A small CPU network stack: NCHW `f32` tensors, the handful of layers the
//! encoders need, losses, Adam and checkpoints.

mod adam;
mod checkpoint;
mod encoder;
mod layers;
mod loss;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMetadata, CHECKPOINT_VERSION};
pub use encoder::{images_to_tensor, Architecture, Encoder, EncoderConfig, Tape};
pub use loss::{
    cross_entropy, cross_entropy_grad, triplet_loss, triplet_loss_grad, CrossEntropy, Reduction,
    TripletGrads, TripletLoss, TripletLossConfig,
};

/// Dense 4-D tensor in `[n, c, h, w]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape");
        Tensor { shape, data }
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn item(&self, i: usize) -> &[f32] {
        let l = self.item_len();
        &self.data[i * l..(i + 1) * l]
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

/// All trainable parameters and running statistics of a network, in
/// creation order. Layers refer to entries by index.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub params: Vec<Param>,
    pub buffers: Vec<Vec<f32>>,
}

impl ParamStore {
    pub(crate) fn add_param(&mut self, value: Vec<f32>) -> usize {
        let grad = vec![0.0; value.len()];
        self.params.push(Param { value, grad });
        self.params.len() - 1
    }

    pub(crate) fn add_buffer(&mut self, value: Vec<f32>) -> usize {
        self.buffers.push(value);
        self.buffers.len() - 1
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
