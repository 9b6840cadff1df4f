//! Weight-shared trainable tiny network: maximal-width weight store, channel
//! cropping, block dropping, input downsampling, the SGD inner loop, and the
//! synthetic dataset.

mod data;
mod ops;
mod store;

pub use data::{make_dataset, Batch, Dataset};
pub use ops::{
    apply_sgd, backward_and_step, crop_view, downsample, evaluate_accuracy, evaluate_error,
    forward, gradients, materialize, train_inner, CropView, ForwardPass, Grads, SgdHyper,
};
pub use store::{LayerWeights, SharedWeightStore, Tensor};
