//! Dense 64-bit arrays, trainable parameters, deterministic randomness and
//! reverse-mode gradients.

pub mod functional;
pub mod graph;
pub mod layers;
pub mod params;
pub mod rng;
pub mod tensor;

pub use functional::{depthwise_conv1d, dropout, glu, layer_norm, log_softmax, relu, sigmoid, softmax, swish, Padding};
pub use graph::{Gradients, Graph, Var};
pub use params::{Init, ParamId, ParamStore, Parameter};
pub use rng::RngStream;
pub use tensor::Tensor;

/// Runs the reverse sweep from `loss` and adds the resulting parameter
/// gradients into `store`.
pub fn compute_gradients(g: &Graph, loss: Var, store: &mut ParamStore) {
    let grads = g.backward(loss);
    store.accumulate(&grads.param_grads(store.len()), 1.0);
}
