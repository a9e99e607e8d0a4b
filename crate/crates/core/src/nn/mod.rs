//! A small deterministic CNN runtime: grouped convolutions, maxout, a softmax
//! classifier, backpropagation and momentum SGD.

pub mod classifier;
pub mod conv;
pub mod maxout;
pub mod network;
pub mod train;

pub use classifier::{argmax_rows, softmax, softmax_cross_entropy, SoftmaxClassifier};
pub use conv::{conv_backward, conv_backward_with, conv_forward, conv_forward_with, ConvGrads, ConvLayer, Padding};
pub use maxout::{maxout_backward, maxout_forward, Maxout};
pub use network::{glorot_conv, toy_network, ForwardCache, Layer, LayerGrads, LayerKind, Network};
pub use train::{evaluate, loss_and_accuracy, predict, train, EpochRecord, TrainConfig};
