//! A small trainable CNN stack: layers, optimizer, data and training loop.

pub mod augment;
pub mod data;
mod network;
pub mod optim;
pub mod train;

pub use augment::{augment, AugmentFlags};
pub use data::{
    load_cifar10_binary, load_cifar10_dir, make_synthetic_dataset, parse_cifar10, Dataset, Split,
};
pub use network::{
    argmax_rows, forward_loss, softmax_cross_entropy, BatchNorm, DenseConv, Gradients, Layer,
    LayerGradient, Linear, Network, ParamGroup, Tape, TemplateConv,
};
pub use optim::{sgd_update, step_lr, Sgd};
pub use train::{evaluate, metrics_csv, train, EpochMetrics, TrainConfig};
