//! Encoder-decoder segmentation network, loss, optimizer, training loop and
//! metrics.

pub mod config;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod sampling;
pub mod train;

pub use config::{parse_config, render_config, LevelConfig, NetworkConfig, TrainConfig};
pub use loss::{class_weights, label_histogram, weighted_cross_entropy, CLASS_WEIGHT_EPS};
pub use metrics::{evaluate, ConfusionMatrix, Evaluation};
pub use net::{argmax_rows, prepare_inputs, LsNet, NetInput};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use sampling::{downsample_indices, random_downsample};
pub use train::{predict_cloud, train_to_dir, EpochMetrics, TrainReport, Trainer};
