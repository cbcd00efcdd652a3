//! Minimal network engine whose dense and convolutional products run
//! through a crossbar model.

pub mod data;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;
pub mod vmm;

pub use data::{blobs, load_csv, load_idx, BlobSpec, Dataset};
pub use layers::{Cache, Conv2d, ConvGeometry, Dense, Grad, Layer, LinearCore, Observer};
pub use model::{softmax_cross_entropy, LayerSpec, Model};
pub use tensor::{quantize_rows, QuantizedRows, Tensor};
pub use train::{evaluate, train_epoch, EpochMetrics, TrainState};
pub use vmm::{Backend, CrossbarLinear, CrossbarSettings, DigitalLinear, DigitalSettings, Engine, EngineStats, Precision};
