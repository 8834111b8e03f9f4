//! SpikeYOLO-mini: network assembly, decoding, loss, training, data and
//! weight files.

pub mod audit;
pub mod config;
pub mod data;
pub mod decode;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod train;
pub mod weights;

pub use config::{DatasetConfig, HeadConfig, ModelConfig, StageConfig, TrainConfig};
pub use decode::{decode, Detection};
pub use network::{encode_static, HeadMap, SpikeYolo};
