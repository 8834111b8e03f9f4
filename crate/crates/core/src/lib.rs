//! Integer-valued spiking neurons with spike-driven inference.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`conv`]: dense `(t, c, h, w)` maps and convolutions,
//!   batch-norm folding and linear chain merging.
//! - [`neuron`]: LIF / I-LIF dynamics and the rectangular surrogate gradient.
//! - [`spike_codec`]: integer activations ↔ binary spikes over virtual
//!   timesteps, and the two-path equivalence check.
//! - [`blocks`], [`model`]: the meta block family and a small detector built
//!   from it, with training and re-parameterization.
//! - [`events`]: event-camera streams and frame aggregation.
//! - [`energy`]: per-layer MAC/AC energy accounting.

extern crate self as spikeyolo;

pub mod blocks;
pub mod conv;
pub mod energy;
pub mod error;
pub mod events;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod neuron;
pub mod spike_codec;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use neuron::{NeuronState, SpikeTensor};
pub use spike_codec::BinarySpikeTrain;
pub use tensor::{Shape4, Tensor4};
pub use blocks::BlockSpec;
pub use energy::EnergyReport;
pub use events::EventStream;
pub use model::{Detection, ModelConfig, SpikeYolo};
