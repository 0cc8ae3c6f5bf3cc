//! Simulation and signal-processing library for grant-free random access
//! over multiple LEO satellites with planar receive arrays.

pub mod baselines;
pub mod coop;
pub mod detect;
pub mod dump;
pub mod error;
pub mod esprit;
pub mod frame;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod oamp;
pub mod rng;
pub mod scene;

pub use error::{Error, Result};
pub use frame::{FrameConfig, Modulation, RxBurst, TrainingSequenceBank, TspFrame};
pub use scene::{AnglePair, AngleSource, Boresight, ChannelParams, ChannelRealization, GeometryConfig, Scene};
