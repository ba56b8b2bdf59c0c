//! Downlink simulator and optimizer for two coordinated base stations that
//! radiate through pinching antennas on dielectric waveguides.
//!
//! The crate covers the channel model, SINR and sum-rate evaluation, a small
//! reverse-mode autodiff tape, the meta-learned optimizer for beamformers and
//! PA positions, and the reference schemes it is compared against.

pub mod autodiff;
pub mod baselines;
pub mod channel;
pub mod config;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod gml;
pub mod nets;
pub mod objective;
pub mod rate;

pub use num_complex::Complex64;

pub use baselines::{BaselineConfig, BaselineResult, Scheme};
pub use channel::EffectiveChannel;
pub use config::{ExperimentConfig, Scale, SystemConfig};
pub use error::{Error, Result};
pub use geometry::{build_geometry, FeedSide, PinchingState, SystemGeometry};
pub use gml::{GmlConfig, LossBreakdown, TrainResult};
pub use objective::GradientBundle;
pub use rate::{BeamformingState, RateReport};
