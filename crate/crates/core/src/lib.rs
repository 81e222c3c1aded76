pub mod bundle;
pub mod distance;
pub mod error;
pub mod evaluate;
pub mod inference;
pub mod network;
pub mod objective;
pub mod preprocess;
pub mod raster;
pub mod scalar;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Stack = raster::TimeSeriesStack<f32>;
pub type Sample = raster::PlotSample<f32>;
pub type Prediction = raster::PredictionGrid<f32>;
pub type Params = network::ParamStore<f32>;
pub type Model = trainer::Checkpoint<f32>;
pub type Bundle = bundle::PlotBundle<f32>;
pub type SynthSample = synth::SynthPlot<f32>;
