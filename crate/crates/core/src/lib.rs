pub mod cbam;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod polar;
pub mod raster;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod model;
pub mod optim;
pub mod peft;
pub mod train;
pub mod viz;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::{PipelineConfig, PreparedSample, SampleRecord};
pub use decoder::{PointLabel, PointPrompt};
pub use error::{Error, Result};
pub use metrics::{evaluate, MetricReport, Predictor};
pub use model::{ModelConfig, SegModel};
pub use peft::{Mode, ParameterPartition};
pub use polar::PolarGrid;
pub use raster::{CartesianRaster, Mask, MaskPair, PolarRaster};
pub use train::{Trainer, ModelPredictor};
