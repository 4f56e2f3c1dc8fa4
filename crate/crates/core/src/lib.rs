//! Resolution-scalable semantic segmentation of 3D point clouds.
//!
//! A cloud is split into disjoint partitions of increasing density. Each
//! partition gets its own small point-transformer network; the networks run
//! coarse to fine, and each one can reuse the features of the scales before it
//! through a feature-fusion block. Predictions for the coarse scales are
//! available long before the whole cloud has been processed.
//!
//! ```no_run
//! use scaleseg::{build_partitions, generate_scene, run_pipeline, PipelineOptions, RunConfig, SceneSpec};
//!
//! let cfg = RunConfig::default();
//! let cloud = generate_scene(&SceneSpec::default())?;
//! let parts = build_partitions(&cloud, &cfg.partition_config()?)?;
//! let models = cfg.build_models()?;
//! let out = run_pipeline(&models, &cloud, &parts, &PipelineOptions::default())?;
//! print!("{}", out.report.to_table());
//! # Ok::<(), scaleseg::Error>(())
//! ```

pub mod backbone;
pub mod cloud;
pub mod config;
pub mod error;
pub mod fusion;
pub mod io;
pub mod metrics;
pub mod partition;
pub mod pipeline;
pub mod scene;
pub mod spatial;
pub mod tensor;
pub mod train;

pub use backbone::{checkpoint, BackboneConfig, FeatureMatrix, Prediction, ScaleModel};
pub use cloud::PointCloud;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use fusion::{FusedFeatureStore, FusionConfig, FusionWeights};
pub use io::{read_cloud, write_cloud, CloudFormat};
pub use metrics::{compute_metrics, evaluate, ConfusionMatrix, Metrics, MetricsRow};
pub use partition::{build_partitions, PartitionConfig, PartitionSet, DEFAULT_VOXEL_SIZES};
pub use pipeline::{
    estimate_gain, latency_bounds, run_baseline, run_pipeline, ComplexityEstimate, LatencyBounds,
    PipelineOptions, Schedule, TimingReport,
};
pub use scene::{generate_scene, SceneSpec};
pub use spatial::{NeighborIndex, SearchStrategy};
pub use train::{train_baseline, train_scale, TrainConfig, TrainingScene};
