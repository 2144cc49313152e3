//! CNN-RNN surrogate for well rates: architecture, datasets and training.

pub mod dataset;
pub mod error;
pub mod model;
pub mod report;
pub mod train;

pub use dataset::{draw_schedule, make_dataset, Dataset, DatasetSpec, Sample, Split};
pub use error::{ensemble_error, sample_error, stream_error_sums, ErrorConfig};
pub use model::{build_proxy, BnMode, Normalization, ProxyConfig, ProxyModel};
pub use report::{evaluate_split, percentile, SplitEvaluation};
pub use train::{evaluate, retrain, train, History, HistoryRow, StopReason, TrainConfig};
