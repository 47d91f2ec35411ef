//! Open-set semi-supervised learning on feature vectors: a small reverse-mode
//! autodiff engine, an MLP with closed-set and one-vs-all heads, the training
//! objectives, a synthetic data generator and the evaluation protocol.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod rng;
pub mod trainer;

pub use autodiff::{Tape, Tensor, Var};
pub use config::{ConsistencyHead, LrSchedule, TrainConfig};
pub use data::{gen_synthetic, load_csv, save_csv, AugmentConfig, Dataset, GenConfig, Tag, TaggedSample};
pub use error::{Error, Result};
pub use eval::{auroc, evaluate, EvalReport, MetricsRecord};
pub use losses::LossBreakdown;
pub use model::{load_checkpoint, save_checkpoint, ModelParams, OpenSetPrediction, Verdict};
pub use trainer::{train, TrainHistory, Trainer};
