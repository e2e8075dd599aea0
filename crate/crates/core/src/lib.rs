//! Attention-based client selection for federated learning.
//!
//! The crate simulates a server and `K` clients training a softmax classifier
//! on label-skewed data. Each round the server scores clients from the
//! prediction similarity of their last uploaded models and the loss they
//! report on the current global model, then selects a subset to train and
//! aggregate.
//!
//! ```
//! use fedsel_core::experiment::{run_experiment, ExperimentConfig};
//!
//! let config = ExperimentConfig {
//!     clients: 4,
//!     rounds: 3,
//!     samples_per_class: 40,
//!     num_classes: 3,
//!     input_dim: 4,
//!     server_unlabeled: 10,
//!     server_test: 30,
//!     local_epochs: 1,
//!     ..ExperimentConfig::default()
//! };
//! let metrics = run_experiment(&config, 0).unwrap();
//! assert_eq!(metrics.len(), 3);
//! ```

pub mod data;
pub mod error;
pub mod experiment;
pub mod matrix;
pub mod nn;
pub mod protocol;
pub mod rng;
pub mod selection;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use nn::{Architecture, LabeledDataset, ModelParams, SgdConfig, UnlabeledDataset};
pub use protocol::{ClientRecord, GlobalInit, ProtocolConfig, RoundMetrics, ServerState};
pub use selection::{PolicyKind, ScheduleShape, ScoreReport, SelectionDecision, SelectionPolicy, ThresholdSchedule};
