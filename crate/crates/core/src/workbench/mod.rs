//! Experiment workbench: synthetic task generation, the training loop,
//! evaluation and reporting, checkpoint/dataset persistence, experiment
//! presets and the config-file layer behind the CLI.

pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod eval;
pub mod presets;
pub mod task;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{load_config, FileConfig};
pub use dataset_io::{load_dataset, save_dataset};
pub use eval::{evaluate, evaluate_hypotheses, EvalReport};
pub use presets::{lookup as lookup_preset, preset_ids, run_preset, PresetOutcome};
pub use task::{generate_task, Dataset, GeneratedTask, TaskConfig, TaskKind};
pub use train::{train, Batch, TrainConfig, TrainLog};
