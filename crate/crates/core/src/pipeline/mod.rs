//! Dataset ingestion, framing, the training loop and checkpoints.

mod checkpoint;
mod frames;
mod io;
mod optim;
mod train;

pub use checkpoint::{checkpoint_from_str, checkpoint_to_string, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use frames::{make_frames, make_frames_named, FrameSet, InputScaler};
pub use io::{load_csv, read_events, write_csv, write_events};
pub use optim::{clip_global_norm, Adam, AdamConfig};
pub use train::{
    anomaly_pool, evaluate_series, fit, series_auc, train, train_batch, window_metrics, Checkpoint, ScoredWindows,
    Scorer, Standardization, TrainConfig, TrainState,
};
