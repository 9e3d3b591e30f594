//! Training pipeline: pretraining over token windows, tail-only
//! fine-tuning (single- and multi-dataset), class-balanced sampling, early
//! stopping, and the 5-fold cross-validation protocol.

mod earlystop;
mod finetune;
mod pretrain;
mod protocol;
mod sampler;
mod splits;

pub use earlystop::{EarlyStopState, StopDecision};
pub use finetune::{
    finetune, FinetuneDataset, FinetuneOptions, FinetunePiece, FinetuneResult, HistoryRecord,
};
pub use pretrain::{pretrain, PretrainOptions, PretrainResult};
pub use protocol::{run_protocol, DatasetBlock, ProtocolDataset, ProtocolOptions, ProtocolReport};
pub use sampler::{epoch_batches, SamplerMode};
pub use splits::{make_cv_splits, CvPlan, CvSplit, N_FOLDS};

use thiserror::Error;

use crate::model::{EncoderKind, ModelError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("dataset `{0}` has {1} pieces; the 5-fold protocol needs at least 5")]
    TooFewPieces(String, usize),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("corpus yields no trainable windows (all pieces shorter than 2 positions)")]
    NoWindows,
    #[error("empty split")]
    EmptySplit,
    #[error("dataset `{0}` has an empty training split")]
    EmptyTrainSplit(String),
    #[error("checkpoint was pretrained with the {checkpoint:?} encoder, not {requested:?}")]
    EncoderMismatch {
        checkpoint: EncoderKind,
        requested: EncoderKind,
    },
    #[error("head `{dataset}` declares {head_k} classes but the dataset has {data_k}")]
    HeadClassMismatch {
        dataset: String,
        head_k: usize,
        data_k: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
}
