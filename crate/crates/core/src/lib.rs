pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod head;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod selftest;
pub mod tensor;
pub mod tokenizer;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use encoder::{Encoder, EncoderConfig};
pub use error::{Error, Result};
pub use harness::{run_transfer_experiment, ExperimentReport};
pub use head::{ClassificationHead, Pooling, Sample, Trainer};
pub use optim::Adam;
pub use tensor::{ParamId, ParamSet, Parameter, Precision, Tensor};
pub use tokenizer::{MetaTokenizer, Modality, ModalityInput, TokenSequence};
