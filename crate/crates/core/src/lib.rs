pub mod accounting;
pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod ffn;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use accounting::{count_macs, count_params, AccountingReport};
pub use attention::{AtkSpa, AttentionConfig, MaskMode, TopKMode};
pub use autodiff::{ConvOptions, Gradients, Tape, Var};
pub use data::{Dataset, SyntheticSpec};
pub use error::{Error, Result};
pub use ffn::{Hssfgn, HssfgnConfig};
pub use gradcheck::{gradcheck, GradCheckOptions, GradCheckReport};
pub use model::{FraesormerBlock, Model, ModelConfig};
pub use nn::{Bound, LayerKind, LayerSpec, ParamId, ParamStore};
pub use tensor::{DType, Scalar, Tensor};
pub use train::{evaluate, predict, sweep_k, train, EpochLog, Metrics, TrainConfig};
