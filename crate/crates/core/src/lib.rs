pub mod dataset;
pub mod error;
pub mod eval;
pub mod label_index;
pub mod losses;
pub mod models;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod vicinity;

pub use error::{Error, Result};
pub use label_index::{GlobalHyperparams, LabelIndex, LabelScale, NavSuggestion};
pub use tensor::{grad_check, GradCheck, Gradients, Tape, Tensor, Var};
pub use vicinity::{
    build_adaptive, build_adaptive_with, hard_weights, hybrid_weights, soft_weights,
    DecayExponent, VicinityMode, VicinityParams, VicinityRule, WeightVector,
};
pub use dataset::Dataset;
pub use synth::{Family, ImbalanceSpec, Pattern, ToyDataset};
pub use models::{Discriminator, Ema, Generator, LabelRegressor, ModelConfig, Regressor};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Checkpoint, ParamStore};
pub use losses::{AdvForm, GammaMode, LossWeights};
pub use trainer::{train, TrainConfig, TrainedModel, Trainer};
pub use eval::{evaluate, frechet_gaussian, EvalConfig, EvalReport};
