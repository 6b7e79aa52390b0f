//! Self-supervised training: PCA reduction, losses, the synthetic oracle
//! and the optimization loop.

pub mod losses;
pub mod optim;
pub mod pca;
pub mod synth;
pub mod trainer;

pub use losses::{depth_loss, feat_loss, seg_loss, DEPTH_L1_WEIGHT};
pub use optim::Adam;
pub use pca::{pca_fit, PcaBasis};
pub use synth::{BoxPrim, OracleView, SceneConfig, SyntheticScene};
pub use trainer::{reduce_for_semantics, Checkpoint, LossReport, LossVars, SceneData, TrainConfig, Trainer};
