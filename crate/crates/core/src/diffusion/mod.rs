//! Forward noising, the training objective and curriculum, and guided samplers.

pub mod guidance;
pub mod model;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use guidance::{cfg_predict, GuidanceConfig};
pub use model::{Conditioning, EpsModel, Models};
pub use sampler::{ddim_sample, ddpm_sample, SamplerConfig, SamplerKind};
pub use schedule::{make_schedule, q_sample, NoiseSchedule};
pub use train::{train_stage, training_loss, StageProgress, TrainExample, TrainStage, TrainStageConfig};
