//! Classifier heads over frozen features, their losses and optimizers.

pub mod checkpoint;
pub mod head;
pub mod optim;
pub mod schedule;
pub mod train;

pub use checkpoint::HeadCheckpoint;
pub use head::{image_loss, soft_cross_entropy, text_loss, AdapterHead, ClassifierHead, HeadKind, LinearHead, LossAndGrad};
pub use optim::{adamw_step, ema_blend, ema_update, AdamWState, TeacherHead};
pub use schedule::{batch_size_for, TrainSchedule};
pub use train::{accuracy, mean_loss, train_source, LabeledFeatures, SourceModelKind, SourceTrainConfig, SourceTrainOutcome};
