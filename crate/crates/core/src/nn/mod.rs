//! Neural-network building blocks and the first-level clip classifier.

pub mod backbone;
pub mod bert;
pub mod model;
pub mod params;
pub mod schedule;

pub use backbone::{BackboneConfig, R2Plus1d};
pub use bert::{BertConfig, BertOutput, BertPoolHead, MeanPoolHead};
pub use model::{Classifier3d, ClipFeatures, HeadKind, ModelConfig, ModelOutput};
pub use params::{load_checkpoint, save_checkpoint, Checkpoint, DropoutRng, ParamStore};
pub use schedule::{EarlyStopping, Mode, PlateauScheduler};
