//! Multi-label readability screening: overall validity plus macula,
//! optic-disc and retina readability, each an independent sigmoid output.

mod eval;
mod labels;
mod model;
mod train;

pub use eval::{evaluate_readability, auc, Confusion, CurvePoint, LabelReport, ReadabilityReport};
pub use labels::{LabelKind, ReadabilityLabels};
pub use model::{augment, preprocess, AugmentConfig, ClassifierArch, ClassifierConfig, ClassifierModel};
pub use train::{train_readability, weighted_bce_loss, EpochStats, BCE_EPS};
