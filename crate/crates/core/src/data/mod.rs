//! Motion sequences, synthetic corpora and file formats.

pub mod io;
pub mod motion;
pub mod toy;

pub use io::{FeatureTrack, FormatError};
pub use motion::{compose_holistic, HolisticAnimation, MotionError, MotionKind, MotionSequence};
pub use toy::{gen_toy_corpus, CorpusItem, SubjectStyle, ToyCorpus, ToyCorpusSpec};
