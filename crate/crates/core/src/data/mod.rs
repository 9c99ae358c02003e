pub mod corpus;
pub mod g2p;
pub mod manifest;
pub mod partition;
pub mod wordpiece;

pub use corpus::{
    is_marker, synth_corpora, synth_held_out, training_voice, Corpora, CorpusConfig, LexEntry, Lexicon, Stratum,
    SupervisedExample, UnsupervisedAudio, UnsupervisedText,
};
pub use g2p::G2p;
pub use partition::{partition_test_sets, PartitionThresholds, TestPartitions, PARTITION_NAMES};
pub use wordpiece::WordpieceModel;
