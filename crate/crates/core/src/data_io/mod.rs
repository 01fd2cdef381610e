//! Dataset manifests, the synthetic corpus, WAV I/O and checkpoints.

pub mod checkpoint;
pub mod corpus;
pub mod manifest;
pub mod wav;

pub use checkpoint::{load_checkpoint, save_checkpoint, ModelCheckpoint};
pub use corpus::{generate_synthetic_corpus, CorpusSpec, SyntheticCorpus};
pub use manifest::{load_manifest, save_manifest, DatasetManifest, Label, Split, UtteranceRecord};
pub use wav::{read_wav, write_wav};
