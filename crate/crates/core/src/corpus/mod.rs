//! Dialog/sticker data model, corpus files, negative sampling and the
//! synthetic generator.

pub mod io;
pub mod sampling;
pub mod synth;
pub mod types;
pub mod vocab;

pub use io::{load_corpus, write_corpus, MAX_UTTERANCES};
pub use sampling::{build_candidates, sample_negatives};
pub use synth::{synth_corpus, SynthManifest, SynthSpec};
pub use types::{
    Corpus, Dialog, DialogContext, Sticker, StickerId, Utterance, OOV_ID, PAD_ID, STICKER_SIDE,
};
pub use vocab::{split_words, Vocab};
