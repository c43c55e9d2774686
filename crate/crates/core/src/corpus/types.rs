use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of every sticker image.
pub const STICKER_SIDE: usize = 128;

/// Token id used for padding.
pub const PAD_ID: usize = 0;
/// Token id for words outside the vocabulary.
pub const OOV_ID: usize = 1;

/// Index of a sticker inside [`Corpus::stickers`].
pub type StickerId = usize;

/// A padded, fixed-length utterance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub token_ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Utterance {
    /// Build from real token ids, truncating or padding to `t_x`.
    pub fn from_ids(ids: &[usize], t_x: usize) -> Self {
        let real = ids.len().min(t_x);
        let mut token_ids = ids[..real].to_vec();
        token_ids.resize(t_x, PAD_ID);
        let mut mask = vec![true; real];
        mask.resize(t_x, false);
        Utterance { token_ids, mask }
    }

    /// Number of real (unmasked) tokens.
    pub fn real_len(&self) -> usize {
        self.mask.iter().take_while(|m| **m).count()
    }

    pub fn real_ids(&self) -> &[usize] {
        &self.token_ids[..self.real_len()]
    }

    pub fn padded_len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        let real = self.real_len();
        if self.mask.len() != self.token_ids.len() {
            return Err(Error::Corpus("utterance mask and ids differ in length".into()));
        }
        if self.mask[real..].iter().any(|m| *m) {
            return Err(Error::Corpus("utterance mask is not a prefix".into()));
        }
        if self.token_ids[real..].iter().any(|t| *t != PAD_ID) {
            return Err(Error::Corpus("padding slot holds a non-pad token".into()));
        }
        Ok(())
    }
}

/// A 128x128 sticker image with its emoji tag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sticker {
    /// Relative path the image is stored under.
    pub name: String,
    /// Row-major `[channels, 128, 128]` values in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub channels: usize,
    pub emoji: usize,
}

impl Sticker {
    pub fn new(name: impl Into<String>, pixels: Vec<f64>, channels: usize, emoji: usize) -> Result<Self> {
        let sticker = Sticker {
            name: name.into(),
            pixels,
            channels,
            emoji,
        };
        sticker.validate()?;
        Ok(sticker)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::dim(format!("sticker {} has {} channels", self.name, self.channels)));
        }
        if self.pixels.len() != self.channels * STICKER_SIDE * STICKER_SIDE {
            return Err(Error::dim(format!(
                "sticker {} is not {STICKER_SIDE}x{STICKER_SIDE}x{}",
                self.name, self.channels
            )));
        }
        if self.pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Corpus(format!("sticker {} has pixels outside [0, 1]", self.name)));
        }
        Ok(())
    }

    /// Pixels of channel `c` as a `128 x 128` plane.
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = STICKER_SIDE * STICKER_SIDE;
        &self.pixels[c * n..(c + 1) * n]
    }
}

/// A dialog as stored on disk: words, not token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dialog {
    pub id: String,
    pub utterances: Vec<Vec<String>>,
    pub candidates: Vec<StickerId>,
    pub positive_index: usize,
}

impl Dialog {
    pub fn validate(&self) -> Result<()> {
        if self.utterances.is_empty() {
            return Err(Error::Corpus(format!("context {} has no utterances", self.id)));
        }
        validate_candidates(&self.id, &self.candidates, self.positive_index)
    }

    /// Keep only the most recent `n` utterances.
    pub fn truncated(&self, n: usize) -> Dialog {
        let skip = self.utterances.len().saturating_sub(n.max(1));
        Dialog {
            utterances: self.utterances[skip..].to_vec(),
            ..self.clone()
        }
    }

    pub fn positive(&self) -> StickerId {
        self.candidates[self.positive_index]
    }
}

pub(crate) fn validate_candidates(id: &str, candidates: &[StickerId], positive: usize) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Corpus(format!("context {id} has no candidates")));
    }
    if positive >= candidates.len() {
        return Err(Error::Corpus(format!(
            "context {id}: positive index {positive} outside {} candidates",
            candidates.len()
        )));
    }
    let mut seen = candidates.to_vec();
    seen.sort_unstable();
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Corpus(format!("context {id} repeats a candidate")));
    }
    Ok(())
}

/// A tokenized dialog context ready for the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogContext {
    pub id: String,
    pub utterances: Vec<Utterance>,
    pub candidates: Vec<StickerId>,
    pub positive_index: usize,
}

impl DialogContext {
    pub fn validate(&self, max_utterances: usize) -> Result<()> {
        if self.utterances.is_empty() || self.utterances.len() > max_utterances {
            return Err(Error::Corpus(format!(
                "context {} has {} utterances (allowed 1..={max_utterances})",
                self.id,
                self.utterances.len()
            )));
        }
        for u in &self.utterances {
            u.validate()?;
        }
        validate_candidates(&self.id, &self.candidates, self.positive_index)
    }

    pub fn positive(&self) -> StickerId {
        self.candidates[self.positive_index]
    }
}

/// Stickers plus the dialogs that reference them.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Corpus {
    pub stickers: Vec<Sticker>,
    pub dialogs: Vec<Dialog>,
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        for s in &self.stickers {
            s.validate()?;
        }
        for d in &self.dialogs {
            d.validate()?;
            if let Some(bad) = d.candidates.iter().find(|c| **c >= self.stickers.len()) {
                return Err(Error::Corpus(format!("context {} references unknown sticker {bad}", d.id)));
            }
        }
        Ok(())
    }

    /// Split dialogs into `[0, n)` and `[n, len)`; both halves keep every sticker.
    pub fn split_at(&self, n: usize) -> (Corpus, Corpus) {
        let n = n.min(self.dialogs.len());
        (
            Corpus {
                stickers: self.stickers.clone(),
                dialogs: self.dialogs[..n].to_vec(),
            },
            Corpus {
                stickers: self.stickers.clone(),
                dialogs: self.dialogs[n..].to_vec(),
            },
        )
    }

    pub fn num_emoji_classes(&self) -> usize {
        self.stickers.iter().map(|s| s.emoji + 1).max().unwrap_or(0)
    }

    pub fn find(&self, id: &str) -> Option<&Dialog> {
        self.dialogs.iter().find(|d| d.id == id)
    }

    pub fn sticker_path(&self, id: StickerId) -> PathBuf {
        PathBuf::from(&self.stickers[id].name)
    }
}
