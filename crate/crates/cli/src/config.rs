//! Training configuration resolution: flags, then the config file, then defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sticker_core::model::{Ablations, ModelConfig};
use sticker_core::trainer::TrainConfig;
use sticker_core::{Corpus, Error, Result};

use crate::args::TrainArgs;

/// Model settings a user may choose; sizes tied to the corpus are derived.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub grid: usize,
    pub conv_channels: Vec<usize>,
    pub dropout: f64,
    pub scaled_attention: bool,
    pub normalize_tau: bool,
    pub seed: u64,
    pub no_classify: bool,
    pub no_din: bool,
    pub no_fusion_rnn: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            hidden: m.hidden,
            grid: m.grid,
            conv_channels: m.conv_channels,
            dropout: m.dropout,
            scaled_attention: m.scaled_attention,
            normalize_tau: m.normalize_tau,
            seed: m.seed,
            no_classify: false,
            no_din: false,
            no_fusion_rnn: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub model: ModelSection,
    pub train: TrainConfig,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Apply command-line overrides.
    pub fn with_flags(mut self, a: &TrainArgs) -> Self {
        let t = &mut self.train;
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(t.epochs, a.epochs);
        set!(t.batch_size, a.batch_size);
        set!(t.lr, a.lr);
        set!(t.margin, a.margin);
        set!(t.lambda_cls, a.lambda_cls);
        set!(t.max_utterances, a.max_utterances);
        set!(t.t_x, a.t_x);
        set!(t.negatives, a.negatives);
        set!(t.seed, a.seed);
        set!(t.pretrain_epochs, a.pretrain_epochs);
        if a.no_pretrain {
            t.pretrain_epochs = 0;
        }
        let m = &mut self.model;
        set!(m.hidden, a.hidden);
        set!(m.grid, a.grid);
        set!(m.conv_channels, a.conv_channels);
        set!(m.dropout, a.dropout);
        set!(m.seed, a.model_seed);
        m.no_classify |= a.no_classify;
        m.no_din |= a.no_din;
        m.no_fusion_rnn |= a.no_fusion_rnn;
        m.scaled_attention |= a.scaled_attention;
        m.normalize_tau |= a.normalize_tau;
        if m.no_classify {
            // pretraining needs the classification head
            t.pretrain_epochs = 0;
        }
        self
    }

    /// The full model configuration for `corpus` with a vocabulary of `vocab_size`.
    pub fn model_config(&self, corpus: &Corpus, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size,
            hidden: m.hidden,
            grid: m.grid,
            image_channels: if corpus.stickers.iter().any(|s| s.channels == 3) { 3 } else { 1 },
            conv_channels: m.conv_channels.clone(),
            emoji_classes: corpus.num_emoji_classes().max(1),
            t_x: self.train.t_x,
            max_utterances: self.train.max_utterances,
            dropout: m.dropout,
            scaled_attention: m.scaled_attention,
            normalize_tau: m.normalize_tau,
            ablations: Ablations {
                no_classify: m.no_classify,
                no_din: m.no_din,
                no_fusion_rnn: m.no_fusion_rnn,
            },
            seed: m.seed,
        }
    }
}
