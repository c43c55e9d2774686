//! The full selector: sticker and utterance encoders, per-utterance
//! interaction, fusion and the auxiliary emoji head, wired by one config.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DialogContext, Sticker, Vocab, MAX_UTTERANCES};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionVars};
use crate::interaction::{Interaction, InteractionBypass, InteractionVars};
use crate::numerics::{load_checkpoint, save_checkpoint, Graph, ParamStore, Var};
use crate::sticker_encoder::{EmojiHead, StickerEncoder, StickerRepr, StickerTensors};
use crate::utterance_encoder::{AttentionConfig, UtteranceEncoder, UtteranceRepr};

/// Structural switches that remove parts of the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Drop the emoji classification head and its loss.
    pub no_classify: bool,
    /// Replace the interaction network with `FC([O_flat ; mean(h)])`.
    pub no_din: bool,
    /// Replace the fusion GRU states with zeros.
    pub no_fusion_rnn: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub grid: usize,
    pub image_channels: usize,
    pub conv_channels: Vec<usize>,
    pub emoji_classes: usize,
    pub t_x: usize,
    pub max_utterances: usize,
    pub dropout: f64,
    pub scaled_attention: bool,
    pub normalize_tau: bool,
    pub ablations: Ablations,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 2,
            hidden: 100,
            grid: 4,
            image_channels: 1,
            conv_channels: vec![8, 16, 32, 32],
            emoji_classes: 10,
            t_x: 30,
            max_utterances: MAX_UTTERANCES,
            dropout: 0.1,
            scaled_attention: false,
            normalize_tau: false,
            ablations: Ablations::default(),
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("grid", self.grid),
            ("emoji_classes", self.emoji_classes),
            ("t_x", self.t_x),
            ("max_utterances", self.max_utterances),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocabulary needs the pad and unknown entries".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig { scaled: self.scaled_attention, dropout: self.dropout }
    }
}

#[derive(Clone, Debug)]
pub struct SrsModel {
    config: ModelConfig,
    sticker: StickerEncoder,
    emoji: Option<EmojiHead>,
    utterance: UtteranceEncoder,
    interaction: Option<Interaction>,
    bypass: Option<InteractionBypass>,
    fusion: Fusion,
}

/// Per-utterance interaction nodes; the bypass yields only `q2`.
#[derive(Clone, Copy, Debug)]
pub enum UtteranceMatch {
    Deep(InteractionVars),
    Bypass(Var),
}

impl UtteranceMatch {
    pub fn q2(&self) -> Var {
        match self {
            UtteranceMatch::Deep(v) => v.q2,
            UtteranceMatch::Bypass(q2) => *q2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CandidateTrace {
    pub matches: Vec<UtteranceMatch>,
    pub fusion: FusionVars,
}

impl CandidateTrace {
    pub fn score(&self) -> Var {
        self.fusion.score
    }
}

impl SrsModel {
    /// Fresh, seeded parameters for `config`.
    pub fn new(config: ModelConfig) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.hidden;
        let sticker = StickerEncoder::register(
            &mut store,
            config.image_channels,
            &config.conv_channels,
            config.grid,
            d,
            &mut rng,
        )?;
        let emoji = (!config.ablations.no_classify)
            .then(|| EmojiHead::register(&mut store, d, config.emoji_classes, &mut rng));
        let utterance =
            UtteranceEncoder::register(&mut store, config.vocab_size, d, config.attention(), &mut rng);
        let (interaction, bypass) = if config.ablations.no_din {
            (None, Some(InteractionBypass::register(&mut store, d, &mut rng)))
        } else {
            (Some(Interaction::register(&mut store, d, config.normalize_tau, &mut rng)), None)
        };
        let fusion = Fusion::register(
            &mut store,
            d,
            !config.ablations.no_fusion_rnn,
            config.attention(),
            &mut rng,
        );
        let model = SrsModel { config, sticker, emoji, utterance, interaction, bypass, fusion };
        Ok((model, store))
    }

    /// Rebuild the layout for `config` and check that `store` holds exactly
    /// the same parameters with the same shapes.
    pub fn bind(config: ModelConfig, store: &ParamStore) -> Result<Self> {
        let (model, reference) = SrsModel::new(config)?;
        if reference.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, configuration expects {}",
                store.len(),
                reference.len()
            )));
        }
        for (a, b) in reference.ids().zip(store.ids()) {
            if reference.name(a) != store.name(b)
                || reference.value(a).shape() != store.value(b).shape()
            {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    store.name(b),
                    store.value(b).shape(),
                    reference.name(a),
                    reference.value(a).shape()
                )));
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn sticker_encoder(&self) -> &StickerEncoder {
        &self.sticker
    }

    pub fn emoji_head(&self) -> Option<&EmojiHead> {
        self.emoji.as_ref()
    }

    pub fn utterance_encoder(&self) -> &UtteranceEncoder {
        &self.utterance
    }

    pub fn interaction(&self) -> Option<&Interaction> {
        self.interaction.as_ref()
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn encode_sticker(&self, g: &mut Graph, store: &ParamStore, sticker: &Sticker) -> Result<StickerRepr> {
        self.sticker.encode(g, store, sticker)
    }

    /// Eval-mode encodings of every sticker, for reuse across contexts.
    pub fn sticker_bank(&self, store: &ParamStore, stickers: &[Sticker]) -> Result<Vec<StickerTensors>> {
        stickers
            .iter()
            .map(|s| {
                let mut g = Graph::new();
                let repr = self.encode_sticker(&mut g, store, s)?;
                Ok(StickerTensors::read(&g, &repr))
            })
            .collect()
    }

    /// Emoji logits for a sticker's flat vector, if the head exists.
    pub fn emoji_logits(&self, g: &mut Graph, store: &ParamStore, flat: Var) -> Result<Option<Var>> {
        self.emoji.as_ref().map(|h| h.classify(g, store, flat)).transpose()
    }

    pub fn encode_utterances(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ctx: &DialogContext,
    ) -> Result<Vec<Option<UtteranceRepr>>> {
        ctx.validate(self.config.max_utterances)?;
        ctx.utterances
            .iter()
            .map(|u| {
                if u.padded_len() != self.config.t_x {
                    return Err(Error::dim(format!(
                        "utterance padded to {} but the model expects {}",
                        u.padded_len(),
                        self.config.t_x
                    )));
                }
                self.utterance.encode(g, store, u)
            })
            .collect()
    }

    /// Match one candidate against already encoded utterances.
    pub fn score_candidate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        utterances: &[Option<UtteranceRepr>],
        sticker: &StickerRepr,
    ) -> Result<CandidateTrace> {
        let matches = utterances
            .iter()
            .map(|u| match (&self.interaction, &self.bypass) {
                (Some(i), _) => Ok(UtteranceMatch::Deep(i.forward(g, store, sticker, u.as_ref())?)),
                (None, Some(b)) => Ok(UtteranceMatch::Bypass(b.forward(g, store, sticker, u.as_ref())?)),
                (None, None) => unreachable!("one interaction path is always registered"),
            })
            .collect::<Result<Vec<_>>>()?;
        let q2: Vec<Var> = matches.iter().map(UtteranceMatch::q2).collect();
        let fusion = self.fusion.forward(g, store, &q2)?;
        Ok(CandidateTrace { matches, fusion })
    }

    /// Eval-mode scores of every candidate of `ctx`, using precomputed
    /// sticker encodings indexed by sticker id.
    pub fn score_context(
        &self,
        store: &ParamStore,
        ctx: &DialogContext,
        bank: &[StickerTensors],
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let utterances = self.encode_utterances(&mut g, store, ctx)?;
        ctx.candidates
            .iter()
            .map(|&c| {
                let tensors = bank
                    .get(c)
                    .ok_or_else(|| Error::Corpus(format!("candidate sticker {c} does not exist")))?;
                let repr = tensors.insert(&mut g);
                let trace = self.score_candidate(&mut g, store, &utterances, &repr)?;
                Ok(g.value(trace.score()).item())
            })
            .collect()
    }
}

/// Everything besides parameters needed to rebuild a model from disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub vocab: Vec<String>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn save_model(path: &Path, store: &ParamStore, meta: &ModelMeta) -> Result<()> {
    save_checkpoint(path, store, &serde_json::to_value(meta)?)
}

/// Load a checkpoint and verify it against its recorded configuration.
pub fn load_model(path: &Path) -> Result<(SrsModel, ParamStore, Vocab, ModelMeta)> {
    let (store, meta) = load_checkpoint(path)?;
    let meta: ModelMeta = serde_json::from_value(meta)
        .map_err(|e| Error::Checkpoint(format!("unreadable model metadata: {e}")))?;
    if meta.vocab.len() != meta.config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary of {} words but the model embeds {}",
            meta.vocab.len(),
            meta.config.vocab_size
        )));
    }
    let model = SrsModel::bind(meta.config.clone(), &store)?;
    let vocab = Vocab::from_words(meta.vocab.clone());
    Ok((model, store, vocab, meta))
}
