//! Convolutional sticker encoder producing a spatial grid and a flat vector,
//! plus the auxiliary emoji classification head.
//!
//! Four stride-2 3x3 convolutions take the 128x128 image down to 8x8; an
//! adaptive average pool reduces that to `p x p` cells, and a per-cell affine
//! map projects the channels to the model width `d`. The flat vector is an
//! affine map of the grid's mean.

use rand::Rng;

use crate::corpus::{Sticker, STICKER_SIDE};
use crate::error::{Error, Result};
use crate::numerics::{Affine, Graph, LayerNorm, ParamId, ParamStore, Tensor, Var};

pub const CONV_STAGES: usize = 4;

#[derive(Clone, Debug)]
pub struct StickerEncoder {
    convs: Vec<(ParamId, ParamId)>,
    project: Affine,
    norm: LayerNorm,
    flatten: Affine,
    channels: usize,
    grid: usize,
    hidden: usize,
}

/// Dual representation of one sticker: `grid` is `p^2 x d` (cells in
/// row-major order), `flat` is `1 x d`.
#[derive(Clone, Copy, Debug)]
pub struct StickerRepr {
    pub grid: Var,
    pub flat: Var,
}

/// Detached values of a [`StickerRepr`], for reuse across graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct StickerTensors {
    pub grid: Tensor,
    pub flat: Tensor,
}

impl StickerTensors {
    pub fn read(g: &Graph, repr: &StickerRepr) -> Self {
        StickerTensors {
            grid: g.value(repr.grid).clone(),
            flat: g.value(repr.flat).clone(),
        }
    }

    pub fn insert(&self, g: &mut Graph) -> StickerRepr {
        StickerRepr {
            grid: g.constant(self.grid.clone()),
            flat: g.constant(self.flat.clone()),
        }
    }
}

impl StickerEncoder {
    pub fn register(
        store: &mut ParamStore,
        image_channels: usize,
        conv_channels: &[usize],
        grid: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !matches!(image_channels, 1 | 3) {
            return Err(Error::Config("stickers have 1 or 3 channels".into()));
        }
        if conv_channels.len() != CONV_STAGES || conv_channels.contains(&0) {
            return Err(Error::Config(format!(
                "sticker encoder needs {CONV_STAGES} conv stages, got {}",
                conv_channels.len()
            )));
        }
        let side_after = STICKER_SIDE >> CONV_STAGES;
        if grid == 0 || grid > side_after {
            return Err(Error::Config(format!("grid size must be in 1..={side_after}")));
        }
        let mut convs = Vec::with_capacity(CONV_STAGES);
        let mut c_in = image_channels;
        for (i, &c_out) in conv_channels.iter().enumerate() {
            let fan_in = c_in * 9;
            let w = store.add_uniform(
                format!("sticker.conv{i}.weight"),
                &[c_out, c_in, 3, 3],
                (6.0 / fan_in as f64).sqrt(),
                rng,
            );
            let b = store.add(format!("sticker.conv{i}.bias"), Tensor::zeros(&[c_out]));
            convs.push((w, b));
            c_in = c_out;
        }
        let project = Affine::register(store, "sticker.project", c_in, hidden, rng);
        let norm = LayerNorm::register(store, "sticker.norm", hidden);
        let flatten = Affine::register(store, "sticker.flat", hidden, hidden, rng);
        Ok(StickerEncoder {
            convs,
            project,
            norm,
            flatten,
            channels: image_channels,
            grid,
            hidden,
        })
    }

    pub fn grid_size(&self) -> usize {
        self.grid
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, sticker: &Sticker) -> Result<StickerRepr> {
        let plane = STICKER_SIDE * STICKER_SIDE;
        if !matches!(sticker.channels, 1 | 3) || sticker.pixels.len() != sticker.channels * plane {
            return Err(Error::dim(format!(
                "sticker {} must be {STICKER_SIDE}x{STICKER_SIDE} with 1 or 3 channels",
                sticker.name
            )));
        }
        let pixels = match (sticker.channels, self.channels) {
            (a, b) if a == b => sticker.pixels.clone(),
            (1, 3) => sticker.pixels.repeat(3),
            // luma weights of ITU-R BT.601
            _ => (0..plane)
                .map(|i| {
                    0.299 * sticker.pixels[i]
                        + 0.587 * sticker.pixels[plane + i]
                        + 0.114 * sticker.pixels[2 * plane + i]
                })
                .collect(),
        };
        let image = Tensor::new(vec![self.channels, STICKER_SIDE, STICKER_SIDE], pixels)?;
        let mut x = g.constant(image);
        for &(w, b) in &self.convs {
            let (w, b) = (g.param(store, w), g.param(store, b));
            let c = g.conv2d(x, w, b, 2, 1)?;
            x = g.relu(c);
        }
        let channels = g.value(x).shape()[0];
        let pooled = g.adaptive_avg_pool(x, self.grid)?;
        let cells = g.reshape(pooled, &[channels, self.grid * self.grid])?;
        let cells = g.transpose(cells);
        let projected = self.project.forward(g, store, cells)?;
        let grid = self.norm.forward(g, store, projected)?;
        let mean = g.mean_rows(grid)?;
        let flat = self.flatten.forward(g, store, mean)?;
        debug_assert_eq!(g.value(flat).cols(), self.hidden);
        Ok(StickerRepr { grid, flat })
    }
}

/// Linear emoji classifier over the flat sticker vector.
#[derive(Clone, Copy, Debug)]
pub struct EmojiHead {
    affine: Affine,
    classes: usize,
}

impl EmojiHead {
    pub fn register(store: &mut ParamStore, hidden: usize, classes: usize, rng: &mut impl Rng) -> Self {
        EmojiHead {
            affine: Affine::register(store, "emoji_head", hidden, classes, rng),
            classes,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn affine(&self) -> Affine {
        self.affine
    }

    /// Logits over the emoji classes, `1 x K`.
    pub fn classify(&self, g: &mut Graph, store: &ParamStore, flat: Var) -> Result<Var> {
        self.affine.forward(g, store, flat)
    }
}

/// Cross-entropy of `logits` against `label`.
pub fn classification_loss(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    let classes = g.value(logits).cols();
    if label >= classes {
        return Err(Error::Corpus(format!(
            "emoji tag {label} outside {classes} classes"
        )));
    }
    g.cross_entropy(logits, label)
}
