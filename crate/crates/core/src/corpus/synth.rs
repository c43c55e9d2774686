//! Procedural corpus generator for desk-scale experiments.
//!
//! Stickers are glyph images, one glyph shape per emoji class, drawn in
//! several "sticker sets" that differ in placement, size, contrast and noise.
//! Every context takes its candidates from one set, so the negatives are the
//! set's stickers of the other classes. Context words mix class keywords of
//! the positive sticker with filler words, which makes the mapping learnable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sampling::build_candidates;
use super::types::{Corpus, Dialog, Sticker, StickerId, STICKER_SIDE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub classes: usize,
    /// Number of sticker sets; each set holds one sticker per class.
    pub sticker_sets: usize,
    pub pairs: usize,
    pub negatives: usize,
    pub min_utterances: usize,
    pub max_utterances: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub keywords_per_class: usize,
    /// Probability that a token is a keyword of the positive class.
    pub keyword_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            vocab_size: 100,
            classes: 10,
            sticker_sets: 4,
            pairs: 200,
            negatives: 9,
            min_utterances: 2,
            max_utterances: 4,
            min_words: 3,
            max_words: 8,
            keywords_per_class: 4,
            keyword_rate: 0.35,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic corpus: {m}")));
        if self.classes == 0 || self.sticker_sets == 0 {
            return bad("need at least one class and one sticker set");
        }
        if self.negatives >= self.classes {
            return bad("negatives must be fewer than classes (negatives come from the same set)");
        }
        if self.keywords_per_class == 0 || self.classes * self.keywords_per_class >= self.vocab_size {
            return bad("vocabulary too small for the class keywords plus filler words");
        }
        if self.min_utterances == 0 || self.min_utterances > self.max_utterances {
            return bad("utterance range must satisfy 1 <= min <= max");
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad("word range must satisfy 1 <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.keyword_rate) {
            return bad("keyword rate must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn sticker_count(&self) -> usize {
        self.classes * self.sticker_sets
    }
}

/// Glyph families, one per class (classes beyond ten add marker dots).
pub const GLYPHS: [&str; 10] = [
    "disc", "ring", "square", "frame", "plus", "cross", "hbars", "vbars", "triangle", "diamond",
];

pub fn glyph_name(class: usize) -> String {
    let base = GLYPHS[class % GLYPHS.len()];
    match class / GLYPHS.len() {
        0 => base.to_string(),
        dots => format!("{base}+{dots}dots"),
    }
}

struct Style {
    cx: f64,
    cy: f64,
    radius: f64,
    stroke: f64,
    background: f64,
    foreground: f64,
    noise: f64,
}

impl Style {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let half = STICKER_SIDE as f64 / 2.0;
        Style {
            cx: half + rng.random_range(-10.0..10.0),
            cy: half + rng.random_range(-10.0..10.0),
            radius: rng.random_range(30.0..42.0),
            stroke: rng.random_range(5.0..8.0),
            background: rng.random_range(0.0..0.2),
            foreground: rng.random_range(0.75..1.0),
            noise: rng.random_range(0.0..0.05),
        }
    }
}

fn inside(glyph: usize, dx: f64, dy: f64, s: &Style) -> bool {
    let (r, w) = (s.radius, s.stroke);
    let dist = (dx * dx + dy * dy).sqrt();
    let cheb = dx.abs().max(dy.abs());
    match glyph {
        0 => dist < r,
        1 => (dist - r).abs() < w,
        2 => cheb < 0.85 * r,
        3 => (cheb - 0.85 * r).abs() < w,
        4 => (dx.abs() < w && dy.abs() < r) || (dy.abs() < w && dx.abs() < r),
        5 => ((dx - dy).abs() < 1.4 * w || (dx + dy).abs() < 1.4 * w) && cheb < 0.8 * r,
        6 => dx.abs() < r && dy.abs() < r && (((dy + r) / (0.4 * r)).floor() as i64) % 2 == 0,
        7 => dx.abs() < r && dy.abs() < r && (((dx + r) / (0.4 * r)).floor() as i64) % 2 == 0,
        8 => dy > -0.8 * r && dy < 0.7 * r && dx.abs() < 0.6 * (dy + 0.8 * r),
        _ => dx.abs() + dy.abs() < r,
    }
}

/// Draw the glyph of `class` in `style`; values are multiples of 1/255.
fn draw(class: usize, style: &Style, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let glyph = class % GLYPHS.len();
    let dots = class / GLYPHS.len();
    let mut pixels = Vec::with_capacity(STICKER_SIDE * STICKER_SIDE);
    for y in 0..STICKER_SIDE {
        for x in 0..STICKER_SIDE {
            let (dx, dy) = (x as f64 + 0.5 - style.cx, y as f64 + 0.5 - style.cy);
            let mut on = inside(glyph, dx, dy, style);
            for d in 0..dots {
                let (ox, oy) = (12.0 + 14.0 * d as f64, 12.0);
                let (ex, ey) = (x as f64 - ox, y as f64 - oy);
                on |= ex * ex + ey * ey < 25.0;
            }
            let base = if on { style.foreground } else { style.background };
            let v = base + rng.random_range(-1.0..1.0) * style.noise;
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        }
    }
    pixels
}

fn word(id: usize) -> String {
    format!("w{id:03}")
}

/// Generate a corpus as described by `spec`.
pub fn synth_corpus(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut stickers = Vec::with_capacity(spec.sticker_count());
    let mut sets: Vec<Vec<StickerId>> = Vec::with_capacity(spec.sticker_sets);
    for set in 0..spec.sticker_sets {
        let style = Style::sample(&mut rng);
        let mut members = Vec::with_capacity(spec.classes);
        for class in 0..spec.classes {
            let pixels = draw(class, &style, &mut rng);
            let name = format!("stickers/set{set:02}_c{class:02}.png");
            stickers.push(Sticker::new(name, pixels, 1, class)?);
            members.push(stickers.len() - 1);
        }
        sets.push(members);
    }

    let keyword_span = spec.classes * spec.keywords_per_class;
    let filler = spec.vocab_size - keyword_span;
    let mut dialogs = Vec::with_capacity(spec.pairs);
    for i in 0..spec.pairs {
        let set = rng.random_range(0..spec.sticker_sets);
        let class = rng.random_range(0..spec.classes);
        let positive = sets[set][class];
        let (candidates, positive_index) =
            build_candidates(&sets[set], positive, spec.negatives, rng.random())?;

        let keyword = |rng: &mut ChaCha8Rng| {
            word(class * spec.keywords_per_class + rng.random_range(0..spec.keywords_per_class))
        };
        let n_utt = rng.random_range(spec.min_utterances..=spec.max_utterances);
        let mut utterances = Vec::with_capacity(n_utt);
        for _ in 0..n_utt {
            let len = rng.random_range(spec.min_words..=spec.max_words);
            let words = (0..len)
                .map(|_| {
                    if rng.random::<f64>() < spec.keyword_rate {
                        keyword(&mut rng)
                    } else {
                        word(keyword_span + rng.random_range(0..filler))
                    }
                })
                .collect();
            utterances.push(words);
        }
        // guarantee at least one keyword, in the most recent utterance
        let last: &mut Vec<String> = utterances.last_mut().expect("at least one utterance");
        let slot = rng.random_range(0..last.len());
        last[slot] = keyword(&mut rng);

        dialogs.push(Dialog {
            id: format!("ctx-{i:06}"),
            utterances,
            candidates,
            positive_index,
        });
    }
    let corpus = Corpus { stickers, dialogs };
    corpus.validate()?;
    Ok(corpus)
}

/// Class-to-glyph description written next to generated corpora.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthManifest {
    pub spec: SynthSpec,
    pub glyphs: Vec<String>,
    pub stickers: usize,
}

impl SynthManifest {
    pub fn new(spec: &SynthSpec) -> Self {
        SynthManifest {
            spec: spec.clone(),
            glyphs: (0..spec.classes).map(glyph_name).collect(),
            stickers: spec.sticker_count(),
        }
    }
}
