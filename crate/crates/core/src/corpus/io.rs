//! Line-delimited corpus files.
//!
//! Each line of a corpus file is one JSON record:
//!
//! ```json
//! {"id": "train-000001",
//!  "utterances": [["hello", "there"], ["so", "happy"]],
//!  "candidates": [{"image": "stickers/set00_c03.png", "emoji": 3}, ...],
//!  "positive": 4}
//! ```
//!
//! Image paths are relative to the directory holding the corpus file. Images
//! are 128x128 PNGs; grayscale files load as one channel, anything else as RGB.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{ColorType, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::types::{Corpus, Dialog, Sticker, StickerId, STICKER_SIDE};
use crate::error::{Error, Result};

/// Default cap on context length when loading.
pub const MAX_UTTERANCES: usize = 20;

#[derive(Serialize, Deserialize)]
struct CandidateRecord {
    image: String,
    emoji: usize,
}

#[derive(Serialize, Deserialize)]
struct DialogRecord {
    id: String,
    utterances: Vec<Vec<String>>,
    candidates: Vec<CandidateRecord>,
    positive: usize,
}

/// Read a corpus file, keeping at most the last `max_utterances` utterances
/// of every record.
pub fn load_corpus(path: &Path, max_utterances: usize) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| Error::Corpus(format!("cannot open {}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut corpus = Corpus::default();
    let mut by_path: HashMap<String, StickerId> = HashMap::new();

    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DialogRecord = serde_json::from_str(&line).map_err(|e| Error::Record {
            line: line_no,
            message: e.to_string(),
        })?;
        let bad = |message: String| Error::Record { line: line_no, message };
        if record.candidates.is_empty() {
            return Err(bad("record has no candidates".into()));
        }
        if record.utterances.is_empty() {
            return Err(bad("record has no utterances".into()));
        }
        let mut candidates = Vec::with_capacity(record.candidates.len());
        for c in &record.candidates {
            let id = match by_path.get(&c.image) {
                Some(&id) => {
                    if corpus.stickers[id].emoji != c.emoji {
                        return Err(bad(format!("{} appears with two emoji tags", c.image)));
                    }
                    id
                }
                None => {
                    let sticker = read_sticker(&base.join(&c.image), &c.image, c.emoji)?;
                    corpus.stickers.push(sticker);
                    let id = corpus.stickers.len() - 1;
                    by_path.insert(c.image.clone(), id);
                    id
                }
            };
            candidates.push(id);
        }
        let skip = record.utterances.len().saturating_sub(max_utterances);
        let dialog = Dialog {
            id: record.id,
            utterances: record.utterances[skip..].to_vec(),
            candidates,
            positive_index: record.positive,
        };
        dialog.validate().map_err(|e| bad(e.to_string()))?;
        corpus.dialogs.push(dialog);
    }
    Ok(corpus)
}

fn read_sticker(path: &Path, name: &str, emoji: usize) -> Result<Sticker> {
    if !path.exists() {
        return Err(Error::MissingImage { path: path.to_path_buf() });
    }
    let img = image::open(path)?;
    if img.width() as usize != STICKER_SIDE || img.height() as usize != STICKER_SIDE {
        return Err(Error::dim(format!(
            "{} is {}x{}, expected {STICKER_SIDE}x{STICKER_SIDE}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let (pixels, channels) = match img.color() {
        ColorType::L8 | ColorType::L16 | ColorType::La8 | ColorType::La16 => {
            let g = img.to_luma8();
            (g.pixels().map(|p| p.0[0] as f64 / 255.0).collect(), 1)
        }
        _ => {
            let rgb = img.to_rgb8();
            let n = STICKER_SIDE * STICKER_SIDE;
            let mut planes = vec![0.0; 3 * n];
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    planes[c * n + i] = p.0[c] as f64 / 255.0;
                }
            }
            (planes, 3)
        }
    };
    Sticker::new(name, pixels, channels, emoji)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a sticker as PNG under `dir`, at its relative `name`.
pub fn write_sticker(dir: &Path, sticker: &Sticker) -> Result<PathBuf> {
    let path = dir.join(&sticker.name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let side = STICKER_SIDE as u32;
    if sticker.channels == 1 {
        let bytes = sticker.pixels.iter().map(|v| to_byte(*v)).collect();
        GrayImage::from_raw(side, side, bytes)
            .expect("validated geometry")
            .save(&path)?;
    } else {
        let n = STICKER_SIDE * STICKER_SIDE;
        let bytes = (0..n)
            .flat_map(|i| (0..3).map(move |c| (c, i)))
            .map(|(c, i)| to_byte(sticker.pixels[c * n + i]))
            .collect();
        RgbImage::from_raw(side, side, bytes)
            .expect("validated geometry")
            .save(&path)?;
    }
    Ok(path)
}

/// Write the dialogs of `corpus` to `path`, and every referenced sticker image
/// relative to the file's directory.
pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    fs::create_dir_all(&base)?;
    let mut written = vec![false; corpus.stickers.len()];
    let mut out = BufWriter::new(File::create(path)?);
    for d in &corpus.dialogs {
        let record = DialogRecord {
            id: d.id.clone(),
            utterances: d.utterances.clone(),
            candidates: d
                .candidates
                .iter()
                .map(|&c| CandidateRecord {
                    image: corpus.stickers[c].name.clone(),
                    emoji: corpus.stickers[c].emoji,
                })
                .collect(),
            positive: d.positive_index,
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
        for &c in &d.candidates {
            if !written[c] {
                write_sticker(&base, &corpus.stickers[c])?;
                written[c] = true;
            }
        }
    }
    out.flush()?;
    Ok(())
}
