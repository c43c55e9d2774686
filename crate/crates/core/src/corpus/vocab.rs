use std::collections::HashMap;

use super::types::{Dialog, DialogContext, Utterance, OOV_ID, PAD_ID};

pub const PAD_TOKEN: &str = "<pad>";
pub const OOV_TOKEN: &str = "<unk>";

/// Word-level vocabulary. Id 0 is padding and id 1 is out-of-vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from the words of `dialogs`, most frequent first (ties by word).
    pub fn build<'a>(dialogs: impl IntoIterator<Item = &'a Dialog>) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for d in dialogs {
            for w in d.utterances.iter().flatten() {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let words = [PAD_TOKEN, OOV_TOKEN]
            .into_iter()
            .chain(ranked.into_iter().map(|(w, _)| w))
            .map(String::from)
            .collect();
        Self::from_words(words)
    }

    /// Restore from an id-ordered word list (as stored in checkpoints).
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, index }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 2
    }

    pub fn id(&self, word: &str) -> usize {
        match self.index.get(word) {
            Some(&i) if i != PAD_ID => i,
            _ => OOV_ID,
        }
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or(OOV_TOKEN, String::as_str)
    }

    /// Map words to ids and pad or truncate to `t_x`, keeping the first words.
    pub fn tokenize_and_pad<S: AsRef<str>>(&self, words: &[S], t_x: usize) -> Utterance {
        let ids: Vec<usize> = words.iter().take(t_x).map(|w| self.id(w.as_ref())).collect();
        Utterance::from_ids(&ids, t_x)
    }

    pub fn encode(&self, dialog: &Dialog, t_x: usize) -> DialogContext {
        DialogContext {
            id: dialog.id.clone(),
            utterances: dialog
                .utterances
                .iter()
                .map(|u| self.tokenize_and_pad(u, t_x))
                .collect(),
            candidates: dialog.candidates.clone(),
            positive_index: dialog.positive_index,
        }
    }
}

/// Split raw text on whitespace.
pub fn split_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(String::from).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dialog(utterances: &[&str]) -> Dialog {
        Dialog {
            id: "d".into(),
            utterances: utterances.iter().map(|u| split_words(u)).collect(),
            candidates: vec![0],
            positive_index: 0,
        }
    }

    #[test]
    fn frequency_order_and_reserved_ids() {
        let v = Vocab::build([&dialog(&["b a b", "c b a"])]);
        assert_eq!(v.words(), &["<pad>", "<unk>", "b", "a", "c"]);
        assert_eq!(v.id("b"), 2);
        assert_eq!(v.id("zebra"), OOV_ID);
        assert_eq!(v.id(PAD_TOKEN), OOV_ID);
    }

    #[test]
    fn five_words_padded_to_thirty() {
        let v = Vocab::build([&dialog(&["one two three four five"])]);
        let u = v.tokenize_and_pad(&split_words("one two three four five"), 30);
        assert_eq!(u.token_ids.len(), 30);
        assert_eq!(u.mask.iter().filter(|m| **m).count(), 5);
        assert!(u.token_ids[5..].iter().all(|t| *t == PAD_ID));
    }

    #[test]
    fn forty_words_keep_first_thirty() {
        let words: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
        let v = Vocab::from_words(
            [PAD_TOKEN, OOV_TOKEN].iter().map(|s| s.to_string()).chain(words.iter().cloned()).collect(),
        );
        let u = v.tokenize_and_pad(&words, 30);
        let expected: Vec<usize> = (0..30).map(|i| i + 2).collect();
        assert_eq!(u.token_ids, expected);
        assert!(u.mask.iter().all(|m| *m));
    }

    #[test]
    fn empty_text_is_all_padding() {
        let v = Vocab::build([&dialog(&["x"])]);
        let u = v.tokenize_and_pad::<&str>(&[], 30);
        assert!(u.token_ids.iter().all(|t| *t == PAD_ID));
        assert!(u.mask.iter().all(|m| !m));
    }
}
