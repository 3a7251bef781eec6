use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{MarioError, Result};

/// Structural words used by the prompt templates, in id order.
pub const SPECIAL_WORDS: [&str; 12] = [
    "<unk>",
    "answer",
    "hop1",
    "hop2",
    "node1",
    "node2",
    "classify",
    "link",
    "categories",
    "raw",
    "yes",
    "no",
];

/// Word-level vocabulary of the surrogate LM: the template words, one token
/// per class label (`label_c`) and one per raw-text word (`w{i}`).
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
    num_labels: usize,
}

impl Vocab {
    pub fn new(num_labels: usize, num_words: usize) -> Self {
        let words: Vec<String> = SPECIAL_WORDS
            .iter()
            .map(|s| s.to_string())
            .chain((0..num_labels).map(|c| format!("label_{c}")))
            .chain((0..num_words).map(|i| format!("w{i}")))
            .collect();
        Vocab::from_words(words).expect("generated words are unique")
    }

    fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(MarioError::Config(format!(
                    "duplicate vocabulary word '{w}'"
                )));
            }
        }
        for (i, s) in SPECIAL_WORDS.iter().enumerate() {
            if index.get(*s) != Some(&(i as u32)) {
                return Err(MarioError::Config(format!(
                    "vocabulary must start with '{s}' at id {i}"
                )));
            }
        }
        let num_labels = (0..)
            .take_while(|c| index.contains_key(&format!("label_{c}")))
            .count();
        Ok(Vocab {
            words,
            index,
            num_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Id of a template word; panics on words outside [`SPECIAL_WORDS`].
    pub fn special(&self, word: &str) -> u32 {
        let id = SPECIAL_WORDS.iter().position(|s| *s == word);
        id.unwrap_or_else(|| panic!("'{word}' is not a template word")) as u32
    }

    pub fn label(&self, class: usize) -> Result<u32> {
        if class >= self.num_labels {
            return Err(MarioError::Config(format!(
                "class {class} has no label token (vocabulary has {})",
                self.num_labels
            )));
        }
        Ok((SPECIAL_WORDS.len() + class) as u32)
    }

    pub fn class_of(&self, id: u32) -> Option<usize> {
        let c = (id as usize).checked_sub(SPECIAL_WORDS.len())?;
        (c < self.num_labels).then_some(c)
    }

    pub fn yes(&self) -> u32 {
        self.special("yes")
    }

    pub fn no(&self) -> u32 {
        self.special("no")
    }

    /// Whitespace-split words; unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(0))
            .collect()
    }

    /// Writes `{"word": id, ...}`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let map: BTreeMap<&str, u32> = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_str(), i as u32))
            .collect();
        std::fs::write(path, serde_json::to_string_pretty(&map)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let map: BTreeMap<String, u32> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut words = vec![None; map.len()];
        for (w, id) in map {
            match words.get_mut(id as usize) {
                Some(slot @ None) => *slot = Some(w),
                _ => {
                    return Err(MarioError::data(
                        path,
                        None,
                        format!("id {id} duplicated or out of range"),
                    ))
                }
            }
        }
        Vocab::from_words(
            words
                .into_iter()
                .map(|w| w.expect("every id filled"))
                .collect(),
        )
    }
}
