//! Character vocabulary with reserved ids.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        if f.tokens.len() < RESERVED.len() || f.tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::format("vocabulary", "reserved tokens missing or reordered"));
        }
        let chars = f.tokens[RESERVED.len()..]
            .iter()
            .map(|t| {
                let mut it = t.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Ok(c),
                    _ => Err(Error::format("vocabulary", format!("token {t:?} is not one character"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Vocabulary::from_chars(chars)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(v.chars.iter().map(char::to_string))
            .collect();
        VocabFile { tokens }
    }
}

impl Vocabulary {
    /// One id per distinct character, in code-point order after the
    /// reserved ids.
    pub fn build<S: AsRef<str>>(texts: &[S]) -> Result<Self> {
        let set: BTreeSet<char> = texts.iter().flat_map(|t| t.as_ref().chars()).collect();
        if set.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from empty text".into()));
        }
        Self::from_chars(set.into_iter().collect())
    }

    fn from_chars(chars: Vec<char>) -> Result<Self> {
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i + RESERVED.len()).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate token {c:?}")));
            }
        }
        Ok(Self { chars, index })
    }

    pub fn len(&self) -> usize {
        self.chars.len() + RESERVED.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// Reserved ids other than UNK are dropped; UNK renders as U+FFFD.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&i| match i {
                UNK => Some('\u{fffd}'),
                i if i < RESERVED.len() => None,
                i => self.chars.get(i - RESERVED.len()).copied(),
            })
            .collect()
    }

    pub fn token(&self, id: usize) -> String {
        match id {
            i if i < RESERVED.len() => RESERVED[i].to_string(),
            i => self.chars[i - RESERVED.len()].to_string(),
        }
    }

    /// Hex SHA-256 of the canonical JSON form; identifies the id mapping.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("vocabulary serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abca_has_three_characters() {
        let v = Vocabulary::build(&["abca"]).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.encode("abc"), vec![4, 5, 6]);
        assert_eq!(v.decode(&[BOS, 5, 4, EOS, PAD]), "ba");
    }

    #[test]
    fn rebuilding_is_idempotent() {
        let a = Vocabulary::build(&["zyx", "ab"]).unwrap();
        let b = Vocabulary::build(&["ab", "xyz"]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn unseen_character_is_unk() {
        let v = Vocabulary::build(&["ab"]).unwrap();
        assert_eq!(v.encode("aq"), vec![4, UNK]);
    }

    #[test]
    fn json_round_trip_and_hash_sensitivity() {
        let v = Vocabulary::build(&["héllo"]).unwrap();
        let back: Vocabulary = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(back, v);
        assert_ne!(Vocabulary::build(&["hello"]).unwrap().hash(), v.hash());
        assert!(serde_json::from_str::<Vocabulary>(r#"{"tokens":["a"]}"#).is_err());
    }
}
