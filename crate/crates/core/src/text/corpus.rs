use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TextError, TokenSeq, Vocab};

/// At most this many references are kept per image.
pub const MAX_REFERENCES: usize = 5;

/// One image and its raw reference captions, as read from disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawGroup {
    #[serde(deserialize_with = "string_or_int")]
    pub image_id: String,
    pub captions: Vec<String>,
}

pub(crate) fn string_or_int<'de, D: serde::Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Id {
        Str(String),
        Int(i64),
        UInt(u64),
    }
    Ok(match Id::deserialize(d)? {
        Id::Str(s) => s,
        Id::Int(i) => i.to_string(),
        Id::UInt(u) => u.to_string(),
    })
}

/// Raw caption corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub groups: Vec<RawGroup>,
}

impl Corpus {
    /// Parses `[{"image_id": .., "captions": [..]}, ..]`.
    pub fn from_json_str(json: &str) -> Result<Self, TextError> {
        let groups: Vec<RawGroup> = serde_json::from_str(json)?;
        Ok(Self { groups })
    }

    /// One sentence per non-blank line; each line becomes its own group with
    /// its 1-based line number as image id.
    pub fn from_lines(text: &str) -> Self {
        let groups = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| RawGroup {
                image_id: (i + 1).to_string(),
                captions: vec![l.trim().to_string()],
            })
            .collect();
        Self { groups }
    }

    /// Reads a JSON corpus, or a plain-text one when the first non-blank
    /// character is not `[`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TextError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TextError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if text.trim_start().starts_with('[') {
            Self::from_json_str(&text)
        } else {
            Ok(Self::from_lines(&text))
        }
    }

    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.groups
            .iter()
            .flat_map(|g| g.captions.iter().map(String::as_str))
    }

    pub fn is_empty(&self) -> bool {
        self.sentences().next().is_none()
    }

    /// Encodes every group. Captions with no words are dropped, groups left
    /// without captions are dropped, and only the first
    /// [`MAX_REFERENCES`] captions of a group are kept.
    pub fn encode(&self, vocab: &Vocab, t_max: usize) -> Result<Vec<CaptionGroup>, TextError> {
        if self.is_empty() {
            return Err(TextError::EmptyCorpus);
        }
        Ok(self
            .groups
            .iter()
            .filter_map(|g| {
                let references: Vec<TokenSeq> = g
                    .captions
                    .iter()
                    .map(|c| vocab.encode(c, t_max))
                    .filter(|s| !s.is_empty())
                    .take(MAX_REFERENCES)
                    .collect();
                (!references.is_empty()).then(|| CaptionGroup {
                    image_id: g.image_id.clone(),
                    references,
                })
            })
            .collect())
    }
}

/// Encoded references for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionGroup {
    pub image_id: String,
    pub references: Vec<TokenSeq>,
}
