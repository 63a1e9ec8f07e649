use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{tokenize, TextError};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Maximum number of word tokens kept per sentence, excluding BOS/EOS.
pub const DEFAULT_T_MAX: usize = 20;
pub const DEFAULT_MIN_FREQ: usize = 5;

/// Token/id mapping. Ids 0..4 are PAD, BOS, EOS, UNK in that order; regular
/// tokens follow in descending corpus frequency, ties broken lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "VocabRepr", try_from = "VocabRepr")]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
    min_freq: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    min_freq: usize,
    tokens: Vec<String>,
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            min_freq: v.min_freq,
            tokens: v.id_to_token[SPECIALS.len()..].to_vec(),
        }
    }
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = String;

    fn try_from(r: VocabRepr) -> Result<Self, Self::Error> {
        Vocab::from_tokens(r.tokens, r.min_freq)
    }
}

impl Vocab {
    /// Builds a vocabulary from regular tokens listed in id order.
    pub fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Result<Self, String> {
        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for tok in tokens {
            if SPECIALS.contains(&tok.as_str()) {
                return Err(format!("reserved token {tok:?} in vocabulary"));
            }
            if token_to_id.insert(tok.clone(), id_to_token.len()).is_some() {
                return Err(format!("duplicate token {tok:?} in vocabulary"));
            }
            id_to_token.push(tok);
        }
        Ok(Self {
            id_to_token,
            token_to_id,
            min_freq,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == SPECIALS.len()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    /// Id of `token`, or UNK.
    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Regular tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token[SPECIALS.len()..]
    }

    /// Tokenizes and encodes `sentence`, keeping at most `t_max` words.
    pub fn encode(&self, sentence: &str, t_max: usize) -> TokenSeq {
        let words = tokenize(sentence);
        self.encode_tokens(&words, t_max)
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, words: &[S], t_max: usize) -> TokenSeq {
        let mut ids = Vec::with_capacity(words.len().min(t_max) + 2);
        ids.push(BOS);
        ids.extend(words.iter().take(t_max).map(|w| self.id(w.as_ref())));
        ids.push(EOS);
        let length = ids.len();
        TokenSeq { ids, length }
    }

    /// Words between BOS and EOS, specials other than UNK dropped.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .copied()
            .skip_while(|&id| id == BOS)
            .take_while(|&id| id != EOS)
            .filter(|&id| id != PAD && id != BOS)
            .filter_map(|id| self.token(id).map(str::to_owned))
            .collect()
    }
}

/// Builds a vocabulary from raw sentences.
pub fn build_vocab<I, S>(corpus: I, min_freq: usize) -> Result<Vocab, TextError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut sentences = 0usize;
    for sentence in corpus {
        sentences += 1;
        for tok in tokenize(sentence.as_ref()) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if sentences == 0 {
        return Err(TextError::EmptyCorpus);
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_freq)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = kept.into_iter().map(|(t, _)| t).collect();
    Ok(Vocab::from_tokens(tokens, min_freq).expect("counted tokens are unique and unreserved"))
}

/// Encoded sentence: BOS, word ids, EOS, then optional PAD.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    ids: Vec<usize>,
    length: usize,
}

impl TokenSeq {
    /// Validates a raw id list (possibly padded).
    pub fn from_ids(ids: Vec<usize>) -> Result<Self, TextError> {
        let length = ids
            .iter()
            .position(|&id| id == EOS)
            .map(|p| p + 1)
            .ok_or_else(|| TextError::InvalidSequence("missing EOS".into()))?;
        if ids.first() != Some(&BOS) {
            return Err(TextError::InvalidSequence("must start with BOS".into()));
        }
        if ids[1..length - 1].iter().any(|&id| id == BOS || id == PAD) {
            return Err(TextError::InvalidSequence(
                "BOS or PAD inside the sentence".into(),
            ));
        }
        if ids[length..].iter().any(|&id| id != PAD) {
            return Err(TextError::InvalidSequence(
                "non-PAD id after EOS".into(),
            ));
        }
        Ok(Self { ids, length })
    }

    /// Number of ids up to and including EOS.
    pub fn len(&self) -> usize {
        self.length
    }

    /// True when the sentence holds no words (only BOS, EOS).
    pub fn is_empty(&self) -> bool {
        self.length <= 2
    }

    /// Ids up to and including EOS.
    pub fn ids(&self) -> &[usize] {
        &self.ids[..self.length]
    }

    /// All stored ids, including trailing PAD.
    pub fn raw_ids(&self) -> &[usize] {
        &self.ids
    }

    /// Word ids, BOS/EOS stripped.
    pub fn words(&self) -> &[usize] {
        &self.ids[1..self.length - 1]
    }

    /// Copy padded with PAD to `width` ids. Never truncates.
    pub fn padded(&self, width: usize) -> Self {
        let mut ids = self.ids[..self.length].to_vec();
        ids.resize(width.max(self.length), PAD);
        Self {
            ids,
            length: self.length,
        }
    }

    /// Id at position `t`, PAD beyond the stored ids.
    pub fn at(&self, t: usize) -> usize {
        self.ids.get(t).copied().unwrap_or(PAD)
    }
}
