//! Caption tokenisation, object-token extraction, synonym grouping into
//! concept classes, and the word vocabulary.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_text, write_file, Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

/// Lowercases, splits on whitespace and strips punctuation other than `-`.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric() || *c == '-')
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn parse_lexicon(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

/// Parses `member<TAB>canonical` lines. Blank lines and `#` comments are
/// skipped.
pub fn parse_synonym_table(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(member), Some(canon), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::parse(
                format!("synonym table line {}", n + 1),
                "expected `member<TAB>canonical`",
            ));
        };
        let (member, canon) = (member.trim(), canon.trim());
        if member.is_empty() || canon.is_empty() {
            return Err(Error::parse(
                format!("synonym table line {}", n + 1),
                "empty token",
            ));
        }
        out.push((member.to_string(), canon.to_string()));
    }
    Ok(out)
}

pub fn format_synonym_table(pairs: &[(String, String)]) -> String {
    pairs
        .iter()
        .map(|(m, c)| format!("{m}\t{c}\n"))
        .collect()
}

/// Token to canonical-token map. Chains are followed to their end so that
/// canonicalisation is idempotent.
#[derive(Clone, Debug, Default)]
pub struct SynonymTable {
    map: BTreeMap<String, String>,
}

impl SynonymTable {
    pub fn new(pairs: &[(String, String)]) -> Self {
        let raw: BTreeMap<String, String> = pairs.iter().cloned().collect();
        let mut map = BTreeMap::new();
        for member in raw.keys() {
            let mut cur = member.clone();
            let mut seen = BTreeSet::new();
            while let Some(next) = raw.get(&cur) {
                if !seen.insert(cur.clone()) || next == &cur {
                    break;
                }
                cur = next.clone();
            }
            if &cur != member {
                map.insert(member.clone(), cur);
            }
        }
        Self { map }
    }

    pub fn canonical<'a>(&'a self, token: &'a str) -> &'a str {
        self.map.get(token).map_or(token, String::as_str)
    }

    pub fn members_of(&self, canonical: &str) -> Vec<String> {
        self.map
            .iter()
            .filter(|(_, c)| c.as_str() == canonical)
            .map(|(m, _)| m.clone())
            .collect()
    }
}

/// Tokens of `caption` that appear in `lexicon`, in order, duplicates kept.
pub fn extract_object_tokens(caption: &[String], lexicon: &BTreeSet<String>) -> Result<Vec<String>> {
    if lexicon.is_empty() {
        return Err(Error::validation("noun lexicon is empty"));
    }
    Ok(caption
        .iter()
        .filter(|t| lexicon.contains(t.as_str()))
        .cloned()
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptClass {
    pub canonical: String,
    pub members: Vec<String>,
    pub frequency: usize,
}

/// The top-K concept classes, most frequent first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptClassTable {
    pub classes: Vec<ConceptClass>,
}

impl ConceptClassTable {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Class id of a token, through its canonical form.
    pub fn class_of(&self, token: &str, synonyms: &SynonymTable) -> Option<usize> {
        let canon = synonyms.canonical(token);
        self.classes.iter().position(|c| c.canonical == canon)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.classes[id].canonical
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_string_pretty(self).expect("classes serialise"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&read_text(path)?).map_err(|e| Error::parse("concept classes", e))
    }
}

/// Counts canonicalised object tokens over all captions and keeps the `k`
/// most frequent groups; ties break lexicographically on the canonical token.
pub fn build_concept_classes(
    captions: &[Vec<String>],
    lexicon: &BTreeSet<String>,
    synonyms: &SynonymTable,
    k: usize,
) -> Result<ConceptClassTable> {
    if k == 0 {
        return Err(Error::validation("K must be at least 1"));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for cap in captions {
        for tok in extract_object_tokens(cap, lexicon)? {
            *counts.entry(synonyms.canonical(&tok).to_string()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ConceptClassTable {
        classes: ranked
            .into_iter()
            .map(|(canonical, frequency)| ConceptClass {
                members: synonyms.members_of(&canonical),
                canonical,
                frequency,
            })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let specials = [PAD, BOS, EOS, UNK];
        if tokens.len() < 4 || tokens[..4] != specials {
            return Err(Error::validation(format!(
                "vocabulary must start with {specials:?}"
            )));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::validation(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::validation(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Tokens with corpus frequency `>= min_count`, sorted by descending
    /// frequency then lexicographically, after the four specials.
    pub fn build(captions: &[Vec<String>], min_count: usize) -> Result<Self> {
        if min_count == 0 {
            return Err(Error::validation("min_count must be at least 1"));
        }
        if captions.iter().all(Vec::is_empty) {
            return Err(Error::validation("cannot build a vocabulary from an empty corpus"));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for cap in captions {
            for t in cap {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && ![PAD, BOS, EOS, UNK].contains(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK, String::as_str)
    }

    /// `bos, tokens..., eos`.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        let mut out = Vec::with_capacity(tokens.len() + 2);
        out.push(BOS_ID);
        out.extend(tokens.iter().map(|t| self.id(t)));
        out.push(EOS_ID);
        out
    }

    /// Encodes and right-pads with `pad` to `len`; longer sequences are
    /// truncated keeping the final `eos`.
    pub fn encode_padded(&self, tokens: &[String], len: usize) -> Vec<usize> {
        let mut ids = self.encode(tokens);
        if ids.len() > len {
            ids.truncate(len.max(2) - 1);
            ids.push(EOS_ID);
        }
        ids.resize(len, PAD_ID);
        ids
    }

    /// Drops the framing and padding; stops at the first `eos`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .copied()
            .skip_while(|&i| i == BOS_ID)
            .take_while(|&i| i != EOS_ID)
            .filter(|&i| i != PAD_ID && i != BOS_ID)
            .map(|i| self.token(i).to_string())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text
            .lines()
            .map(|l| l.trim_end_matches('\r').to_string())
            .filter(|l| !l.is_empty())
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }
}
