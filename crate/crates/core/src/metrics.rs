//! Caption metrics: corpus BLEU@1-4, ROUGE-L and CIDEr-D.
//!
//! Captions are token lists; use [`crate::corpus::tokenize`] on raw text.
//! All n-gram tables are `BTreeMap`s so floating-point sums run in a fixed
//! order and scores are reproducible to the bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Tokens = Vec<String>;

/// Counts of every n-gram of exactly order `n`.
pub fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut out = BTreeMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w).or_insert(0) += 1;
    }
    out
}

fn check_corpus(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::validation("no candidates to score"));
    }
    if candidates.len() != references.len() {
        return Err(Error::validation(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::validation("every candidate needs at least one reference"));
    }
    Ok(())
}

/// Corpus-level BLEU@`n` with clipped n-gram counts, brevity penalty
/// against the closest reference length (shorter on ties) and no smoothing.
pub fn bleu(candidates: &[Tokens], references: &[Vec<Tokens>], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::validation(format!("BLEU order must be 1..=4, got {n}")));
    }
    Ok(bleu_all(candidates, references)?[n - 1])
}

/// BLEU@1 through BLEU@4.
pub fn bleu_all(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<[f64; 4]> {
    check_corpus(candidates, references)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("non-empty references");
        for k in 0..4 {
            let order = k + 1;
            let counts = ngram_counts(cand, order);
            let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, order) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in counts {
                matched[k] += c.min(max_ref.get(g).copied().unwrap_or(0));
                total[k] += c;
            }
        }
    }
    let bp = if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let mut out = [0.0; 4];
    let mut log_sum = 0.0;
    for k in 0..4 {
        if matched[k] == 0 {
            // Every higher order is zero as well.
            break;
        }
        log_sum += (matched[k] as f64 / total[k] as f64).ln();
        out[k] = bp * (log_sum / (k + 1) as f64).exp();
    }
    Ok(out)
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// ROUGE-L F-score: the best per-reference `F_beta` with `beta = 1.2`.
pub fn rouge_l(candidate: &[String], references: &[Tokens]) -> f64 {
    let b2 = ROUGE_BETA * ROUGE_BETA;
    references
        .iter()
        .map(|r| {
            let l = lcs_len(candidate, r);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / candidate.len() as f64;
            let rec = l as f64 / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

pub const CIDER_SIGMA: f64 = 6.0;

/// CIDEr-D with document frequencies taken from the reference corpus.
#[derive(Clone, Debug)]
pub struct CiderScorer {
    references: Vec<Vec<Tokens>>,
    doc_freq: BTreeMap<Vec<String>, usize>,
    log_docs: f64,
}

type NgramVec = BTreeMap<Vec<String>, f64>;

impl CiderScorer {
    pub fn new(references: Vec<Vec<Tokens>>) -> Self {
        let mut doc_freq: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for refs in &references {
            let mut seen = std::collections::BTreeSet::new();
            for r in refs {
                for n in 1..=4 {
                    for g in ngram_counts(r, n).into_keys() {
                        seen.insert(g.to_vec());
                    }
                }
            }
            for g in seen {
                *doc_freq.entry(g).or_insert(0) += 1;
            }
        }
        let log_docs = (references.len().max(1) as f64).ln();
        Self {
            references,
            doc_freq,
            log_docs,
        }
    }

    pub fn num_videos(&self) -> usize {
        self.references.len()
    }

    fn vectors(&self, tokens: &[String]) -> [(NgramVec, f64); 4] {
        std::array::from_fn(|k| {
            let mut v = NgramVec::new();
            let mut norm = 0.0;
            for (g, c) in ngram_counts(tokens, k + 1) {
                let df = self.doc_freq.get(g).copied().unwrap_or(0).max(1) as f64;
                let w = c as f64 * (self.log_docs - df.ln());
                norm += w * w;
                v.insert(g.to_vec(), w);
            }
            (v, norm.sqrt())
        })
    }

    /// Score of `candidate` against the references of video `index`.
    pub fn score(&self, index: usize, candidate: &[String]) -> f64 {
        let refs = &self.references[index];
        if refs.is_empty() {
            return 0.0;
        }
        let cand = self.vectors(candidate);
        let mut total = 0.0;
        for r in refs {
            let rv = self.vectors(r);
            let delta = candidate.len() as f64 - r.len() as f64;
            let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            for k in 0..4 {
                let (cv, cn) = &cand[k];
                let (refv, rn) = &rv[k];
                if *cn == 0.0 || *rn == 0.0 {
                    continue;
                }
                let dot: f64 = cv
                    .iter()
                    .filter_map(|(g, &a)| refv.get(g).map(|&b| a.min(b) * b))
                    .sum();
                total += penalty * dot / (cn * rn);
            }
        }
        total / refs.len() as f64 / 4.0 * 10.0
    }

    /// Mean score over the corpus, candidate `i` against video `i`.
    pub fn corpus_score(&self, candidates: &[Tokens]) -> Result<f64> {
        check_corpus(candidates, &self.references)?;
        let sum: f64 = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| self.score(i, c))
            .sum();
        Ok(sum / candidates.len() as f64)
    }
}

pub fn cider(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<f64> {
    check_corpus(candidates, references)?;
    CiderScorer::new(references.to_vec()).corpus_score(candidates)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub cider: f64,
}

pub fn score_corpus(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<ScoreReport> {
    let b = bleu_all(candidates, references)?;
    let rouge = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_l(c, r))
        .sum::<f64>()
        / candidates.len() as f64;
    Ok(ScoreReport {
        bleu1: b[0],
        bleu2: b[1],
        bleu3: b[2],
        bleu4: b[3],
        rouge_l: rouge,
        cider: cider(candidates, references)?,
    })
}
