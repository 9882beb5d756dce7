//! Brute-force references written without the library's helpers.

use std::collections::HashMap;

use cmg::captioner::StepModel;

/// kNN by one global sort of every ordered pair on true Euclidean distance.
pub fn knn_edges(points: &[Vec<f64>], j: usize) -> Vec<(usize, usize)> {
    let l = points.len();
    let mut pairs = Vec::new();
    for i in 0..l {
        for k in 0..l {
            if i != k {
                let d: f64 = points[i]
                    .iter()
                    .zip(&points[k])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                pairs.push((i, d, k));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.partial_cmp(&b.1).unwrap()).then(a.2.cmp(&b.2)));
    let mut taken = vec![0usize; l];
    let mut out = Vec::new();
    for (i, _, k) in pairs {
        if taken[i] < j {
            taken[i] += 1;
            out.push((i, k));
        }
    }
    out
}

/// Every bos-rooted sequence the beam can finish with: bodies followed by
/// eos within `max_len` tokens, and eos-free bodies of exactly `max_len`.
/// Returns the best (tokens, score) under the same ranking as the library:
/// higher score first, then lexicographically smaller tokens.
pub fn exhaustive_decode<M: StepModel>(
    model: &M,
    max_len: usize,
    length_norm: bool,
    pad: usize,
    bos: usize,
    eos: usize,
) -> (Vec<usize>, f64) {
    let v = model.vocab_size();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut consider = |tokens: Vec<usize>, sum: f64| {
        let len = tokens.len();
        let score = if length_norm { sum / len as f64 } else { sum };
        let better = match &best {
            None => true,
            Some((bt, bs)) => score > *bs || (score == *bs && tokens < *bt),
        };
        if better {
            best = Some((tokens, score));
        }
    };
    // Depth-first over prefixes, carrying the model state.
    let mut stack = vec![(Vec::<usize>::new(), 0.0f64, model.initial())];
    while let Some((prefix, sum, state)) = stack.pop() {
        let last = *prefix.last().unwrap_or(&bos);
        let (next_state, lp) = model.step(&state, last);
        for tok in 0..v {
            if tok == pad || tok == bos {
                continue;
            }
            let mut seq = prefix.clone();
            seq.push(tok);
            let s = sum + lp[tok];
            if tok == eos || seq.len() == max_len {
                consider(seq, s);
            } else {
                stack.push((seq, s, next_state.clone()));
            }
        }
    }
    let (mut tokens, score) = best.expect("non-empty search space");
    if tokens.last() == Some(&eos) {
        tokens.pop();
    }
    (tokens, score)
}

fn count_occurrences(hay: &[String], needle: &[String]) -> usize {
    if needle.len() > hay.len() {
        return 0;
    }
    (0..=hay.len() - needle.len())
        .filter(|&p| hay[p..p + needle.len()] == *needle)
        .count()
}

/// Corpus BLEU@n by direct occurrence counting.
pub fn bleu(cands: &[Vec<String>], refs: &[Vec<Vec<String>>], n: usize) -> f64 {
    let mut log_p = 0.0;
    for order in 1..=n {
        let (mut hit, mut tot) = (0usize, 0usize);
        for (c, rs) in cands.iter().zip(refs) {
            if c.len() < order {
                continue;
            }
            let mut seen: Vec<&[String]> = Vec::new();
            for p in 0..=c.len() - order {
                let g = &c[p..p + order];
                tot += 1;
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                let cc = count_occurrences(c, g);
                let rc = rs.iter().map(|r| count_occurrences(r, g)).max().unwrap_or(0);
                hit += cc.min(rc);
            }
        }
        if hit == 0 {
            return 0.0;
        }
        log_p += (hit as f64 / tot as f64).ln();
    }
    let c_len: usize = cands.iter().map(Vec::len).sum();
    let mut r_len = 0usize;
    for (c, rs) in cands.iter().zip(refs) {
        let mut best = rs[0].len();
        for r in rs {
            let d = (r.len() as i64 - c.len() as i64).abs();
            let bd = (best as i64 - c.len() as i64).abs();
            if d < bd || (d == bd && r.len() < best) {
                best = r.len();
            }
        }
        r_len += best;
    }
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    bp * (log_p / n as f64).exp()
}

fn is_subsequence(sub: &[&String], seq: &[String]) -> bool {
    let mut it = seq.iter();
    sub.iter().all(|s| it.any(|x| x == *s))
}

/// LCS by enumerating every subsequence of `a`.
pub fn lcs(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

pub fn rouge_l(cand: &[String], refs: &[Vec<String>]) -> f64 {
    let beta2 = 1.2f64 * 1.2;
    let mut best = 0.0f64;
    for r in refs {
        let l = lcs(cand, r) as f64;
        if l == 0.0 {
            continue;
        }
        let p = l / cand.len() as f64;
        let rc = l / r.len() as f64;
        best = best.max((1.0 + beta2) * p * rc / (rc + beta2 * p));
    }
    best
}

fn grams(s: &[String], n: usize) -> Vec<Vec<String>> {
    if s.len() < n {
        return vec![];
    }
    (0..=s.len() - n).map(|p| s[p..p + n].to_vec()).collect()
}

/// CIDEr-D with hash maps and explicit loops.
pub fn cider(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    let n_docs = refs.len() as f64;
    let mut df: HashMap<Vec<String>, f64> = HashMap::new();
    for rs in refs {
        let mut in_doc: Vec<Vec<String>> = Vec::new();
        for r in rs {
            for n in 1..=4 {
                for g in grams(r, n) {
                    if !in_doc.contains(&g) {
                        in_doc.push(g);
                    }
                }
            }
        }
        for g in in_doc {
            *df.entry(g).or_insert(0.0) += 1.0;
        }
    }
    let tfidf = |s: &[String], n: usize| -> HashMap<Vec<String>, f64> {
        let mut tf: HashMap<Vec<String>, f64> = HashMap::new();
        for g in grams(s, n) {
            *tf.entry(g).or_insert(0.0) += 1.0;
        }
        tf.into_iter()
            .map(|(g, c)| {
                let d = df.get(&g).copied().unwrap_or(0.0).max(1.0);
                (g, c * (n_docs.ln() - d.ln()))
            })
            .collect()
    };
    let norm = |v: &HashMap<Vec<String>, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let mut total = 0.0;
    for (c, rs) in cands.iter().zip(refs) {
        let mut score = 0.0;
        for n in 1..=4 {
            let vc = tfidf(c, n);
            for r in rs {
                let vr = tfidf(r, n);
                let (nc, nr) = (norm(&vc), norm(&vr));
                if nc == 0.0 || nr == 0.0 {
                    continue;
                }
                let mut dot = 0.0;
                for (g, a) in &vc {
                    if let Some(b) = vr.get(g) {
                        dot += a.min(*b) * b;
                    }
                }
                let delta = c.len() as f64 - r.len() as f64;
                score += (-(delta * delta) / 72.0).exp() * dot / (nc * nr);
            }
        }
        total += score / rs.len() as f64 / 4.0 * 10.0;
    }
    total / cands.len() as f64
}

/// Key frames by enumerating every `n`-subset: maximal total difference,
/// then the lexicographically smallest index set.
pub fn keyframes(frames: &[Vec<f64>], n: usize) -> Vec<usize> {
    let f = frames.len();
    let diffs: Vec<f64> = (0..f)
        .map(|t| {
            if t == 0 {
                0.0
            } else {
                frames[t].iter().zip(&frames[t - 1]).map(|(a, b)| (a - b).abs()).sum()
            }
        })
        .collect();
    let k = n.min(f);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << f) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let set: Vec<usize> = (0..f).filter(|i| mask >> i & 1 == 1).collect();
        let total: f64 = set.iter().map(|&i| diffs[i]).sum();
        let better = match &best {
            None => true,
            Some((bt, bs)) => total > *bt || (total == *bt && set < *bs),
        };
        if better {
            best = Some((total, set));
        }
    }
    best.map(|b| b.1).unwrap_or_default()
}
