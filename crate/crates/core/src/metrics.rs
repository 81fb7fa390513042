//! Caption metrics: corpus BLEU-1..4, ROUGE-L and CIDEr-D.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::DatasetRecord;
use crate::decode::beam_decode;
use crate::error::{Error, Result};

/// F-measure weight of recall against precision in ROUGE-L.
pub const ROUGE_BETA_SQ: f64 = 1.2;
/// Width of the CIDEr-D length penalty.
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_SCALE: f64 = 10.0;
pub const CIDER_MAX_N: usize = 4;

fn check_corpus<T, R>(cands: &[T], refs: &[Vec<R>]) -> Result<()> {
    if cands.is_empty() {
        return Err(Error::Domain("empty candidate set".into()));
    }
    if cands.len() != refs.len() {
        return Err(Error::Contract(format!(
            "{} candidates but {} reference sets",
            cands.len(),
            refs.len()
        )));
    }
    if let Some(i) = refs.iter().position(Vec::is_empty) {
        return Err(Error::Contract(format!("candidate {i} has no references")));
    }
    Ok(())
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and candidate n-gram total over the corpus.
pub fn bleu_counts<T: Eq + Hash>(
    cands: &[Vec<T>],
    refs: &[Vec<Vec<T>>],
    n: usize,
) -> (usize, usize) {
    let mut matches = 0;
    let mut total = 0;
    for (c, rs) in cands.iter().zip(refs) {
        let mut max_ref: HashMap<&[T], usize> = HashMap::new();
        for r in rs {
            for (g, k) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(k);
            }
        }
        for (g, k) in ngram_counts(c, n) {
            matches += k.min(max_ref.get(g).copied().unwrap_or(0));
            total += k;
        }
    }
    (matches, total)
}

/// Corpus BLEU-1 through BLEU-`max_n`.
///
/// Clipped n-gram precisions are pooled over the corpus, and the brevity
/// penalty uses the reference length closest to each candidate (the shorter
/// on ties). For `n >= 2`, a precision with zero matches becomes
/// `1 / (total + 1)` instead of zero; zero unigram matches give a score of 0.
pub fn bleu<T: Eq + Hash>(
    cands: &[Vec<T>],
    refs: &[Vec<Vec<T>>],
    max_n: usize,
) -> Result<Vec<f64>> {
    check_corpus(cands, refs)?;
    if !(1..=4).contains(&max_n) {
        return Err(Error::Domain(format!("BLEU order {max_n} outside 1..=4")));
    }
    let cand_len: usize = cands.iter().map(Vec::len).sum();
    let ref_len: usize = cands
        .iter()
        .zip(refs)
        .map(|(c, rs)| {
            rs.iter()
                .map(Vec::len)
                .min_by_key(|&l| (l.abs_diff(c.len()), l))
                .expect("references checked nonempty")
        })
        .sum();
    let bp = if cand_len == 0 {
        0.0
    } else if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };

    let mut log_p = Vec::with_capacity(max_n);
    let mut unigram_hits = 0;
    for n in 1..=max_n {
        let (m, t) = bleu_counts(cands, refs, n);
        if n == 1 {
            unigram_hits = m;
        }
        let p = if m > 0 {
            m as f64 / t as f64
        } else if n >= 2 {
            1.0 / (t as f64 + 1.0)
        } else {
            0.0
        };
        log_p.push(p.ln());
    }
    Ok((1..=max_n)
        .map(|n| {
            if unigram_hits == 0 {
                0.0
            } else {
                bp * (log_p[..n].iter().sum::<f64>() / n as f64).exp()
            }
        })
        .collect())
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
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

/// ROUGE-L F-measure of one candidate against one reference.
pub fn rouge_l_pair<T: Eq>(cand: &[T], reference: &[T]) -> f64 {
    let l = lcs_len(cand, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / cand.len() as f64;
    let r = l as f64 / reference.len() as f64;
    (1.0 + ROUGE_BETA_SQ) * p * r / (r + ROUGE_BETA_SQ * p)
}

/// Mean over candidates of the best [`rouge_l_pair`] against their references.
pub fn rouge_l<T: Eq>(cands: &[Vec<T>], refs: &[Vec<Vec<T>>]) -> Result<f64> {
    check_corpus(cands, refs)?;
    let total: f64 = cands
        .iter()
        .zip(refs)
        .map(|(c, rs)| rs.iter().map(|r| rouge_l_pair(c, r)).fold(0.0, f64::max))
        .sum();
    Ok(total / cands.len() as f64)
}

struct NgramVector<'a, T> {
    weights: HashMap<&'a [T], f64>,
    norm: f64,
}

fn tfidf<'a, T: Eq + Hash>(
    tokens: &'a [T],
    n: usize,
    df: &HashMap<&[T], usize>,
    log_images: f64,
) -> NgramVector<'a, T> {
    let weights: HashMap<&[T], f64> = ngram_counts(tokens, n)
        .into_iter()
        .map(|(g, tf)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g, tf as f64 * (log_images - d.ln()))
        })
        .collect();
    let norm = weights.values().map(|w| w * w).sum::<f64>().sqrt();
    NgramVector { weights, norm }
}

/// Clipped cosine `Σ min(c, r)·r / (‖c‖‖r‖)`.
fn clipped_cosine<T: Eq + Hash>(c: &NgramVector<T>, r: &NgramVector<T>) -> f64 {
    if c.norm == 0.0 || r.norm == 0.0 {
        return 0.0;
    }
    let dot: f64 = c
        .weights
        .iter()
        .filter_map(|(g, &vc)| r.weights.get(g).map(|&vr| vc.min(vr) * vr))
        .sum();
    dot / (c.norm * r.norm)
}

/// CIDEr-D of each candidate against its references.
///
/// Document frequencies count the images whose reference set contains an
/// n-gram. Per n in 1..=4, TF-IDF vectors are compared with a clipped cosine
/// and a Gaussian penalty `exp(-(len_c - len_r)² / 2σ²)` on token counts.
/// Per-image score: `10 · mean_refs mean_n`.
pub fn cider_per_image<T: Eq + Hash>(cands: &[Vec<T>], refs: &[Vec<Vec<T>>]) -> Result<Vec<f64>> {
    check_corpus(cands, refs)?;
    if refs.len() < 2 {
        return Err(Error::Domain(
            "CIDEr needs at least two images for document frequencies".into(),
        ));
    }
    let log_images = (refs.len() as f64).ln();
    let mut scores = vec![0.0; cands.len()];
    for n in 1..=CIDER_MAX_N {
        let mut df: HashMap<&[T], usize> = HashMap::new();
        for rs in refs {
            let grams: HashSet<&[T]> = rs
                .iter()
                .flat_map(|r| ngram_counts(r, n).into_keys())
                .collect();
            for g in grams {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for ((c, rs), score) in cands.iter().zip(refs).zip(scores.iter_mut()) {
            let cv = tfidf(c, n, &df, log_images);
            let mut acc = 0.0;
            for r in rs {
                let rv = tfidf(r, n, &df, log_images);
                let delta = c.len() as f64 - r.len() as f64;
                let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
                acc += clipped_cosine(&cv, &rv) * penalty;
            }
            *score += acc / rs.len() as f64;
        }
    }
    Ok(scores
        .into_iter()
        .map(|s| CIDER_SCALE * s / CIDER_MAX_N as f64)
        .collect())
}

/// Corpus CIDEr-D: the mean of [`cider_per_image`].
pub fn cider<T: Eq + Hash>(cands: &[Vec<T>], refs: &[Vec<Vec<T>>]) -> Result<f64> {
    let per = cider_per_image(cands, refs)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub cider: f64,
    /// Number of scored captions.
    pub n: usize,
    /// Mean candidate length in tokens.
    pub mean_length: f64,
}

pub fn score_corpus<T: Eq + Hash>(cands: &[Vec<T>], refs: &[Vec<Vec<T>>]) -> Result<EvalReport> {
    let b = bleu(cands, refs, 4)?;
    Ok(EvalReport {
        bleu1: b[0],
        bleu2: b[1],
        bleu3: b[2],
        bleu4: b[3],
        rouge_l: rouge_l(cands, refs)?,
        cider: cider(cands, refs)?,
        n: cands.len(),
        mean_length: cands.iter().map(Vec::len).sum::<usize>() as f64 / cands.len() as f64,
    })
}

/// Beam-decodes every record and scores the captions against the records'
/// own captions.
pub fn corpus_eval(
    checkpoint: &Checkpoint,
    records: &[DatasetRecord],
    beam_size: usize,
    max_len: usize,
    expected_fingerprint: Option<&str>,
) -> Result<EvalReport> {
    if let Some(fp) = expected_fingerprint {
        checkpoint.check_fingerprint(fp)?;
    }
    if records.is_empty() {
        return Err(Error::Domain("cannot evaluate an empty dataset".into()));
    }
    let mut cands = Vec::with_capacity(records.len());
    let mut refs = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let regions = r.region_tensors()?;
        if regions
            .iter()
            .any(|t| t.len() != checkpoint.params.dims.region)
        {
            return Err(Error::Config(format!(
                "record {i} region width does not match the model's {}",
                checkpoint.params.dims.region
            )));
        }
        let hyps = beam_decode(&checkpoint.params, &regions, beam_size, max_len, false)?;
        let best = &hyps[0];
        let words = best
            .tokens
            .iter()
            .map(|&t| checkpoint.vocab.token(t).map(str::to_string))
            .collect::<Result<Vec<_>>>()?;
        cands.push(words);
        refs.push(vec![r.words().to_vec()]);
    }
    score_corpus(&cands, &refs)
}
