//! Two-stage constrained beam search from keystrokes to characters.
//!
//! Stage one walks the segmentation lattice, so every partial segmentation
//! restores to a prefix of the keys; the scorer's chunk logits are
//! renormalized over the arcs leaving the current node. Stage two generates
//! one character per chunk and discounts each by a penalty proportional to
//! the edit distance between the chunk as typed and the character's reading.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keymap::KeySequence;
use crate::lexicon::{damerau, Lexicon};
use crate::scorer::{apply_extension, softmax, Extension, ScorerContract, SyllableLogits, SyllableToken, TaskDescriptor};
use crate::segmentation::{build_lattice_with, classify_mode, InputMode, PysegPath, SegLattice, SegmentConfig};
use crate::segmentation::{LatticeArc, Syllable};

/// Largest penalty a single step can receive.
pub const MAX_PENALTY: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_width_pyseg: usize,
    pub beam_width_char: usize,
    pub top_k: usize,
    pub alpha: f64,
    /// Chunks per segmentation that may be read as a one-edit typo. Zero
    /// disables typo correction.
    pub max_noise_chunks: usize,
    /// Weight of the segmentation log-probability in the final score.
    pub pyseg_weight: f64,
    /// Added to a syllable's logit when it is reached through a typo.
    pub noise_logit: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width_pyseg: 16,
            beam_width_char: 16,
            top_k: 5,
            alpha: 0.5,
            max_noise_chunks: 1,
            pyseg_weight: 1.0,
            noise_logit: -2.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.beam_width_pyseg < self.top_k || self.beam_width_char < self.top_k {
            return Err(Error::Config(format!(
                "beam widths ({}, {}) must be at least top_k ({}) and top_k at least 1",
                self.beam_width_pyseg, self.beam_width_char, self.top_k
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be a finite non-negative number, got {}", self.alpha)));
        }
        if !(self.pyseg_weight >= 0.0 && self.pyseg_weight.is_finite()) || !self.noise_logit.is_finite() {
            return Err(Error::Config("pyseg weight and noise logit must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub chars: String,
    pub pyseg: PysegPath,
    pub step_penalties: Vec<f64>,
    pub log_score: f64,
    pub pyseg_log_prob: f64,
    pub char_log_prob: f64,
    pub input_mode: InputMode,
}

/// Softmax of `logits` over the arcs leaving `consumed`, keyed by arc id.
///
/// Typo arcs are scored as their corrected syllable plus `noise_logit`, and
/// are excluded entirely when `noise_logit` is `None`. Arcs whose syllable is
/// missing from `logits` have probability zero. Returns an error when no arc
/// can be taken, which ends the hypothesis.
pub fn restricted_syllable_dist(
    logits: &SyllableLogits,
    lat: &SegLattice,
    consumed: usize,
    noise_logit: Option<f64>,
) -> Result<BTreeMap<u32, f64>> {
    if consumed > lat.len() {
        return Err(Error::Validation(format!("node {consumed} is past the end of the lattice")));
    }
    let mut legal: BTreeMap<u32, f64> = BTreeMap::new();
    for &id in lat.outgoing(consumed) {
        let arc = lat.arc(id);
        let offset = match (arc.syllable.is_noisy(), noise_logit) {
            (false, _) => 0.0,
            (true, Some(v)) => v,
            (true, None) => continue,
        };
        if let Some(&g) = logits.get(&SyllableToken::of(&arc.syllable)) {
            if g.is_finite() {
                legal.insert(id, g + offset);
            }
        }
    }
    let dist = softmax(&legal);
    if dist.is_empty() {
        return Err(Error::EmptyLattice(format!("no legal chunk at key {consumed}")));
    }
    Ok(dist)
}

/// Penalty for emitting `y` on chunk `s`: `alpha / key_len` times the edit
/// distance between the typed chunk and the closest of `y`'s readings,
/// capped just below one.
pub fn correction_penalty(s: &Syllable, y: char, lex: &Lexicon, alpha: f64) -> Result<f64> {
    let readings = lex.c2p_all(y, s.mode)?;
    let d = readings
        .iter()
        .map(|r| damerau(&s.raw_chunk, r))
        .min()
        .expect("every character has a reading");
    if d == 0 {
        return Ok(0.0);
    }
    let eps = alpha / s.key_len.max(1) as f64 * d as f64;
    Ok(eps.min(MAX_PENALTY))
}

/// `(1 - eps) * softmax(logits)`, left sub-normalized. Characters without a
/// penalty entry are treated as unpenalized.
pub fn adjusted_char_prob(logits: &BTreeMap<char, f64>, epsilons: &BTreeMap<char, f64>) -> BTreeMap<char, f64> {
    softmax(logits)
        .into_iter()
        .map(|(c, p)| {
            let eps = epsilons.get(&c).copied().unwrap_or(0.0);
            (c, (1.0 - eps) * p)
        })
        .collect()
}

#[derive(Debug, Clone)]
struct PysegHyp {
    node: usize,
    arcs: Vec<u32>,
    logp: f64,
    noise: usize,
}

#[derive(Debug, Clone)]
struct CharHyp {
    chars: Vec<char>,
    penalties: Vec<f64>,
    logp: f64,
}

fn by_score_then<T: Ord>(a: (f64, T), b: (f64, T)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1))
}

/// Beam search over segmentations. Returned paths are sorted by descending
/// log-probability.
pub fn decode_pysegs(
    task: &TaskDescriptor,
    lat: &SegLattice,
    scorer: &dyn ScorerContract,
    cfg: &DecodeConfig,
) -> Vec<(PysegPath, f64)> {
    let end = lat.len();
    let mut beam = vec![PysegHyp {
        node: 0,
        arcs: Vec::new(),
        logp: 0.0,
        noise: 0,
    }];
    let mut finished: Vec<PysegHyp> = Vec::new();
    if end == 0 {
        return Vec::new();
    }
    while !beam.is_empty() {
        let mut next = Vec::new();
        for hyp in &beam {
            let prefix: Vec<Syllable> = hyp.arcs.iter().map(|&a| lat.arc(a).syllable.clone()).collect();
            let mut tokens: Vec<SyllableToken> = lat
                .outgoing(hyp.node)
                .iter()
                .map(|&a| SyllableToken::of(&lat.arc(a).syllable))
                .collect();
            tokens.sort();
            tokens.dedup();
            let values = scorer.syllable_logits_for(task, lat.keys(), &prefix, &tokens);
            let logits: SyllableLogits = tokens
                .into_iter()
                .zip(values)
                .filter_map(|(t, v)| v.map(|v| (t, v)))
                .collect();
            let noise = (hyp.noise < cfg.max_noise_chunks).then_some(cfg.noise_logit);
            let Ok(dist) = restricted_syllable_dist(&logits, lat, hyp.node, noise) else {
                continue;
            };
            for (id, p) in dist {
                if p <= 0.0 {
                    continue;
                }
                let arc: &LatticeArc = lat.arc(id);
                let mut arcs = hyp.arcs.clone();
                arcs.push(id);
                let h = PysegHyp {
                    node: arc.to,
                    arcs,
                    logp: hyp.logp + p.ln(),
                    noise: hyp.noise + usize::from(arc.syllable.is_noisy()),
                };
                if h.node == end {
                    finished.push(h);
                } else {
                    next.push(h);
                }
            }
        }
        next.sort_by(|a, b| by_score_then((a.logp, &a.arcs), (b.logp, &b.arcs)));
        next.truncate(cfg.beam_width_pyseg);
        beam = next;
    }
    let mut out: Vec<(PysegPath, f64)> = finished
        .into_iter()
        .map(|h| {
            let syllables = h.arcs.iter().map(|&a| lat.arc(a).syllable.clone()).collect();
            (PysegPath::new(syllables), h.logp)
        })
        .collect();
    out.sort_by(|a, b| by_score_then((a.1, a.0.display_tagged()), (b.1, b.0.display_tagged())));
    out.truncate(cfg.beam_width_pyseg);
    out
}

/// Beam search over characters for one segmentation. Returns
/// `(chars, penalties, log-probability)` sorted by descending score.
pub fn decode_chars(
    task: &TaskDescriptor,
    x: &KeySequence,
    s: &PysegPath,
    scorer: &dyn ScorerContract,
    lex: &Lexicon,
    ext: &Extension,
    cfg: &DecodeConfig,
) -> Result<Vec<(String, Vec<f64>, f64)>> {
    let mut beam = vec![CharHyp {
        chars: Vec::new(),
        penalties: Vec::new(),
        logp: 0.0,
    }];
    for chunk in &s.syllables {
        let mut penalty_cache: HashMap<char, f64> = HashMap::new();
        // (score, hypothesis, char, penalty), materialized after pruning
        let mut expansions: Vec<(f64, usize, char, f64)> = Vec::new();
        for (h, hyp) in beam.iter().enumerate() {
            let raw = scorer.char_logits(task, x, s, &hyp.chars, ext);
            let logits = apply_extension(&raw, ext, &hyp.chars, lex);
            let mut eps = BTreeMap::new();
            for &c in logits.keys() {
                let e = match penalty_cache.get(&c) {
                    Some(&e) => e,
                    None => {
                        let e = correction_penalty(chunk, c, lex, cfg.alpha)?;
                        penalty_cache.insert(c, e);
                        e
                    }
                };
                eps.insert(c, e);
            }
            for (c, p) in adjusted_char_prob(&logits, &eps) {
                if p > 0.0 {
                    expansions.push((hyp.logp + p.ln(), h, c, eps[&c]));
                }
            }
        }
        expansions.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| beam[a.1].chars.cmp(&beam[b.1].chars))
                .then_with(|| a.2.cmp(&b.2))
        });
        expansions.truncate(cfg.beam_width_char);
        beam = expansions
            .into_iter()
            .map(|(logp, h, c, e)| {
                let mut chars = beam[h].chars.clone();
                chars.push(c);
                let mut penalties = beam[h].penalties.clone();
                penalties.push(e);
                CharHyp { chars, penalties, logp }
            })
            .collect();
    }
    Ok(beam
        .into_iter()
        .map(|h| (h.chars.into_iter().collect(), h.penalties, h.logp))
        .collect())
}

/// Combines per-segmentation results into the final ranked list: one entry
/// per distinct string keeping its best score, sorted by descending score
/// with ties broken by the string.
pub fn merge_candidates(mut all: Vec<Candidate>, top_k: usize) -> Vec<Candidate> {
    let mut best: HashMap<String, usize> = HashMap::new();
    let mut keep: Vec<Option<Candidate>> = Vec::new();
    for cand in all.drain(..) {
        match best.get(&cand.chars) {
            Some(&i) => {
                let cur = keep[i].as_ref().expect("slot filled");
                let better = cand.log_score > cur.log_score
                    || (cand.log_score == cur.log_score
                        && cand.pyseg.display_tagged() < cur.pyseg.display_tagged());
                if better {
                    keep[i] = Some(cand);
                }
            }
            None => {
                best.insert(cand.chars.clone(), keep.len());
                keep.push(Some(cand));
            }
        }
    }
    let mut out: Vec<Candidate> = keep.into_iter().flatten().collect();
    out.sort_by(|a, b| b.log_score.total_cmp(&a.log_score).then_with(|| a.chars.cmp(&b.chars)));
    out.truncate(top_k);
    out
}

/// Decodes `x` into ranked candidates.
pub fn decode(
    x: &KeySequence,
    scorer: &dyn ScorerContract,
    lex: &Lexicon,
    ext: &Extension,
    cfg: &DecodeConfig,
) -> Result<Vec<Candidate>> {
    decode_task(&TaskDescriptor::fk2c(), x, scorer, lex, ext, cfg)
}

pub fn decode_task(
    task: &TaskDescriptor,
    x: &KeySequence,
    scorer: &dyn ScorerContract,
    lex: &Lexicon,
    ext: &Extension,
    cfg: &DecodeConfig,
) -> Result<Vec<Candidate>> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(Error::Validation("empty key sequence".into()));
    }
    let seg = SegmentConfig {
        allow_noise: cfg.max_noise_chunks > 0,
        max_noise_chunks: cfg.max_noise_chunks,
        ..SegmentConfig::default()
    };
    let lat = build_lattice_with(x, lex, &seg)?;
    let pysegs = decode_pysegs(task, &lat, scorer, cfg);
    if pysegs.is_empty() {
        return Err(Error::EmptyLattice(format!("no segmentation of {x} has positive probability")));
    }
    let mut all = Vec::new();
    for (s, pyseg_log_prob) in pysegs {
        let input_mode = classify_mode(&s);
        for (chars, step_penalties, char_log_prob) in decode_chars(task, x, &s, scorer, lex, ext, cfg)? {
            all.push(Candidate {
                chars,
                pyseg: s.clone(),
                step_penalties,
                log_score: cfg.pyseg_weight * pyseg_log_prob + char_log_prob,
                pyseg_log_prob,
                char_log_prob,
                input_mode,
            });
        }
    }
    Ok(merge_candidates(all, cfg.top_k))
}
