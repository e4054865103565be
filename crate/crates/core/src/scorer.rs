//! Pluggable next-token scorers for the two decoding stages.
//!
//! A [`ScorerContract`] produces logits for the next pinyin chunk given the
//! keys and the chunks so far, and logits for the next character given the
//! full segmentation and the characters so far. [`NGramScorer`] is the
//! bundled implementation: add-k smoothed character n-grams, a syllable
//! bigram for the segmentation stage and a pinyin compatibility channel
//! taken from the lexicon.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keymap::{KeyLayout, KeySequence};
use crate::lexicon::{ChunkMode, Lexicon, UserWord};
use crate::segmentation::{build_lattice_with, PysegPath, SegmentConfig, Syllable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[serde(rename = "fk2c")]
    Fk2c,
    IntelAssoc,
    ConvAssist,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Fk2c, TaskKind::IntelAssoc, TaskKind::ConvAssist];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Fk2c => "fk2c",
            TaskKind::IntelAssoc => "intel_assoc",
            TaskKind::ConvAssist => "conv_assist",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub kind: TaskKind,
    pub prompt_text: String,
}

impl TaskDescriptor {
    pub fn new(kind: TaskKind, prompt_text: impl Into<String>) -> Result<Self> {
        let prompt_text = prompt_text.into();
        if prompt_text.trim().is_empty() {
            return Err(Error::Config("task prompt must not be empty".into()));
        }
        Ok(TaskDescriptor { kind, prompt_text })
    }

    pub fn fk2c() -> Self {
        TaskDescriptor {
            kind: TaskKind::Fk2c,
            prompt_text: "Segment the keystrokes into pinyin, then convert the pinyin into Chinese characters."
                .into(),
        }
    }
}

/// Vocabulary item of the segmentation stage.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SyllableToken {
    pub text: String,
    pub mode: ChunkMode,
}

impl SyllableToken {
    pub fn new(text: impl Into<String>, mode: ChunkMode) -> Self {
        SyllableToken {
            text: text.into(),
            mode,
        }
    }

    /// Token a lattice chunk is scored as. Noisy chunks score as the syllable
    /// they were corrected to.
    pub fn of(s: &Syllable) -> Self {
        SyllableToken::new(s.canonical.clone(), s.mode)
    }
}

/// Optional side information that conditions decoding.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Extension {
    #[serde(default)]
    pub context_text: Option<String>,
    #[serde(default)]
    pub user_profile: Vec<String>,
    #[serde(default)]
    pub user_words: Vec<UserWord>,
}

impl Extension {
    pub fn is_empty(&self) -> bool {
        self.context_text.as_deref().is_none_or(str::is_empty)
            && self.user_profile.is_empty()
            && self.user_words.is_empty()
    }
}

pub type SyllableLogits = BTreeMap<SyllableToken, f64>;
pub type CharLogits = BTreeMap<char, f64>;

/// Next-token logits for both decoding stages. Tokens missing from a
/// returned map have zero probability.
pub trait ScorerContract: Send + Sync {
    fn syllable_logits(&self, task: &TaskDescriptor, x: &KeySequence, prefix: &[Syllable]) -> SyllableLogits;

    /// The entries of [`syllable_logits`](Self::syllable_logits) for `tokens`
    /// only. Scorers with a large vocabulary should override this.
    fn syllable_logits_for(
        &self,
        task: &TaskDescriptor,
        x: &KeySequence,
        prefix: &[Syllable],
        tokens: &[SyllableToken],
    ) -> Vec<Option<f64>> {
        let all = self.syllable_logits(task, x, prefix);
        tokens.iter().map(|t| all.get(t).copied()).collect()
    }

    /// Logits for the character at position `y_prefix.len()` of `s`.
    fn char_logits(
        &self,
        task: &TaskDescriptor,
        x: &KeySequence,
        s: &PysegPath,
        y_prefix: &[char],
        ext: &Extension,
    ) -> CharLogits;
}

/// Numerically stable softmax over a logit map.
pub fn softmax<K: Ord + Clone>(logits: &BTreeMap<K, f64>) -> BTreeMap<K, f64> {
    let max = logits.values().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return BTreeMap::new();
    }
    let z: f64 = logits.values().map(|&v| (v - max).exp()).sum();
    logits.iter().map(|(k, &v)| (k.clone(), (v - max).exp() / z)).collect()
}

/// Boosts continuations of user words.
///
/// For every user word, the character that would extend the longest suffix
/// of `y_prefix` matching a prefix of the word (the empty prefix always
/// matches) has its probability multiplied by the word's boost. The result
/// is still a logit map, so the next softmax renormalizes.
pub fn apply_extension(logits: &CharLogits, ext: &Extension, y_prefix: &[char], lex: &Lexicon) -> CharLogits {
    let mut out = logits.clone();
    for word in &ext.user_words {
        let chars: Vec<char> = word.word.chars().collect();
        if chars.iter().any(|c| !lex.contains_char(*c)) || word.boost <= 1.0 {
            continue;
        }
        let matched = (0..chars.len())
            .rev()
            .find(|&k| y_prefix.ends_with(&chars[..k]))
            .unwrap_or(0);
        if let Some(v) = out.get_mut(&chars[matched]) {
            *v += word.boost.ln();
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NGramConfig {
    /// Character n-gram order, 1 to 3.
    pub order: usize,
    pub add_k: f64,
    /// Mixture weights for orders 1..=order. `None` uses the highest order
    /// alone, backing off only when its context was never seen.
    pub interpolation: Option<Vec<f64>>,
    pub syllable_add_k: f64,
    /// Probability that the first chunk is typed abbreviated.
    pub abbreviation_prior: f64,
    /// Probability that a chunk is typed in a different mode (perfect or
    /// abbreviated) from the chunk before it.
    pub mode_switch: f64,
    /// Channel weight of characters whose reading is one edit away from the
    /// chunk's syllable. Zero proposes only exact readings.
    pub fuzzy_leak: f64,
    /// Most frequent characters proposed per neighbouring reading.
    pub leak_per_reading: usize,
    /// Mixture weight of profile unigram priors.
    pub profile_weight: f64,
    /// Adds to every chunk logit the log-probability of completing the rest
    /// of the keys after that chunk, so chunk choices are scored against
    /// the whole input.
    pub lookahead: bool,
    /// Weight of a one-edit typo chunk in the lookahead.
    pub lookahead_noise: f64,
}

impl Default for NGramConfig {
    fn default() -> Self {
        NGramConfig {
            order: 3,
            add_k: 0.01,
            interpolation: Some(vec![0.1, 0.3, 0.6]),
            syllable_add_k: 0.01,
            abbreviation_prior: 0.3,
            mode_switch: 0.1,
            fuzzy_leak: 0.1,
            leak_per_reading: 3,
            profile_weight: 0.3,
            lookahead: true,
            lookahead_noise: 0.01,
        }
    }
}

impl NGramConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.order) {
            return Err(Error::Config(format!("n-gram order {} outside 1..=3", self.order)));
        }
        if !(self.add_k > 0.0 && self.add_k.is_finite()) || !(self.syllable_add_k > 0.0) {
            return Err(Error::Config("add-k constants must be positive".into()));
        }
        if let Some(w) = &self.interpolation {
            if w.len() != self.order || w.iter().any(|&x| !(x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config(format!(
                    "interpolation needs {} non-negative weights with a positive sum",
                    self.order
                )));
            }
        }
        if !(0.0..1.0).contains(&self.abbreviation_prior)
            || !(0.0..1.0).contains(&self.mode_switch)
            || !(0.0..=1.0).contains(&self.fuzzy_leak)
        {
            return Err(Error::Config("priors must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.lookahead_noise) {
            return Err(Error::Config("lookahead noise weight must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.profile_weight) {
            return Err(Error::Config("profile weight must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

const BOS: u32 = u32::MAX;

/// Add-k smoothed character n-gram model with a syllable bigram.
#[derive(Debug)]
pub struct NGramScorer {
    cfg: NGramConfig,
    lex: Arc<Lexicon>,
    char_ids: HashMap<char, u32>,
    unigram: Vec<u64>,
    tokens: u64,
    bigram: HashMap<(u32, u32), u64>,
    bigram_ctx: HashMap<u32, u64>,
    trigram: HashMap<(u32, u32, u32), u64>,
    trigram_ctx: HashMap<(u32, u32), u64>,
    syl_unigram: Vec<u64>,
    syl_tokens: u64,
    syl_bigram: HashMap<(u32, u32), u64>,
    syl_ctx: HashMap<u32, u64>,
    profiles: BTreeMap<String, Vec<u64>>,
    skipped: u64,
    channels: Arc<Channels>,
    lookaheads: Mutex<Vec<(KeySequence, Arc<Lookahead>)>>,
}

impl Clone for NGramScorer {
    fn clone(&self) -> Self {
        NGramScorer {
            cfg: self.cfg.clone(),
            lex: self.lex.clone(),
            char_ids: self.char_ids.clone(),
            unigram: self.unigram.clone(),
            tokens: self.tokens,
            bigram: self.bigram.clone(),
            bigram_ctx: self.bigram_ctx.clone(),
            trigram: self.trigram.clone(),
            trigram_ctx: self.trigram_ctx.clone(),
            syl_unigram: self.syl_unigram.clone(),
            syl_tokens: self.syl_tokens,
            syl_bigram: self.syl_bigram.clone(),
            syl_ctx: self.syl_ctx.clone(),
            profiles: self.profiles.clone(),
            skipped: self.skipped,
            channels: self.channels.clone(),
            lookaheads: Mutex::new(Vec::new()),
        }
    }
}

const LOOKAHEAD_CACHE: usize = 32;

/// Per key position, the log-probability mass of finishing the input after
/// each chunk token that can start there.
#[derive(Debug)]
struct Lookahead {
    future: Vec<BTreeMap<SyllableToken, f64>>,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Lexicon-derived character lists per chunk, computed once.
#[derive(Debug)]
struct Channels {
    exact: Vec<Vec<u32>>,
    /// Characters with a reading one edit from the syllable and none equal.
    near: Vec<Vec<u32>>,
    abbreviated: Vec<Vec<u32>>,
    expansions: Vec<Vec<u32>>,
}

impl Channels {
    fn build(lex: &Lexicon, char_ids: &HashMap<char, u32>, leak_per_reading: usize) -> Self {
        let ids = |it: &mut dyn Iterator<Item = &crate::lexicon::CharEntry>| -> Vec<u32> {
            it.map(|c| char_ids[&c.ch]).collect()
        };
        let exact: Vec<Vec<u32>> = lex
            .syllables()
            .iter()
            .map(|s| ids(&mut lex.chars_for_syllable(&s.text)))
            .collect();
        let near = lex
            .syllables()
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut out: Vec<u32> = Vec::new();
                for (other, d) in lex.fuzzy_expansions(&s.text, KeyLayout::TwentySixKey) {
                    if d == 0 {
                        continue;
                    }
                    for c in lex.chars_for_syllable(&other).take(leak_per_reading) {
                        let id = char_ids[&c.ch];
                        if !exact[i].contains(&id) && !out.contains(&id) {
                            out.push(id);
                        }
                    }
                }
                out
            })
            .collect();
        let abbreviated = lex
            .abbreviations()
            .iter()
            .map(|a| ids(&mut lex.chars_for_abbreviation(a)))
            .collect();
        let expansions = lex
            .abbreviations()
            .iter()
            .map(|a| lex.expand_abbreviation(a).map(|s| lex.syllable_id(&s.text).unwrap()).collect())
            .collect();
        Channels {
            exact,
            near,
            abbreviated,
            expansions,
        }
    }
}

/// Trains the bundled scorer on a one-sentence-per-line corpus.
pub fn train_ngram(corpus: &str, lex: Arc<Lexicon>, cfg: NGramConfig) -> Result<NGramScorer> {
    cfg.validate()?;
    let mut scorer = NGramScorer::empty(lex, cfg);
    let mut sentences = 0usize;
    for line in corpus.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        sentences += 1;
        scorer.observe(line);
    }
    if sentences == 0 {
        return Err(Error::Validation("empty corpus".into()));
    }
    if scorer.skipped > 0 {
        log::warn!("skipped {} characters outside the lexicon", scorer.skipped);
    }
    Ok(scorer)
}

impl NGramScorer {
    fn empty(lex: Arc<Lexicon>, cfg: NGramConfig) -> Self {
        let char_ids = lex.chars().iter().enumerate().map(|(i, c)| (c.ch, i as u32)).collect();
        let channels = Arc::new(Channels::build(&lex, &char_ids, cfg.leak_per_reading));
        NGramScorer {
            channels,
            lookaheads: Mutex::new(Vec::new()),
            unigram: vec![0; lex.char_count()],
            syl_unigram: vec![0; lex.syllables().len()],
            cfg,
            lex,
            char_ids,
            tokens: 0,
            bigram: HashMap::new(),
            bigram_ctx: HashMap::new(),
            trigram: HashMap::new(),
            trigram_ctx: HashMap::new(),
            syl_tokens: 0,
            syl_bigram: HashMap::new(),
            syl_ctx: HashMap::new(),
            profiles: BTreeMap::new(),
            skipped: 0,
        }
    }

    fn observe(&mut self, sentence: &str) {
        let mut ids = Vec::with_capacity(sentence.len() / 3);
        for c in sentence.chars() {
            match self.char_ids.get(&c) {
                Some(&id) => ids.push(id),
                None => self.skipped += 1,
            }
        }
        let (mut a, mut b) = (BOS, BOS);
        let mut prev_syl = BOS;
        for &c in &ids {
            self.add_char_counts(a, b, c, 1);
            let reading = &self.lex.chars()[c as usize].pinyins[0];
            let syl = self.lex.syllable_id(reading).expect("readings are in the inventory");
            self.add_syllable_counts(prev_syl, syl, 1);
            prev_syl = syl;
            a = b;
            b = c;
        }
    }

    fn add_char_counts(&mut self, a: u32, b: u32, c: u32, n: u64) {
        self.unigram[c as usize] += n;
        self.tokens += n;
        *self.bigram.entry((b, c)).or_default() += n;
        *self.bigram_ctx.entry(b).or_default() += n;
        *self.trigram.entry((a, b, c)).or_default() += n;
        *self.trigram_ctx.entry((a, b)).or_default() += n;
    }

    fn add_syllable_counts(&mut self, prev: u32, syl: u32, n: u64) {
        self.syl_unigram[syl as usize] += n;
        self.syl_tokens += n;
        *self.syl_bigram.entry((prev, syl)).or_default() += n;
        *self.syl_ctx.entry(prev).or_default() += n;
    }

    pub fn config(&self) -> &NGramConfig {
        &self.cfg
    }

    /// The same counts under a different configuration.
    pub fn with_config(&self, cfg: NGramConfig) -> Result<NGramScorer> {
        cfg.validate()?;
        let mut out = self.clone();
        if cfg.leak_per_reading != self.cfg.leak_per_reading {
            let char_ids = self.lex.chars().iter().enumerate().map(|(i, c)| (c.ch, i as u32)).collect();
            out.channels = Arc::new(Channels::build(&self.lex, &char_ids, cfg.leak_per_reading));
        }
        out.cfg = cfg;
        Ok(out)
    }

    pub fn lexicon(&self) -> &Arc<Lexicon> {
        &self.lex
    }

    /// Characters dropped during training because the lexicon lacks them.
    pub fn skipped_chars(&self) -> u64 {
        self.skipped
    }

    pub fn vocab_size(&self) -> usize {
        self.unigram.len()
    }

    /// Adds a unigram prior selected by a user-profile tag.
    pub fn add_profile_prior(&mut self, tag: &str, text: &str) {
        let counts = self
            .profiles
            .entry(tag.to_string())
            .or_insert_with(|| vec![0; self.unigram.len()]);
        for c in text.chars() {
            if let Some(&id) = self.char_ids.get(&c) {
                counts[id as usize] += 1;
            }
        }
    }

    pub fn profile_tags(&self) -> impl Iterator<Item = &str> {
        self.profiles.keys().map(String::as_str)
    }

    fn addk(&self, count: u64, ctx: u64) -> f64 {
        (count as f64 + self.cfg.add_k) / (ctx as f64 + self.cfg.add_k * self.unigram.len() as f64)
    }

    fn order_prob(&self, n: usize, a: u32, b: u32, c: u32) -> Option<f64> {
        match n {
            1 => Some(self.addk(self.unigram[c as usize], self.tokens)),
            2 => {
                let ctx = *self.bigram_ctx.get(&b)?;
                Some(self.addk(self.bigram.get(&(b, c)).copied().unwrap_or(0), ctx))
            }
            _ => {
                let ctx = *self.trigram_ctx.get(&(a, b))?;
                Some(self.addk(self.trigram.get(&(a, b, c)).copied().unwrap_or(0), ctx))
            }
        }
    }

    /// Conditional probability of `c` after the history `(a, b)`; either may be
    /// the sentence-start marker.
    fn prob_ids(&self, a: u32, b: u32, c: u32) -> f64 {
        match &self.cfg.interpolation {
            None => (1..=self.cfg.order)
                .rev()
                .find_map(|n| self.order_prob(n, a, b, c))
                .expect("unigram is always defined"),
            Some(weights) => {
                let mut num = 0.0;
                let mut den = 0.0;
                for (i, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    if let Some(p) = self.order_prob(i + 1, a, b, c) {
                        num += w * p;
                        den += w;
                    }
                }
                if den == 0.0 {
                    self.order_prob(1, a, b, c).expect("unigram is always defined")
                } else {
                    num / den
                }
            }
        }
    }

    fn history(&self, ext: &Extension, y_prefix: &[char]) -> (u32, u32) {
        let mut a = BOS;
        let mut b = BOS;
        let context = ext.context_text.as_deref().unwrap_or("");
        for c in context.chars().chain(y_prefix.iter().copied()) {
            match self.char_ids.get(&c) {
                Some(&id) => {
                    a = b;
                    b = id;
                }
                None => {
                    a = BOS;
                    b = BOS;
                }
            }
        }
        (a, b)
    }

    /// `p(c | history)` under the smoothed model, with `history` given as text.
    pub fn char_prob(&self, c: char, history: &[char]) -> Option<f64> {
        let id = *self.char_ids.get(&c)?;
        let (a, b) = self.history(&Extension::default(), history);
        Some(self.prob_ids(a, b, id))
    }

    fn syllable_prob(&self, prev: Option<u32>, syl: u32) -> f64 {
        let v = self.syl_unigram.len() as f64;
        let k = self.cfg.syllable_add_k;
        let unigram = (self.syl_unigram[syl as usize] as f64 + k) / (self.syl_tokens as f64 + k * v);
        let Some(prev) = prev else { return unigram };
        match self.syl_ctx.get(&prev) {
            Some(&ctx) => {
                let n = self.syl_bigram.get(&(prev, syl)).copied().unwrap_or(0);
                (n as f64 + k) / (ctx as f64 + k * v)
            }
            None => unigram,
        }
    }

    fn mode_prob(&self, prev: Option<ChunkMode>, next: ChunkMode) -> f64 {
        let abbreviated = match prev {
            None => self.cfg.abbreviation_prior,
            Some(ChunkMode::Perfect) => self.cfg.mode_switch,
            Some(ChunkMode::Abbreviated) => 1.0 - self.cfg.mode_switch,
        };
        match next {
            ChunkMode::Perfect => 1.0 - abbreviated,
            ChunkMode::Abbreviated => abbreviated,
        }
    }

    /// Context-free probability of a chunk token, used for the lookahead.
    fn token_prior(&self, t: &SyllableToken) -> f64 {
        match t.mode {
            ChunkMode::Perfect => self.lex.syllable_id(&t.text).map_or(0.0, |id| self.syllable_prob(None, id)),
            ChunkMode::Abbreviated => self.lex.abbreviation_id(&t.text).map_or(0.0, |id| {
                self.channels.expansions[id as usize]
                    .iter()
                    .map(|&s| self.syllable_prob(None, s))
                    .sum()
            }),
        }
    }

    fn build_lookahead(&self, x: &KeySequence) -> Lookahead {
        let m = x.len();
        let seg = SegmentConfig {
            allow_noise: self.cfg.lookahead_noise > 0.0,
            max_noise_chunks: 1,
            ..SegmentConfig::default()
        };
        let Ok(lat) = build_lattice_with(x, &self.lex, &seg) else {
            return Lookahead {
                future: vec![BTreeMap::new(); m + 1],
            };
        };
        let noise = self.cfg.lookahead_noise.ln();
        let modes = [ChunkMode::Perfect, ChunkMode::Abbreviated];
        // beta[node][mode of the chunk that ended at node]
        let mut beta = vec![[f64::NEG_INFINITY; 2]; m + 1];
        beta[m] = [0.0, 0.0];
        let mut future = vec![BTreeMap::new(); m + 1];
        let mut priors: HashMap<SyllableToken, f64> = HashMap::new();
        for node in (0..m).rev() {
            let mut here: BTreeMap<SyllableToken, f64> = BTreeMap::new();
            for &id in lat.outgoing(node) {
                let arc = lat.arc(id);
                let token = SyllableToken::of(&arc.syllable);
                let mode_idx = usize::from(token.mode == ChunkMode::Abbreviated);
                let w = if arc.syllable.is_noisy() { noise } else { 0.0 };
                let v = w + beta[arc.to][mode_idx];
                let e = here.entry(token).or_insert(f64::NEG_INFINITY);
                *e = log_add(*e, v);
            }
            for (prev_idx, prev) in modes.iter().enumerate() {
                let mut total = f64::NEG_INFINITY;
                for (token, &fut) in &here {
                    let prior = *priors.entry(token.clone()).or_insert_with(|| self.token_prior(token).ln());
                    total = log_add(total, self.mode_prob(Some(*prev), token.mode).ln() + prior + fut);
                }
                beta[node][prev_idx] = total;
            }
            future[node] = here;
        }
        Lookahead { future }
    }

    fn lookahead(&self, x: &KeySequence) -> Arc<Lookahead> {
        let mut cache = self.lookaheads.lock().expect("lookahead cache poisoned");
        if let Some((_, la)) = cache.iter().find(|(k, _)| k == x) {
            return la.clone();
        }
        let la = Arc::new(self.build_lookahead(x));
        if cache.len() >= LOOKAHEAD_CACHE {
            cache.remove(0);
        }
        cache.push((x.clone(), la.clone()));
        la
    }

    fn profile_priors(&self, ext: &Extension) -> Vec<(&Vec<u64>, u64)> {
        if self.cfg.profile_weight == 0.0 {
            return Vec::new();
        }
        ext.user_profile
            .iter()
            .filter_map(|t| self.profiles.get(t))
            .map(|counts| (counts, counts.iter().sum()))
            .collect()
    }

    /// Serializes all counts as a versioned TSV dump.
    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        let ch = |id: u32| -> String {
            if id == BOS {
                "<s>".into()
            } else {
                self.lex.chars()[id as usize].ch.to_string()
            }
        };
        let syl = |id: u32| -> String {
            if id == BOS {
                "<s>".into()
            } else {
                self.lex.syllable(id).text.clone()
            }
        };
        writeln!(out, "#imeforge-ngram\t1")?;
        writeln!(out, "config\t{}", serde_json::to_string(&self.cfg)?)?;
        for (i, &n) in self.unigram.iter().enumerate() {
            if n > 0 {
                writeln!(out, "u\t{}\t{n}", ch(i as u32))?;
            }
        }
        let mut tri: Vec<_> = self.trigram.iter().collect();
        tri.sort();
        for (&(a, b, c), &n) in tri {
            writeln!(out, "t\t{}\t{}\t{}\t{n}", ch(a), ch(b), ch(c))?;
        }
        for (i, &n) in self.syl_unigram.iter().enumerate() {
            if n > 0 {
                writeln!(out, "su\t{}\t{n}", syl(i as u32))?;
            }
        }
        let mut sb: Vec<_> = self.syl_bigram.iter().collect();
        sb.sort();
        for (&(a, b), &n) in sb {
            writeln!(out, "sb\t{}\t{}\t{n}", syl(a), syl(b))?;
        }
        for (tag, counts) in &self.profiles {
            for (i, &n) in counts.iter().enumerate() {
                if n > 0 {
                    writeln!(out, "p\t{tag}\t{}\t{n}", ch(i as u32))?;
                }
            }
        }
        writeln!(out, "skipped\t{}", self.skipped)?;
        Ok(())
    }

    /// Reads a dump written by [`save`](Self::save). Counts involving
    /// characters or syllables unknown to `lex` are dropped.
    pub fn load<R: BufRead>(input: R, lex: Arc<Lexicon>) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        match lines.next() {
            Some((_, Ok(h))) if h.trim_end() == "#imeforge-ngram\t1" => {}
            _ => return Err(Error::parse(1, "missing #imeforge-ngram version 1 header")),
        }
        let mut scorer: Option<NGramScorer> = None;
        let mut pending_lex = Some(lex);
        for (i, line) in lines {
            let line = line?;
            let lineno = i + 1;
            let f: Vec<&str> = line.split('\t').collect();
            if f[0] == "config" {
                let cfg: NGramConfig = serde_json::from_str(f.get(1).copied().unwrap_or(""))
                    .map_err(|e| Error::parse(lineno, e.to_string()))?;
                cfg.validate()?;
                let lex = pending_lex.take().ok_or_else(|| Error::parse(lineno, "duplicate config"))?;
                scorer = Some(NGramScorer::empty(lex, cfg));
                continue;
            }
            let s = scorer
                .as_mut()
                .ok_or_else(|| Error::parse(lineno, "counts before config"))?;
            let count = |field: Option<&&str>| -> Result<u64> {
                field
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::parse(lineno, "bad count"))
            };
            let cid = |s: &NGramScorer, t: &str| -> Option<u32> {
                if t == "<s>" {
                    Some(BOS)
                } else {
                    let mut cs = t.chars();
                    let c = cs.next()?;
                    cs.next().is_none().then_some(())?;
                    s.char_ids.get(&c).copied()
                }
            };
            let sid = |s: &NGramScorer, t: &str| -> Option<u32> {
                if t == "<s>" {
                    Some(BOS)
                } else {
                    s.lex.syllable_id(t)
                }
            };
            match f[0] {
                "u" if f.len() == 3 => {
                    // unigrams are implied by the trigram rows
                    count(f.get(2))?;
                }
                "t" if f.len() == 5 => {
                    let n = count(f.get(4))?;
                    if let (Some(a), Some(b), Some(c)) = (cid(s, f[1]), cid(s, f[2]), cid(s, f[3])) {
                        if c != BOS {
                            s.add_char_counts(a, b, c, n);
                        }
                    }
                }
                "su" if f.len() == 3 => {
                    count(f.get(2))?;
                }
                "sb" if f.len() == 4 => {
                    let n = count(f.get(3))?;
                    if let (Some(a), Some(b)) = (sid(s, f[1]), sid(s, f[2])) {
                        if b != BOS {
                            s.add_syllable_counts(a, b, n);
                        }
                    }
                }
                "p" if f.len() == 4 => {
                    let n = count(f.get(3))?;
                    if let Some(c) = cid(s, f[2]).filter(|&c| c != BOS) {
                        let v = s.unigram.len();
                        s.profiles.entry(f[1].to_string()).or_insert_with(|| vec![0; v])[c as usize] += n;
                    }
                }
                "skipped" if f.len() == 2 => s.skipped = count(f.get(1))?,
                _ => return Err(Error::parse(lineno, format!("unrecognized record {:?}", f[0]))),
            }
        }
        scorer.ok_or_else(|| Error::parse(1, "missing config record"))
    }
}

impl ScorerContract for NGramScorer {
    fn syllable_logits(&self, task: &TaskDescriptor, x: &KeySequence, prefix: &[Syllable]) -> SyllableLogits {
        let mut tokens: Vec<SyllableToken> = self
            .lex
            .syllables()
            .iter()
            .map(|s| SyllableToken::new(s.text.clone(), ChunkMode::Perfect))
            .collect();
        tokens.extend(
            self.lex
                .abbreviations()
                .iter()
                .map(|a| SyllableToken::new(a.clone(), ChunkMode::Abbreviated)),
        );
        let values = self.syllable_logits_for(task, x, prefix, &tokens);
        tokens
            .into_iter()
            .zip(values)
            .filter_map(|(t, v)| v.map(|v| (t, v)))
            .collect()
    }

    fn syllable_logits_for(
        &self,
        _task: &TaskDescriptor,
        x: &KeySequence,
        prefix: &[Syllable],
        tokens: &[SyllableToken],
    ) -> Vec<Option<f64>> {
        let prev = match prefix.last() {
            None => Some(BOS),
            Some(s) if s.mode == ChunkMode::Perfect => self.lex.syllable_id(&s.canonical),
            Some(_) => None,
        };
        let prev_mode = prefix.last().map(|s| s.mode);
        let node: usize = prefix.iter().map(|s| s.key_len).sum();
        let lookahead = self.cfg.lookahead.then(|| self.lookahead(x));
        tokens
            .iter()
            .map(|t| {
                let mode = self.mode_prob(prev_mode, t.mode);
                if mode == 0.0 {
                    return None;
                }
                let p = match t.mode {
                    ChunkMode::Perfect => self.syllable_prob(prev, self.lex.syllable_id(&t.text)?),
                    ChunkMode::Abbreviated => {
                        let id = self.lex.abbreviation_id(&t.text)?;
                        self.channels.expansions[id as usize]
                            .iter()
                            .map(|&s| self.syllable_prob(prev, s))
                            .sum()
                    }
                };
                let future = match &lookahead {
                    Some(la) => *la.future.get(node)?.get(t)?,
                    None => 0.0,
                };
                Some(mode.ln() + p.ln() + future)
            })
            .collect()
    }

    fn char_logits(
        &self,
        _task: &TaskDescriptor,
        _x: &KeySequence,
        s: &PysegPath,
        y_prefix: &[char],
        ext: &Extension,
    ) -> CharLogits {
        let Some(chunk) = s.syllables.get(y_prefix.len()) else {
            return BTreeMap::new();
        };
        let mut channel: Vec<(u32, f64)> = Vec::new();
        match chunk.mode {
            ChunkMode::Abbreviated => {
                if let Some(id) = self.lex.abbreviation_id(&chunk.canonical) {
                    channel.extend(self.channels.abbreviated[id as usize].iter().map(|&c| (c, 0.0)));
                }
            }
            ChunkMode::Perfect => {
                if let Some(id) = self.lex.syllable_id(&chunk.canonical) {
                    channel.extend(self.channels.exact[id as usize].iter().map(|&c| (c, 0.0)));
                    if self.cfg.fuzzy_leak > 0.0 {
                        let leak = self.cfg.fuzzy_leak.ln();
                        channel.extend(self.channels.near[id as usize].iter().map(|&c| (c, leak)));
                    }
                }
            }
        }
        let (a, b) = self.history(ext, y_prefix);
        let profile = self.profile_priors(ext);
        let w = self.cfg.profile_weight;
        let v = self.unigram.len() as f64;
        let k = self.cfg.add_k;
        channel
            .into_iter()
            .map(|(id, chan)| {
                let mut p = self.prob_ids(a, b, id);
                if !profile.is_empty() {
                    let prior: f64 = profile
                        .iter()
                        .map(|(counts, total)| (counts[id as usize] as f64 + k) / (*total as f64 + k * v))
                        .sum::<f64>()
                        / profile.len() as f64;
                    p = (1.0 - w) * p + w * prior;
                }
                (self.lex.chars()[id as usize].ch, p.ln() + chan)
            })
            .collect()
    }
}

/// One supervised example for the generative loss.
#[derive(Debug, Clone)]
pub struct SftSample {
    pub task: TaskDescriptor,
    pub x: KeySequence,
    pub s: PysegPath,
    pub y: String,
    pub ext: Extension,
}

fn nll<K: Ord + Clone + fmt::Debug>(logits: &BTreeMap<K, f64>, gold: &K, what: &str) -> Result<f64> {
    let p = softmax(logits).get(gold).copied().unwrap_or(0.0);
    if p <= 0.0 {
        return Err(Error::ZeroProbability(format!("{what} {gold:?}")));
    }
    Ok(-p.ln())
}

/// `lambda * L_pysegs + L_words`, each the batch mean of the per-sample
/// summed negative log-likelihood. With `lambda = 0` only the character
/// loss remains.
pub fn sft_loss(scorer: &dyn ScorerContract, batch: &[SftSample], lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Config("lambda must be non-negative".into()));
    }
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let mut pyseg_total = 0.0;
    let mut word_total = 0.0;
    for sample in batch {
        let y: Vec<char> = sample.y.chars().collect();
        if y.len() != sample.s.len() {
            return Err(Error::Validation(format!(
                "segmentation has {} chunks but output {:?} has {} characters",
                sample.s.len(),
                sample.y,
                y.len()
            )));
        }
        if lambda > 0.0 {
            for i in 0..sample.s.len() {
                let logits = scorer.syllable_logits(&sample.task, &sample.x, &sample.s.syllables[..i]);
                let gold = SyllableToken::of(&sample.s.syllables[i]);
                pyseg_total += nll(&logits, &gold, "pinyin chunk")?;
            }
        }
        for j in 0..y.len() {
            let logits = scorer.char_logits(&sample.task, &sample.x, &sample.s, &y[..j], &sample.ext);
            word_total += nll(&logits, &y[j], "character")?;
        }
    }
    let n = batch.len() as f64;
    Ok(lambda * pyseg_total / n + word_total / n)
}
