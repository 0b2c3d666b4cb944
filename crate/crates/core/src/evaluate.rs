//! Corpus BLEU-4, paired bootstrap resampling, length buckets and
//! concatenated long-sentence test sets.
//!
//! All scoring is case-insensitive: tokens are lowercased before n-grams are
//! counted. Sentences are whitespace-tokenized strings.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Default source-length bucket edges; the last bucket is open-ended.
pub const DEFAULT_BOUNDARIES: [usize; 6] = [0, 10, 20, 30, 40, 50];

/// Sufficient statistics of one sentence or a whole corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    pub fn report(&self, smooth: bool) -> BleuReport {
        let mut precisions = [0.0; MAX_ORDER];
        for n in 0..MAX_ORDER {
            let (m, t) = (self.matches[n] as f64, self.totals[n] as f64);
            precisions[n] = if smooth && n > 0 {
                (m + 1.0) / (t + 1.0)
            } else if t == 0.0 {
                0.0
            } else {
                m / t
            };
        }
        let brevity_penalty = if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        let score = if precisions.contains(&0.0) {
            0.0
        } else {
            let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
            100.0 * brevity_penalty * mean_log.exp()
        };
        BleuReport {
            precisions,
            stats: *self,
            brevity_penalty,
            score,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    pub precisions: [f64; MAX_ORDER],
    pub stats: BleuStats,
    pub brevity_penalty: f64,
    /// In `[0, 100]`.
    pub score: f64,
}

impl BleuReport {
    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "bleu: {:.4}", self.score);
        for n in 0..MAX_ORDER {
            let _ = writeln!(
                s,
                "p{}: {:.6} ({}/{})",
                n + 1,
                self.precisions[n],
                self.stats.matches[n],
                self.stats.totals[n]
            );
        }
        let _ = writeln!(s, "bp: {:.6}", self.brevity_penalty);
        let _ = writeln!(s, "hyp_len: {}", self.stats.hyp_len);
        let _ = writeln!(s, "ref_len: {}", self.stats.ref_len);
        s
    }

    pub const TSV_HEADER: &'static str = "bleu\tp1\tp2\tp3\tp4\tbp\thyp_len\tref_len";

    pub fn tsv_row(&self) -> String {
        let p = &self.precisions;
        format!(
            "{:.4}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
            self.score, p[0], p[1], p[2], p[3], self.brevity_penalty, self.stats.hyp_len, self.stats.ref_len
        )
    }
}

fn lower_tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Statistics of one hypothesis against its references: clipped n-gram
/// matches (clip = max count over references) and the closest reference
/// length, shorter on ties.
pub fn sentence_stats(hyp: &str, refs: &[String]) -> Result<BleuStats> {
    if refs.is_empty() {
        return Err(Error::contract("every hypothesis needs at least one reference"));
    }
    let h = lower_tokens(hyp);
    let rs: Vec<Vec<String>> = refs.iter().map(|r| lower_tokens(r)).collect();
    let mut st = BleuStats {
        hyp_len: h.len() as u64,
        ..Default::default()
    };
    st.ref_len = rs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(h.len()), l))
        .expect("non-empty") as u64;
    for n in 1..=MAX_ORDER {
        let hc = ngram_counts(&h, n);
        let mut max_ref: HashMap<&[String], u64> = HashMap::new();
        for r in &rs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        st.totals[n - 1] = h.len().saturating_sub(n - 1) as u64;
        st.matches[n - 1] = hc
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
    }
    Ok(st)
}

fn all_sentence_stats(hyps: &[String], ref_sets: &[Vec<String>]) -> Result<Vec<BleuStats>> {
    if hyps.is_empty() {
        return Err(Error::contract("BLEU needs at least one hypothesis"));
    }
    if hyps.len() != ref_sets.len() {
        return Err(Error::contract(format!(
            "{} hypotheses but {} reference sets",
            hyps.len(),
            ref_sets.len()
        )));
    }
    hyps.iter().zip(ref_sets).map(|(h, r)| sentence_stats(h, r)).collect()
}

/// Corpus-level BLEU-4. `ref_sets[i]` holds every reference of sentence `i`.
pub fn bleu4(hyps: &[String], ref_sets: &[Vec<String>], smooth: bool) -> Result<BleuReport> {
    let mut total = BleuStats::default();
    for s in all_sentence_stats(hyps, ref_sets)? {
        total.add(&s);
    }
    Ok(total.report(smooth))
}

/// Regroups parallel reference files (one `Vec` per file) into per-sentence
/// reference sets.
pub fn reference_sets(files: &[Vec<String>]) -> Result<Vec<Vec<String>>> {
    let Some(first) = files.first() else {
        return Err(Error::contract("at least one reference file is required"));
    };
    if let Some(bad) = files.iter().find(|f| f.len() != first.len()) {
        return Err(Error::contract(format!(
            "reference files disagree in length ({} vs {})",
            first.len(),
            bad.len()
        )));
    }
    Ok((0..first.len()).map(|i| files.iter().map(|f| f[i].clone()).collect()).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapReport {
    pub resamples: usize,
    pub seed: u64,
    pub bleu_a: f64,
    pub bleu_b: f64,
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
    /// Fraction of resamples with BLEU(A) <= BLEU(B).
    pub p_a_not_better: f64,
    /// Fraction of resamples with BLEU(B) <= BLEU(A).
    pub p_b_not_better: f64,
}

impl BootstrapReport {
    pub fn a_beats_b(&self) -> f64 {
        self.wins_a as f64 / self.resamples as f64
    }

    pub fn b_beats_a(&self) -> f64 {
        self.wins_b as f64 / self.resamples as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "resamples: {}", self.resamples);
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "bleu_a: {:.4}", self.bleu_a);
        let _ = writeln!(s, "bleu_b: {:.4}", self.bleu_b);
        let _ = writeln!(s, "wins_a: {}", self.wins_a);
        let _ = writeln!(s, "wins_b: {}", self.wins_b);
        let _ = writeln!(s, "ties: {}", self.ties);
        let _ = writeln!(s, "p_a_not_better: {:.6}", self.p_a_not_better);
        let _ = writeln!(s, "p_b_not_better: {:.6}", self.p_b_not_better);
        s
    }
}

/// Paired bootstrap: both systems are scored on the same resampled sentence
/// indices, drawn with replacement.
pub fn paired_bootstrap(
    hyp_a: &[String],
    hyp_b: &[String],
    ref_sets: &[Vec<String>],
    resamples: usize,
    seed: u64,
    smooth: bool,
) -> Result<BootstrapReport> {
    if resamples < 100 {
        return Err(Error::contract(format!("need at least 100 resamples, got {resamples}")));
    }
    if hyp_a.len() != hyp_b.len() {
        return Err(Error::contract(format!(
            "system outputs differ in length ({} vs {})",
            hyp_a.len(),
            hyp_b.len()
        )));
    }
    let sa = all_sentence_stats(hyp_a, ref_sets)?;
    let sb = all_sentence_stats(hyp_b, ref_sets)?;
    let corpus = |stats: &[BleuStats]| {
        let mut t = BleuStats::default();
        stats.iter().for_each(|s| t.add(s));
        t.report(smooth).score
    };
    let n = sa.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut wins_a, mut wins_b, mut ties) = (0, 0, 0);
    for _ in 0..resamples {
        let (mut ta, mut tb) = (BleuStats::default(), BleuStats::default());
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            ta.add(&sa[i]);
            tb.add(&sb[i]);
        }
        let (a, b) = (ta.report(smooth).score, tb.report(smooth).score);
        if a > b {
            wins_a += 1;
        } else if b > a {
            wins_b += 1;
        } else {
            ties += 1;
        }
    }
    let r = resamples as f64;
    Ok(BootstrapReport {
        resamples,
        seed,
        bleu_a: corpus(&sa),
        bleu_b: corpus(&sb),
        wins_a,
        wins_b,
        ties,
        p_a_not_better: (wins_b + ties) as f64 / r,
        p_b_not_better: (wins_a + ties) as f64 / r,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bucket {
    pub lo: usize,
    /// Exclusive; `None` for the open last bucket.
    pub hi: Option<usize>,
    pub count: usize,
    /// `None` when the bucket is empty.
    pub bleu: Option<BleuReport>,
}

impl Bucket {
    pub fn label(&self) -> String {
        match self.hi {
            Some(hi) => format!("[{},{})", self.lo, hi),
            None => format!("[{},inf)", self.lo),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketReport {
    pub buckets: Vec<Bucket>,
}

impl BucketReport {
    pub fn total(&self) -> usize {
        self.buckets.iter().map(|b| b.count).sum()
    }

    pub const TSV_HEADER: &'static str = "bucket\tcount\tbleu";

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\n", Self::TSV_HEADER);
        for b in &self.buckets {
            let score = b.bleu.as_ref().map_or("nan".to_string(), |r| format!("{:.4}", r.score));
            let _ = writeln!(s, "{}\t{}\t{}", b.label(), b.count, score);
        }
        s
    }
}

/// Index of the bucket holding a source of `len` tokens. Buckets are
/// closed-open `[b_i, b_{i+1})`; anything below the first edge joins the
/// first bucket.
pub fn bucket_index(boundaries: &[usize], len: usize) -> usize {
    boundaries.iter().rposition(|&b| b <= len).unwrap_or(0)
}

/// BLEU per source-length bucket. Edges must be strictly increasing.
pub fn length_bucket_report(
    sources: &[String],
    hyps: &[String],
    ref_sets: &[Vec<String>],
    boundaries: &[usize],
    smooth: bool,
) -> Result<BucketReport> {
    if boundaries.is_empty() || boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract("bucket boundaries must be non-empty and strictly increasing"));
    }
    if sources.len() != hyps.len() {
        return Err(Error::contract(format!(
            "{} sources but {} hypotheses",
            sources.len(),
            hyps.len()
        )));
    }
    let stats = all_sentence_stats(hyps, ref_sets)?;
    let mut acc = vec![(0usize, BleuStats::default()); boundaries.len()];
    for (src, st) in sources.iter().zip(&stats) {
        let i = bucket_index(boundaries, src.split_whitespace().count());
        acc[i].0 += 1;
        acc[i].1.add(st);
    }
    let buckets = acc
        .into_iter()
        .enumerate()
        .map(|(i, (count, st))| Bucket {
            lo: boundaries[i],
            hi: boundaries.get(i + 1).copied(),
            count,
            bleu: (count > 0).then(|| st.report(smooth)),
        })
        .collect();
    Ok(BucketReport { buckets })
}

/// Joins consecutive non-overlapping groups of `k` sentences on both sides.
/// A shorter trailing group is kept.
pub fn make_concat_testset(sources: &[String], refs: &[String], k: usize) -> Result<(Vec<String>, Vec<String>)> {
    if k < 2 {
        return Err(Error::contract(format!("concatenation needs k >= 2, got {k}")));
    }
    if sources.len() != refs.len() {
        return Err(Error::contract(format!(
            "{} sources but {} references",
            sources.len(),
            refs.len()
        )));
    }
    let join = |lines: &[String]| -> Vec<String> {
        lines
            .chunks(k)
            .map(|g| g.iter().flat_map(|l| l.split_whitespace()).collect::<Vec<_>>().join(" "))
            .collect()
    };
    Ok((join(sources), join(refs)))
}

pub fn mean_length(lines: &[String]) -> f64 {
    if lines.is_empty() {
        return 0.0;
    }
    lines.iter().map(|l| l.split_whitespace().count()).sum::<usize>() as f64 / lines.len() as f64
}
