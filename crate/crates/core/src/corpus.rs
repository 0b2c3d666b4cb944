//! Parallel corpora, vocabularies, padded batches and synthetic toy tasks.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

pub type Sentence = Vec<String>;

pub fn tokenize(line: &str) -> Sentence {
    line.split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

/// Line-aligned source/target sentence pairs, none of them empty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParallelCorpus {
    pairs: Vec<(Sentence, Sentence)>,
}

impl ParallelCorpus {
    /// Builds a corpus, dropping pairs where either side is empty.
    pub fn new(pairs: Vec<(Sentence, Sentence)>) -> Self {
        ParallelCorpus {
            pairs: pairs
                .into_iter()
                .filter(|(s, t)| !s.is_empty() && !t.is_empty())
                .collect(),
        }
    }

    pub fn from_lines(src: &str, tgt: &str) -> Result<Self> {
        let s: Vec<&str> = src.lines().collect();
        let t: Vec<&str> = tgt.lines().collect();
        if s.len() != t.len() {
            return Err(Error::Ingestion(format!(
                "source has {} lines but target has {}",
                s.len(),
                t.len()
            )));
        }
        Ok(Self::new(s.iter().zip(&t).map(|(a, b)| (tokenize(a), tokenize(b))).collect()))
    }

    pub fn read(src: &Path, tgt: &Path) -> Result<Self> {
        let s = fs::read_to_string(src)
            .map_err(|e| Error::Ingestion(format!("{}: {e}", src.display())))?;
        let t = fs::read_to_string(tgt)
            .map_err(|e| Error::Ingestion(format!("{}: {e}", tgt.display())))?;
        Self::from_lines(&s, &t)
    }

    pub fn write(&self, src: &Path, tgt: &Path) -> Result<()> {
        let join = |side: Side| {
            let mut out = String::new();
            for s in self.side(side) {
                out.push_str(&s.join(" "));
                out.push('\n');
            }
            out
        };
        fs::write(src, join(Side::Source))?;
        fs::write(tgt, join(Side::Target))?;
        Ok(())
    }

    pub fn pairs(&self) -> &[(Sentence, Sentence)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn side(&self, side: Side) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().map(move |(s, t)| match side {
            Side::Source => s,
            Side::Target => t,
        })
    }

    /// Splits off the last `n` pairs.
    pub fn split_tail(mut self, n: usize) -> (Self, Self) {
        let at = self.pairs.len().saturating_sub(n);
        let tail = self.pairs.split_off(at);
        (self, ParallelCorpus { pairs: tail })
    }
}

/// Token/index bijection with `<pad> <unk> <s> </s>` at indices 0..4.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(Error::Format("vocabulary must start with the four reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, counts, index })
    }

    /// Keeps the `cap - 4` most frequent tokens of one side; ties go to the
    /// token seen first.
    pub fn build(corpus: &ParallelCorpus, side: Side, cap: usize) -> Result<Self> {
        if cap < 5 {
            return Err(Error::contract(format!("vocabulary cap must be at least 5, got {cap}")));
        }
        if corpus.is_empty() {
            return Err(Error::Ingestion("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut seen: HashMap<&str, usize> = HashMap::new();
        let mut order: Vec<(&str, u64)> = Vec::new();
        for sent in corpus.side(side) {
            for tok in sent {
                if RESERVED.contains(&tok.as_str()) {
                    continue;
                }
                match seen.get(tok.as_str()) {
                    Some(&i) => order[i].1 += 1,
                    None => {
                        seen.insert(tok, order.len());
                        order.push((tok, 1));
                    }
                }
            }
        }
        // stable sort keeps first-occurrence order among equal counts
        order.sort_by(|a, b| b.1.cmp(&a.1));
        order.truncate(cap - RESERVED.len());

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0; RESERVED.len()];
        for (t, c) in order {
            tokens.push(t.to_string());
            counts.push(c);
        }
        Self::from_parts(tokens, counts)
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(self) -> Result<Self> {
        Self::from_parts(self.tokens, self.counts)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts.get(id).copied().unwrap_or(0)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Sentence {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Fraction of running tokens on `side` that are in the vocabulary.
    pub fn coverage(&self, corpus: &ParallelCorpus, side: Side) -> f64 {
        let (mut hit, mut total) = (0usize, 0usize);
        for sent in corpus.side(side) {
            for tok in sent {
                total += 1;
                if self.index.contains_key(tok.as_str()) {
                    hit += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }

    /// `token<TAB>index<TAB>count` lines sorted by index.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, (t, c)) in self.tokens.iter().zip(&self.counts).enumerate() {
            let _ = writeln!(out, "{t}\t{i}\t{c}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Format(format!("vocabulary line {}: `{line}`", ln + 1));
            if fields.len() != 3 {
                return Err(bad());
            }
            let idx: usize = fields[1].parse().map_err(|_| bad())?;
            if idx != tokens.len() {
                return Err(bad());
            }
            tokens.push(fields[0].to_string());
            counts.push(fields[2].parse().map_err(|_| bad())?);
        }
        Self::from_parts(tokens, counts)
    }
}

/// A padded mini-batch. Every row is `tokens.. EOS PAD..`; masks mark the
/// real tokens including EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
    pub src_mask: Vec<Vec<f64>>,
    pub tgt_mask: Vec<Vec<f64>>,
    pub src_len: Vec<usize>,
    pub tgt_len: Vec<usize>,
}

fn pad_rows(seqs: &[Vec<usize>]) -> (Vec<Vec<usize>>, Vec<Vec<f64>>, Vec<usize>) {
    let width = seqs.iter().map(|s| s.len() + 1).max().unwrap_or(1);
    let mut ids = Vec::with_capacity(seqs.len());
    let mut mask = Vec::with_capacity(seqs.len());
    let mut lens = Vec::with_capacity(seqs.len());
    for s in seqs {
        let mut row = s.clone();
        row.push(EOS);
        let len = row.len();
        let mut m = vec![1.0; len];
        row.resize(width, PAD);
        m.resize(width, 0.0);
        ids.push(row);
        mask.push(m);
        lens.push(len);
    }
    (ids, mask, lens)
}

impl Batch {
    /// Pads already-encoded pairs (without EOS) into a batch.
    pub fn from_ids(pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let src: Vec<Vec<usize>> = pairs.iter().map(|p| p.0.clone()).collect();
        let tgt: Vec<Vec<usize>> = pairs.iter().map(|p| p.1.clone()).collect();
        let (src, src_mask, src_len) = pad_rows(&src);
        let (tgt, tgt_mask, tgt_len) = pad_rows(&tgt);
        Ok(Batch {
            src,
            tgt,
            src_mask,
            tgt_mask,
            src_len,
            tgt_len,
        })
    }

    pub fn from_corpus(corpus: &ParallelCorpus, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> Result<Self> {
        let ids: Vec<_> = corpus
            .pairs()
            .iter()
            .map(|(s, t)| (src_vocab.encode(s), tgt_vocab.encode(t)))
            .collect();
        Self::from_ids(&ids)
    }

    pub fn size(&self) -> usize {
        self.src.len()
    }

    pub fn src_width(&self) -> usize {
        self.src[0].len()
    }

    pub fn tgt_width(&self) -> usize {
        self.tgt[0].len()
    }

    /// Column `t` of the source ids.
    pub fn src_column(&self, t: usize) -> Vec<usize> {
        self.src.iter().map(|r| r[t]).collect()
    }

    pub fn tgt_column(&self, t: usize) -> Vec<usize> {
        self.tgt.iter().map(|r| r[t]).collect()
    }
}

/// Length-filtered, shuffled epochs over an encoded corpus.
#[derive(Clone, Debug)]
pub struct Batcher {
    pairs: Vec<(Vec<usize>, Vec<usize>)>,
    batch_size: usize,
    seed: u64,
}

impl Batcher {
    /// Drops pairs with either side longer than `max_len` tokens (EOS not
    /// counted).
    pub fn new(
        corpus: &ParallelCorpus,
        src_vocab: &Vocabulary,
        tgt_vocab: &Vocabulary,
        batch_size: usize,
        max_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        let pairs: Vec<_> = corpus
            .pairs()
            .iter()
            .filter(|(s, t)| s.len() <= max_len && t.len() <= max_len)
            .map(|(s, t)| (src_vocab.encode(s), tgt_vocab.encode(t)))
            .collect();
        if pairs.is_empty() {
            return Err(Error::Ingestion(format!(
                "no sentence pair survives the length filter of {max_len} tokens"
            )));
        }
        Ok(Batcher { pairs, batch_size, seed })
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.pairs.len().div_ceil(self.batch_size)
    }

    /// Batches in corpus order, for evaluation.
    pub fn in_order(&self) -> impl Iterator<Item = Batch> + '_ {
        self.pairs
            .chunks(self.batch_size)
            .map(|c| Batch::from_ids(c).expect("chunks are nonempty"))
    }

    /// The batches of one epoch, shuffled by `(seed, epoch)`.
    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Batch> + '_ {
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let chunks: Vec<Vec<usize>> = order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |idx| {
            let sel: Vec<_> = idx.iter().map(|&i| self.pairs[i].clone()).collect();
            Batch::from_ids(&sel).expect("chunks are nonempty")
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticTask {
    Copy,
    Reverse,
    NumberWords,
}

impl std::str::FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(SyntheticTask::Copy),
            "reverse" => Ok(SyntheticTask::Reverse),
            "number-words" => Ok(SyntheticTask::NumberWords),
            _ => Err(Error::contract(format!("unknown synthetic task `{s}`"))),
        }
    }
}

pub const DIGIT_WORDS: [&str; 10] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];

/// Maps a digit token to its spelling; anything else is passed through.
pub fn spell_digit(tok: &str) -> String {
    match tok.parse::<usize>() {
        Ok(d) if d < 10 && tok.len() == 1 => DIGIT_WORDS[d].to_string(),
        _ => tok.to_string(),
    }
}

/// Random toy translation pairs with lengths uniform in `min_len..=max_len`.
///
/// Copy and reverse draw tokens `t0..t{vocab_size-1}`; number-words draws
/// digits from the first `min(vocab_size, 10)` and spells them out.
pub fn make_synthetic(
    task: SyntheticTask,
    n_pairs: usize,
    vocab_size: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Result<ParallelCorpus> {
    if min_len < 1 || max_len < min_len {
        return Err(Error::contract(format!(
            "need 1 <= min_len <= max_len, got {min_len}..{max_len}"
        )));
    }
    if vocab_size == 0 {
        return Err(Error::contract("synthetic vocabulary must be nonempty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let len = rng.gen_range(min_len..=max_len);
        let src: Sentence = match task {
            SyntheticTask::Copy | SyntheticTask::Reverse => {
                (0..len).map(|_| format!("t{}", rng.gen_range(0..vocab_size))).collect()
            }
            SyntheticTask::NumberWords => (0..len)
                .map(|_| rng.gen_range(0..vocab_size.min(10)).to_string())
                .collect(),
        };
        pairs.push((src.clone(), transform(task, &src)));
    }
    Ok(ParallelCorpus::new(pairs))
}

/// The reference output of a synthetic task for a given source.
pub fn transform(task: SyntheticTask, src: &[String]) -> Sentence {
    match task {
        SyntheticTask::Copy => src.to_vec(),
        SyntheticTask::Reverse => src.iter().rev().cloned().collect(),
        SyntheticTask::NumberWords => src.iter().map(|t| spell_digit(t)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lines: &[(&str, &str)]) -> ParallelCorpus {
        ParallelCorpus::new(lines.iter().map(|(a, b)| (tokenize(a), tokenize(b))).collect())
    }

    #[test]
    fn vocab_orders_by_frequency() {
        let c = corpus(&[("a a b", "x")]);
        let v = Vocabulary::build(&c, Side::Source, 6).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.count(4), 2);
    }

    #[test]
    fn vocab_ties_keep_first_occurrence() {
        let c = corpus(&[("c b a c b a", "x")]);
        let v = Vocabulary::build(&c, Side::Source, 7).unwrap();
        assert_eq!(v.decode(&[4, 5, 6]), vec!["c", "b", "a"]);
    }

    #[test]
    fn vocab_truncation_maps_rare_to_unk() {
        let c = corpus(&[("a a a b b c", "x")]);
        let v = Vocabulary::build(&c, Side::Source, 6).unwrap();
        assert_eq!(v.encode(&["a", "b", "c"]), vec![4, 5, UNK]);
        assert!((v.coverage(&c, Side::Source) - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn vocab_errors() {
        let c = corpus(&[("a", "b")]);
        assert!(matches!(Vocabulary::build(&c, Side::Source, 4), Err(Error::Contract(_))));
        let empty = ParallelCorpus::default();
        assert!(matches!(Vocabulary::build(&empty, Side::Source, 10), Err(Error::Ingestion(_))));
    }

    #[test]
    fn encode_decode_round_trip() {
        let c = corpus(&[("a b", "x")]);
        let v = Vocabulary::build(&c, Side::Source, 10).unwrap();
        assert_eq!(v.decode(&v.encode(&["a"])), vec!["a"]);
        assert_eq!(v.encode(&["zzz"]), vec![UNK]);
        assert_eq!(v.decode(&v.encode(&["zzz"])), vec!["<unk>"]);
        assert!(v.encode::<&str>(&[]).is_empty());
    }

    #[test]
    fn vocab_tsv_round_trip() {
        let c = corpus(&[("a a b", "x")]);
        let v = Vocabulary::build(&c, Side::Source, 10).unwrap();
        let text = v.to_tsv();
        assert!(text.starts_with("<pad>\t0\t0\n<unk>\t1\t0\n<s>\t2\t0\n</s>\t3\t0\na\t4\t2\n"));
        assert_eq!(Vocabulary::from_tsv(&text).unwrap(), v);
        assert!(Vocabulary::from_tsv("a\t0\t1\n").is_err());
    }

    #[test]
    fn misaligned_files_rejected() {
        assert!(ParallelCorpus::from_lines("a\nb\n", "a\n").is_err());
    }

    #[test]
    fn empty_lines_are_dropped() {
        let c = ParallelCorpus::from_lines("a\n\nb\n", "x\ny\n\n").unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn batches_partition_and_pad() {
        let c = corpus(&[("a", "x"), ("a b", "x y"), ("b b b", "y")]);
        let vs = Vocabulary::build(&c, Side::Source, 10).unwrap();
        let vt = Vocabulary::build(&c, Side::Target, 10).unwrap();
        let b = Batcher::new(&c, &vs, &vt, 2, 50, 1).unwrap();
        let sizes: Vec<usize> = b.epoch(0).map(|x| x.size()).collect();
        assert_eq!(sizes, vec![2, 1]);
        for batch in b.epoch(3) {
            for i in 0..batch.size() {
                let len = batch.src_len[i];
                assert_eq!(batch.src[i][len - 1], EOS);
                assert_eq!(batch.src_mask[i].iter().sum::<f64>(), len as f64);
                assert!(batch.src[i][len..].iter().all(|&t| t == PAD));
            }
        }
    }

    #[test]
    fn length_filter_drops_long_pairs() {
        let long = vec!["a"; 51].join(" ");
        let c = corpus(&[(long.as_str(), "x"), ("a", "x")]);
        let vs = Vocabulary::build(&c, Side::Source, 10).unwrap();
        let vt = Vocabulary::build(&c, Side::Target, 10).unwrap();
        let b = Batcher::new(&c, &vs, &vt, 4, 50, 0).unwrap();
        assert_eq!(b.num_pairs(), 1);
        let only_long = corpus(&[(long.as_str(), "x")]);
        assert!(matches!(
            Batcher::new(&only_long, &vs, &vt, 4, 50, 0),
            Err(Error::Ingestion(_))
        ));
        assert!(Batcher::new(&c, &vs, &vt, 0, 50, 0).is_err());
    }

    #[test]
    fn synthetic_tasks() {
        let s = tokenize("t3 t1");
        assert_eq!(transform(SyntheticTask::Copy, &s), s);
        assert_eq!(transform(SyntheticTask::Reverse, &tokenize("a b c")), tokenize("c b a"));
        assert_eq!(transform(SyntheticTask::NumberWords, &tokenize("4 2")), tokenize("four two"));
        let a = make_synthetic(SyntheticTask::Reverse, 50, 20, 3, 10, 7).unwrap();
        let b = make_synthetic(SyntheticTask::Reverse, 50, 20, 3, 10, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.pairs().iter().all(|(s, t)| (3..=10).contains(&s.len()) && s.iter().rev().eq(t.iter())));
        assert!(make_synthetic(SyntheticTask::Copy, 1, 20, 0, 3, 0).is_err());
        assert!(make_synthetic(SyntheticTask::Copy, 1, 20, 4, 3, 0).is_err());
    }
}
