//! Attentional GRU decoder whose recurrence is conditioned on the projected
//! latent vector, plus greedy and beam-search decoding.
//!
//! Step `j` reads the previous state `s_{j-1}`: it attends over the source
//! annotations to get `c_j`, predicts `y_j` from `(y_{j-1}, s_{j-1}, c_j)`,
//! and then folds `y_j`, `c_j` and the latent projection `h_e'` into `s_j`.

use std::cmp::Ordering;

use rand::Rng;

use crate::corpus::{BOS, EOS};
use crate::encoder::Annotations;
use crate::error::{Error, Result, Shape};
use crate::params::ParameterStore;
use crate::tensor::{Axis, Graph, Var};

/// Sizes needed to register decoder parameters.
#[derive(Clone, Copy, Debug)]
pub struct DecoderDims {
    pub vocab: usize,
    pub word: usize,
    pub hidden: usize,
    /// Width of one encoder direction; annotations are twice this.
    pub src_hidden: usize,
    pub latent_proj: usize,
    pub attn: usize,
}

pub fn init_decoder(store: &mut ParameterStore, d: DecoderDims, rng: &mut impl Rng) -> Result<()> {
    let ann = 2 * d.src_hidden;
    store.insert_uniform("dec.emb", d.vocab, d.word, rng)?;
    for (names, cols) in [
        (["W", "W_u", "W_r"], d.word),
        (["U", "U_u", "U_r"], d.hidden),
        (["C", "C_u", "C_r"], ann),
        (["V", "V_u", "V_r"], d.latent_proj),
    ] {
        for n in names {
            store.insert_uniform(&format!("dec.{n}"), d.hidden, cols, rng)?;
        }
    }
    for n in ["b", "b_u", "b_r"] {
        store.insert_zeros(&format!("dec.{n}"), 1, d.hidden)?;
    }
    store.insert_uniform("dec.W_s", d.hidden, d.src_hidden, rng)?;
    store.insert_uniform("attn.W_a", d.attn, d.hidden, rng)?;
    store.insert_uniform("attn.U_a", d.attn, ann, rng)?;
    store.insert_uniform("attn.v_a", 1, d.attn, rng)?;
    store.insert_uniform("out.W_p", d.hidden, d.word, rng)?;
    store.insert_uniform("out.U_p", d.hidden, d.hidden, rng)?;
    store.insert_uniform("out.C_p", d.hidden, ann, rng)?;
    store.insert_uniform("out.W_o", d.vocab, d.hidden, rng)?;
    Ok(())
}

/// Names of the three matrices that carry `h_e'` into the recurrence.
pub const LATENT_MATRICES: [&str; 3] = ["dec.V", "dec.V_u", "dec.V_r"];

/// Decoder parameters bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct Decoder {
    pub emb: Var,
    pub w: Var,
    pub w_u: Var,
    pub w_r: Var,
    pub u: Var,
    pub u_u: Var,
    pub u_r: Var,
    pub c: Var,
    pub c_u: Var,
    pub c_r: Var,
    pub v: Var,
    pub v_u: Var,
    pub v_r: Var,
    pub b: Var,
    pub b_u: Var,
    pub b_r: Var,
    pub w_s: Var,
    pub w_a: Var,
    pub u_a: Var,
    pub v_a: Var,
    pub w_p: Var,
    pub u_p: Var,
    pub c_p: Var,
    pub w_o: Var,
}

impl Decoder {
    pub fn bind(g: &mut Graph, store: &ParameterStore) -> Result<Self> {
        let mut p = |n: &str| g.param(store, n);
        Ok(Decoder {
            emb: p("dec.emb")?,
            w: p("dec.W")?,
            w_u: p("dec.W_u")?,
            w_r: p("dec.W_r")?,
            u: p("dec.U")?,
            u_u: p("dec.U_u")?,
            u_r: p("dec.U_r")?,
            c: p("dec.C")?,
            c_u: p("dec.C_u")?,
            c_r: p("dec.C_r")?,
            v: p("dec.V")?,
            v_u: p("dec.V_u")?,
            v_r: p("dec.V_r")?,
            b: p("dec.b")?,
            b_u: p("dec.b_u")?,
            b_r: p("dec.b_r")?,
            w_s: p("dec.W_s")?,
            w_a: p("attn.W_a")?,
            u_a: p("attn.U_a")?,
            v_a: p("attn.v_a")?,
            w_p: p("out.W_p")?,
            u_p: p("out.U_p")?,
            c_p: p("out.C_p")?,
            w_o: p("out.W_o")?,
        })
    }

    pub fn vocab(&self, g: &Graph) -> usize {
        g.shape(self.w_o).0
    }

    pub fn hidden(&self, g: &Graph) -> usize {
        g.shape(self.u).0
    }

    pub fn embed(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        g.lookup(self.emb, ids)
    }
}

/// `s_0 = tanh(W_s ←h_1)`.
pub fn init_state(g: &mut Graph, dec: &Decoder, ann: &Annotations) -> Result<Var> {
    if ann.is_empty() {
        return Err(Error::contract("initial state needs at least one annotation"));
    }
    let pre = g.matmul_nt(ann.backward_first, dec.w_s)?;
    Ok(g.tanh(pre))
}

/// `U_a h_i` for every position, computed once per source batch.
pub fn attention_keys(g: &mut Graph, dec: &Decoder, ann: &Annotations) -> Result<Vec<Var>> {
    ann.positions.iter().map(|&h| g.matmul_nt(h, dec.u_a)).collect()
}

/// Additive attention: `e_i = v_aᵀ tanh(W_a s + U_a h_i)`, `α = softmax(e)`
/// over unmasked positions, `c = Σ α_i h_i`. Returns `(α [M x T], c [M x 2d])`.
pub fn attention(g: &mut Graph, dec: &Decoder, s_prev: Var, ann: &Annotations, keys: &[Var]) -> Result<(Var, Var)> {
    if keys.len() != ann.len() {
        return Err(Error::contract("attention keys do not match annotations"));
    }
    let query = g.matmul_nt(s_prev, dec.w_a)?;
    let mut scores = Vec::with_capacity(keys.len());
    for &k in keys {
        let sum = g.add(query, k)?;
        let act = g.tanh(sum);
        scores.push(g.matmul_nt(act, dec.v_a)?);
    }
    let scores = g.concat(&scores, Axis::Cols)?;
    let alpha = g.masked_softmax_rows(scores, &ann.mask_rows())?;
    let mut ctx: Option<Var> = None;
    for (i, &h) in ann.positions.iter().enumerate() {
        let a = g.column(alpha, i)?;
        let term = g.mul_col(h, a)?;
        ctx = Some(match ctx {
            Some(c) => g.add(c, term)?,
            None => term,
        });
    }
    Ok((alpha, ctx.expect("nonempty annotations")))
}

/// GRU update of the decoder state from `s_prev [M x d_e]`, the embedded
/// token `y [M x d_w]`, context `c [M x 2d_f]` and, when present, the latent
/// projection `h_e' [M x d_e']`. Passing `None` drops every `V` term.
pub fn decoder_step(g: &mut Graph, dec: &Decoder, s_prev: Var, y: Var, c: Var, h_e_prime: Option<Var>) -> Result<Var> {
    let hidden = dec.hidden(g);
    let s = g.shape(s_prev);
    if s.1 != hidden {
        return Err(Error::Dimension { op: "decoder_step", left: Shape(s.0, hidden), right: s });
    }
    let drive = |g: &mut Graph, w: Var, cm: Var, vm: Var, b: Var| -> Result<Var> {
        let a = g.linear(y, w, Some(b))?;
        let ctx = g.matmul_nt(c, cm)?;
        let mut t = g.add(a, ctx)?;
        if let Some(h) = h_e_prime {
            let lat = g.matmul_nt(h, vm)?;
            t = g.add(t, lat)?;
        }
        Ok(t)
    };
    let gate = |g: &mut Graph, w, u, cm, vm, b| -> Result<Var> {
        let d = drive(g, w, cm, vm, b)?;
        let rec = g.matmul_nt(s_prev, u)?;
        let pre = g.add(d, rec)?;
        Ok(g.sigmoid(pre))
    };
    let r = gate(g, dec.w_r, dec.u_r, dec.c_r, dec.v_r, dec.b_r)?;
    let u = gate(g, dec.w_u, dec.u_u, dec.c_u, dec.v_u, dec.b_u)?;
    let d = drive(g, dec.w, dec.c, dec.v, dec.b)?;
    let rs = g.mul(r, s_prev)?;
    let rec = g.matmul_nt(rs, dec.u)?;
    let pre = g.add(d, rec)?;
    let cand = g.tanh(pre);
    let diff = g.sub(cand, s_prev)?;
    let step = g.mul(u, diff)?;
    g.add(s_prev, step)
}

/// `W_o tanh(W_p E_{y_prev} + U_p s_prev + C_p c)`, `[M x V]`.
pub fn output_logits(g: &mut Graph, dec: &Decoder, y_prev: Var, s_prev: Var, c: Var) -> Result<Var> {
    let a = g.matmul_nt(y_prev, dec.w_p)?;
    let b = g.matmul_nt(s_prev, dec.u_p)?;
    let d = g.matmul_nt(c, dec.c_p)?;
    let t = g.add(a, b)?;
    let t = g.add(t, d)?;
    let t = g.tanh(t);
    g.matmul_nt(t, dec.w_o)
}

/// Summed negative log-likelihood of each target row under teacher forcing,
/// `[M x 1]`. `targets` rows end in EOS and are PAD-padded; `mask` flags the
/// real tokens.
pub fn teacher_forced_nll(
    g: &mut Graph,
    dec: &Decoder,
    ann: &Annotations,
    h_e_prime: Option<Var>,
    targets: &[Vec<usize>],
    mask: &[Vec<f64>],
) -> Result<Var> {
    let batch = targets.len();
    if batch != ann.batch_size() {
        return Err(Error::contract("target batch does not match source batch"));
    }
    let width = targets[0].len();
    let keys = attention_keys(g, dec, ann)?;
    let mut s = init_state(g, dec, ann)?;
    let mut y_prev = dec.embed(g, &vec![BOS; batch])?;
    let mut total: Option<Var> = None;
    for j in 0..width {
        let (_, c) = attention(g, dec, s, ann, &keys)?;
        let logits = output_logits(g, dec, y_prev, s, c)?;
        let logp = g.log_softmax_rows(logits);
        let ids: Vec<usize> = targets.iter().map(|r| r[j]).collect();
        let picked = g.gather(logp, &ids)?;
        let col: Vec<f64> = mask.iter().map(|r| r[j]).collect();
        let m = g.constant(batch, 1, col)?;
        let picked = g.mul(picked, m)?;
        total = Some(match total {
            Some(t) => g.add(t, picked)?,
            None => picked,
        });
        if j + 1 < width {
            let y = dec.embed(g, &ids)?;
            let next = decoder_step(g, dec, s, y, c, h_e_prime)?;
            // padded rows are fully masked from here on, so their state is irrelevant
            s = next;
            y_prev = y;
        }
    }
    Ok(g.scale(total.expect("nonempty targets"), -1.0))
}

// ── search ───────────────────────────────────────────────────────────────

/// A left-to-right model that beam search can query.
pub trait StepModel {
    type State: Clone;

    fn initial_state(&mut self) -> Result<Self::State>;

    /// Next-token log-probabilities for each hypothesis given its state and
    /// its last emitted token.
    fn log_probs(&mut self, states: &[Self::State], last: &[usize]) -> Result<Vec<Vec<f64>>>;

    /// States after appending `tokens[k]` to hypothesis `parents[k]` of the
    /// preceding `log_probs` call.
    fn advance(&mut self, states: &[Self::State], parents: &[usize], tokens: &[usize]) -> Result<Vec<Self::State>>;
}

#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    /// Emitted tokens, ending in EOS when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub state: S,
    pub finished: bool,
}

impl<S> Hypothesis<S> {
    /// Tokens without the trailing EOS.
    pub fn output(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

fn better(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Length-bounded beam search over summed log-probabilities.
///
/// Each step ranks every one-token extension of the live hypotheses and keeps
/// the best `beam_size`; those ending in EOS are frozen. Search stops when
/// nothing is live or no live hypothesis can beat the best finished one.
/// Returns the best finished hypothesis, or the best live one at `max_len`.
pub fn beam_search<M: StepModel>(model: &mut M, beam_size: usize, max_len: usize) -> Result<Hypothesis<M::State>> {
    if beam_size == 0 {
        return Err(Error::contract("beam size must be at least 1"));
    }
    if max_len == 0 {
        return Err(Error::contract("maximum output length must be at least 1"));
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.initial_state()?,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis<M::State>> = Vec::new();

    for _ in 0..max_len {
        let states: Vec<M::State> = live.iter().map(|h| h.state.clone()).collect();
        let last: Vec<usize> = live.iter().map(|h| h.tokens.last().copied().unwrap_or(BOS)).collect();
        let logp = model.log_probs(&states, &last)?;

        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (p, row) in logp.iter().enumerate() {
            for (tok, &lp) in row.iter().enumerate() {
                cands.push((live[p].log_prob + lp, p, tok));
            }
        }
        // ties resolve towards earlier hypotheses, then lower token ids
        cands.sort_by(|a, b| better(a.0, b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(beam_size);

        let mut parents = Vec::new();
        let mut tokens = Vec::new();
        let mut scores = Vec::new();
        for (score, p, tok) in cands {
            let mut seq = live[p].tokens.clone();
            seq.push(tok);
            if tok == EOS {
                finished.push(Hypothesis {
                    tokens: seq,
                    log_prob: score,
                    state: live[p].state.clone(),
                    finished: true,
                });
            } else {
                parents.push(p);
                tokens.push(seq);
                scores.push(score);
            }
        }
        if parents.is_empty() {
            live.clear();
            break;
        }
        let last_tok: Vec<usize> = tokens.iter().map(|t| *t.last().unwrap()).collect();
        let next_states = model.advance(&states, &parents, &last_tok)?;
        live = tokens
            .into_iter()
            .zip(scores)
            .zip(next_states)
            .map(|((tokens, log_prob), state)| Hypothesis {
                tokens,
                log_prob,
                state,
                finished: false,
            })
            .collect();

        let best_live = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        let best_done = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        if best_done >= best_live {
            break;
        }
    }

    let pick = |hs: Vec<Hypothesis<M::State>>| {
        hs.into_iter()
            .enumerate()
            .min_by(|(i, a), (j, b)| better(a.log_prob, b.log_prob).then(i.cmp(j)))
            .map(|(_, h)| h)
    };
    match pick(finished) {
        Some(h) => Ok(h),
        None => pick(live).ok_or_else(|| Error::contract("beam search produced no hypothesis")),
    }
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy_decode<M: StepModel>(model: &mut M, max_len: usize) -> Result<Hypothesis<M::State>> {
    if max_len == 0 {
        return Err(Error::contract("maximum output length must be at least 1"));
    }
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.initial_state()?,
        finished: false,
    };
    for _ in 0..max_len {
        let last = h.tokens.last().copied().unwrap_or(BOS);
        let row = model.log_probs(std::slice::from_ref(&h.state), &[last])?.remove(0);
        let (tok, lp) = row
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (t, v)| if v > best.1 { (t, v) } else { best });
        h.tokens.push(tok);
        h.log_prob += lp;
        if tok == EOS {
            h.finished = true;
            break;
        }
        h.state = model.advance(std::slice::from_ref(&h.state), &[0], &[tok])?.remove(0);
    }
    Ok(h)
}

/// Decoding-time view of a single encoded sentence.
///
/// All inputs are detached copies, so nothing here is differentiated.
pub struct NeuralStepModel {
    graph: Graph,
    dec: Decoder,
    /// Per position: annotation row `[1 x 2d]` and attention key `[1 x d_a]`.
    annotations: Vec<Var>,
    keys: Vec<Var>,
    h_e_prime: Option<Var>,
    s0: Vec<f64>,
    contexts: Vec<Vec<f64>>,
}

impl NeuralStepModel {
    /// Takes a graph that already holds one encoded sentence (`M = 1`).
    pub fn new(mut graph: Graph, dec: Decoder, ann: &Annotations, h_e_prime: Option<Var>) -> Result<Self> {
        if ann.batch_size() != 1 {
            return Err(Error::contract("decoding works on one sentence at a time"));
        }
        let keys = attention_keys(&mut graph, &dec, ann)?;
        let s0 = init_state(&mut graph, &dec, ann)?;
        let s0 = graph.value(s0).to_vec();
        Ok(NeuralStepModel {
            graph,
            dec,
            annotations: ann.positions.clone(),
            keys,
            h_e_prime,
            s0,
            contexts: Vec::new(),
        })
    }

    fn replicate(&mut self, v: Var, n: usize) -> Result<Var> {
        if n == 1 {
            return Ok(v);
        }
        self.graph.lookup(v, &vec![0; n])
    }

    fn stack(&mut self, rows: &[Vec<f64>]) -> Result<Var> {
        let cols = rows[0].len();
        self.graph.constant(rows.len(), cols, rows.concat())
    }
}

impl StepModel for NeuralStepModel {
    type State = Vec<f64>;

    fn initial_state(&mut self) -> Result<Vec<f64>> {
        Ok(self.s0.clone())
    }

    fn log_probs(&mut self, states: &[Vec<f64>], last: &[usize]) -> Result<Vec<Vec<f64>>> {
        let n = states.len();
        let s = self.stack(states)?;
        let positions: Vec<Var> = self.annotations.clone();
        let keys: Vec<Var> = self.keys.clone();
        let mut rep_pos = Vec::with_capacity(positions.len());
        let mut rep_keys = Vec::with_capacity(keys.len());
        for (p, k) in positions.into_iter().zip(keys) {
            rep_pos.push(self.replicate(p, n)?);
            rep_keys.push(self.replicate(k, n)?);
        }
        let ann = Annotations {
            mask: vec![vec![1.0; n]; rep_pos.len()],
            lengths: vec![rep_pos.len(); n],
            backward_first: rep_pos[0],
            hidden: 0,
            positions: rep_pos,
        };
        let g = &mut self.graph;
        let (_, c) = attention(g, &self.dec, s, &ann, &rep_keys)?;
        let y = self.dec.embed(g, last)?;
        let logits = output_logits(g, &self.dec, y, s, c)?;
        let logp = g.log_softmax_rows(logits);
        self.contexts = (0..n).map(|r| g.row(c, r).to_vec()).collect();
        Ok((0..n).map(|r| g.row(logp, r).to_vec()).collect())
    }

    fn advance(&mut self, states: &[Vec<f64>], parents: &[usize], tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let sel: Vec<Vec<f64>> = parents.iter().map(|&p| states[p].clone()).collect();
        let ctx: Vec<Vec<f64>> = parents.iter().map(|&p| self.contexts[p].clone()).collect();
        let n = sel.len();
        let s = self.stack(&sel)?;
        let c = self.stack(&ctx)?;
        let h = match self.h_e_prime {
            Some(h) => Some(self.replicate(h, n)?),
            None => None,
        };
        let g = &mut self.graph;
        let y = self.dec.embed(g, tokens)?;
        let next = decoder_step(g, &self.dec, s, y, c, h)?;
        Ok((0..n).map(|r| g.row(next, r).to_vec()).collect())
    }
}
