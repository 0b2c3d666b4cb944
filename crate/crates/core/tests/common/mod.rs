//! Scalar re-implementation of the model used as an oracle: plain loops over
//! `Vec<f64>`, no tape, one sentence at a time.

#![allow(dead_code)]

use vnmt::corpus::BOS;
use vnmt::ParameterStore;

pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub v: Vec<f64>,
}

impl Mat {
    pub fn of(store: &ParameterStore, name: &str) -> Mat {
        let p = store.get(name).unwrap_or_else(|| panic!("no parameter {name}"));
        Mat {
            rows: p.rows,
            cols: p.cols,
            v: p.value.clone(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| (0..self.cols).map(|c| self.v[r * self.cols + c] * x[c]).sum())
            .collect()
    }

    pub fn row(&self, r: usize) -> Vec<f64> {
        self.v[r * self.cols..(r + 1) * self.cols].to_vec()
    }
}

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sum(parts: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; parts[0].len()];
    for p in parts {
        for (o, x) in out.iter_mut().zip(p) {
            *o += x;
        }
    }
    out
}

pub fn map(a: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    a.iter().map(|&x| f(x)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = x.iter().map(|v| (v - m).exp()).sum();
    x.iter().map(|v| v - m - z.ln()).collect()
}

/// `h' = (1-u) h + u h̃` with reset and update gates.
pub fn gru(store: &ParameterStore, prefix: &str, h: &[f64], x: &[f64]) -> Vec<f64> {
    let m = |n: &str| Mat::of(store, &format!("{prefix}.{n}"));
    let b = |n: &str| store.get(&format!("{prefix}.{n}")).unwrap().value.clone();
    let r = map(&sum(&[m("W_r").apply(x), m("U_r").apply(h), b("b_r")]), sig);
    let u = map(&sum(&[m("W_u").apply(x), m("U_u").apply(h), b("b_u")]), sig);
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let cand = map(&sum(&[m("W").apply(x), m("U").apply(&rh), b("b")]), f64::tanh);
    (0..h.len()).map(|k| (1.0 - u[k]) * h[k] + u[k] * cand[k]).collect()
}

/// Annotation rows `[→h_i ; ←h_i]` and the first backward state.
pub fn encode(store: &ParameterStore, table: &str, prefix: &str, ids: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let emb = Mat::of(store, table);
    let d = Mat::of(store, &format!("{prefix}.fwd.U")).rows;
    let xs: Vec<Vec<f64>> = ids.iter().map(|&i| emb.row(i)).collect();
    let mut fwd = Vec::new();
    let mut h = vec![0.0; d];
    for x in &xs {
        h = gru(store, &format!("{prefix}.fwd"), &h, x);
        fwd.push(h.clone());
    }
    let mut bwd = vec![Vec::new(); xs.len()];
    let mut h = vec![0.0; d];
    for i in (0..xs.len()).rev() {
        h = gru(store, &format!("{prefix}.bwd"), &h, &xs[i]);
        bwd[i] = h.clone();
    }
    let ann = fwd.iter().zip(&bwd).map(|(f, b)| [f.clone(), b.clone()].concat()).collect();
    (ann, bwd[0].clone())
}

pub fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    map(&sum(rows), |x| x / rows.len() as f64)
}

/// `(μ, log σ²)` of the named Gaussian network.
pub fn gaussian(store: &ParameterStore, prefix: &str, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = |n: &str| Mat::of(store, &format!("{prefix}.{n}"));
    let b = |n: &str| store.get(&format!("{prefix}.{n}")).unwrap().value.clone();
    let hidden = map(&add(&m("W1").apply(input), &b("b1")), f64::tanh);
    (add(&m("W_mu").apply(&hidden), &b("b_mu")), add(&m("W_sigma").apply(&hidden), &b("b_sigma")))
}

pub fn project(store: &ParameterStore, z: &[f64]) -> Vec<f64> {
    let w2 = Mat::of(store, "latent.W2");
    map(&add(&w2.apply(z), &store.get("latent.b2").unwrap().value), f64::tanh)
}

pub fn kl(mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64]) -> f64 {
    (0..mq.len())
        .map(|k| 0.5 * (lp[k] - lq[k] + (lq[k].exp() + (mq[k] - mp[k]).powi(2)) / lp[k].exp() - 1.0))
        .sum()
}

/// Attention weights and context for one state.
pub fn attend(store: &ParameterStore, s: &[f64], ann: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let wa = Mat::of(store, "attn.W_a");
    let ua = Mat::of(store, "attn.U_a");
    let va = store.get("attn.v_a").unwrap().value.clone();
    let q = wa.apply(s);
    let e: Vec<f64> = ann
        .iter()
        .map(|h| dot(&va, &map(&add(&q, &ua.apply(h)), f64::tanh)))
        .collect();
    let alpha: Vec<f64> = log_softmax(&e).into_iter().map(f64::exp).collect();
    let mut c = vec![0.0; ann[0].len()];
    for (a, h) in alpha.iter().zip(ann) {
        for (ck, hk) in c.iter_mut().zip(h) {
            *ck += a * hk;
        }
    }
    (alpha, c)
}

pub fn logits(store: &ParameterStore, y_prev: &[f64], s: &[f64], c: &[f64]) -> Vec<f64> {
    let m = |n: &str| Mat::of(store, n);
    let t = map(&sum(&[m("out.W_p").apply(y_prev), m("out.U_p").apply(s), m("out.C_p").apply(c)]), f64::tanh);
    m("out.W_o").apply(&t)
}

pub fn dec_step(store: &ParameterStore, s: &[f64], y: &[f64], c: &[f64], latent: Option<&[f64]>) -> Vec<f64> {
    let m = |n: &str| Mat::of(store, &format!("dec.{n}"));
    let b = |n: &str| store.get(&format!("dec.{n}")).unwrap().value.clone();
    let drive = |w: &str, cm: &str, vm: &str, bias: &str| {
        let mut parts = vec![m(w).apply(y), m(cm).apply(c), b(bias)];
        if let Some(h) = latent {
            parts.push(m(vm).apply(h));
        }
        sum(&parts)
    };
    let r = map(&add(&drive("W_r", "C_r", "V_r", "b_r"), &m("U_r").apply(s)), sig);
    let u = map(&add(&drive("W_u", "C_u", "V_u", "b_u"), &m("U_u").apply(s)), sig);
    let rs: Vec<f64> = r.iter().zip(s).map(|(a, b)| a * b).collect();
    let cand = map(&add(&drive("W", "C", "V", "b"), &m("U").apply(&rs)), f64::tanh);
    (0..s.len()).map(|k| (1.0 - u[k]) * s[k] + u[k] * cand[k]).collect()
}

/// Summed target NLL under teacher forcing; `targets` ends in EOS.
pub fn sentence_nll(store: &ParameterStore, ann: &[Vec<f64>], back_first: &[f64], latent: Option<&[f64]>, targets: &[usize]) -> f64 {
    let emb = Mat::of(store, "dec.emb");
    let mut s = map(&Mat::of(store, "dec.W_s").apply(back_first), f64::tanh);
    let mut y_prev = emb.row(BOS);
    let mut nll = 0.0;
    for (j, &y) in targets.iter().enumerate() {
        let (_, c) = attend(store, &s, ann);
        let lp = log_softmax(&logits(store, &y_prev, &s, &c));
        nll -= lp[y];
        if j + 1 < targets.len() {
            let ye = emb.row(y);
            s = dec_step(store, &s, &ye, &c, latent);
            y_prev = ye;
        }
    }
    nll
}

/// Source annotations (with EOS appended) for a model sharing its encoder.
pub fn source_annotations(store: &ParameterStore, src: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
    encode(store, "enc.src_emb", "enc", src)
}
