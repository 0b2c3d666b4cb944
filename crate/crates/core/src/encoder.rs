//! Bidirectional GRU encoder producing annotation vectors.

use rand::Rng;

use crate::error::{Error, Result, Shape};
use crate::params::ParameterStore;
use crate::tensor::{Axis, Graph, Var};

/// Names of the nine tensors of a GRU cell under `prefix`.
pub const GRU_PARTS: [&str; 9] = ["W", "W_u", "W_r", "U", "U_u", "U_r", "b", "b_u", "b_r"];

/// Registers a GRU cell: input weights `[hidden x input]`, recurrent weights
/// `[hidden x hidden]`, zero biases.
pub fn init_gru(store: &mut ParameterStore, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<()> {
    for w in ["W", "W_u", "W_r"] {
        store.insert_uniform(&format!("{prefix}.{w}"), hidden, input, rng)?;
    }
    for u in ["U", "U_u", "U_r"] {
        store.insert_uniform(&format!("{prefix}.{u}"), hidden, hidden, rng)?;
    }
    for b in ["b", "b_u", "b_r"] {
        store.insert_zeros(&format!("{prefix}.{b}"), 1, hidden)?;
    }
    Ok(())
}

/// A GRU cell's parameters bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    pub w: Var,
    pub w_u: Var,
    pub w_r: Var,
    pub u: Var,
    pub u_u: Var,
    pub u_r: Var,
    pub b: Var,
    pub b_u: Var,
    pub b_r: Var,
}

impl GruCell {
    pub fn bind(g: &mut Graph, store: &ParameterStore, prefix: &str) -> Result<Self> {
        let mut p = |n: &str| g.param(store, &format!("{prefix}.{n}"));
        let cell = GruCell {
            w: p("W")?,
            w_u: p("W_u")?,
            w_r: p("W_r")?,
            u: p("U")?,
            u_u: p("U_u")?,
            u_r: p("U_r")?,
            b: p("b")?,
            b_u: p("b_u")?,
            b_r: p("b_r")?,
        };
        let Shape(h, _) = g.shape(cell.w);
        for m in [cell.w_u, cell.w_r] {
            if g.shape(m) != g.shape(cell.w) {
                return Err(Error::Dimension { op: "gru", left: g.shape(cell.w), right: g.shape(m) });
            }
        }
        for m in [cell.u, cell.u_u, cell.u_r] {
            if g.shape(m) != Shape(h, h) {
                return Err(Error::Dimension { op: "gru", left: Shape(h, h), right: g.shape(m) });
            }
        }
        Ok(cell)
    }

    pub fn hidden(&self, g: &Graph) -> usize {
        g.shape(self.w).0
    }
}

/// One GRU update on a batch: `h_prev [M x d]`, `x [M x d_w]`.
///
/// `r = σ(W_r x + U_r h)`, `u = σ(W_u x + U_u h)`, `h̃ = tanh(W x + U(r⊙h))`,
/// `h' = (1-u)⊙h + u⊙h̃`, written as `h + u⊙(h̃ - h)`.
pub fn gru_step(g: &mut Graph, cell: &GruCell, h_prev: Var, x: Var) -> Result<Var> {
    let gate = |g: &mut Graph, w: Var, u: Var, b: Var| -> Result<Var> {
        let a = g.linear(x, w, Some(b))?;
        let r = g.matmul_nt(h_prev, u)?;
        let s = g.add(a, r)?;
        Ok(g.sigmoid(s))
    };
    let r = gate(g, cell.w_r, cell.u_r, cell.b_r)?;
    let u = gate(g, cell.w_u, cell.u_u, cell.b_u)?;
    let rh = g.mul(r, h_prev)?;
    let a = g.linear(x, cell.w, Some(cell.b))?;
    let rec = g.matmul_nt(rh, cell.u)?;
    let pre = g.add(a, rec)?;
    let cand = g.tanh(pre);
    let diff = g.sub(cand, h_prev)?;
    let step = g.mul(u, diff)?;
    g.add(h_prev, step)
}

/// Annotation vectors of a padded batch, one `[M x 2d]` node per position;
/// row `m` of position `i` is `[→h_i ; ←h_i]` for sentence `m`, or zeros past
/// its length.
#[derive(Clone, Debug)]
pub struct Annotations {
    pub positions: Vec<Var>,
    /// `mask[i][m]`: 1 when position `i` is a real token of sentence `m`.
    pub mask: Vec<Vec<f64>>,
    pub lengths: Vec<usize>,
    /// Backward-direction state at the first position, `[M x d]`.
    pub backward_first: Var,
    pub hidden: usize,
}

impl Annotations {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// The mask laid out as `[M x T]`, row-major.
    pub fn mask_rows(&self) -> Vec<f64> {
        let (m, t) = (self.batch_size(), self.len());
        let mut out = vec![0.0; m * t];
        for (i, col) in self.mask.iter().enumerate() {
            for (r, &v) in col.iter().enumerate() {
                out[r * t + i] = v;
            }
        }
        out
    }
}

fn mask_column(g: &mut Graph, mask: &[f64]) -> Result<Var> {
    g.constant(mask.len(), 1, mask.to_vec())
}

/// Keeps `h_new` where the mask is 1 and `h_old` elsewhere.
fn masked_update(g: &mut Graph, h_new: Var, h_old: Var, mask: &[f64]) -> Result<Var> {
    if mask.iter().all(|&v| v == 1.0) {
        return Ok(h_new);
    }
    let m = mask_column(g, mask)?;
    let diff = g.sub(h_new, h_old)?;
    let keep = g.mul_col(diff, m)?;
    g.add(h_old, keep)
}

/// Runs `fwd` left to right and `bwd` right to left over embedded positions
/// (`[M x d_w]` each), both from zero states. `mask[i][m]` flags real tokens;
/// padding must be trailing.
pub fn encode_bidirectional(
    g: &mut Graph,
    fwd: &GruCell,
    bwd: &GruCell,
    embeddings: &[Var],
    mask: &[Vec<f64>],
) -> Result<Annotations> {
    let t_len = embeddings.len();
    if t_len == 0 {
        return Err(Error::contract("cannot encode an empty sequence"));
    }
    if mask.len() != t_len {
        return Err(Error::contract(format!("mask covers {} positions, expected {t_len}", mask.len())));
    }
    let batch = g.shape(embeddings[0]).0;
    let d = fwd.hidden(g);
    if bwd.hidden(g) != d {
        return Err(Error::Dimension {
            op: "encode_bidirectional",
            left: Shape(d, d),
            right: Shape(bwd.hidden(g), bwd.hidden(g)),
        });
    }
    let lengths: Vec<usize> = (0..batch)
        .map(|m| mask.iter().map(|col| col[m]).sum::<f64>() as usize)
        .collect();
    if lengths.contains(&0) {
        return Err(Error::contract("sentence with no real tokens"));
    }

    let mut forward = Vec::with_capacity(t_len);
    let mut h = g.zeros(batch, d);
    for (x, mk) in embeddings.iter().zip(mask) {
        let next = gru_step(g, fwd, h, *x)?;
        h = masked_update(g, next, h, mk)?;
        forward.push(h);
    }

    let mut backward = vec![h; t_len];
    let mut h = g.zeros(batch, d);
    for i in (0..t_len).rev() {
        let next = gru_step(g, bwd, h, embeddings[i])?;
        h = masked_update(g, next, h, &mask[i])?;
        backward[i] = h;
    }

    let mut positions = Vec::with_capacity(t_len);
    for i in 0..t_len {
        let cat = g.concat(&[forward[i], backward[i]], Axis::Cols)?;
        let row = if mask[i].iter().all(|&v| v == 1.0) {
            cat
        } else {
            let m = mask_column(g, &mask[i])?;
            g.mul_col(cat, m)?
        };
        positions.push(row);
    }
    Ok(Annotations {
        positions,
        mask: mask.to_vec(),
        lengths,
        backward_first: backward[0],
        hidden: d,
    })
}

/// Mean of the annotation rows over each sentence's true length, `[M x 2d]`.
pub fn mean_pool(g: &mut Graph, ann: &Annotations) -> Result<Var> {
    if ann.lengths.contains(&0) {
        return Err(Error::contract("mean-pool over a zero-length sentence"));
    }
    let mut sum = ann.positions[0];
    for &p in &ann.positions[1..] {
        sum = g.add(sum, p)?;
    }
    let inv: Vec<f64> = ann.lengths.iter().map(|&l| 1.0 / l as f64).collect();
    let inv = g.constant(inv.len(), 1, inv)?;
    g.mul_col(sum, inv)
}

/// Embeds column `t` of a padded id matrix for every position.
pub fn embed_positions(g: &mut Graph, table: Var, ids: &[Vec<usize>]) -> Result<Vec<Var>> {
    let width = ids.first().map_or(0, Vec::len);
    (0..width)
        .map(|t| {
            let col: Vec<usize> = ids.iter().map(|r| r[t]).collect();
            g.lookup(table, &col)
        })
        .collect()
}

/// Per-position masks `[T][M]` from row-major `[M][T]` masks.
pub fn transpose_mask(mask: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let width = mask.first().map_or(0, Vec::len);
    (0..width).map(|t| mask.iter().map(|r| r[t]).collect()).collect()
}
