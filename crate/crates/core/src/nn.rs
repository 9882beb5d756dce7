//! Layers shared by the models: linear maps, the LSTM cell, multi-head graph
//! attention, and a post-norm transformer encoder layer.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Mat::xavier(input, output, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Mat::zeros(1, output)));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.param(self.weight);
        let y = t.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = t.param(b);
                t.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Standard LSTM cell with gate order (input, forget, candidate, output).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let w_input = store.add(format!("{name}.w_input"), Mat::xavier(input, 4 * hidden, rng));
        let w_hidden = store.add(format!("{name}.w_hidden"), Mat::xavier(hidden, 4 * hidden, rng));
        // Forget-gate bias starts at 1.
        let mut b = Mat::zeros(1, 4 * hidden);
        for j in hidden..2 * hidden {
            b.set(0, j, 1.0);
        }
        let bias = store.add(format!("{name}.bias"), b);
        Self {
            w_input,
            w_hidden,
            bias,
            input,
            hidden,
        }
    }

    pub fn zero_state(&self, t: &mut Tape, batch: usize) -> LstmState {
        let h = t.constant(Mat::zeros(batch, self.hidden));
        let c = t.constant(Mat::zeros(batch, self.hidden));
        LstmState { h, c }
    }

    pub fn step(&self, t: &mut Tape, x: Var, state: LstmState) -> LstmState {
        let wi = t.param(self.w_input);
        let wh = t.param(self.w_hidden);
        let b = t.param(self.bias);
        let zx = t.matmul(x, wi);
        let zh = t.matmul(state.h, wh);
        let z = t.add(zx, zh);
        let z = t.add_row(z, b);
        let n = self.hidden;
        let i = t.slice_cols(z, 0, n);
        let f = t.slice_cols(z, n, n);
        let g = t.slice_cols(z, 2 * n, n);
        let o = t.slice_cols(z, 3 * n, n);
        let i = t.sigmoid(i);
        let f = t.sigmoid(f);
        let g = t.tanh(g);
        let o = t.sigmoid(o);
        let fc = t.mul(f, state.c);
        let ig = t.mul(i, g);
        let c = t.add(fc, ig);
        let tc = t.tanh(c);
        let h = t.mul(o, tc);
        LstmState { h, c }
    }
}

/// Adjacency with self-loops added, symmetrised, as a 0/1 mask.
pub fn attention_mask(n: usize, edges: &[(usize, usize)]) -> Mat {
    let mut m = Mat::identity(n);
    for &(a, b) in edges {
        m.set(a, b, 1.0);
        m.set(b, a, 1.0);
    }
    m
}

/// One multi-head graph attention layer.
///
/// Per head `k`: `z = x W_k`, score `e_ij = LeakyReLU(z_i a_k + z_j b_k)`
/// over the masked neighbourhood of `i` (itself included), attention is the
/// row softmax of `e`, and the head output is `alpha z`. Hidden layers
/// concatenate heads; the output layer averages them. ELU follows both.
#[derive(Clone, Debug)]
pub struct GatLayer {
    heads: Vec<GatHead>,
    concat: bool,
    pub input: usize,
    pub per_head: usize,
}

#[derive(Clone, Debug)]
struct GatHead {
    w: ParamId,
    a_src: ParamId,
    a_dst: ParamId,
}

pub const GAT_LEAKY_SLOPE: f64 = 0.2;

impl GatLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        per_head: usize,
        heads: usize,
        concat: bool,
        rng: &mut R,
    ) -> Self {
        let heads = (0..heads)
            .map(|k| GatHead {
                w: store.add(format!("{name}.head{k}.w"), Mat::xavier(input, per_head, rng)),
                a_src: store.add(format!("{name}.head{k}.a_src"), Mat::xavier(per_head, 1, rng)),
                a_dst: store.add(format!("{name}.head{k}.a_dst"), Mat::xavier(per_head, 1, rng)),
            })
            .collect();
        Self {
            heads,
            concat,
            input,
            per_head,
        }
    }

    pub fn output_dim(&self) -> usize {
        if self.concat {
            self.per_head * self.heads.len()
        } else {
            self.per_head
        }
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Returns the layer output and the per-head attention matrices.
    pub fn forward_with_attention(&self, t: &mut Tape, x: Var, mask: &Mat) -> (Var, Vec<Var>) {
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut attn = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let w = t.param(head.w);
            let a_src = t.param(head.a_src);
            let a_dst = t.param(head.a_dst);
            let z = t.matmul(x, w);
            let s_src = t.matmul(z, a_src);
            let s_dst = t.matmul(z, a_dst);
            let s_dst = t.transpose(s_dst);
            let e = t.outer_add(s_src, s_dst);
            let e = t.leaky_relu(e, GAT_LEAKY_SLOPE);
            let alpha = t.masked_softmax(e, mask);
            outs.push(t.matmul(alpha, z));
            attn.push(alpha);
        }
        let combined = if self.concat {
            t.concat_cols(&outs)
        } else {
            let mut acc = outs[0];
            for &o in &outs[1..] {
                acc = t.add(acc, o);
            }
            t.scale(acc, 1.0 / outs.len() as f64)
        };
        (t.elu(combined), attn)
    }

    pub fn forward(&self, t: &mut Tape, x: Var, mask: &Mat) -> Var {
        self.forward_with_attention(t, x, mask).0
    }
}

/// Two GAT layers: concatenating hidden layer, averaging output layer.
#[derive(Clone, Debug)]
pub struct GatStack {
    pub hidden: GatLayer,
    pub output: GatLayer,
}

impl GatStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        heads: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let l1 = GatLayer::new(store, &format!("{name}.l1"), input, hidden, heads, true, rng);
        let l2 = GatLayer::new(store, &format!("{name}.l2"), l1.output_dim(), output, heads, false, rng);
        Self {
            hidden: l1,
            output: l2,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.output.output_dim()
    }

    pub fn forward(&self, t: &mut Tape, x: Var, mask: &Mat) -> Var {
        let h = self.hidden.forward(t, x, mask);
        self.output.forward(t, h, mask)
    }
}

/// Sinusoidal position encodings, `len x dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Mat {
    let mut m = Mat::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            m.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

/// Post-norm transformer encoder layer without a causal mask.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ff1: Linear,
    ff2: Linear,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    pub dim: usize,
    pub heads: usize,
}

impl TransformerLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "model dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, ffn, true, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ffn, dim, true, rng),
            ln1_gain: store.add(format!("{name}.ln1.gain"), Mat::filled(1, dim, 1.0)),
            ln1_bias: store.add(format!("{name}.ln1.bias"), Mat::zeros(1, dim)),
            ln2_gain: store.add(format!("{name}.ln2.gain"), Mat::filled(1, dim, 1.0)),
            ln2_bias: store.add(format!("{name}.ln2.bias"), Mat::zeros(1, dim)),
            dim,
            heads,
        }
    }

    fn norm(&self, t: &mut Tape, x: Var, gain: ParamId, bias: ParamId) -> Var {
        let n = t.layer_norm(x, 1e-5);
        let g = t.param(gain);
        let b = t.param(bias);
        let n = t.mul_row(n, g);
        t.add_row(n, b)
    }

    /// `x` is `seq x dim`; returns `seq x dim` and per-head attention maps.
    pub fn forward_with_attention(&self, t: &mut Tape, x: Var) -> (Var, Vec<Var>) {
        let q = self.q.forward(t, x);
        let k = self.k.forward(t, x);
        let v = self.v.forward(t, x);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = t.slice_cols(q, h * dh, dh);
            let kh = t.slice_cols(k, h * dh, dh);
            let vh = t.slice_cols(v, h * dh, dh);
            let kt = t.transpose(kh);
            let s = t.matmul(qh, kt);
            let s = t.scale(s, scale);
            let a = t.softmax(s);
            outs.push(t.matmul(a, vh));
            maps.push(a);
        }
        let attn = t.concat_cols(&outs);
        let attn = self.o.forward(t, attn);
        let r1 = t.add(x, attn);
        let x1 = self.norm(t, r1, self.ln1_gain, self.ln1_bias);
        let f = self.ff1.forward(t, x1);
        let f = t.relu(f);
        let f = self.ff2.forward(t, f);
        let r2 = t.add(x1, f);
        (self.norm(t, r2, self.ln2_gain, self.ln2_bias), maps)
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        self.forward_with_attention(t, x).0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn zero_lstm_stays_at_zero() {
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "lstm", 3, 4, &mut rng());
        for id in store.ids().collect::<Vec<_>>() {
            let (r, c) = store.get(id).shape();
            *store.get_mut(id) = Mat::zeros(r, c);
        }
        let mut t = Tape::with_params(&store);
        let s0 = cell.zero_state(&mut t, 1);
        let x = t.constant(Mat::row_vector(vec![0.3, -1.0, 2.0]));
        let s1 = cell.step(&mut t, x, s0);
        assert!(t.value(s1.h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn isolated_node_is_elu_of_self_transform() {
        let mut store = ParamStore::new();
        let layer = GatLayer::new(&mut store, "gat", 3, 2, 1, true, &mut rng());
        let w = store.get(store.find("gat.head0.w").unwrap()).clone();
        let x = Mat::row_vector(vec![0.5, -0.25, 1.0]);
        let mut t = Tape::with_params(&store);
        let xv = t.constant(x.clone());
        let out = layer.forward(&mut t, xv, &attention_mask(1, &[]));
        let expected = x.matmul(&w).map(|v| if v > 0.0 { v } else { v.exp_m1() });
        for (a, b) in t.value(out).data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_twins_get_identical_outputs() {
        let mut store = ParamStore::new();
        let layer = GatLayer::new(&mut store, "gat", 2, 3, 2, true, &mut rng());
        let mut t = Tape::with_params(&store);
        let x = t.constant(Mat::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]));
        let out = layer.forward(&mut t, x, &attention_mask(2, &[(0, 1)]));
        let v = t.value(out);
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn transformer_single_position_shapes() {
        let mut store = ParamStore::new();
        let layer = TransformerLayer::new(&mut store, "tr", 8, 4, 16, &mut rng());
        let mut t = Tape::with_params(&store);
        let x = t.constant(Mat::random_normal(1, 8, 1.0, &mut rng()));
        let (y, maps) = layer.forward_with_attention(&mut t, x);
        assert_eq!(t.shape(y), (1, 8));
        for m in maps {
            assert_eq!(t.value(m).data(), &[1.0]);
        }
    }

    #[test]
    fn positions_differ_per_row() {
        let p = sinusoidal_positions(3, 4);
        assert_ne!(p.row(0), p.row(1));
        assert_eq!(p.get(0, 1), 1.0);
    }
}
