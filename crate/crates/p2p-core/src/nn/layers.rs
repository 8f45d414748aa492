//! Parameterized layers built on the tape: linear maps, layer norm,
//! multi-head attention, and feed-forward blocks.

use rand_chacha::ChaCha8Rng;

use super::params::{normal_init, xavier_init, zeros, ones, ParamId, ParamStore};
use super::tape::{Tape, Var};

pub const LN_EPS: f64 = 1e-5;

/// y = x W + b with W: (in, out).
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), xavier_init(rng, &[d_in, d_out], d_in, d_out));
        let b = store.add(&format!("{name}.b"), zeros(&[d_out]));
        Self { w, b }
    }

    /// Xavier scaled down by `gain`; used for output heads that should start
    /// near a neutral prediction.
    pub fn new_scaled(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        gain: f64,
    ) -> Self {
        let mut w = xavier_init(rng, &[d_in, d_out], d_in, d_out);
        w *= gain;
        let w = store.add(&format!("{name}.w"), w);
        let b = store.add(&format!("{name}.b"), zeros(&[d_out]));
        Self { w, b }
    }

    pub fn new_zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(&format!("{name}.w"), zeros(&[d_in, d_out]));
        let b = store.add(&format!("{name}.b"), zeros(&[d_out]));
        Self { w, b }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let xw = tape.matmul(x, w);
        tape.add_bias(xw, b)
    }
}

/// Learned per-feature scale and shift after row normalization.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.add(&format!("{name}.g"), ones(&[d]));
        let beta = store.add(&format!("{name}.b"), zeros(&[d]));
        Self { gamma, beta }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Multi-head attention. Query/key inputs may differ from the value input
/// (keys can carry positional encodings that values must not).
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        heads: usize,
    ) -> Self {
        assert!(d_model % heads == 0, "head count must divide the model width");
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d_model, d_model),
            k: Linear::new(store, rng, &format!("{name}.k"), d_model, d_model),
            v: Linear::new(store, rng, &format!("{name}.v"), d_model, d_model),
            o: Linear::new(store, rng, &format!("{name}.o"), d_model, d_model),
            heads,
        }
    }

    /// Returns the attention output and the per-head attention probability
    /// matrices (query rows x key rows), used for inspection renders.
    pub fn apply(&self, tape: &mut Tape, q_in: Var, k_in: Var, v_in: Var) -> (Var, Vec<Var>) {
        let d_model = tape.value2(q_in).ncols();
        let d_head = d_model / self.heads;
        let scale = 1.0 / (d_head as f64).sqrt();

        let q = self.q.apply(tape, q_in);
        let k = self.k.apply(tape, k_in);
        let v = self.v.apply(tape, v_in);

        let mut contexts = Vec::with_capacity(self.heads);
        let mut probs_all = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.cols_slice(q, h * d_head, d_head);
            let kh = tape.cols_slice(k, h * d_head, d_head);
            let vh = tape.cols_slice(v, h * d_head, d_head);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scaled = tape.scale(scores, scale);
            let probs = tape.softmax_rows(scaled);
            let ctx = tape.matmul(probs, vh);
            contexts.push(ctx);
            probs_all.push(probs);
        }
        let merged = tape.concat_cols(&contexts);
        (self.o.apply(tape, merged), probs_all)
    }
}

/// Two-layer feed-forward block with a GELU in between.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        d_hidden: usize,
    ) -> Self {
        Self {
            l1: Linear::new(store, rng, &format!("{name}.l1"), d_model, d_hidden),
            l2: Linear::new(store, rng, &format!("{name}.l2"), d_hidden, d_model),
        }
    }

    /// Variant whose second layer starts at zero, so the block initially
    /// contributes no output.
    pub fn new_zero_out(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        d_hidden: usize,
    ) -> Self {
        Self {
            l1: Linear::new(store, rng, &format!("{name}.l1"), d_model, d_hidden),
            l2: Linear::new_zeros(store, &format!("{name}.l2"), d_hidden, d_model),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.l1.apply(tape, x);
        let h = tape.gelu(h);
        self.l2.apply(tape, h)
    }
}

/// Learned embedding table used directly as a tape leaf.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        rows: usize,
        d: usize,
        std: f64,
    ) -> Self {
        let table = store.add(name, normal_init(rng, &[rows, d], std));
        Self { table }
    }

    pub fn apply(&self, tape: &mut Tape) -> Var {
        tape.param(self.table)
    }
}
