//! Layers built on the tape: linear maps, layer norm, multi-head attention,
//! pre-norm decoder blocks, the dense mixture-of-experts layer and the
//! text-guided cross-attention module.
//!
//! Layers only hold [`ParamId`]s; values live in a [`ParamStore`] so the same
//! layer description can run against a policy store and a frozen copy.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var, NEG_INF};

pub const LN_EPS: f64 = 1e-5;

pub fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights ~ N(0, 1/d_in), bias zero.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (d_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), normal_tensor(rng, &[d_in, d_out], std))?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[d_in, d_out]))?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}.g"), Tensor::filled(&[dim], 1.0))?,
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.layer_norm_last_dim(x, LN_EPS)?;
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let y = tape.mul_row(n, g)?;
        tape.add_row(y, b)
    }
}

/// Two-layer MLP: linear, relu, linear.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(FeedForward {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.fc2.forward(tape, store, h)
    }
}

/// `[T, T]` additive mask with the sentinel above the diagonal.
pub fn causal_mask(t: usize) -> Tensor {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            data[i * t + j] = NEG_INF;
        }
    }
    Tensor::new(vec![t, t], data).expect("square")
}

#[derive(Clone, Debug)]
struct Head {
    q: Linear,
    k: Linear,
    v: Linear,
}

/// Multi-head attention with per-head projections and an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    heads: Vec<Head>,
    out: Linear,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("model dim {dim} not divisible by {heads} heads")));
        }
        let hd = dim / heads;
        let mut hs = Vec::with_capacity(heads);
        for j in 0..heads {
            hs.push(Head {
                q: Linear::new(store, &format!("{name}.h{j}.q"), dim, hd, false, rng)?,
                k: Linear::new(store, &format!("{name}.h{j}.k"), dim, hd, false, rng)?,
                v: Linear::new(store, &format!("{name}.h{j}.v"), dim, hd, false, rng)?,
            });
        }
        Ok(MultiHeadAttention {
            heads: hs,
            out: Linear::new(store, &format!("{name}.o"), dim, dim, false, rng)?,
            head_dim: hd,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, causal: bool) -> Result<Var> {
        let t = tape.shape(x)[0];
        let mask = if causal {
            Some(tape.constant(causal_mask(t)))
        } else {
            None
        };
        let mut outs = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let q = h.q.forward(tape, store, x)?;
            let k = h.k.forward(tape, store, x)?;
            let v = h.v.forward(tape, store, x)?;
            let kt = tape.transpose(k)?;
            let s = tape.matmul(q, kt)?;
            let mut s = tape.scale(s, 1.0 / (self.head_dim as f64).sqrt())?;
            if let Some(m) = mask {
                s = tape.add(s, m)?;
            }
            let p = tape.softmax_last_dim(s)?;
            outs.push(tape.matmul(p, v)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_last_dim(&outs)?
        };
        self.out.forward(tape, store, cat)
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `+ ffn(ln2(.))`.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(DecoderBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 4 * dim, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, causal: bool) -> Result<Var> {
        if tape.shape(x).len() != 2 || tape.shape(x)[0] == 0 {
            return Err(Error::dim("decoder_block", format!("expected [T>=1, d], got {:?}", tape.shape(x))));
        }
        let h = self.ln1.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h, causal)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, h)?;
        tape.add(x, f)
    }
}

/// Dense soft-routed mixture of experts:
/// `out_t = sum_e softmax(router(x_t))_e * expert_e(x_t)`.
#[derive(Clone, Debug)]
pub struct MoELayer {
    pub router: Linear,
    pub experts: Vec<FeedForward>,
    pub dim: usize,
}

impl MoELayer {
    /// Parameters are named `{name}.router.w` and `{name}.expert{e}.fc{1,2}.{w,b}`.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, experts: usize, rng: &mut R) -> Result<Self> {
        if experts == 0 {
            return Err(Error::Config("mixture of experts needs at least one expert".into()));
        }
        let router = Linear::new(store, &format!("{name}.router"), dim, experts, false, rng)?;
        let experts = (0..experts)
            .map(|e| FeedForward::new(store, &format!("{name}.expert{e}"), dim, 4 * dim, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(MoELayer { router, experts, dim })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Per-token routing distribution, `[T, E]`.
    pub fn routing(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let logits = self.router.forward(tape, store, x)?;
        tape.softmax_last_dim(logits)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::dim("moe_forward", format!("expected [T, {}], got {:?}", self.dim, shape)));
        }
        let probs = self.routing(tape, store, x)?;
        let mut acc: Option<Var> = None;
        for (e, expert) in self.experts.iter().enumerate() {
            let y = expert.forward(tape, store, x)?;
            let w = tape.column(probs, e)?;
            let y = tape.scale_rows(y, w)?;
            acc = Some(match acc {
                None => y,
                Some(a) => tape.add(a, y)?,
            });
        }
        Ok(acc.expect("at least one expert"))
    }
}

/// Single-head cross-attention from decoder-side states to response text
/// embeddings, added back through a zero-initialized projection.
#[derive(Clone, Debug)]
pub struct TextGuidedModule {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub dim: usize,
}

impl TextGuidedModule {
    /// Parameters: `{name}.xattn.{q,k,v}.w`, `{name}.proj.w` (zeros).
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(TextGuidedModule {
            q: Linear::new(store, &format!("{name}.xattn.q"), dim, dim, false, rng)?,
            k: Linear::new(store, &format!("{name}.xattn.k"), dim, dim, false, rng)?,
            v: Linear::new(store, &format!("{name}.xattn.v"), dim, dim, false, rng)?,
            proj: Linear::zeros(store, &format!("{name}.proj"), dim, dim, false)?,
            dim,
        })
    }

    /// With `text` absent (inference) the hidden states pass through untouched.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, hidden: Var, text: Option<Var>) -> Result<Var> {
        let Some(text) = text else {
            return Ok(hidden);
        };
        let (hs, ts) = (tape.shape(hidden).to_vec(), tape.shape(text).to_vec());
        if hs.len() != 2 || ts.len() != 2 || hs[1] != self.dim || ts[1] != self.dim {
            return Err(Error::dim("tgm_fuse", format!("hidden {hs:?} vs text {ts:?} (dim {})", self.dim)));
        }
        if ts[0] == 0 {
            return Err(Error::domain("tgm_fuse", "empty text embedding"));
        }
        let q = self.q.forward(tape, store, hidden)?;
        let k = self.k.forward(tape, store, text)?;
        let v = self.v.forward(tape, store, text)?;
        let kt = tape.transpose(k)?;
        let s = tape.matmul(q, kt)?;
        let s = tape.scale(s, 1.0 / (self.dim as f64).sqrt())?;
        let p = tape.softmax_last_dim(s)?;
        let a = tape.matmul(p, v)?;
        let o = self.proj.forward(tape, store, a)?;
        tape.add(hidden, o)
    }
}
