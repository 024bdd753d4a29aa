use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::{self, Rng};
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};

use super::PromptResponse;

/// Architecture of the decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    /// Start the output projection at zero (uniform predictions).
    pub zero_init_head: bool,
    pub init_std: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab_size: 64,
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 128,
            max_seq_len: 40,
            dropout: 0.0,
            zero_init_head: false,
            init_std: 0.02,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("lm: {m}")));
        if self.vocab_size < 4 {
            return bad(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq_len < 2 || self.d_ff == 0 {
            return bad("max_seq_len must be >= 2 and d_ff > 0".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.init_std <= 0.0 {
            return bad("init_std must be positive".into());
        }
        Ok(())
    }
}

const LN_EPS: f64 = 1e-5;
const CAUSAL_FILL: f64 = -1e9;

#[derive(Debug, Clone, Copy)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    out_w: usize,
    out_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc_w: usize,
    fc_b: usize,
    proj_w: usize,
    proj_b: usize,
}

/// Decoder-only transformer with learned positions and pre-layer-norm blocks.
#[derive(Debug, Clone)]
pub struct TinyLm<T: Scalar> {
    pub config: LmConfig,
    pub params: ParamStore<T>,
}

/// Parameters placed on a particular tape.
pub struct Bound<'m, T: Scalar> {
    model: &'m TinyLm<T>,
    vars: Vec<Var>,
}

impl<T: Scalar> Bound<'_, T> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Logits `[len × vocab]` for an input sequence; row `t` predicts token `t+1`.
    pub fn logits(&self, g: &mut Graph<T>, seq: &[usize], dropout: Option<&mut Rng>) -> Result<Var> {
        self.model.forward(g, &self.vars, seq, dropout)
    }
}

impl<T: Scalar> TinyLm<T> {
    /// Randomly initialized model; all draws come from `seed`.
    pub fn new(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng_for(seed, &[rng::stream::INIT]);
        let normal = Normal::new(0.0, config.init_std).expect("positive std");
        let mut randn = |shape: Vec<usize>| -> Tensor<T> {
            let n = shape.iter().product();
            let data: Vec<T> = (0..n).map(|_| T::cast_from(normal.sample(&mut rng))).collect();
            Tensor::new(shape, data).expect("shape")
        };
        let (v, d, f, l) = (config.vocab_size, config.d_model, config.d_ff, config.max_seq_len);
        let mut p = ParamStore::new();
        p.add("tok_emb", randn(vec![v, d]), true);
        p.add("pos_emb", randn(vec![l, d]), true);
        for i in 0..config.n_layers {
            p.add(format!("h{i}.ln1.g"), Tensor::full(vec![d], T::one()), false);
            p.add(format!("h{i}.ln1.b"), Tensor::zeros(vec![d]), false);
            p.add(format!("h{i}.attn.qkv.w"), randn(vec![d, 3 * d]), true);
            p.add(format!("h{i}.attn.qkv.b"), Tensor::zeros(vec![3 * d]), false);
            p.add(format!("h{i}.attn.out.w"), randn(vec![d, d]), true);
            p.add(format!("h{i}.attn.out.b"), Tensor::zeros(vec![d]), false);
            p.add(format!("h{i}.ln2.g"), Tensor::full(vec![d], T::one()), false);
            p.add(format!("h{i}.ln2.b"), Tensor::zeros(vec![d]), false);
            p.add(format!("h{i}.mlp.fc.w"), randn(vec![d, f]), true);
            p.add(format!("h{i}.mlp.fc.b"), Tensor::zeros(vec![f]), false);
            p.add(format!("h{i}.mlp.proj.w"), randn(vec![f, d]), true);
            p.add(format!("h{i}.mlp.proj.b"), Tensor::zeros(vec![d]), false);
        }
        p.add("ln_f.g", Tensor::full(vec![d], T::one()), false);
        p.add("ln_f.b", Tensor::zeros(vec![d]), false);
        let head = if config.zero_init_head {
            Tensor::zeros(vec![d, v])
        } else {
            randn(vec![d, v])
        };
        p.add("head.w", head, true);
        Ok(TinyLm { config, params: p })
    }

    /// Wraps an existing parameter store, checking names and shapes.
    pub fn from_params(config: LmConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = TinyLm::<T>::new(config.clone(), 0)?;
        if reference.params.names() != params.names() {
            return Err(Error::Checkpoint("parameter names do not match the model layout".into()));
        }
        for i in 0..params.len() {
            if reference.params.get(i).shape() != params.get(i).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    params.name(i),
                    params.get(i).shape(),
                    reference.params.get(i).shape()
                )));
            }
        }
        Ok(TinyLm { config, params })
    }

    /// A model whose greedy continuation alternates between `a` and `b`:
    /// every token except `b` predicts `b`, and `b` predicts `a`. All blocks
    /// are zeroed, so the residual stream is the token embedding alone.
    pub fn two_cycle(config: LmConfig, a: usize, b: usize) -> Result<Self> {
        if config.d_model < 2 || a >= config.vocab_size || b >= config.vocab_size || a == b {
            return Err(Error::invalid("two_cycle", "need d_model >= 2 and distinct in-vocabulary tokens"));
        }
        let mut m = TinyLm::<T>::new(config, 0)?;
        let (v, d) = (m.config.vocab_size, m.config.d_model);
        for i in 0..m.params.len() {
            let name = m.params.name(i).to_string();
            if !name.ends_with(".g") {
                m.params.get_mut(i).data_mut().iter_mut().for_each(|x| *x = T::zero());
            }
        }
        let emb = m.params.index_of("tok_emb").expect("tok_emb");
        let e = m.params.get_mut(emb).data_mut();
        for tok in 0..v {
            let sign = if tok == b { -T::one() } else { T::one() };
            e[tok * d] = sign;
            e[tok * d + 1] = -sign;
        }
        let head = m.params.index_of("head.w").expect("head.w");
        let h = m.params.get_mut(head).data_mut();
        let w = T::cast_from(10.0);
        h[b] = w;
        h[a] = -w;
        Ok(m)
    }

    pub fn bind<'m>(&'m self, g: &mut Graph<T>, trainable: bool) -> Bound<'m, T> {
        Bound {
            model: self,
            vars: self.params.bind(g, trainable),
        }
    }

    fn layer_idx(&self, i: usize) -> LayerIdx {
        let base = 2 + 12 * i;
        LayerIdx {
            ln1_g: base,
            ln1_b: base + 1,
            qkv_w: base + 2,
            qkv_b: base + 3,
            out_w: base + 4,
            out_b: base + 5,
            ln2_g: base + 6,
            ln2_b: base + 7,
            fc_w: base + 8,
            fc_b: base + 9,
            proj_w: base + 10,
            proj_b: base + 11,
        }
    }

    fn dropout(&self, g: &mut Graph<T>, x: Var, rng: &mut Option<&mut Rng>) -> Result<Var> {
        let p = self.config.dropout;
        let Some(r) = rng.as_deref_mut() else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::cast_from(1.0 / (1.0 - p));
        let n = g.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if r.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let m = g.constant(g.shape(x).to_vec(), mask)?;
        g.mul(x, m)
    }

    fn affine_norm(&self, g: &mut Graph<T>, vars: &[Var], x: Var, gain: usize, bias: usize) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS)?;
        let s = g.mul(n, vars[gain])?;
        g.add(s, vars[bias])
    }

    fn forward(&self, g: &mut Graph<T>, vars: &[Var], seq: &[usize], mut dropout: Option<&mut Rng>) -> Result<Var> {
        let c = &self.config;
        let t = seq.len();
        if t == 0 {
            return Err(Error::invalid("logits", "empty sequence"));
        }
        if t > c.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: t,
                max: c.max_seq_len,
            });
        }
        let (d, h) = (c.d_model, c.n_heads);
        let dh = d / h;
        let positions: Vec<usize> = (0..t).collect();
        let tok = g.embedding(vars[0], seq)?;
        let pos = g.embedding(vars[1], &positions)?;
        let mut x = g.add(tok, pos)?;
        x = self.dropout(g, x, &mut dropout)?;

        let mut mask = vec![T::zero(); t * t];
        for i in 0..t {
            for j in i + 1..t {
                mask[i * t + j] = T::cast_from(CAUSAL_FILL);
            }
        }
        let causal = g.constant(vec![t, t], mask)?;
        let scale = T::cast_from(1.0 / (dh as f64).sqrt());

        for layer in 0..c.n_layers {
            let li = self.layer_idx(layer);
            let a_in = self.affine_norm(g, vars, x, li.ln1_g, li.ln1_b)?;
            let qkv = g.matmul(a_in, vars[li.qkv_w])?;
            let qkv = g.add(qkv, vars[li.qkv_b])?;
            let mut heads = Vec::with_capacity(h);
            for hi in 0..h {
                let q = g.slice_cols(qkv, hi * dh, (hi + 1) * dh)?;
                let k = g.slice_cols(qkv, d + hi * dh, d + (hi + 1) * dh)?;
                let v = g.slice_cols(qkv, 2 * d + hi * dh, 2 * d + (hi + 1) * dh)?;
                let kt = g.transpose(k)?;
                let s = g.matmul(q, kt)?;
                let s = g.scale(s, scale)?;
                let s = g.add(s, causal)?;
                let p = g.softmax(s)?;
                heads.push(g.matmul(p, v)?);
            }
            let att = if h == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let att = g.matmul(att, vars[li.out_w])?;
            let att = g.add(att, vars[li.out_b])?;
            let att = self.dropout(g, att, &mut dropout)?;
            x = g.add(x, att)?;

            let m_in = self.affine_norm(g, vars, x, li.ln2_g, li.ln2_b)?;
            let hid = g.matmul(m_in, vars[li.fc_w])?;
            let hid = g.add(hid, vars[li.fc_b])?;
            let hid = g.gelu(hid)?;
            let out = g.matmul(hid, vars[li.proj_w])?;
            let out = g.add(out, vars[li.proj_b])?;
            let out = self.dropout(g, out, &mut dropout)?;
            x = g.add(x, out)?;
        }
        let n = vars.len();
        let x = self.affine_norm(g, vars, x, n - 3, n - 2)?;
        g.matmul(x, vars[n - 1])
    }

    /// Logits for a sequence without recording gradients.
    pub fn logits(&self, seq: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let out = b.logits(&mut g, seq, None)?;
        Ok(g.tensor(out))
    }

    /// Log-probability of the response given the prompt, summed over valid
    /// response tokens, or averaged over them when `normalize` is set.
    pub fn sequence_logprob(&self, pr: &PromptResponse, normalize: bool) -> Result<T> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let lp = super::sequence_logprob(&mut g, &b, pr, normalize)?;
        g.scalar_value(lp)
    }

    pub fn cast<U: Scalar>(&self) -> TinyLm<U> {
        TinyLm {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}
