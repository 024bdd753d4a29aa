//! Incremental inference with cached keys and values. Produces the same
//! logits as the tape forward pass, one position at a time.

use crate::error::{Error, Result};
use crate::numerics::{matmul_into, Scalar};

use super::TinyLm;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;

fn layer_norm<T: Scalar>(x: &[T], gain: &[T], bias: &[T]) -> Vec<T> {
    let n = T::cast_from(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / n;
    let is = T::one() / (var + T::cast_from(LN_EPS)).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&a, (&g, &b))| (a - mean) * is * g + b)
        .collect()
}

fn affine<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, n: usize) -> Vec<T> {
    let mut out = match b {
        Some(b) => b.to_vec(),
        None => vec![T::zero(); n],
    };
    matmul_into(x, w, 1, x.len(), n, &mut out);
    out
}

/// Decoding session holding per-layer key/value caches.
pub struct KvCache<'m, T: Scalar> {
    model: &'m TinyLm<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<'m, T: Scalar> KvCache<'m, T> {
    pub fn new(model: &'m TinyLm<T>) -> Self {
        let l = model.config.n_layers;
        KvCache {
            model,
            keys: vec![Vec::new(); l],
            values: vec![Vec::new(); l],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `token` at the next position and returns its next-token logits.
    pub fn push(&mut self, token: usize) -> Result<Vec<T>> {
        let c = &self.model.config;
        if self.len >= c.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: self.len + 1,
                max: c.max_seq_len,
            });
        }
        if token >= c.vocab_size {
            return Err(Error::invalid("logits", format!("token {token} outside vocabulary")));
        }
        let p = &self.model.params;
        let (d, h, f, v) = (c.d_model, c.n_heads, c.d_ff, c.vocab_size);
        let dh = d / h;
        let scale = T::cast_from(1.0 / (dh as f64).sqrt());
        let tok = &p.get(0).data()[token * d..(token + 1) * d];
        let pos = &p.get(1).data()[self.len * d..(self.len + 1) * d];
        let mut x: Vec<T> = tok.iter().zip(pos).map(|(&a, &b)| a + b).collect();
        let t = self.len + 1;
        for layer in 0..c.n_layers {
            let base = 2 + 12 * layer;
            let w = |i: usize| p.get(base + i).data();
            let a = layer_norm(&x, w(0), w(1));
            let qkv = affine(&a, w(2), Some(w(3)), 3 * d);
            self.keys[layer].extend_from_slice(&qkv[d..2 * d]);
            self.values[layer].extend_from_slice(&qkv[2 * d..]);
            let keys = &self.keys[layer];
            let vals = &self.values[layer];
            let mut att = vec![T::zero(); d];
            let mut scores = vec![T::zero(); t];
            for hi in 0..h {
                let q = &qkv[hi * dh..(hi + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let k = &keys[j * d + hi * dh..j * d + (hi + 1) * dh];
                    *s = q.iter().zip(k).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - m).exp();
                    z = z + *s;
                }
                let out = &mut att[hi * dh..(hi + 1) * dh];
                for (j, &s) in scores.iter().enumerate() {
                    let pj = s / z;
                    let vj = &vals[j * d + hi * dh..j * d + (hi + 1) * dh];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o = *o + pj * vv;
                    }
                }
            }
            let att = affine(&att, w(4), Some(w(5)), d);
            x.iter_mut().zip(&att).for_each(|(a, &b)| *a = *a + b);
            let m = layer_norm(&x, w(6), w(7));
            let mut hid = affine(&m, w(8), Some(w(9)), f);
            let (half, k3) = (T::cast_from(0.5), T::cast_from(0.044_715));
            let gc = T::cast_from(GELU_C);
            for u in hid.iter_mut() {
                let z = *u;
                *u = half * z * (T::one() + (gc * (z + k3 * z * z * z)).tanh());
            }
            let out = affine(&hid, w(10), Some(w(11)), d);
            x.iter_mut().zip(&out).for_each(|(a, &b)| *a = *a + b);
        }
        let n = p.len();
        let xf = layer_norm(&x, p.get(n - 3).data(), p.get(n - 2).data());
        let logits = affine(&xf, p.get(n - 1).data(), None, v);
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite { op: "logits" });
        }
        self.len += 1;
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::LmConfig;

    #[test]
    fn incremental_matches_full_forward() {
        let cfg = LmConfig {
            vocab_size: 11,
            d_model: 16,
            d_ff: 24,
            n_heads: 2,
            max_seq_len: 9,
            init_std: 0.3,
            ..LmConfig::default()
        };
        let m = TinyLm::<f64>::new(cfg, 5).unwrap();
        let seq = [1, 4, 7, 7, 3, 10, 2, 5, 6];
        let full = m.logits(&seq).unwrap();
        let mut cache = KvCache::new(&m);
        for (t, &tok) in seq.iter().enumerate() {
            let row = cache.push(tok).unwrap();
            for (a, b) in row.iter().zip(&full.data()[t * 11..(t + 1) * 11]) {
                assert!((a - b).abs() < 1e-10, "position {t}: {a} vs {b}");
            }
        }
        assert!(matches!(cache.push(3), Err(Error::SequenceTooLong { .. })));
    }
}
