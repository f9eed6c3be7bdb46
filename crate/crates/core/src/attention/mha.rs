//! Multi-head scaled dot-product attention over arbitrary leading axes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Affine, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionConfig {
    /// Splits `d` into `heads` equal parts.
    pub fn new(d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d == 0 || d % heads != 0 {
            return Err(Error::config(format!("model width {d} is not divisible into {heads} heads")));
        }
        Ok(AttentionConfig {
            heads,
            head_dim: d / heads,
        })
    }

    pub fn d(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Output and per-head attention weights `[..., K, L_q, L_k]`.
#[derive(Clone, Copy, Debug)]
pub struct AttnOutput {
    pub out: Var,
    pub weights: Var,
}

/// Query/key/value projections `f1, f2, f3` and the output map `f_o`, all
/// single ReLU-affine layers.
#[derive(Clone, Debug)]
pub struct MultiHead {
    pub f1: Affine,
    pub f2: Affine,
    pub f3: Affine,
    pub fo: Affine,
    pub cfg: AttentionConfig,
}

/// Rejects masks with a row of nothing but `-inf`.
fn check_mask(tape: &Tape, mask: Var) -> Result<()> {
    let m = tape.value(mask);
    let w = *m.shape().last().unwrap_or(&1);
    if let Some(i) = m
        .data()
        .chunks_exact(w)
        .position(|row| row.iter().all(|&v| v == f64::NEG_INFINITY))
    {
        return Err(Error::Attention(format!("mask row {i} excludes every key")));
    }
    if m.data().iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Attention("mask entries must be finite or -inf".into()));
    }
    Ok(())
}

impl MultiHead {
    /// Registers `{prefix}.{q,k,v,o}`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        d_q: usize,
        d_k: usize,
        d_v: usize,
        cfg: AttentionConfig,
    ) -> Result<Self> {
        let d = cfg.d();
        Ok(MultiHead {
            f1: Affine::new(store, rng, &format!("{prefix}.q"), d_q, d, Activation::Relu)?,
            f2: Affine::new(store, rng, &format!("{prefix}.k"), d_k, d, Activation::Relu)?,
            f3: Affine::new(store, rng, &format!("{prefix}.v"), d_v, d, Activation::Relu)?,
            fo: Affine::new(store, rng, &format!("{prefix}.o"), d, d, Activation::Relu)?,
            cfg,
        })
    }

    /// `xq [..., L_q, d_q]`, `xk [..., L_k, d_k]`, `xv [..., L_k, d_v]` to `[..., L_q, D]`.
    ///
    /// `mask`, when given, is added to the scaled scores and must broadcast to
    /// `[..., K, L_q, L_k]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        xq: Var,
        xk: Var,
        xv: Var,
        mask: Option<Var>,
    ) -> Result<AttnOutput> {
        let (sk, sv) = (tape.shape(xk), tape.shape(xv));
        if sk[..sk.len() - 1] != sv[..sv.len() - 1] {
            return Err(Error::ShapeMismatch {
                op: "attention key/value",
                lhs: sk.to_vec(),
                rhs: sv.to_vec(),
            });
        }
        let q = self.f1.forward(tape, store, xq)?;
        let k = self.f2.forward(tape, store, xk)?;
        let v = self.f3.forward(tape, store, xv)?;
        if let Some(m) = mask {
            check_mask(tape, m)?;
        }
        let (merged, weights) = tape.attention(q, k, v, mask, self.cfg.heads)?;
        let out = self.fo.forward(tape, store, merged)?;
        Ok(AttnOutput { out, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_divisibility() {
        assert_eq!(AttentionConfig::new(16, 4).unwrap().head_dim, 4);
        assert_eq!(AttentionConfig::new(64, 8).unwrap().d(), 64);
        assert!(AttentionConfig::new(60, 8).is_err());
    }

    #[test]
    fn singleton_key_ignores_scores() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AttentionConfig::new(8, 2).unwrap();
        let att = MultiHead::new(&mut store, &mut rng, "a", 3, 3, 3, cfg).unwrap();
        let mut tape = Tape::new();
        let xq = tape.constant(Tensor::from_fn(&[4, 3], |i| (i as f64).sin()));
        let xk = tape.constant(Tensor::from_fn(&[1, 3], |i| i as f64));
        let xv = tape.constant(Tensor::from_fn(&[1, 3], |i| 1.0 - i as f64 * 0.7));
        let o = att.forward(&mut tape, &store, xq, xk, xv, None).unwrap();
        assert!(tape.value(o.weights).data().iter().all(|&w| w == 1.0));
        let v = att.f3.forward(&mut tape, &store, xv).unwrap();
        let expect = att.fo.forward(&mut tape, &store, v).unwrap();
        let out = tape.value(o.out).clone();
        for r in 0..4 {
            assert_eq!(&out.data()[r * 8..(r + 1) * 8], tape.value(expect).data());
        }
    }

    #[test]
    fn all_neg_inf_row_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AttentionConfig::new(4, 2).unwrap();
        let att = MultiHead::new(&mut store, &mut rng, "a", 2, 2, 2, cfg).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 2], |i| i as f64));
        let m = tape.constant(Tensor::new(vec![2, 2], vec![0.0, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap());
        let err = att.forward(&mut tape, &store, x, x, x, Some(m)).unwrap_err();
        assert!(matches!(err, Error::Attention(_)));
    }
}
