//! Affine layers and the two-layer fully connected block used throughout the model.

use rand::Rng;

use super::params::{xavier_uniform, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// `act(x·W + b)` applied over the last axis.
#[derive(Clone, Debug)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
    pub act: Activation,
}

impl Affine {
    /// Registers `{prefix}.W` (`[d_in, d_out]`, Glorot) and `{prefix}.b` (zeros).
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        act: Activation,
    ) -> Result<Self> {
        let w = store.insert(format!("{prefix}.W"), xavier_uniform(rng, d_in, d_out))?;
        let b = store.insert(format!("{prefix}.b"), Tensor::zeros(&[d_out]))?;
        Ok(Affine { w, b, act })
    }

    pub fn d_in(&self, store: &ParamStore) -> usize {
        store.value(self.w).shape()[0]
    }

    pub fn d_out(&self, store: &ParamStore) -> usize {
        store.value(self.w).shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let xw = tape.matmul(x, w)?;
        let y = tape.add(xw, b)?;
        Ok(match self.act {
            Activation::Relu => tape.relu(y),
            Activation::Identity => y,
        })
    }
}

/// Two stacked affine layers; the first is always ReLU-activated.
#[derive(Clone, Debug)]
pub struct Fcn2 {
    pub l1: Affine,
    pub l2: Affine,
}

impl Fcn2 {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        final_act: Activation,
    ) -> Result<Self> {
        let l1 = Affine::new(store, rng, &format!("{prefix}.l1"), d_in, d_hidden, Activation::Relu)?;
        let l2 = Affine::new(store, rng, &format!("{prefix}.l2"), d_hidden, d_out, final_act)?;
        Ok(Fcn2 { l1, l2 })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, store, x)?;
        self.l2.forward(tape, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{finite_diff_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn relu(v: f64) -> f64 {
        v.max(0.0)
    }

    #[test]
    fn identity_weights_give_relu_hidden() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = Fcn2::new(&mut store, &mut rng, "f", 2, 2, 2, Activation::Relu).unwrap();
        store.set_value(f.l1.w, Tensor::eye(2)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![2.0, -3.0]).unwrap());
        let x = tape.reshape(x, &[1, 2]).unwrap();
        let h = f.l1.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(h).data(), &[2.0, 0.0]);
    }

    #[test]
    fn zero_input_gives_bias_path() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Fcn2::new(&mut store, &mut rng, "f", 3, 4, 2, Activation::Relu).unwrap();
        let b1 = Tensor::new(vec![4], vec![0.5, -0.2, 1.0, 0.3]).unwrap();
        let b2 = Tensor::new(vec![2], vec![-0.1, 0.4]).unwrap();
        store.set_value(f.l1.b, b1.clone()).unwrap();
        store.set_value(f.l2.b, b2.clone()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let y = f.forward(&mut tape, &store, x).unwrap();
        let w2 = store.value(f.l2.w);
        for j in 0..2 {
            let mut acc = b2.data()[j];
            for i in 0..4 {
                acc += relu(b1.data()[i]) * w2.get(&[i, j]);
            }
            assert!((tape.value(y).data()[j] - relu(acc)).abs() < 1e-15);
        }
    }

    #[test]
    fn random_case_matches_direct_evaluation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = Fcn2::new(&mut store, &mut rng, "f", 3, 5, 3, Activation::Relu).unwrap();
        let b1 = Tensor::from_fn(&[5], |i| 0.1 * i as f64 - 0.2);
        store.set_value(f.l1.b, b1).unwrap();
        let x = Tensor::from_fn(&[4, 3], |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = f.forward(&mut tape, &store, xv).unwrap();

        let (w1, b1, w2, b2) = (
            store.value(f.l1.w),
            store.value(f.l1.b),
            store.value(f.l2.w),
            store.value(f.l2.b),
        );
        for r in 0..4 {
            let hidden: Vec<f64> = (0..5)
                .map(|j| relu(b1.data()[j] + (0..3).map(|i| x.get(&[r, i]) * w1.get(&[i, j])).sum::<f64>()))
                .collect();
            for k in 0..3 {
                let o = relu(b2.data()[k] + (0..5).map(|j| hidden[j] * w2.get(&[j, k])).sum::<f64>());
                assert!((tape.value(y).get(&[r, k]) - o).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_check_identity_head() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Fcn2::new(&mut store, &mut rng, "f", 3, 4, 1, Activation::Identity).unwrap();
        store
            .set_value(f.l1.b, Tensor::new(vec![4], vec![0.3, 0.2, 0.4, 0.25]).unwrap())
            .unwrap();
        let x = Tensor::from_fn(&[6, 3], |i| ((i * 37 % 17) as f64) / 17.0 - 0.4);
        let rep = finite_diff_check(
            &mut store,
            |tape, store| {
                let xv = tape.constant(x.clone());
                let y = f.forward(tape, store, xv)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}
