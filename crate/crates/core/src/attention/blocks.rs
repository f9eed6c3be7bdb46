//! Attention and fusion blocks over `[B, N, T, D]` hidden states.
//!
//! `N` is the location axis (roads or cells) and `T` the time axis. Spatial
//! operations act independently at each time index, temporal ones at each
//! location.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mha::{AttnOutput, MultiHead};
use crate::autodiff::{xavier_uniform, ParamId, ParamStore, Tape, Tensor, Var};
use crate::data::GridSpec;
use crate::error::{Error, Result};

/// Swaps the location and time axes of a 4-d hidden state.
pub fn swap_nt(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.permute(x, &[0, 2, 1, 3])
}

fn dims4(tape: &Tape, x: Var, what: &str) -> Result<[usize; 4]> {
    let s = tape.shape(x);
    <[usize; 4]>::try_from(s).map_err(|_| Error::InvalidShape {
        shape: s.to_vec(),
        reason: format!("{what} expects [B, N, T, D]"),
    })
}

/// `ReLU(Ã · H · W)` at every time index.
#[derive(Clone, Debug)]
pub struct DynamicConv {
    pub w: ParamId,
}

impl DynamicConv {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, d: usize) -> Result<Self> {
        let w = store.insert(format!("{prefix}.W"), xavier_uniform(rng, d, d))?;
        Ok(DynamicConv { w })
    }

    /// `adj [N, N]`, `h [B, N, T, D]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, adj: Var, h: Var) -> Result<Var> {
        let [b, n, t, d] = dims4(tape, h, "dynamic_conv")?;
        let flat = tape.reshape(h, &[b, n, t * d])?;
        let mixed = tape.matmul(adj, flat)?;
        let mixed = tape.reshape(mixed, &[b, n, t, d])?;
        let w = tape.param(store, self.w);
        let y = tape.matmul(mixed, w)?;
        Ok(tape.relu(y))
    }
}

/// Self-attention across locations, one time index at a time.
pub fn spatial_attention(
    att: &MultiHead,
    tape: &mut Tape,
    store: &ParamStore,
    h: Var,
    ste: Var,
) -> Result<AttnOutput> {
    let x = tape.concat_last(h, ste)?;
    let x = swap_nt(tape, x)?;
    let o = att.forward(tape, store, x, x, x, None)?;
    Ok(AttnOutput {
        out: swap_nt(tape, o.out)?,
        weights: o.weights,
    })
}

/// Self-attention across time, one location at a time.
pub fn temporal_attention(
    att: &MultiHead,
    tape: &mut Tape,
    store: &ParamStore,
    h: Var,
    ste: Var,
) -> Result<AttnOutput> {
    let x = tape.concat_last(h, ste)?;
    att.forward(tape, store, x, x, x, None)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    #[default]
    Relu,
    Logistic,
}

/// `g ∗ H_S + (1 − g) ∗ H_T` with `g = act(H_S W_s + H_T W_t + b)`.
#[derive(Clone, Debug)]
pub struct GatedFusion {
    pub ws: ParamId,
    pub wt: ParamId,
    pub b: ParamId,
    pub kind: GateKind,
}

impl GatedFusion {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, d: usize, kind: GateKind) -> Result<Self> {
        Ok(GatedFusion {
            ws: store.insert(format!("{prefix}.Ws"), xavier_uniform(rng, d, d))?,
            wt: store.insert(format!("{prefix}.Wt"), xavier_uniform(rng, d, d))?,
            b: store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]))?,
            kind,
        })
    }

    pub fn gate(&self, tape: &mut Tape, store: &ParamStore, hs: Var, ht: Var) -> Result<Var> {
        if tape.shape(hs) != tape.shape(ht) {
            return Err(Error::ShapeMismatch {
                op: "gated_fusion",
                lhs: tape.shape(hs).to_vec(),
                rhs: tape.shape(ht).to_vec(),
            });
        }
        let (ws, wt, b) = (tape.param(store, self.ws), tape.param(store, self.wt), tape.param(store, self.b));
        let a = tape.matmul(hs, ws)?;
        let c = tape.matmul(ht, wt)?;
        let s = tape.add(a, c)?;
        let s = tape.add(s, b)?;
        Ok(match self.kind {
            GateKind::Relu => tape.relu(s),
            GateKind::Logistic => tape.sigmoid(s),
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, hs: Var, ht: Var) -> Result<Var> {
        let g = self.gate(tape, store, hs, ht)?;
        let left = tape.mul(g, hs)?;
        let one_minus = tape.rsub_scalar(1.0, g);
        let right = tape.mul(one_minus, ht)?;
        tape.add(left, right)
    }
}

/// Per-road, per-head Gaussian proximity mask with `σ = exp(s)` meters.
#[derive(Clone, Debug)]
pub struct GaussianMask {
    pub s: ParamId,
}

impl GaussianMask {
    /// Registers `{prefix}.s` of shape `[n_roads, heads]` with every `σ = sigma0`.
    pub fn new(store: &mut ParamStore, prefix: &str, n_roads: usize, heads: usize, sigma0: f64) -> Result<Self> {
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::config(format!("initial mask width must be positive, got {sigma0}")));
        }
        let s = store.insert(format!("{prefix}.s"), Tensor::full(&[n_roads, heads], sigma0.ln()))?;
        Ok(GaussianMask { s })
    }

    /// `dist [N_X, N_Z]` meters to `M [K, N_X, N_Z] = -d² / (2σ²)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, dist: Var) -> Result<Var> {
        let s = tape.param(store, self.s);
        gaussian_mask(tape, dist, s)
    }
}

/// `-½ (d/σ)²` for `dist [N_X, N_Z]` and log-widths `s [N_X, K]`.
pub fn gaussian_mask(tape: &mut Tape, dist: Var, s: Var) -> Result<Var> {
    let (nx, nz) = (tape.shape(dist)[0], tape.shape(dist)[1]);
    let k = tape.shape(s)[1];
    if tape.shape(s)[0] != nx {
        return Err(Error::ShapeMismatch {
            op: "gaussian_mask",
            lhs: tape.shape(dist).to_vec(),
            rhs: tape.shape(s).to_vec(),
        });
    }
    let sigma = tape.exp(s);
    let sigma = tape.transpose(sigma)?;
    let sigma = tape.reshape(sigma, &[k, nx, 1])?;
    let d = tape.reshape(dist, &[1, nx, nz])?;
    let q = tape.div(d, sigma)?;
    let q2 = tape.mul(q, q)?;
    Ok(tape.scale(q2, -0.5))
}

/// Cross-attention from roads to cells at each time index.
///
/// Query: road-side embedding `ste_x [B, N_X, T, D]`; key: `h_z ∥ ste_z`;
/// value: `h_z [B, N_Z, T, D]`. `mask` broadcasts to `[K, N_X, N_Z]`.
pub fn bipartite_transform(
    att: &MultiHead,
    tape: &mut Tape,
    store: &ParamStore,
    ste_x: Var,
    h_z: Var,
    ste_z: Var,
    mask: Option<Var>,
) -> Result<AttnOutput> {
    let q = swap_nt(tape, ste_x)?;
    let key = tape.concat_last(h_z, ste_z)?;
    let key = swap_nt(tape, key)?;
    let v = swap_nt(tape, h_z)?;
    let o = att.forward(tape, store, q, key, v, mask)?;
    Ok(AttnOutput {
        out: swap_nt(tape, o.out)?,
        weights: o.weights,
    })
}

/// Cross-attention from a length-P sequence to a length-Q one at each location.
pub fn temporal_transform(
    att: &MultiHead,
    tape: &mut Tape,
    store: &ParamStore,
    query: Var,
    key: Var,
    value: Var,
) -> Result<AttnOutput> {
    att.forward(tape, store, query, key, value, None)
}

/// Zero-padded 2-d convolution over the cell grid, applied per time index.
#[derive(Clone, Debug)]
pub struct GridConv {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    index: Arc<Vec<Option<usize>>>,
}

impl GridConv {
    /// Registers `{prefix}.W` (`[k²·d_in, d_out]`) and `{prefix}.b`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        grid: &GridSpec,
        kernel: usize,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::config(format!("grid convolution kernel must be odd, got {kernel}")));
        }
        let w = store.insert(
            format!("{prefix}.W"),
            xavier_uniform(rng, kernel * kernel * d_in, d_out),
        )?;
        let b = store.insert(format!("{prefix}.b"), Tensor::zeros(&[d_out]))?;
        Ok(GridConv {
            w,
            b,
            kernel,
            index: Arc::new(Self::im2col_index(grid, kernel)),
        })
    }

    /// Source cell for every (offset, cell) pair, offset-major; `None` pads.
    fn im2col_index(grid: &GridSpec, kernel: usize) -> Vec<Option<usize>> {
        let half = (kernel / 2) as isize;
        let (nh, nw) = (grid.n_h as isize, grid.n_w as isize);
        let mut idx = Vec::with_capacity(kernel * kernel * grid.n_h * grid.n_w);
        for dy in -half..=half {
            for dx in -half..=half {
                for r in 0..nh {
                    for c in 0..nw {
                        let (rr, cc) = (r + dy, c + dx);
                        idx.push((rr >= 0 && rr < nh && cc >= 0 && cc < nw).then(|| (rr * nw + cc) as usize));
                    }
                }
            }
        }
        idx
    }

    /// `[B, N_Z, T, D_in]` to `ReLU(conv + b)` of shape `[B, N_Z, T, D_out]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let [b, n, t, d] = dims4(tape, h, "grid_conv")?;
        let kk = self.kernel * self.kernel;
        if self.index.len() != kk * n {
            return Err(Error::ShapeMismatch {
                op: "grid_conv",
                lhs: vec![b, n, t, d],
                rhs: vec![self.index.len() / kk],
            });
        }
        let cols = tape.gather(h, 1, self.index.clone())?;
        let cols = tape.reshape(cols, &[b, kk, n, t, d])?;
        let cols = tape.permute(cols, &[0, 2, 3, 1, 4])?;
        let cols = tape.reshape(cols, &[b, n, t, kk * d])?;
        let (w, bias) = (tape.param(store, self.w), tape.param(store, self.b));
        let y = tape.matmul(cols, w)?;
        let y = tape.add(y, bias)?;
        Ok(tape.relu(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn dynamic_conv_identity_is_relu() {
        let mut store = ParamStore::new();
        let conv = DynamicConv::new(&mut store, &mut rng(), "c", 3).unwrap();
        store.set_value(conv.w, Tensor::eye(3)).unwrap();
        let mut tape = Tape::new();
        let h = Tensor::from_fn(&[2, 4, 2, 3], |i| ((i * 7) % 11) as f64 - 5.0);
        let hv = tape.constant(h.clone());
        let a = tape.constant(Tensor::eye(4));
        let y = conv.forward(&mut tape, &store, a, hv).unwrap();
        assert!(tape.value(y).bitwise_eq(&h.map(|v| v.max(0.0))));
    }

    #[test]
    fn dynamic_conv_matches_dense_oracle() {
        let mut store = ParamStore::new();
        let conv = DynamicConv::new(&mut store, &mut rng(), "c", 2).unwrap();
        let a = [0.5, 0.5, 0.0, 0.2, 0.3, 0.5, 0.0, 0.0, 0.0];
        let h = Tensor::from_fn(&[1, 3, 2, 2], |i| (i as f64 * 0.37).cos());
        let mut tape = Tape::new();
        let av = tape.constant(Tensor::new(vec![3, 3], a.to_vec()).unwrap());
        let hv = tape.constant(h.clone());
        let y = conv.forward(&mut tape, &store, av, hv).unwrap();
        let w = store.value(conv.w).clone();
        for i in 0..3 {
            for t in 0..2 {
                for k in 0..2 {
                    let mut acc = 0.0;
                    for j in 0..3 {
                        for m in 0..2 {
                            acc += a[i * 3 + j] * h.get(&[0, j, t, m]) * w.get(&[m, k]);
                        }
                    }
                    let got = tape.value(y).get(&[0, i, t, k]);
                    assert!((got - acc.max(0.0)).abs() < 1e-12);
                    if i == 2 {
                        assert_eq!(got, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn gate_extremes() {
        let mut store = ParamStore::new();
        let g = GatedFusion::new(&mut store, &mut rng(), "g", 3, GateKind::Relu).unwrap();
        store.set_value(g.ws, Tensor::zeros(&[3, 3])).unwrap();
        store.set_value(g.wt, Tensor::zeros(&[3, 3])).unwrap();
        let hs = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5);
        let ht = Tensor::from_fn(&[2, 3], |i| (i as f64).sqrt());
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let (a, b) = (tape.constant(hs.clone()), tape.constant(ht.clone()));
            let y = g.forward(&mut tape, store, a, b).unwrap();
            tape.value(y).clone()
        };
        assert!(run(&store).bitwise_eq(&ht));
        store.set_value(g.b, Tensor::full(&[3], 1.0)).unwrap();
        assert!(run(&store).bitwise_eq(&hs));
    }

    #[test]
    fn gaussian_mask_analytic_values() {
        let mut store = ParamStore::new();
        let m = GaussianMask::new(&mut store, "m", 1, 2, 500.0).unwrap();
        let sigma = store.value(m.s).data()[0].exp();
        let mut tape = Tape::new();
        let d = tape.constant(Tensor::new(vec![1, 3], vec![0.0, sigma, 2.0 * sigma]).unwrap());
        let y = m.forward(&mut tape, &store, d).unwrap();
        assert_eq!(tape.shape(y), &[2, 1, 3]);
        assert_eq!(&tape.value(y).data()[..3], &[0.0, -0.5, -2.0]);
    }

    #[test]
    fn grid_conv_center_tap_is_pointwise() {
        let spec = GridSpec {
            n_h: 3,
            n_w: 4,
            cell_size_m: 150.0,
            origin_lat: 37.5,
            origin_lon: 127.0,
        };
        let mut store = ParamStore::new();
        let conv = GridConv::new(&mut store, &mut rng(), "cnn", &spec, 5, 2, 2).unwrap();
        // only the centre tap (offset index 12) is the identity
        let mut w = vec![0.0; 25 * 2 * 2];
        w[12 * 4] = 1.0;
        w[12 * 4 + 3] = 1.0;
        store.set_value(conv.w, Tensor::new(vec![50, 2], w).unwrap()).unwrap();
        let h = Tensor::from_fn(&[1, 12, 2, 2], |i| (i as f64 * 0.9).sin());
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let y = conv.forward(&mut tape, &store, hv).unwrap();
        assert!(tape.value(y).bitwise_eq(&h.map(|v| v.max(0.0))));

        // a right-neighbour tap shifts columns, padding the last column with 0
        let mut w = vec![0.0; 100];
        let tap = 2 * 5 + 3;
        w[tap * 4] = 1.0;
        store.set_value(conv.w, Tensor::new(vec![50, 2], w).unwrap()).unwrap();
        let mut tape = Tape::new();
        let hv = tape.constant(Tensor::full(&[1, 12, 1, 2], 1.0));
        let y = conv.forward(&mut tape, &store, hv).unwrap();
        for cell in 0..12 {
            let expect = if cell % 4 == 3 { 0.0 } else { 1.0 };
            assert_eq!(tape.value(y).get(&[0, cell, 0, 0]), expect);
        }
    }

    #[test]
    fn spatial_attention_score_shape() {
        let mut store = ParamStore::new();
        let cfg = AttentionConfig::new(4, 2).unwrap();
        let att = MultiHead::new(&mut store, &mut rng(), "s", 8, 8, 8, cfg).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_fn(&[1, 5, 3, 4], |i| (i as f64).cos()));
        let o = spatial_attention(&att, &mut tape, &store, h, h).unwrap();
        assert_eq!(tape.shape(o.weights), &[1, 3, 2, 5, 5]);
        assert_eq!(tape.shape(o.out), &[1, 5, 3, 4]);
        let o = temporal_attention(&att, &mut tape, &store, h, h).unwrap();
        assert_eq!(tape.shape(o.weights), &[1, 5, 2, 3, 3]);
    }
}
