use super::config::ModelConfig;
use crate::autodiff::Tensor;
use crate::data::{Sample, TrafficDataset, Window};
use crate::embeddings::{onehot_tensor, ONEHOT_WIDTH};
use crate::error::{Error, Result};

/// Model-ready tensors for a set of windows.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, N_X, P, 1]` normalized speeds.
    pub x: Tensor,
    /// `[B, N_Z, P, 1]` normalized population, absent for road-only models.
    pub z: Option<Tensor>,
    /// `[B, P+Q, 31]` calendar one-hots.
    pub onehot: Tensor,
    /// `[B, N_X, Q]` normalized targets.
    pub y: Tensor,
    /// `[B, N_X, Q]`, 1 where the target counts towards the loss/metrics.
    pub include: Tensor,
    /// Window start indices.
    pub starts: Vec<usize>,
}

/// `[T × N]` time-major block to `[N, T]` location-major values.
fn transpose_block(v: &[f64], t: usize, n: usize, out: &mut Vec<f64>) {
    for j in 0..n {
        for s in 0..t {
            out.push(v[s * n + j]);
        }
    }
}

impl Batch {
    /// `with_population = false` skips the `Z` tensor. Imputed targets get
    /// `include = 0` when `exclude_imputed` is set.
    pub fn from_samples(
        samples: &[Sample],
        p: usize,
        q: usize,
        with_population: bool,
        exclude_imputed: bool,
    ) -> Result<Self> {
        let b = samples.len();
        if b == 0 {
            return Err(Error::data("empty batch"));
        }
        let n_x = samples[0].x_hist.len() / p;
        let n_z = samples[0].z_hist.len() / p;
        let (mut x, mut z, mut y, mut inc, mut oh) = (
            Vec::with_capacity(b * n_x * p),
            Vec::with_capacity(if with_population { b * n_z * p } else { 0 }),
            Vec::with_capacity(b * n_x * q),
            Vec::with_capacity(b * n_x * q),
            Vec::with_capacity(b * (p + q) * ONEHOT_WIDTH),
        );
        for s in samples {
            if s.x_hist.len() != n_x * p || s.y.len() != n_x * q || s.timestamps.len() != p + q {
                return Err(Error::data(format!("window at {} has inconsistent shape", s.start)));
            }
            transpose_block(&s.x_hist, p, n_x, &mut x);
            if with_population {
                transpose_block(&s.z_hist, p, n_z, &mut z);
            }
            transpose_block(&s.y, q, n_x, &mut y);
            let imp: Vec<f64> = s
                .y_imputed
                .iter()
                .map(|&m| if m && exclude_imputed { 0.0 } else { 1.0 })
                .collect();
            transpose_block(&imp, q, n_x, &mut inc);
            oh.extend_from_slice(onehot_tensor(&s.timestamps)?.data());
        }
        Ok(Batch {
            x: Tensor::new(vec![b, n_x, p, 1], x)?,
            z: with_population.then(|| Tensor::new(vec![b, n_z, p, 1], z)).transpose()?,
            onehot: Tensor::new(vec![b, p + q, ONEHOT_WIDTH], oh)?,
            y: Tensor::new(vec![b, n_x, q], y)?,
            include: Tensor::new(vec![b, n_x, q], inc)?,
            starts: samples.iter().map(|s| s.start).collect(),
        })
    }

    /// Materializes windows from a prepared dataset.
    pub fn from_windows(
        data: &TrafficDataset,
        windows: &[Window],
        cfg: &ModelConfig,
        exclude_imputed: bool,
    ) -> Result<Self> {
        let samples = windows
            .iter()
            .map(|&w| data.sample(w, cfg.p, cfg.q))
            .collect::<Result<Vec<_>>>()?;
        Batch::from_samples(&samples, cfg.p, cfg.q, cfg.variant.uses_population(), exclude_imputed)
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn check(&self, cfg: &ModelConfig, n_x: usize, n_z: Option<usize>) -> Result<()> {
        let b = self.len();
        let want_x = [b, n_x, cfg.p, 1];
        if self.x.shape() != want_x {
            return Err(Error::ShapeMismatch {
                op: "batch speeds",
                lhs: self.x.shape().to_vec(),
                rhs: want_x.to_vec(),
            });
        }
        if let Some(n_z) = n_z {
            let want = [b, n_z, cfg.p, 1];
            match &self.z {
                Some(z) if z.shape() == want => {}
                Some(z) => {
                    return Err(Error::ShapeMismatch {
                        op: "batch population",
                        lhs: z.shape().to_vec(),
                        rhs: want.to_vec(),
                    })
                }
                None => return Err(Error::data("batch lacks population input")),
            }
        }
        if self.onehot.shape() != [b, cfg.p + cfg.q, ONEHOT_WIDTH] {
            return Err(Error::ShapeMismatch {
                op: "batch calendar",
                lhs: self.onehot.shape().to_vec(),
                rhs: vec![b, cfg.p + cfg.q, ONEHOT_WIDTH],
            });
        }
        Ok(())
    }
}
