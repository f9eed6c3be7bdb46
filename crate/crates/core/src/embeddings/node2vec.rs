//! Uniform random-walk graph embedding trained with skip-gram and negative sampling.

use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::serial::{tensor_map_from_str, tensor_map_to_string};
use crate::autodiff::Tensor;
use crate::data::RoadGraph;
use crate::error::{Error, Result};

/// Key of the road embedding inside cache files and checkpoints.
pub const E_X_KEY: &str = "node2vec.E_X";

#[derive(Clone, Debug, PartialEq)]
pub struct Node2VecOptions {
    pub walks_per_node: usize,
    pub walk_length: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for Node2VecOptions {
    fn default() -> Self {
        Node2VecOptions {
            walks_per_node: 10,
            walk_length: 20,
            window: 5,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn random_walks(adj: &[Vec<usize>], opts: &Node2VecOptions, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut walks = Vec::new();
    let mut order: Vec<usize> = (0..adj.len()).filter(|&v| !adj[v].is_empty()).collect();
    for _ in 0..opts.walks_per_node {
        order.shuffle(rng);
        for &start in &order {
            let mut walk = Vec::with_capacity(opts.walk_length);
            walk.push(start);
            while walk.len() < opts.walk_length {
                let cur = *walk.last().unwrap();
                walk.push(*adj[cur].choose(rng).unwrap());
            }
            walks.push(walk);
        }
    }
    walks
}

/// Embeds every road into `d_emb` dimensions. Nodes without neighbours
/// (after symmetrizing the edge list) get zero rows.
pub fn node2vec_embed(graph: &RoadGraph, d_emb: usize, seed: u64, opts: &Node2VecOptions) -> Result<Tensor> {
    if d_emb == 0 {
        return Err(Error::config("node2vec embedding width must be positive"));
    }
    let n = graph.n_nodes();
    let adj = graph.symmetric_neighbors();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut emb = vec![0.0; n * d_emb];
    let isolated: Vec<usize> = (0..n).filter(|&v| adj[v].is_empty()).collect();
    if !isolated.is_empty() {
        log::warn!("{} isolated road(s) receive zero embeddings", isolated.len());
    }
    if isolated.len() == n {
        return Tensor::new(vec![n, d_emb], emb);
    }

    let walks = random_walks(&adj, opts, &mut rng);
    // unigram^0.75 noise distribution over walk occurrences
    let mut freq = vec![0.0f64; n];
    for w in &walks {
        for &v in w {
            freq[v] += 1.0;
        }
    }
    let noise = WeightedIndex::new(freq.iter().map(|f| f.powf(0.75))).expect("some node is visited");

    for (v, e) in emb.chunks_exact_mut(d_emb).enumerate() {
        if !adj[v].is_empty() {
            e.iter_mut().for_each(|x| *x = (rng.gen::<f64>() - 0.5) / d_emb as f64);
        }
    }
    let mut ctx = vec![0.0; n * d_emb];
    let mut grad = vec![0.0; d_emb];

    let total = (opts.epochs * walks.len()).max(1) as f64;
    let mut done = 0usize;
    for _ in 0..opts.epochs {
        for walk in &walks {
            let lr = (opts.learning_rate * (1.0 - done as f64 / total)).max(opts.learning_rate * 1e-4);
            done += 1;
            for (i, &center) in walk.iter().enumerate() {
                let lo = i.saturating_sub(opts.window);
                let hi = (i + opts.window + 1).min(walk.len());
                for (j, &context) in walk.iter().enumerate().take(hi).skip(lo) {
                    if j == i {
                        continue;
                    }
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    let targets = std::iter::once((context, 1.0))
                        .chain((0..opts.negatives).map(|_| (noise.sample(&mut rng), 0.0)));
                    for (target, label) in targets {
                        if label == 0.0 && target == context {
                            continue;
                        }
                        let (e, c) = (&emb[center * d_emb..(center + 1) * d_emb], &mut ctx[target * d_emb..(target + 1) * d_emb]);
                        let dot: f64 = e.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
                        let g = lr * (label - sigmoid(dot));
                        for k in 0..d_emb {
                            grad[k] += g * c[k];
                            c[k] += g * e[k];
                        }
                    }
                    let e = &mut emb[center * d_emb..(center + 1) * d_emb];
                    e.iter_mut().zip(&grad).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
    let t = Tensor::new(vec![n, d_emb], emb)?;
    t.check_finite("node2vec embedding")?;
    Ok(t)
}

pub fn save_embedding(path: &Path, e_x: &Tensor) -> Result<()> {
    let s = tensor_map_to_string([(E_X_KEY, e_x)])?;
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn load_embedding(path: &Path) -> Result<Tensor> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = tensor_map_from_str(&s)?;
    map.shift_remove(E_X_KEY)
        .ok_or_else(|| Error::data(format!("{}: no `{E_X_KEY}` entry", path.display())))
}
