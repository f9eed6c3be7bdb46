//! The full forecaster: embeddings, regional and road encoder/decoder stacks,
//! transform attentions and the output head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::Batch;
use super::config::{CorrSpan, ModelConfig, Variant};
use crate::attention::{
    bipartite_transform, build_regional_adjacency, spatial_attention, temporal_attention, temporal_transform,
    AttentionConfig, DynamicConv, GatedFusion, GaussianMask, GridConv, MultiHead,
};
use crate::autodiff::{Activation, Fcn2, ParamStore, Tape, Tensor, Var};
use crate::data::geo::{cell_cell_distances, road_cell_distances};
use crate::data::{DataBundle, GridSpec};
use crate::embeddings::{node2vec_embed, CellGeoFeatures, Node2VecOptions, SteEncoder};
use crate::error::{Error, Result, StageContext};

/// Grid convolution kernel used by the CNN variants.
pub const GRID_KERNEL: usize = 5;

/// Fixed, non-trainable inputs derived from the dataset.
#[derive(Clone, Debug)]
pub struct ModelContext {
    pub n_x: usize,
    pub n_z: usize,
    pub grid: GridSpec,
    /// Road structural embedding `[N_X, D]`.
    pub e_x: Tensor,
    /// Cell features `[N_Z, w]` (regional variants only).
    pub geo: Option<Tensor>,
    /// Row-normalized cell graph `[N_Z, N_Z]` (dynamic-convolution variants only).
    pub adjacency: Option<Tensor>,
    /// Road-to-cell distances in meters `[N_X, N_Z]` (regional variants only).
    pub road_cell_dist: Option<Tensor>,
}

impl ModelContext {
    /// Computes the road embedding and all derived inputs. The dataset must
    /// be filled and split.
    pub fn build(config: &ModelConfig, bundle: &DataBundle) -> Result<Self> {
        let e_x = node2vec_embed(&bundle.graph, config.d, config.seed, &Node2VecOptions::default())?;
        Self::with_embedding(config, bundle, e_x)
    }

    pub fn with_embedding(config: &ModelConfig, bundle: &DataBundle, e_x: Tensor) -> Result<Self> {
        Self::assemble(config, bundle, e_x, None)
    }

    /// Like [`ModelContext::with_embedding`], reusing a precomputed cell graph when given.
    pub fn assemble(config: &ModelConfig, bundle: &DataBundle, e_x: Tensor, adjacency: Option<Tensor>) -> Result<Self> {
        config.validate()?;
        let (n_x, n_z) = (bundle.graph.n_nodes(), bundle.grid.n_cells());
        if e_x.shape() != [n_x, config.d] {
            return Err(Error::ShapeMismatch {
                op: "road embedding",
                lhs: e_x.shape().to_vec(),
                rhs: vec![n_x, config.d],
            });
        }
        let v = config.variant;
        let geo = v
            .has_region()
            .then(|| CellGeoFeatures::from_grid(&bundle.grid, v.uses_poi(), v.uses_satellite()).map(|g| g.features))
            .transpose()?;
        let road_cell_dist = v.has_region().then(|| road_cell_distances(&bundle.graph, &bundle.grid));
        let needs_graph = v.uses_population() && v != Variant::CnnSpatial;
        let adjacency = if !needs_graph {
            None
        } else if let Some(a) = adjacency {
            if a.shape() != [n_z, n_z] {
                return Err(Error::ShapeMismatch {
                    op: "cell graph",
                    lhs: a.shape().to_vec(),
                    rhs: vec![n_z, n_z],
                });
            }
            Some(a)
        } else {
            let data = &bundle.data;
            let end = match config.corr_span {
                CorrSpan::Full => data.steps(),
                CorrSpan::Train => data.split.ok_or_else(|| Error::data("split boundaries not set"))?.train_end,
            };
            let z = data.z.rows(0, end);
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::data("fill missing population values before building the cell graph"));
            }
            let dists = cell_cell_distances(&bundle.grid);
            Some(build_regional_adjacency(z, end, n_z, &dists, config.lambda_r)?.normalized)
        };
        Ok(ModelContext {
            n_x,
            n_z,
            grid: bundle.grid.spec.clone(),
            e_x,
            geo,
            adjacency,
            road_cell_dist,
        })
    }
}

#[derive(Clone, Debug)]
enum RegionSpatial {
    Dynamic(DynamicConv),
    Grid(GridConv),
}

#[derive(Clone, Debug)]
struct RegionBlock {
    spatial: RegionSpatial,
    temporal: MultiHead,
    gate: GatedFusion,
}

#[derive(Clone, Debug)]
struct RoadBlock {
    spatial: MultiHead,
    temporal: MultiHead,
    gate: GatedFusion,
}

#[derive(Clone, Debug)]
enum RegionBranch {
    Dynamic {
        input: Fcn2,
        enc: Vec<RegionBlock>,
        transform: MultiHead,
        dec: Vec<RegionBlock>,
    },
    Static {
        layers: Vec<GridConv>,
    },
}

#[derive(Clone, Debug)]
struct Layers {
    ste: SteEncoder,
    road_input: Fcn2,
    region: Option<RegionBranch>,
    bipartite: Option<MultiHead>,
    mask: Option<GaussianMask>,
    road_enc: Vec<RoadBlock>,
    road_transform: MultiHead,
    road_dec: Vec<RoadBlock>,
    output: Fcn2,
}

/// Test and analysis switches applied during a forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardHooks {
    /// Replace the bipartite attention output by zeros.
    pub zero_bipartite: bool,
}

/// Result of a recorded forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[B, N_X, Q]` normalized predictions.
    pub pred: Var,
    /// Bipartite attention weights on the P and Q sides, when present.
    pub bipartite_weights: Vec<Var>,
    /// Named intermediate outputs in evaluation order.
    pub stages: Vec<(String, Var)>,
}

impl Forward {
    /// First recorded stage whose output holds a NaN or infinity.
    pub fn first_non_finite(&self, tape: &Tape) -> Option<&str> {
        self.stages
            .iter()
            .find(|(_, v)| tape.value(*v).data().iter().any(|x| !x.is_finite()))
            .map(|(s, _)| s.as_str())
    }
}

/// Parameters, fixed inputs and configuration of one forecaster.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub context: ModelContext,
    pub store: ParamStore,
    att: AttentionConfig,
    layers: Layers,
}

fn region_block(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &ModelConfig,
    att: AttentionConfig,
    grid: &GridSpec,
) -> Result<RegionBlock> {
    let d = cfg.d;
    let spatial = if cfg.variant == Variant::CnnSpatial {
        RegionSpatial::Grid(GridConv::new(store, rng, &format!("{prefix}.conv"), grid, GRID_KERNEL, d, d)?)
    } else {
        RegionSpatial::Dynamic(DynamicConv::new(store, rng, &format!("{prefix}.conv"), d)?)
    };
    Ok(RegionBlock {
        spatial,
        temporal: MultiHead::new(store, rng, &format!("{prefix}.temporal"), 2 * d, 2 * d, 2 * d, att)?,
        gate: GatedFusion::new(store, rng, &format!("{prefix}.gate"), d, cfg.gate_kind)?,
    })
}

fn road_block(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &ModelConfig, att: AttentionConfig) -> Result<RoadBlock> {
    let d = cfg.d;
    Ok(RoadBlock {
        spatial: MultiHead::new(store, rng, &format!("{prefix}.spatial"), 2 * d, 2 * d, 2 * d, att)?,
        temporal: MultiHead::new(store, rng, &format!("{prefix}.temporal"), 2 * d, 2 * d, 2 * d, att)?,
        gate: GatedFusion::new(store, rng, &format!("{prefix}.gate"), d, cfg.gate_kind)?,
    })
}

impl Model {
    /// Seeded initialization; parameter names and order depend only on the
    /// configuration and the context's shapes.
    pub fn new(config: ModelConfig, context: ModelContext) -> Result<Self> {
        let att = config.attention()?;
        let v = config.variant;
        let d = config.d;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let geo_w = context.geo.as_ref().map(|g| g.shape()[1]);
        if v.has_region() && (geo_w.is_none() || context.road_cell_dist.is_none()) {
            return Err(Error::config(format!("variant `{v}` needs cell features and distances")));
        }
        if v.uses_population() && v != Variant::CnnSpatial && context.adjacency.is_none() {
            return Err(Error::config(format!("variant `{v}` needs the cell graph")));
        }

        let ste = SteEncoder::new(&mut store, &mut rng, d, geo_w, d)?;
        let road_input = Fcn2::new(&mut store, &mut rng, "input.road", 1, d, d, Activation::Relu)?;
        let region = match v {
            Variant::NoRegion => None,
            Variant::StaticRegion => {
                let layers = (0..config.l_z)
                    .map(|i| GridConv::new(&mut store, &mut rng, &format!("region.cnn.layer{i}"), &context.grid, GRID_KERNEL, d, d))
                    .collect::<Result<_>>()?;
                Some(RegionBranch::Static { layers })
            }
            _ => {
                let input = Fcn2::new(&mut store, &mut rng, "input.cell", 1, d, d, Activation::Relu)?;
                let enc = (0..config.l_z)
                    .map(|i| region_block(&mut store, &mut rng, &format!("region.enc.block{i}"), &config, att, &context.grid))
                    .collect::<Result<_>>()?;
                let transform = MultiHead::new(&mut store, &mut rng, "region.transform", d, d, d, att)?;
                let dec = (0..config.l_z)
                    .map(|i| region_block(&mut store, &mut rng, &format!("region.dec.block{i}"), &config, att, &context.grid))
                    .collect::<Result<_>>()?;
                Some(RegionBranch::Dynamic {
                    input,
                    enc,
                    transform,
                    dec,
                })
            }
        };
        let bipartite = v
            .has_region()
            .then(|| MultiHead::new(&mut store, &mut rng, "bipartite", d, 2 * d, d, att))
            .transpose()?;
        let mask = (v.has_region() && v.uses_mask())
            .then(|| GaussianMask::new(&mut store, "bipartite.mask", context.n_x, config.k, config.sigma0_m))
            .transpose()?;
        let road_enc = (0..config.l_x)
            .map(|i| road_block(&mut store, &mut rng, &format!("road.enc.block{i}"), &config, att))
            .collect::<Result<_>>()?;
        let road_transform = MultiHead::new(&mut store, &mut rng, "road.transform", d, d, d, att)?;
        let road_dec = (0..config.l_x)
            .map(|i| road_block(&mut store, &mut rng, &format!("road.dec.block{i}"), &config, att))
            .collect::<Result<_>>()?;
        let output = Fcn2::new(&mut store, &mut rng, "output", d, d, 1, Activation::Identity)?;

        Ok(Model {
            config,
            context,
            store,
            att,
            layers: Layers {
                ste,
                road_input,
                region,
                bipartite,
                mask,
                road_enc,
                road_transform,
                road_dec,
                output,
            },
        })
    }

    pub fn attention_config(&self) -> AttentionConfig {
        self.att
    }

    fn region_blocks(
        &self,
        tape: &mut Tape,
        blocks: &[RegionBlock],
        adj: Option<Var>,
        mut h: Var,
        ste: Var,
        name: &str,
        stages: &mut Vec<(String, Var)>,
    ) -> Result<Var> {
        let store = &self.store;
        for (i, b) in blocks.iter().enumerate() {
            let stage = format!("{name} block {i}");
            let run = |tape: &mut Tape| -> Result<Var> {
                let hs = match &b.spatial {
                    RegionSpatial::Dynamic(conv) => {
                        let adj = adj.ok_or_else(|| Error::config("cell graph missing"))?;
                        conv.forward(tape, store, adj, h)?
                    }
                    RegionSpatial::Grid(conv) => conv.forward(tape, store, h)?,
                };
                let ht = temporal_attention(&b.temporal, tape, store, h, ste)?.out;
                let fused = b.gate.forward(tape, store, hs, ht)?;
                tape.add(h, fused)
            };
            h = run(tape).stage(&stage)?;
            stages.push((stage, h));
        }
        Ok(h)
    }

    fn road_blocks(
        &self,
        tape: &mut Tape,
        blocks: &[RoadBlock],
        mut h: Var,
        ste: Var,
        name: &str,
        stages: &mut Vec<(String, Var)>,
    ) -> Result<Var> {
        let store = &self.store;
        for (i, b) in blocks.iter().enumerate() {
            let stage = format!("{name} block {i}");
            let run = |tape: &mut Tape| -> Result<Var> {
                let hs = spatial_attention(&b.spatial, tape, store, h, ste)?.out;
                let ht = temporal_attention(&b.temporal, tape, store, h, ste)?.out;
                let fused = b.gate.forward(tape, store, hs, ht)?;
                tape.add(h, fused)
            };
            h = run(tape).stage(&stage)?;
            stages.push((stage, h));
        }
        Ok(h)
    }

    /// Records a forward pass over `batch` onto `tape`.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch, hooks: ForwardHooks) -> Result<Forward> {
        let cfg = &self.config;
        let (p, q) = (cfg.p, cfg.q);
        let ctx = &self.context;
        let l = &self.layers;
        let store = &self.store;
        batch.check(cfg, ctx.n_x, self.config.variant.uses_population().then_some(ctx.n_z))?;
        let mut stages = Vec::new();

        // embeddings
        let (ste_x, ste_z) = (|| -> Result<_> {
            let onehot = tape.constant(batch.onehot.clone());
            let tp = l.ste.temporal_part(tape, store, onehot)?;
            let e_x = tape.constant(ctx.e_x.clone());
            let ste_x = l.ste.build_ste_x(tape, store, e_x, tp)?;
            let ste_z = match &ctx.geo {
                Some(geo) if l.region.is_some() => {
                    let g = tape.constant(geo.clone());
                    Some(l.ste.build_ste_z(tape, store, g, tp)?)
                }
                _ => None,
            };
            Ok((ste_x, ste_z))
        })()
        .stage("embedding")?;
        let ste_xp = tape.slice(ste_x, 2, 0, p)?;
        let ste_xq = tape.slice(ste_x, 2, p, q)?;
        stages.push(("embedding".to_string(), ste_x));

        // regional pathway → road-level regional knowledge
        let hk = match (&l.region, ste_z) {
            (Some(region), Some(ste_z)) => {
                let ste_zp = tape.slice(ste_z, 2, 0, p)?;
                let ste_zq = tape.slice(ste_z, 2, p, q)?;
                let (hz_p, hz_q) = match region {
                    RegionBranch::Dynamic {
                        input,
                        enc,
                        transform,
                        dec,
                    } => {
                        let z = batch.z.as_ref().ok_or_else(|| Error::data("batch lacks population input"))?;
                        let z = tape.constant(z.clone());
                        let hz = input.forward(tape, store, z).stage("region input")?;
                        let adj = ctx.adjacency.as_ref().map(|a| tape.constant(a.clone()));
                        let hz_p = self.region_blocks(tape, enc, adj, hz, ste_zp, "region encoder", &mut stages)?;
                        let hz_q = (|| -> Result<Var> {
                            let t = temporal_transform(transform, tape, store, ste_zq, ste_zp, hz_p)?.out;
                            tape.add(t, ste_zq)
                        })()
                        .stage("region transform")?;
                        stages.push(("region transform".into(), hz_q));
                        let hz_q = self.region_blocks(tape, dec, adj, hz_q, ste_zq, "region decoder", &mut stages)?;
                        (hz_p, hz_q)
                    }
                    RegionBranch::Static { layers } => {
                        let mut h = ste_z;
                        for (i, conv) in layers.iter().enumerate() {
                            let stage = format!("region cnn layer {i}");
                            h = conv.forward(tape, store, h).stage(&stage)?;
                            stages.push((stage, h));
                        }
                        (tape.slice(h, 2, 0, p)?, tape.slice(h, 2, p, q)?)
                    }
                };
                let bip = l.bipartite.as_ref().expect("regional variants carry bipartite attention");
                let mut weights = Vec::new();
                let hk = (|| -> Result<(Var, Var)> {
                    let dist = ctx
                        .road_cell_dist
                        .as_ref()
                        .ok_or_else(|| Error::config("road-cell distances missing"))?;
                    let dist = tape.constant(dist.clone());
                    let mask = l.mask.as_ref().map(|m| m.forward(tape, store, dist)).transpose()?;
                    let mut side = |tape: &mut Tape, ste_x: Var, hz: Var, ste_z: Var| -> Result<Var> {
                        let o = bipartite_transform(bip, tape, store, ste_x, hz, ste_z, mask)?;
                        weights.push(o.weights);
                        let out = if hooks.zero_bipartite { tape.scale(o.out, 0.0) } else { o.out };
                        tape.add(ste_x, out)
                    };
                    let hk_p = side(tape, ste_xp, hz_p, ste_zp)?;
                    let hk_q = side(tape, ste_xq, hz_q, ste_zq)?;
                    Ok((hk_p, hk_q))
                })()
                .stage("bipartite transform")?;
                stages.push(("bipartite transform".into(), hk.1));
                Some((hk, weights))
            }
            _ => None,
        };
        let ((hk_p, hk_q), bipartite_weights) = match hk {
            Some((pair, w)) => (pair, w),
            None => ((ste_xp, ste_xq), Vec::new()),
        };

        // road pathway
        let x = tape.constant(batch.x.clone());
        let hx = l.road_input.forward(tape, store, x).stage("road input")?;
        let hx = self.road_blocks(tape, &l.road_enc, hx, ste_xp, "road encoder", &mut stages)?;
        let hx = (|| -> Result<Var> {
            let t = temporal_transform(&l.road_transform, tape, store, hk_q, hk_p, hx)?.out;
            tape.add(t, hk_q)
        })()
        .stage("road transform")?;
        stages.push(("road transform".into(), hx));
        let hx = self.road_blocks(tape, &l.road_dec, hx, ste_xq, "road decoder", &mut stages)?;
        let pred = (|| -> Result<Var> {
            let y = l.output.forward(tape, store, hx)?;
            tape.reshape(y, &[batch.len(), ctx.n_x, q])
        })()
        .stage("output")?;
        stages.push(("output".into(), pred));
        Ok(Forward {
            pred,
            bipartite_weights,
            stages,
        })
    }

    /// Normalized predictions `[B, N_X, Q]` without keeping the record.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, batch, ForwardHooks::default())?;
        let pred = tape.value(f.pred).clone();
        if let Some(stage) = f.first_non_finite(&tape) {
            return Err(Error::Stage {
                stage: stage.to_string(),
                source: Box::new(Error::NonFinite("forward output".into())),
            });
        }
        Ok(pred)
    }
}

/// Mean absolute error over entries where `include` is 1.
pub fn masked_mae(tape: &mut Tape, pred: Var, y: &Tensor, include: &Tensor) -> Result<Var> {
    if tape.shape(pred) != y.shape() || y.shape() != include.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let count: f64 = include.data().iter().sum();
    if count == 0.0 {
        return Err(Error::data("every loss entry is excluded"));
    }
    let target = tape.constant(y.clone());
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff);
    if count as usize == include.numel() {
        return Ok(tape.mean_all(abs));
    }
    let w = tape.constant(include.clone());
    let kept = tape.mul(abs, w)?;
    let s = tape.sum_all(kept);
    Ok(tape.scale(s, 1.0 / count))
}
