//! Mini-batch training with early stopping, and model evaluation.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{MetricsReport, Predictions};
use crate::autodiff::{Adam, Tape};
use crate::data::{Partition, TrafficDataset, Window};
use crate::error::{Error, Result};
use crate::model::{masked_mae, Batch, ForwardHooks, Model};

/// Windows per forward pass during evaluation.
const EVAL_BATCH: usize = 32;

/// One row of the training history; both errors are in normalized units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation error.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Training windows, optionally reduced to a fixed seeded subset.
pub fn training_windows(model: &Model, data: &TrafficDataset) -> Result<Vec<Window>> {
    let cfg = &model.config;
    let all = data.windows(Partition::Train, cfg.p, cfg.q)?;
    if all.is_empty() {
        return Err(Error::data("training partition has no windows"));
    }
    Ok(match cfg.max_train_windows {
        Some(m) if m < all.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(2);
            let mut idx = sample(&mut rng, all.len(), m).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| all[i]).collect()
        }
        _ => all,
    })
}

fn non_finite(stage: &str, what: String) -> Error {
    Error::Stage {
        stage: stage.to_string(),
        source: Box::new(Error::NonFinite(what)),
    }
}

/// Normalized MAE over `windows`, imputed targets excluded.
pub fn normalized_mae(model: &Model, data: &TrafficDataset, windows: &[Window]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0.0);
    for chunk in windows.chunks(EVAL_BATCH) {
        let batch = Batch::from_windows(data, chunk, &model.config, true)?;
        let pred = model.predict(&batch)?;
        for ((p, y), w) in pred.data().iter().zip(batch.y.data()).zip(batch.include.data()) {
            sum += w * (p - y).abs();
            n += w;
        }
    }
    if n == 0.0 {
        return Err(Error::data("no valid targets to score"));
    }
    Ok(sum / n)
}

/// Runs the epoch loop. `on_epoch` sees every history row as it is produced.
pub fn train_with(
    mut model: Model,
    data: &TrafficDataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let cfg = model.config.clone();
    cfg.validate()?;
    let mut windows = training_windows(&model, data)?;
    let val = data.windows(Partition::Val, cfg.p, cfg.q)?;
    if val.is_empty() {
        return Err(Error::data("validation partition has no windows"));
    }
    let mut adam = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, crate::autodiff::ParamStore)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs.max(1) {
        windows.shuffle(&mut rng);
        adam.lr = cfg.lr_at(epoch);
        let (mut sum, mut count) = (0.0, 0.0);
        for (b, chunk) in windows.chunks(cfg.batch_size).enumerate() {
            let batch = Batch::from_windows(data, chunk, &cfg, false)?;
            let mut tape = Tape::new();
            let f = model.forward(&mut tape, &batch, ForwardHooks::default())?;
            let loss = masked_mae(&mut tape, f.pred, &batch.y, &batch.include)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                let stage = f.first_non_finite(&tape).unwrap_or("loss");
                return Err(non_finite(stage, format!("training loss at epoch {epoch}, batch {b}")));
            }
            tape.backward(loss, &mut model.store)?;
            adam.step(&mut model.store)?;
            let w: f64 = batch.include.data().iter().sum();
            sum += value * w;
            count += w;
        }
        let val_mae = normalized_mae(&model, data, &val)?;
        let rec = EpochRecord {
            epoch,
            train_mae: sum / count,
            val_mae,
        };
        log::info!("epoch {epoch}: train {:.5} val {:.5}", rec.train_mae, rec.val_mae);
        on_epoch(&rec);
        history.push(rec);
        if best.as_ref().map_or(true, |(v, _, _)| val_mae < *v) {
            best = Some((val_mae, epoch, model.store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience {
            break;
        }
    }
    let (_, best_epoch, store) = best.expect("at least one epoch ran");
    model.store = store;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

pub fn train(model: Model, data: &TrafficDataset) -> Result<TrainOutcome> {
    train_with(model, data, |_| {})
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub exclude_imputed: bool,
    /// Worker threads; results do not depend on it.
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            exclude_imputed: true,
            threads: 1,
        }
    }
}

fn predict_chunk(model: &Model, data: &TrafficDataset, chunk: &[Window], opts: EvalOptions) -> Result<Predictions> {
    let cfg = &model.config;
    let norm = data.norm.as_ref().ok_or_else(|| Error::data("dataset is not normalised"))?;
    let batch = Batch::from_windows(data, chunk, cfg, opts.exclude_imputed)?;
    let pred = model.predict(&batch)?;
    let (n_x, q) = (data.n_roads(), cfg.q);
    let mut out = Predictions::new(n_x, q);
    for (wi, w) in chunk.iter().enumerate() {
        for r in 0..n_x {
            for h in 0..q {
                let i = (wi * n_x + r) * q + h;
                out.pred.push(norm.x.denormalize(r, pred.data()[i]));
                out.truth.push(data.x.get(w.start + cfg.p + h, r));
                out.include.push(batch.include.data()[i] > 0.0);
            }
        }
    }
    Ok(out)
}

/// Denormalized predictions for every window of `partition`.
pub fn predict_partition(
    model: &Model,
    data: &TrafficDataset,
    partition: Partition,
    opts: EvalOptions,
) -> Result<Predictions> {
    let cfg = &model.config;
    if data.n_roads() != model.context.n_x || data.n_cells() != model.context.n_z {
        return Err(Error::config("model and dataset shapes differ"));
    }
    let windows = data.windows(partition, cfg.p, cfg.q)?;
    if windows.is_empty() {
        return Err(Error::data(format!("{partition} partition has no windows")));
    }
    let chunks: Vec<&[Window]> = windows.chunks(EVAL_BATCH).collect();
    let threads = opts.threads.clamp(1, chunks.len());
    let parts: Vec<Result<Predictions>> = if threads == 1 {
        chunks.iter().map(|c| predict_chunk(model, data, c, opts)).collect()
    } else {
        let mut slots: Vec<Option<Result<Predictions>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let chunks = &chunks;
                    s.spawn(move || {
                        (t..chunks.len())
                            .step_by(threads)
                            .map(|i| (i, predict_chunk(model, data, chunks[i], opts)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("evaluation worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every chunk evaluated")).collect()
    };
    let mut all = Predictions::new(data.n_roads(), cfg.q);
    for p in parts {
        all.extend(&p?);
    }
    Ok(all)
}

pub fn evaluate(model: &Model, data: &TrafficDataset, partition: Partition, opts: EvalOptions) -> Result<MetricsReport> {
    predict_partition(model, data, partition, opts)?.report(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixture::{bundle, config};
    use crate::model::{ModelContext, Variant};

    fn setup(epochs: usize, patience: usize) -> (Model, crate::data::DataBundle) {
        let mut cfg = config(Variant::Full);
        cfg.epochs = epochs;
        cfg.patience = patience;
        cfg.max_train_windows = Some(16);
        let b = bundle(&cfg);
        let ctx = ModelContext::build(&cfg, &b).unwrap();
        (Model::new(cfg, ctx).unwrap(), b)
    }

    #[test]
    fn zero_patience_runs_one_epoch() {
        let (m, b) = setup(5, 0);
        let out = train(m, &b.data).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.best_epoch, 1);
    }

    #[test]
    fn same_seed_same_history() {
        let (m, b) = setup(3, 10);
        let a = train(m.clone(), &b.data).unwrap();
        let c = train(m, &b.data).unwrap();
        assert_eq!(a.history.len(), 3);
        for (x, y) in a.history.iter().zip(&c.history) {
            assert_eq!(x.train_mae.to_bits(), y.train_mae.to_bits());
            assert_eq!(x.val_mae.to_bits(), y.val_mae.to_bits());
        }
        assert!(a.model.store.values_bitwise_eq(&c.model.store));
    }

    #[test]
    fn keeps_best_validation_parameters() {
        let (m, b) = setup(4, 10);
        let out = train(m, &b.data).unwrap();
        let val = b.data.windows(Partition::Val, 4, 2).unwrap();
        let best = out.history.iter().map(|r| r.val_mae).fold(f64::INFINITY, f64::min);
        let again = normalized_mae(&out.model, &b.data, &val).unwrap();
        assert_eq!(again.to_bits(), best.to_bits());
        assert_eq!(out.history[out.best_epoch - 1].val_mae.to_bits(), best.to_bits());
    }

    #[test]
    fn evaluation_is_thread_independent() {
        let (m, b) = setup(1, 1);
        let one = predict_partition(&m, &b.data, Partition::Test, EvalOptions::default()).unwrap();
        let three = predict_partition(
            &m,
            &b.data,
            Partition::Test,
            EvalOptions {
                threads: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(one, three);
        let r = evaluate(&m, &b.data, Partition::Test, EvalOptions::default()).unwrap();
        assert_eq!(r.horizons.len(), 2);
        assert!(r.average.mae <= r.average.rmse);
    }
}
