use proptest::prelude::*;
use regionformer::attention::{adjacency_weight, gaussian_mask, pearson_matrix};
use regionformer::autodiff::serial::{tensor_map_from_str, tensor_map_to_string};
use regionformer::autodiff::{ParamStore, Tape, Tensor};
use regionformer::data::{split_bounds, NormStats, SeriesMatrix, SplitRatios};
use regionformer::train::{poi_strata, MetricsAccumulator};

fn vec_in(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, len)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> Result<(), TestCaseError> {
    prop_assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        prop_assert!((x - y).abs() <= tol * (1.0 + y.abs()), "entry {}: {} vs {}", i, x, y);
    }
    Ok(())
}

/// Unfused multi-head attention built from primitive tape ops.
fn reference_attention(
    tape: &mut Tape,
    q: regionformer::autodiff::Var,
    k: regionformer::autodiff::Var,
    v: regionformer::autodiff::Var,
    mask: Option<regionformer::autodiff::Var>,
    heads: usize,
) -> (regionformer::autodiff::Var, regionformer::autodiff::Var) {
    let (b, lq, d) = (tape.shape(q)[0], tape.shape(q)[1], tape.shape(q)[2]);
    let lk = tape.shape(k)[1];
    let dv = tape.shape(v)[2];
    let (dh, dvh) = (d / heads, dv / heads);
    let qh = tape.reshape(q, &[b, lq, heads, dh]).unwrap();
    let qh = tape.permute(qh, &[0, 2, 1, 3]).unwrap();
    let kh = tape.reshape(k, &[b, lk, heads, dh]).unwrap();
    let kh = tape.permute(kh, &[0, 2, 3, 1]).unwrap();
    let vh = tape.reshape(v, &[b, lk, heads, dvh]).unwrap();
    let vh = tape.permute(vh, &[0, 2, 1, 3]).unwrap();
    let s = tape.matmul(qh, kh).unwrap();
    let mut s = tape.scale(s, 1.0 / (dh as f64).sqrt());
    if let Some(m) = mask {
        s = tape.add(s, m).unwrap();
    }
    let w = tape.softmax_last(s);
    let o = tape.matmul(w, vh).unwrap();
    let o = tape.permute(o, &[0, 2, 1, 3]).unwrap();
    (tape.reshape(o, &[b, lq, dv]).unwrap(), w)
}

#[derive(Debug, Clone)]
struct AttnCase {
    b: usize,
    lq: usize,
    lk: usize,
    heads: usize,
    dh: usize,
    mask_shape: Option<Vec<usize>>,
    seed: u64,
}

fn attn_case() -> impl Strategy<Value = AttnCase> {
    (1usize..3, 1usize..5, 1usize..6, 1usize..3, 1usize..4, 0usize..6, any::<u64>()).prop_map(
        |(b, lq, lk, heads, dh, m, seed)| {
            let mask_shape = match m {
                0 => None,
                1 => Some(vec![lq, lk]),
                2 => Some(vec![heads, lq, lk]),
                3 => Some(vec![b, 1, lq, lk]),
                4 => Some(vec![1, lk]),
                _ => Some(vec![b, heads, 1, lk]),
            };
            AttnCase {
                b,
                lq,
                lk,
                heads,
                dh,
                mask_shape,
                seed,
            }
        },
    )
}

fn pseudo(seed: u64, n: usize, scale: f64) -> Vec<f64> {
    // splitmix64, mapped to [-scale, scale)
    let mut s = seed;
    (0..n)
        .map(|_| {
            s = s.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = s;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            scale * (2.0 * (z >> 11) as f64 / (1u64 << 53) as f64 - 1.0)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(
        (rows, cols, data) in (1usize..5, 1usize..8).prop_flat_map(|(r, c)| (Just(r), Just(c), vec_in(r * c, -40.0, 40.0))),
        shift in -100.0f64..100.0,
    ) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], data.clone()).unwrap());
        let y = tape.softmax_last(x);
        let shifted = tape.constant(Tensor::new(vec![rows, cols], data.iter().map(|v| v + shift).collect()).unwrap());
        let ys = tape.softmax_last(shifted);
        for r in tape.value(y).data().chunks(cols) {
            prop_assert!(r.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        close(tape.value(y).data(), tape.value(ys).data(), 1e-12)?;
    }

    #[test]
    fn fused_attention_matches_primitive_ops(case in attn_case()) {
        let AttnCase { b, lq, lk, heads, dh, ref mask_shape, seed } = case;
        let d = heads * dh;
        let mut store = ParamStore::new();
        let q = store.insert("q", Tensor::new(vec![b, lq, d], pseudo(seed, b * lq * d, 1.5)).unwrap()).unwrap();
        let k = store.insert("k", Tensor::new(vec![b, lk, d], pseudo(seed ^ 1, b * lk * d, 1.5)).unwrap()).unwrap();
        let v = store.insert("v", Tensor::new(vec![b, lk, d], pseudo(seed ^ 2, b * lk * d, 1.5)).unwrap()).unwrap();
        let m = mask_shape.as_ref().map(|s| {
            let n = s.iter().product();
            store.insert("m", Tensor::new(s.clone(), pseudo(seed ^ 3, n, 2.0)).unwrap()).unwrap()
        });
        let up = pseudo(seed ^ 4, b * lq * d, 1.0);

        let run = |fused: bool, store: &mut ParamStore| {
            store.zero_grads();
            let mut tape = Tape::new();
            let (qv, kv, vv) = (tape.param(store, q), tape.param(store, k), tape.param(store, v));
            let mv = m.map(|id| tape.param(store, id));
            let (o, w) = if fused {
                tape.attention(qv, kv, vv, mv, heads).unwrap()
            } else {
                reference_attention(&mut tape, qv, kv, vv, mv, heads)
            };
            let weights = tape.constant(Tensor::new(vec![b, lq, d], up.clone()).unwrap());
            let prod = tape.mul(o, weights).unwrap();
            let loss = tape.sum_all(prod);
            tape.backward(loss, store).unwrap();
            let grads: Vec<Vec<f64>> = store.ids().map(|id| store.grad(id).to_vec()).collect();
            (tape.value(o).data().to_vec(), tape.value(w).data().to_vec(), grads)
        };
        let (of, wf, gf) = run(true, &mut store);
        let (or, wr, gr) = run(false, &mut store);
        close(&of, &or, 1e-12)?;
        close(&wf, &wr, 1e-12)?;
        for (a, r) in gf.iter().zip(&gr) {
            close(a, r, 1e-10)?;
        }
    }

    #[test]
    fn matmul_matches_triple_loop(
        (m, k, n) in (1usize..24, 1usize..24, 1usize..24),
        batch in 1usize..3,
        seed in any::<u64>(),
    ) {
        let a = pseudo(seed, batch * m * k, 1.0);
        let bm = pseudo(seed ^ 7, k * n, 1.0);
        let mut tape = Tape::new();
        let av = tape.constant(Tensor::new(vec![batch, m, k], a.clone()).unwrap());
        let bv = tape.constant(Tensor::new(vec![k, n], bm.clone()).unwrap());
        let c = tape.matmul(av, bv).unwrap();
        let mut want = vec![0.0; batch * m * n];
        for t in 0..batch {
            for i in 0..m {
                for j in 0..n {
                    want[(t * m + i) * n + j] = (0..k).map(|l| a[(t * m + i) * k + l] * bm[l * n + j]).sum();
                }
            }
        }
        close(tape.value(c).data(), &want, 1e-12)?;
    }

    #[test]
    fn broadcast_gradients_sum_over_broadcast_axes(
        (r, c) in (1usize..6, 1usize..6),
        seed in any::<u64>(),
    ) {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::new(vec![r, c], pseudo(seed, r * c, 1.0)).unwrap()).unwrap();
        let bias = store.insert("b", Tensor::new(vec![c], pseudo(seed ^ 1, c, 1.0)).unwrap()).unwrap();
        let w = pseudo(seed ^ 2, r * c, 1.0);
        let mut tape = Tape::new();
        let (av, bv) = (tape.param(&store, a), tape.param(&store, bias));
        let s = tape.mul(av, bv).unwrap();
        let s = tape.add(s, bv).unwrap();
        let wv = tape.constant(Tensor::new(vec![r, c], w.clone()).unwrap());
        let l = tape.mul(s, wv).unwrap();
        let l = tape.sum_all(l);
        tape.backward(l, &mut store).unwrap();
        // d/db Σ w (a b + b) = Σ_rows w (a + 1)
        let av_data = store.value(a).data().to_vec();
        let want: Vec<f64> = (0..c).map(|j| (0..r).map(|i| w[i * c + j] * (av_data[i * c + j] + 1.0)).sum()).collect();
        close(store.grad(bias), &want, 1e-12)?;
        let bd = store.value(bias).data().to_vec();
        let want_a: Vec<f64> = (0..r * c).map(|i| w[i] * bd[i % c]).collect();
        close(store.grad(a), &want_a, 1e-12)?;
    }

    #[test]
    fn backward_is_linear_in_the_loss(
        data in vec_in(6, -2.0, 2.0),
        (alpha, beta) in (-3.0f64..3.0, -3.0f64..3.0),
    ) {
        let grads = |ca: f64, cb: f64| {
            let mut store = ParamStore::new();
            let x = store.insert("x", Tensor::new(vec![2, 3], data.clone()).unwrap()).unwrap();
            let mut tape = Tape::new();
            let xv = tape.param(&store, x);
            let f = tape.sigmoid(xv);
            let f = tape.sum_all(f);
            let g = tape.mul(xv, xv).unwrap();
            let g = tape.exp(g);
            let g = tape.mean_all(g);
            let fa = tape.scale(f, ca);
            let gb = tape.scale(g, cb);
            let l = tape.add(fa, gb).unwrap();
            tape.backward(l, &mut store).unwrap();
            store.grad(x).to_vec()
        };
        let (gf, gg, both) = (grads(1.0, 0.0), grads(0.0, 1.0), grads(alpha, beta));
        let want: Vec<f64> = gf.iter().zip(&gg).map(|(a, b)| alpha * a + beta * b).collect();
        close(&both, &want, 1e-12)?;
    }

    #[test]
    fn gaussian_mask_is_nonpositive_and_decreasing_in_distance(
        dists in vec_in(6, 0.0, 5000.0),
        s in vec_in(4, 3.0, 9.0),
    ) {
        let mut tape = Tape::new();
        let mut sorted = dists.clone();
        sorted.sort_by(f64::total_cmp);
        let d = tape.constant(Tensor::new(vec![2, 3], sorted[..].to_vec()).unwrap());
        let sv = tape.constant(Tensor::new(vec![2, 2], s.clone()).unwrap());
        let m = gaussian_mask(&mut tape, d, sv).unwrap();
        let m = tape.value(m).data().to_vec();
        // layout [heads, roads, cells]; each road row is sorted by distance
        prop_assert!(m.iter().all(|&v| v <= 0.0));
        for row in m.chunks(3) {
            prop_assert!(row.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn adjacency_weight_bounds(r in -1.0f64..1.0, d in 0.0f64..3000.0, sigma in 1.0f64..2000.0, lambda in 0.0f64..1.0) {
        let w = adjacency_weight(r, d, sigma, lambda);
        if r > lambda {
            prop_assert!(w > 0.0 || d / sigma > 25.0);
            prop_assert!(w <= r);
            prop_assert!(adjacency_weight(r, d + 10.0, sigma, lambda) <= w);
        } else {
            prop_assert_eq!(w, 0.0);
        }
    }

    #[test]
    fn pearson_is_symmetric_and_bounded(
        (steps, n, values) in (3usize..20, 1usize..5).prop_flat_map(|(t, n)| (Just(t), Just(n), vec_in(t * n, -10.0, 10.0))),
    ) {
        let r = pearson_matrix(&values, steps, n).unwrap();
        for i in 0..n {
            prop_assert!((r[i * n + i] - 1.0).abs() < 1e-9 || r[i * n + i] == 0.0);
            for j in 0..n {
                prop_assert!(r[i * n + j].abs() <= 1.0 + 1e-12);
                prop_assert_eq!(r[i * n + j], r[j * n + i]);
            }
        }
    }

    #[test]
    fn zscore_is_shift_invariant_and_round_trips(
        col in vec_in(12, -50.0, 50.0),
        shift in -1000.0f64..1000.0,
    ) {
        let m = SeriesMatrix::new(12, 1, col.clone()).unwrap();
        let moved = SeriesMatrix::new(12, 1, col.iter().map(|v| v + shift).collect()).unwrap();
        let (s, sm) = (NormStats::fit(&m, 8), NormStats::fit(&moved, 8));
        let (a, b) = (s.apply(&m), sm.apply(&moved));
        close(&a.values, &b.values, 1e-8)?;
        for (t, v) in col.iter().enumerate() {
            prop_assert!((s.denormalize(0, a.values[t]) - v).abs() < 1e-9);
        }
    }

    #[test]
    fn metrics_are_ordered_and_match_a_direct_sum(
        pairs in prop::collection::vec((0.0f64..120.0, 0.0f64..120.0), 1..40),
    ) {
        let mut acc = MetricsAccumulator::new(1);
        for &(p, y) in &pairs {
            acc.add(0, p, y);
        }
        let rep = acc.finish().unwrap();
        let n = pairs.len() as f64;
        let mae = pairs.iter().map(|(p, y)| (p - y).abs()).sum::<f64>() / n;
        let rmse = (pairs.iter().map(|(p, y)| (p - y).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!((rep.average.mae - mae).abs() < 1e-9);
        prop_assert!((rep.average.rmse - rmse).abs() < 1e-9);
        prop_assert!(rep.average.mae <= rep.average.rmse + 1e-12);
        prop_assert_eq!(rep.average.count, pairs.len());
    }

    #[test]
    fn tensors_round_trip_through_json_bitwise(
        data in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..20),
    ) {
        let t = Tensor::new(vec![data.len()], data).unwrap();
        let text = tensor_map_to_string([("t", &t)]).unwrap();
        let back = tensor_map_from_str(&text).unwrap();
        prop_assert!(back["t"].bitwise_eq(&t));
    }

    #[test]
    fn poi_strata_are_disjoint_ends_of_the_ranking(
        density in vec_in(12, 0.0, 5.0).prop_map(|v| v.into_iter().map(|x| x.round()).collect::<Vec<f64>>()),
        frac in 0.05f64..0.5,
    ) {
        let (high, low) = poi_strata(&density, frac).unwrap();
        prop_assert_eq!(high.len(), low.len());
        prop_assert!(high.iter().all(|h| !low.contains(h)));
        let min_high = high.iter().map(|&i| density[i]).fold(f64::INFINITY, f64::min);
        let max_low = low.iter().map(|&i| density[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min_high >= max_low);
    }

    #[test]
    fn split_partitions_tile_the_series(total in 0usize..5000, train in 0.1f64..0.8) {
        let ratios = SplitRatios { train, val: (1.0 - train) / 2.0, test: (1.0 - train) / 2.0 };
        let b = split_bounds(total, ratios).unwrap();
        prop_assert!(b.train_end <= b.val_end && b.val_end <= b.total);
        prop_assert_eq!(b.total, total);
        prop_assert!(b.train_end as f64 <= total as f64 * train + 1e-6);
    }
}
