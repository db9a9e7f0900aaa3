use nwcrf_core::crf_classic::{count_pairwise_edges, pairwise_energy_classic, total_energy, ClassicCrfParams, GridGraph, KernelForm};
use nwcrf_core::neural_crf::{window_attention, CrfOptimConfig, CrfOptimization};
use nwcrf_core::oracle::{brute_force_edges, crf_block_gradients, dense_equivalence, shift_connectivity, worst};
use nwcrf_core::{partition_windows, Initializer, ParamStore, Tape, Tensor};
use proptest::prelude::*;

fn random_grid(seed: u64, h: usize, w: usize) -> GridGraph {
    let mut init = Initializer::new(seed);
    GridGraph::new(
        init.uniform(&[h, w], 3.0),
        init.uniform(&[h, w, 3], 1.0),
        init.uniform(&[h, w], 0.45).map(|p| p + 0.5),
    )
    .unwrap()
}

#[test]
fn edge_counts_match_enumeration() {
    for h in 2..=8 {
        for w in 2..=8 {
            let dense = count_pairwise_edges(h, w, h.min(w), true).unwrap();
            assert_eq!(dense, brute_force_edges(h, w, None));
            for n in 1..=h.min(w) {
                if h % n != 0 || w % n != 0 {
                    assert!(count_pairwise_edges(h, w, n, false).is_err());
                    continue;
                }
                let part = partition_windows(h, w, n, false).unwrap();
                let windowed = count_pairwise_edges(h, w, n, false).unwrap();
                assert_eq!(windowed, brute_force_edges(h, w, Some(&part)), "{h}×{w} N={n}");
                assert!(windowed <= dense);
                assert_eq!(windowed == dense, n * n == h * w);
            }
        }
    }
}

#[test]
fn whole_window_energy_equals_fully_connected() {
    for (h, w) in [(3, 3), (2, 4), (4, 4)] {
        let g = random_grid(h as u64 * 10 + w as u64, h, w);
        for form in [KernelForm::Printed, KernelForm::Squared] {
            let params = ClassicCrfParams::new(0.7, form).unwrap();
            let n = h.max(w);
            let whole = partition_windows(h, w, n, false).unwrap();
            let dense = total_energy(&g, &params, None).unwrap();
            let windowed = total_energy(&g, &params, Some(&whole)).unwrap();
            assert!((dense - windowed).abs() <= 1e-12 * dense.abs());
        }
    }
}

#[test]
fn windowed_energy_drops_cross_window_pairs() {
    let g = random_grid(5, 4, 4);
    let params = ClassicCrfParams::new(1.0, KernelForm::Printed).unwrap();
    let part = partition_windows(4, 4, 2, false).unwrap();
    let unary: f64 = total_energy(&g, &params, Some(&partition_windows(4, 4, 1, false).unwrap())).unwrap();
    let mut expected = unary;
    for a in (0..4).flat_map(|y| (0..4).map(move |x| (y, x))) {
        for b in (0..4).flat_map(|y| (0..4).map(move |x| (y, x))) {
            if a != b && a.0 / 2 == b.0 / 2 && a.1 / 2 == b.1 / 2 {
                expected += pairwise_energy_classic(&g, &params, a, b).unwrap();
            }
        }
    }
    let got = total_energy(&g, &params, Some(&part)).unwrap();
    assert!((got - expected).abs() < 1e-12 * expected.abs());
}

#[test]
fn whole_window_attention_matches_dense_oracle() {
    let diff = dense_equivalence(8, 8, 8, 0).unwrap();
    assert!(diff < 1e-10, "max difference {diff}");
    for (h, w, n, seed) in [(3, 3, 3, 1), (2, 5, 5, 2), (4, 3, 4, 3), (1, 1, 2, 4)] {
        let diff = dense_equivalence(h, w, n, seed).unwrap();
        assert!(diff < 1e-10, "{h}×{w} N={n}: {diff}");
    }
}

#[test]
fn shifted_windows_connect_every_neighbour() {
    for (h, w, n) in [(14, 14, 7), (6, 6, 3), (5, 7, 3), (4, 4, 2)] {
        let c = shift_connectivity(h, w, n, 21).unwrap();
        assert!(c.failures.is_empty(), "{h}×{w} N={n}: {:?}", c.failures);
        assert_eq!(c.pairs, h * (w - 1) + w * (h - 1));
        assert!(c.min_weight > 0.0);
    }
}

#[test]
fn neighbours_split_by_regular_windows_are_joined_by_shifted_ones() {
    let regular = partition_windows(14, 14, 7, false).unwrap();
    let shifted = partition_windows(14, 14, 7, true).unwrap();
    assert!(!regular.connected((0, 6), (0, 7)));
    assert!(shifted.connected((0, 6), (0, 7)));
    assert!(!regular.connected((6, 3), (7, 3)));
    assert!(shifted.connected((6, 3), (7, 3)));
}

fn stage_config(n: usize) -> CrfOptimConfig {
    CrfOptimConfig { feature_channels: 4, heads: 2, head_dim: 3, window_size: n, mlp_ratio: 2, scale_logits: true, qk_layer_norm: true }
}

#[test]
fn attention_rows_are_stochastic_and_ignore_padding() {
    let mut store = ParamStore::new();
    let stage = CrfOptimization::new(&mut store, "s", stage_config(3), &mut Initializer::new(2));
    for shift in [false, true] {
        let part = partition_windows(5, 4, 3, shift).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let f = tape.leaf(Initializer::new(8).uniform(&[5, 4, 4], 1.0));
        let weights = stage.attention_weights(&mut tape, &p, f, &part).unwrap();
        for (win, heads) in weights.iter().enumerate() {
            let slots = part.window_slots(win);
            let regions = part.window_regions(win);
            for m in heads {
                for (a, row) in m.data().chunks(9).enumerate() {
                    if slots[a].is_none() {
                        continue;
                    }
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    for (b, &v) in row.iter().enumerate() {
                        if slots[b].is_none() || regions[b] != regions[a] {
                            assert_eq!(v, 0.0);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn logit_count_matches_edge_count() {
    let mut store = ParamStore::new();
    let n = 2;
    let stage = CrfOptimization::new(&mut store, "s", stage_config(n), &mut Initializer::new(2));
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let mut init = Initializer::new(4);
    let f = tape.leaf(init.uniform(&[6, 4, 4], 1.0));
    let x = tape.leaf(init.uniform(&[6, 4, 6], 1.0));
    let part = partition_windows(6, 4, n, false).unwrap();
    let (_, stats) = stage.pairwise(&mut tape, &p, f, x, &part).unwrap();
    assert_eq!(stats.windows, 6);
    assert_eq!(stats.logits_per_head, 24 * n * n);
    let edges = count_pairwise_edges(6, 4, n, false).unwrap() as usize;
    assert_eq!(stats.logits_per_head - 24, edges);
}

#[test]
fn attention_is_local_to_the_window() {
    let mut store = ParamStore::new();
    let stage = CrfOptimization::new(&mut store, "s", stage_config(3), &mut Initializer::new(6));
    let part = partition_windows(6, 6, 3, false).unwrap();
    let mut init = Initializer::new(10);
    let f = init.uniform(&[6, 6, 4], 1.0);
    let x = init.uniform(&[6, 6, 6], 1.0);
    let run = |f: &Tensor, x: &Tensor| {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let (fv, xv) = (tape.leaf(f.clone()), tape.leaf(x.clone()));
        let (out, _) = stage.pairwise(&mut tape, &p, fv, xv, &part).unwrap();
        tape.value(out).clone()
    };
    let base = run(&f, &x);
    // Perturb every node outside the top-left window.
    let (mut f2, mut x2) = (f.clone(), x.clone());
    for y in 0..6 {
        for xx in 0..6 {
            if y >= 3 || xx >= 3 {
                for c in 0..4 {
                    f2.set(&[y, xx, c], f.at(&[y, xx, c]) + 0.7);
                }
                for c in 0..6 {
                    x2.set(&[y, xx, c], -3.0);
                }
            }
        }
    }
    let moved = run(&f2, &x2);
    for y in 0..3 {
        for xx in 0..3 {
            let i = y * 6 + xx;
            assert_eq!(&base.data()[i * 6..i * 6 + 6], &moved.data()[i * 6..i * 6 + 6]);
        }
    }
    assert_ne!(base, moved);
}

#[test]
fn attention_is_permutation_covariant() {
    let n = 5;
    let mut init = Initializer::new(12);
    let q = init.uniform(&[n, 4], 1.0);
    let k = init.uniform(&[n, 4], 1.0);
    let x = init.uniform(&[n, 4], 1.0);
    let bias: Vec<Tensor> = (0..2).map(|_| init.uniform(&[n, n], 1.0)).collect();
    let mask: Vec<bool> = (0..n * n).map(|i| i % n == i / n || (i * 7) % 3 != 0).collect();
    let perm = [3, 0, 4, 1, 2];

    let run = |q: &Tensor, k: &Tensor, x: &Tensor, bias: &[Tensor], mask: &[bool]| {
        let mut tape = Tape::new();
        let (q, k, x) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(x.clone()));
        let b: Vec<_> = bias.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = window_attention(&mut tape, q, k, x, &b, mask, 2, 0.5).unwrap();
        tape.value(out).clone()
    };
    let permute_rows = |t: &Tensor| Tensor::from_fn(t.extents(), |i| t.data()[perm[i / 4] * 4 + i % 4]);
    let permute_square = |t: &[f64]| -> Vec<f64> { (0..n * n).map(|i| t[perm[i / n] * n + perm[i % n]]).collect() };

    let base = run(&q, &k, &x, &bias, &mask);
    let pb: Vec<Tensor> = bias.iter().map(|b| Tensor::new(&[n, n], permute_square(b.data())).unwrap()).collect();
    let pm: Vec<bool> = (0..n * n).map(|i| mask[perm[i / n] * n + perm[i % n]]).collect();
    let permuted = run(&permute_rows(&q), &permute_rows(&k), &permute_rows(&x), &pb, &pm);
    assert!(permuted.max_abs_diff(&permute_rows(&base)).unwrap() < 1e-14);
}

#[test]
fn crf_block_parameter_gradients() {
    let errors = crf_block_gradients(3, None).unwrap();
    assert_eq!(errors.len(), 2 * 11 + 2);
    for (name, e) in &errors {
        assert!(*e < 1e-4, "{name}: {e}");
    }
    assert!(worst(&errors) < 1e-4);
}

proptest! {
    #[test]
    fn classic_pairwise_is_symmetric(seed in any::<u64>(), a in (0usize..3, 0usize..4), b in (0usize..3, 0usize..4), sigma in 0.2f64..3.0) {
        let g = random_grid(seed, 3, 4);
        let params = ClassicCrfParams::new(sigma, KernelForm::Printed).unwrap();
        let ab = pairwise_energy_classic(&g, &params, a, b).unwrap();
        let ba = pairwise_energy_classic(&g, &params, b, a).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(pairwise_energy_classic(&g, &params, a, a).unwrap(), 0.0);
    }
}
