mod common;

use common::{desk_model, finite_difference_check, reference_probs};
use mergerec::data::ItemId;
use mergerec::model::{Dropout, Model, ModelConfig};
use proptest::prelude::*;

#[test]
fn forward_matches_straight_line_reimplementation() {
    let m = desk_model();
    for seed in 0..5 {
        let p = m.init_params(seed);
        let window: Vec<ItemId> = vec![0, 0, 0, 4, 9, 2, 2, 13];
        for pos in 3..8 {
            let got = m.forward(&p, &window, &[pos], Dropout::Off).unwrap();
            let want = reference_probs(m.config(), &p, &window, pos);
            for (a, b) in got.positions[0].probs.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "seed {seed} pos {pos}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn two_layer_forward_matches_reimplementation() {
    let m = Model::new(ModelConfig { n_layers: 2, n_heads: 4, ..desk_model().config().clone() }).unwrap();
    let p = m.init_params(9);
    let window: Vec<ItemId> = vec![0, 1, 2, 3, 4, 5, 6, 13];
    let got = m.forward(&p, &window, &[7], Dropout::Off).unwrap();
    let want = reference_probs(m.config(), &p, &window, 7);
    for (a, b) in got.positions[0].probs.iter().zip(&want) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn gradients_match_finite_differences_on_every_segment() {
    let m = desk_model();
    let window: Vec<ItemId> = vec![0, 0, 5, 11, 3, 3, 8, 13];
    for seed in 0..4 {
        let p = m.init_params(seed);
        for (position, item) in [(7, 3), (7, 9), (4, 12), (2, 1)] {
            for check in finite_difference_check(&m, &p, &window, position, item, 1e-5) {
                assert!(
                    check.failures == 0,
                    "seed {seed} pos {position} {}: {} coordinates out of tolerance, worst rel err {:.3e} (analytic {:.6e}, numeric {:.6e})",
                    check.segment,
                    check.failures,
                    check.max_rel_err,
                    check.worst_analytic,
                    check.worst_numeric
                );
            }
        }
    }
}

#[test]
fn gradients_match_finite_differences_two_layers() {
    let m = Model::new(ModelConfig { n_layers: 2, ..desk_model().config().clone() }).unwrap();
    let p = m.init_params(4);
    let window: Vec<ItemId> = vec![0, 2, 5, 11, 3, 3, 8, 13];
    for check in finite_difference_check(&m, &p, &window, 7, 5, 1e-5) {
        assert!(check.failures == 0, "{}: {:.3e}", check.segment, check.max_rel_err);
    }
}

// Central differences are second order: shrinking the step 10x should shrink
// the worst discrepancy roughly 100x until rounding takes over.
#[test]
fn finite_difference_error_is_second_order() {
    let m = desk_model();
    let p = m.init_params(17);
    let window: Vec<ItemId> = vec![0, 0, 5, 11, 3, 3, 8, 13];
    let worst = |step: f64| {
        finite_difference_check(&m, &p, &window, 7, 3, step)
            .iter()
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max)
    };
    let coarse = worst(1e-3);
    let fine = worst(1e-4);
    assert!(fine < coarse / 30.0, "coarse {coarse:.3e} fine {fine:.3e}");
}

#[test]
fn batch_gradient_is_sum_of_window_gradients() {
    let m = desk_model();
    let p = m.init_params(1);
    let windows: Vec<Vec<ItemId>> = vec![
        vec![0, 0, 0, 0, 1, 2, 3, 13],
        vec![4, 5, 6, 7, 8, 9, 10, 13],
        vec![0, 0, 0, 0, 0, 0, 12, 13],
        vec![0, 0, 11, 11, 2, 13, 5, 13],
    ];
    let positions = vec![7; 4];
    let batch = m.grad_sum_log_prob(&p, &windows, &positions, 6).unwrap();
    let mut summed = vec![0.0; p.len()];
    for w in &windows {
        for (s, g) in summed.iter_mut().zip(m.grad_log_prob(&p, w, 7, 6).unwrap()) {
            *s += g;
        }
    }
    for (a, b) in batch.iter().zip(&summed) {
        assert!((a - b).abs() < 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_normalised(seed in 0u64..1000, tokens in prop::collection::vec(1u32..=13, 1..=8)) {
        let m = desk_model();
        let p = m.init_params(seed);
        let window = mergerec::data::right_aligned(&tokens, 8);
        let out = m.forward(&p, &window, &[7], Dropout::Off).unwrap();
        let s: f64 = out.positions[0].probs.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
    }
}

