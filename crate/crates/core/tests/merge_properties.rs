use std::sync::Arc;

use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use mergerec::fisher::{BatchOrder, FisherDiag, FisherMeta, SamplingMethod};
use mergerec::merge::{merge_fisher, merge_objective, merge_objective_grad, merge_uniform, MergeEntry, DEFAULT_EPSILON};
use mergerec::model::{ParamVector, Segment};
use mergerec::util::rng_from_seed;

fn pv(values: &[f64]) -> ParamVector {
    let seg: Arc<[Segment]> = vec![Segment {
        name: "w".into(),
        offset: 0,
        len: values.len(),
    }]
    .into();
    ParamVector::new(42, seg, values.to_vec()).unwrap()
}

fn fisher_like(p: &ParamVector, values: Vec<f64>) -> FisherDiag {
    let meta = FisherMeta {
        method: SamplingMethod::TopK,
        n: 1,
        batch_size: 1,
        num_sequences: 1,
        seed: 0,
        order: BatchOrder::Sorted,
    };
    FisherDiag::new(p.with_values(values).unwrap(), meta).unwrap()
}

#[derive(Debug)]
struct Recipe {
    params: Vec<ParamVector>,
    fishers: Vec<FisherDiag>,
    lambdas: Vec<f64>,
}

impl Recipe {
    fn entries(&self) -> Vec<MergeEntry<'_>> {
        self.params
            .iter()
            .zip(&self.fishers)
            .zip(&self.lambdas)
            .map(|((p, f), &lambda)| MergeEntry {
                params: p,
                fisher: Some(f),
                lambda,
            })
            .collect()
    }
}

/// Members, Fisher values and lambdas; about a fifth of the Fisher values
/// are zero so the fallback branch is exercised.
fn recipe() -> impl Strategy<Value = Recipe> {
    (1usize..6, 1usize..9).prop_flat_map(|(m, d)| {
        (
            prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d), m),
            prop::collection::vec(prop::collection::vec(prop_oneof![1 => Just(0.0), 4 => 0.0f64..5.0], d), m),
            prop::collection::vec(0.01f64..10.0, m),
        )
            .prop_map(|(thetas, fs, lambdas)| {
                let params: Vec<ParamVector> = thetas.iter().map(|t| pv(t)).collect();
                let fishers = params.iter().zip(fs).map(|(p, f)| fisher_like(p, f)).collect();
                Recipe { params, fishers, lambdas }
            })
    })
}

/// Fisher values and lambdas with short mantissas, so rescaling by small
/// constants is exact.
fn exact_recipe() -> impl Strategy<Value = Recipe> {
    (2usize..6, 1usize..9).prop_flat_map(|(m, d)| {
        (
            prop::collection::vec(prop::collection::vec(-1000i32..1000, d), m),
            prop::collection::vec(prop::collection::vec(1u32..1024, d), m),
            prop::collection::vec(1u32..16, m),
        )
            .prop_map(|(thetas, fs, lambdas)| {
                let params: Vec<ParamVector> = thetas
                    .iter()
                    .map(|t| pv(&t.iter().map(|&x| x as f64 / 64.0).collect::<Vec<_>>()))
                    .collect();
                let fishers = params
                    .iter()
                    .zip(fs)
                    .map(|(p, f)| fisher_like(p, f.iter().map(|&x| x as f64 / 256.0).collect()))
                    .collect();
                Recipe {
                    params,
                    fishers,
                    lambdas: lambdas.iter().map(|&l| l as f64).collect(),
                }
            })
    })
}

fn scaled(r: &Recipe, f_factor: f64, l_factor: f64) -> Recipe {
    Recipe {
        params: r.params.clone(),
        fishers: r.fishers.iter().map(|f| f.scaled(f_factor).unwrap()).collect(),
        lambdas: r.lambdas.iter().map(|l| l * l_factor).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn merged_coordinates_stay_within_member_range(r in recipe()) {
        let merged = merge_fisher(&r.entries(), DEFAULT_EPSILON).unwrap();
        for j in 0..merged.len() {
            let (lo, hi) = r.params.iter().map(|p| p.values()[j]).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            prop_assert!(merged.values()[j] >= lo && merged.values()[j] <= hi);
        }
        let uniform = merge_uniform(&r.params.iter().collect::<Vec<_>>()).unwrap();
        for j in 0..uniform.len() {
            let (lo, hi) = r.params.iter().map(|p| p.values()[j]).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            prop_assert!(uniform.values()[j] >= lo && uniform.values()[j] <= hi);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn common_rescaling_is_bit_identical(r in exact_recipe(), c in prop::sample::select(vec![0.5, 3.0, 7.0, 1024.0])) {
        let base = merge_fisher(&r.entries(), DEFAULT_EPSILON).unwrap();
        let by_f = merge_fisher(&scaled(&r, c, 1.0).entries(), DEFAULT_EPSILON).unwrap();
        let by_l = merge_fisher(&scaled(&r, 1.0, c).entries(), DEFAULT_EPSILON).unwrap();
        let bits = |p: &ParamVector| p.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&base), bits(&by_f));
        prop_assert_eq!(bits(&base), bits(&by_l));
    }

    #[test]
    fn merging_copies_returns_the_checkpoint(r in recipe(), copies in 1usize..6) {
        let p = &r.params[0];
        let f = &r.fishers[0];
        let entries: Vec<MergeEntry<'_>> = (0..copies).map(|i| MergeEntry { params: p, fisher: Some(f), lambda: 0.5 + i as f64 }).collect();
        let merged = merge_fisher(&entries, DEFAULT_EPSILON).unwrap();
        prop_assert_eq!(merged.values(), p.values());
        let refs: Vec<&ParamVector> = (0..copies).map(|_| p).collect();
        let uniform = merge_uniform(&refs).unwrap();
        prop_assert_eq!(uniform.values(), p.values());
    }

    #[test]
    fn equal_fisher_matches_uniform(r in recipe(), level in 0.01f64..100.0) {
        let fishers: Vec<FisherDiag> = r.params.iter().map(|p| fisher_like(p, vec![level; p.len()])).collect();
        let entries: Vec<MergeEntry<'_>> = r.params.iter().zip(&fishers).map(|(p, f)| MergeEntry::new(p, f)).collect();
        let a = merge_fisher(&entries, DEFAULT_EPSILON).unwrap();
        let b = merge_uniform(&r.params.iter().collect::<Vec<_>>()).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() <= 1e-12, "{} vs {}", x, y);
        }
    }

    #[test]
    fn objective_gradient_vanishes_at_the_merge(r in recipe()) {
        let entries = r.entries();
        let merged = merge_fisher(&entries, DEFAULT_EPSILON).unwrap();
        let grad = merge_objective_grad(&merged, &entries).unwrap();
        for (j, g) in grad.iter().enumerate() {
            let raw: f64 = entries.iter().map(|e| e.lambda * e.fisher.unwrap().values()[j]).sum();
            if raw >= DEFAULT_EPSILON {
                prop_assert!(g.abs() <= 1e-8, "coordinate {} gradient {}", j, g);
            }
        }
    }
}

#[test]
fn hand_example() {
    let (a, b) = (pv(&[2.0]), pv(&[6.0]));
    let (fa, fb) = (fisher_like(&a, vec![3.0]), fisher_like(&b, vec![1.0]));
    let merged = merge_fisher(&[MergeEntry::new(&a, &fa), MergeEntry::new(&b, &fb)], DEFAULT_EPSILON).unwrap();
    assert_eq!(merged.values(), &[3.0]);
}

#[test]
fn merge_beats_random_perturbations_of_itself() {
    let mut rng = rng_from_seed(17);
    let d = 2_000;
    let members: Vec<ParamVector> = (0..3)
        .map(|_| pv(&(0..d).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>()))
        .collect();
    let fishers: Vec<FisherDiag> = members
        .iter()
        .map(|p| fisher_like(p, (0..d).map(|_| rng.random::<f64>().powi(3)).collect()))
        .collect();
    let entries: Vec<MergeEntry<'_>> = members
        .iter()
        .zip(&fishers)
        .zip([1.0, 2.0, 0.5])
        .map(|((p, f), lambda)| MergeEntry {
            params: p,
            fisher: Some(f),
            lambda,
        })
        .collect();
    let merged = merge_fisher(&entries, DEFAULT_EPSILON).unwrap();
    let best = merge_objective(&merged, &entries).unwrap();
    for trial in 0..1000 {
        let scale = 10f64.powi(-(trial % 6));
        let v: Vec<f64> = merged
            .values()
            .iter()
            .map(|x| {
                let z: f64 = StandardNormal.sample(&mut rng);
                x + scale * z
            })
            .collect();
        let other = merge_objective(&merged.with_values(v).unwrap(), &entries).unwrap();
        assert!(best >= other, "trial {trial}: {best} < {other}");
    }
}
