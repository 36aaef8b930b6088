mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use mergerec::data::{split_leave_one_out, ItemId, LeaveOneOutSplit, SequenceDataset};
use mergerec::eval::{
    evaluate, inconsistency_of, ndcg_at_k, plane_projection, popular_items, read_plane_csv, resolve_pool,
    write_plane_csv, CandidatePool, Plane, PlanePoint, Target, POOL_SIZE,
};
use mergerec::util::rng_from_seed;
use mergerec::ErrorClass;

/// Rank by sorting the whole list, the slow way.
fn ndcg_by_sorting(candidates: &[ItemId], scores: &[f64], target: ItemId, k: usize) -> f64 {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(candidates[a].cmp(&candidates[b])));
    match order.iter().position(|&i| candidates[i] == target) {
        Some(p) if p < k => 1.0 / ((p + 2) as f64).log2(),
        _ => 0.0,
    }
}

fn wide_split(users: usize, items: u32, seed: u64) -> LeaveOneOutSplit {
    let mut rng = rng_from_seed(seed);
    let sequences = (0..users)
        .map(|_| {
            let len = rng.random_range(4..40);
            (0..len).map(|_| rng.random_range(1..=items)).collect()
        })
        .collect();
    let ds = SequenceDataset::from_parts(sequences, (1..=items).collect()).unwrap();
    split_leave_one_out(&ds).unwrap()
}

#[test]
fn ndcg_matches_sorting_on_random_scores() {
    let mut rng = rng_from_seed(3);
    for trial in 0..1000 {
        let n = rng.random_range(1..200);
        let candidates: Vec<ItemId> = rand::seq::index::sample(&mut rng, 500, n)
            .into_iter()
            .map(|i| i as ItemId + 1)
            .collect();
        // coarse scores so ties are common
        let scores: Vec<f64> = (0..n)
            .map(|_| if trial % 2 == 0 { rng.random_range(0..5) as f64 } else { rng.random::<f64>() })
            .collect();
        let target = if trial % 10 == 0 { 501 } else { candidates[rng.random_range(0..n)] };
        for k in [1, 5, 10, 20, 250] {
            let got = ndcg_at_k(&candidates, &scores, target, k).unwrap();
            assert_eq!(got, ndcg_by_sorting(&candidates, &scores, target, k), "trial {trial} k {k}");
        }
    }
}

#[test]
fn ndcg_rejects_zero_k() {
    assert_eq!(ndcg_at_k(&[1, 2], &[0.0, 1.0], 1, 0).unwrap_err().class(), ErrorClass::Usage);
}

#[test]
fn ties_rank_the_lower_id_first() {
    assert_eq!(ndcg_at_k(&[5, 3, 9], &[1.0, 1.0, 1.0], 3, 1).unwrap(), 1.0);
    assert_eq!(ndcg_at_k(&[5, 3, 9], &[1.0, 1.0, 1.0], 5, 1).unwrap(), 0.0);
    assert_eq!(ndcg_at_k(&[5, 3, 9], &[1.0, 1.0, 1.0], 5, 2).unwrap(), 1.0 / 3f64.log2());
}

#[test]
fn random_pool_is_target_plus_unseen_items() {
    let split = wide_split(30, 400, 1);
    let pool = CandidatePool::Random { k: POOL_SIZE, seed: 9 };
    for (u, user) in split.users.iter().enumerate() {
        let cands = resolve_pool(&split, u, &pool, Target::Test);
        assert_eq!(cands[0], user.test);
        assert_eq!(cands.len(), POOL_SIZE + 1);
        let seen: HashSet<ItemId> = user.test_history().into_iter().chain([user.test]).collect();
        assert!(cands[1..].iter().all(|c| !seen.contains(c)));
        assert_eq!(cands.iter().collect::<HashSet<_>>().len(), cands.len());
        assert_eq!(cands, resolve_pool(&split, u, &pool, Target::Test));
    }
    let other = CandidatePool::Random { k: POOL_SIZE, seed: 10 };
    assert_ne!(resolve_pool(&split, 0, &pool, Target::Test), resolve_pool(&split, 0, &other, Target::Test));
}

#[test]
fn popular_pool_is_global_and_does_not_force_the_target() {
    let split = wide_split(30, 400, 2);
    let top = popular_items(&split, POOL_SIZE);
    assert_eq!(top.len(), POOL_SIZE);
    for w in top.windows(2) {
        let (a, b) = (split.popularity[w[0] as usize], split.popularity[w[1] as usize]);
        assert!(a > b || (a == b && w[0] < w[1]));
    }
    let pool = CandidatePool::Popular { k: POOL_SIZE };
    let mut missing = 0;
    for (u, user) in split.users.iter().enumerate() {
        let cands = resolve_pool(&split, u, &pool, Target::Test);
        assert_eq!(cands, top);
        missing += usize::from(!cands.contains(&user.test));
    }
    assert!(missing > 0, "fixture should include users whose target is unpopular");
}

#[test]
fn evaluation_is_deterministic_across_worker_counts() {
    let (model, split, params) = common::trained_desk(2, 5);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
            CandidatePool::standard(4)
                .iter()
                .map(|p| evaluate(&model, &params, &split, p, &[1, 10], Target::Test).unwrap())
                .collect::<Vec<_>>()
        })
    };
    assert_eq!(run(1), run(3));
}

proptest! {
    #[test]
    fn inconsistency_is_symmetric_and_bounded(pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..200)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let ab = inconsistency_of(&a, &b, 0.5).unwrap();
        prop_assert_eq!(ab, inconsistency_of(&b, &a, 0.5).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(inconsistency_of(&a, &a, 0.5).unwrap(), 0.0);
    }
}

fn gaussian(rng: &mut mergerec::util::Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn in_plane_points_keep_their_distances() {
    let mut rng = rng_from_seed(8);
    for _ in 0..50 {
        let d = rng.random_range(3..300);
        let (t1, t2, t3) = (gaussian(&mut rng, d), gaussian(&mut rng, d), gaussian(&mut rng, d));
        let mix = |a: f64, b: f64| -> Vec<f64> {
            (0..d).map(|i| t1[i] + a * (t2[i] - t1[i]) + b * (t3[i] - t1[i])).collect()
        };
        let centroid = mix(1.0 / 3.0, 1.0 / 3.0);
        let others: Vec<Vec<f64>> = (0..4).map(|_| mix(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))).collect();
        let extra: Vec<(String, &[f64])> = std::iter::once(("centroid".to_string(), centroid.as_slice()))
            .chain(others.iter().enumerate().map(|(i, p)| (format!("p{i}"), p.as_slice())))
            .collect();
        let pts = plane_projection(&t1, &t2, &t3, &extra).unwrap();
        let full: Vec<&[f64]> = [t1.as_slice(), &t2, &t3].into_iter().chain(extra.iter().map(|(_, p)| *p)).collect();
        for i in 0..full.len() {
            for j in 0..full.len() {
                let planar = ((pts[i].x - pts[j].x).powi(2) + (pts[i].y - pts[j].y).powi(2)).sqrt();
                assert!((planar - dist(full[i], full[j])).abs() <= 1e-8, "{} vs {}", planar, dist(full[i], full[j]));
            }
        }
        let plane = Plane::through(&t1, &t2, &t3).unwrap();
        let (x, y) = plane.project(&centroid);
        assert!(dist(&plane.lift(x, y), &centroid) <= 1e-8);
    }
}

#[test]
fn collinear_plane_points_are_rejected() {
    let t1 = vec![0.0, 1.0, 2.0];
    let t2 = vec![1.0, 2.0, 3.0];
    let t3 = vec![3.0, 4.0, 5.0];
    assert!(Plane::through(&t1, &t2, &t3).is_err());
    assert!(Plane::through(&t1, &t1, &t3).is_err());
}

#[test]
fn plane_csv_round_trips() {
    let mut rng = rng_from_seed(5);
    let points: Vec<PlanePoint> = (0..20)
        .map(|i| PlanePoint {
            label: format!("point_{i}"),
            x: StandardNormal.sample(&mut rng),
            y: rng.random::<f64>() * 1e-300,
        })
        .collect();
    let mut buf = Vec::new();
    write_plane_csv(&mut buf, &points).unwrap();
    assert!(buf.starts_with(b"label,x,y\n"));
    assert_eq!(read_plane_csv(buf.as_slice()).unwrap(), points);
}
