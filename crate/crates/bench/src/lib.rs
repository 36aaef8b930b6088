//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use rand::Rng as _;

use mergerec::data::{build_dataset, split_leave_one_out, synthetic, LeaveOneOutSplit};
use mergerec::fisher::{BatchOrder, FisherDiag, FisherMeta, SamplingMethod};
use mergerec::model::{Model, ModelConfig, ParamVector, Segment};
use mergerec::util::rng_from_seed;

/// Desk-sized model over a synthetic split, freshly initialized.
pub fn desk_fixture(num_users: usize, num_items: usize) -> (Model, LeaveOneOutSplit, ParamVector) {
    let syn = synthetic::SyntheticConfig {
        num_users,
        num_items,
        ..synthetic::SyntheticConfig::default()
    };
    let interactions = synthetic::generate(&syn, &mut rng_from_seed(1)).expect("synthetic data");
    let split = split_leave_one_out(&build_dataset(&interactions, 3).expect("dataset")).expect("split");
    let model = Model::new(ModelConfig::desk().with_items(num_items)).expect("model");
    let params = model.init_params(2);
    (model, split, params)
}

/// `members` random checkpoints of `dim` coordinates with positive Fisher values.
pub fn merge_fixture(members: usize, dim: usize) -> Vec<(ParamVector, FisherDiag)> {
    let seg: Arc<[Segment]> = vec![Segment {
        name: "w".into(),
        offset: 0,
        len: dim,
    }]
    .into();
    let mut rng = rng_from_seed(3);
    (0..members)
        .map(|_| {
            let p = ParamVector::new(1, seg.clone(), (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("params");
            let meta = FisherMeta {
                method: SamplingMethod::TopK,
                n: 1,
                batch_size: 1,
                num_sequences: 1,
                seed: 0,
                order: BatchOrder::Sorted,
            };
            let f = p.with_values((0..dim).map(|_| rng.random::<f64>()).collect()).expect("fisher values");
            (p, FisherDiag::new(f, meta).expect("fisher"))
        })
        .collect()
}
