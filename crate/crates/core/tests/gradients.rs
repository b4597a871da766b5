mod common;
mod oracles;

use itm_core::losses::{AnchorMargins, NegativeMode, PairMapping, PenaltyWeights, DEFAULT_MU, DEFAULT_TAU};
use itm_core::model::{batch_loss, batch_loss_and_grads, MarginSource, Objective, WeightSource};
use itm_core::numerics::REL_ERROR_FLOOR;
use oracles::{central_differences, max_relative_error};

const TOL: f64 = 1e-4;
// balances O(h²) truncation against round-off in a sum of thousands of terms;
// one-sided sweeps confirm both halves of the error budget at this step
const FD_STEP: f64 = 3e-5;

fn check(seed: u64, objective_for: &dyn Fn(&[PenaltyWeights]) -> Objective) {
    let toy = common::toy(seed, 4, 6, 5);
    let store = toy.store();
    // weights are frozen at the base point
    let probe = objective_for(&[]);
    let weights = match &probe {
        Objective::Hierarchical { .. } => {
            let base = batch_loss(&toy.params, &toy.corpus, &store, &toy.batch, &objective_penalty()).unwrap();
            base.weights.clone()
        }
        Objective::Triplet { .. } => Vec::new(),
    };
    let objective = objective_for(&weights);
    let (loss, grads) = batch_loss_and_grads(&toy.params, &toy.corpus, &store, &toy.batch, &objective).unwrap();
    assert!(loss.total > 0.0, "seed {seed}: loss inactive, nothing to check");
    let x0 = toy.params.flatten();
    let mut probe_params = toy.params.clone();
    let numeric = central_differences(
        &mut |x| {
            probe_params.assign_flat(x).unwrap();
            batch_loss(&probe_params, &toy.corpus, &store, &toy.batch, &objective)
                .unwrap()
                .total
        },
        &x0,
        FD_STEP,
    );
    let analytic = grads.flatten();
    let (worst, err) = max_relative_error(&analytic, &numeric, REL_ERROR_FLOOR);
    assert!(
        err <= TOL,
        "seed {seed}: entry {worst} analytic {} numeric {} rel {err}",
        analytic[worst],
        numeric[worst]
    );
}

fn objective_penalty() -> Objective<'static> {
    Objective::Hierarchical {
        margins: MarginSource::Fixed(&FIXED),
        weights: WeightSource::Penalty {
            tau: DEFAULT_TAU,
            mu: DEFAULT_MU,
        },
        delta2: 0.0,
        negatives: NegativeMode::Hardest,
        mapping: PairMapping::Partners,
    }
}

static FIXED: [AnchorMargins; 4] = [AnchorMargins {
    delta_v: 0.2,
    delta_t: 0.2,
}; 4];

static ADAPTIVE: [AnchorMargins; 4] = [
    AnchorMargins {
        delta_v: 0.35,
        delta_t: 0.1,
    },
    AnchorMargins {
        delta_v: 0.0,
        delta_t: 0.5,
    },
    AnchorMargins {
        delta_v: 0.25,
        delta_t: 0.25,
    },
    AnchorMargins {
        delta_v: 0.6,
        delta_t: 0.05,
    },
];

#[test]
fn triplet_gradients_through_full_model() {
    for seed in 0..20 {
        check(seed, &|_| Objective::Triplet {
            delta1: 0.2,
            negatives: NegativeMode::Hardest,
        });
    }
}

#[test]
fn fixed_margin_hierarchical_gradients() {
    for seed in 0..20 {
        check(seed, &|w| Objective::Hierarchical {
            margins: MarginSource::Fixed(&FIXED),
            weights: WeightSource::Fixed(w),
            delta2: 0.0,
            negatives: NegativeMode::Hardest,
            mapping: PairMapping::Partners,
        });
    }
}

#[test]
fn adaptive_margin_gradients_with_frozen_weights() {
    for seed in 0..20 {
        check(seed, &|w| Objective::Hierarchical {
            margins: MarginSource::Fixed(&ADAPTIVE),
            weights: WeightSource::Fixed(w),
            delta2: 0.1,
            negatives: NegativeMode::Hardest,
            mapping: PairMapping::Partners,
        });
    }
}

#[test]
fn swapped_pairs_and_summed_negatives() {
    for seed in 0..20 {
        check(seed, &|w| Objective::Hierarchical {
            margins: MarginSource::Fixed(&ADAPTIVE),
            weights: WeightSource::Fixed(w),
            delta2: 0.05,
            negatives: NegativeMode::Sum,
            mapping: PairMapping::Swapped,
        });
    }
}
