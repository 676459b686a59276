//! Exhaustive checks of the precedence graph against the brute-force tapped
//! set oracle over all 8! unit orders.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tdlcal_core::encoder::EncoderConfig;
use tdlcal_core::model::{DelayLineModel, GroupSelector};
use tdlcal_core::por::{
    build_dag, build_error_library, enumerate_consistent, expected_pattern, por_iteration, Ansatz,
    PorParams, PorState, UnitMask, UnitOrder,
};

fn preimages(
    perceived: &UnitOrder,
    encoder: EncoderConfig,
) -> BTreeMap<UnitMask, BTreeSet<UnitOrder>> {
    let mut out: BTreeMap<UnitMask, BTreeSet<UnitOrder>> = BTreeMap::new();
    for actual in UnitOrder::all() {
        out.entry(expected_pattern(&actual, perceived, encoder))
            .or_default()
            .insert(actual);
    }
    out
}

#[test]
fn graph_extensions_equal_oracle_preimages() {
    let pre = preimages(&UnitOrder::IDENTITY, EncoderConfig::default());
    // Every subset holding the last slot occurs.
    assert_eq!(pre.len(), 128);
    let mut total = 0;
    for (mask, orders) in &pre {
        assert!(mask.contains(7), "{mask}");
        let ext: BTreeSet<UnitOrder> = enumerate_consistent(&build_dag(*mask).unwrap())
            .into_iter()
            .collect();
        assert_eq!(&ext, orders, "tapped set {mask}");
        total += orders.len();
    }
    assert_eq!(total, 40320);
}

#[test]
fn masks_without_last_slot_never_occur() {
    let pre = preimages(&UnitOrder::IDENTITY, EncoderConfig::default());
    for m in 0..=255u8 {
        let mask = UnitMask(m);
        if !mask.contains(7) {
            assert!(!pre.contains_key(&mask));
        }
    }
}

#[test]
fn library_partitions_under_shuffled_readout() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let all = UnitOrder::all();
    for _ in 0..5 {
        let mut labels: [u8; 8] = [0, 1, 2, 3, 4, 5, 6, 7];
        labels.shuffle(&mut rng);
        let perceived = UnitOrder::new(labels).unwrap();
        let lib = build_error_library(&all, &perceived, EncoderConfig::default());
        let parts = lib.partition();
        assert_eq!(parts.len(), 128);
        assert_eq!(parts.values().map(Vec::len).sum::<usize>(), 40320);
        let last = perceived.get(7) as usize;
        assert!(parts.keys().all(|m| m.contains(last)));
        // Relabelling the identity-readout graph gives the same classes.
        for (labels_mask, orders) in parts {
            let slots = UnitMask::from_labels(
                (0..8).filter(|&s| labels_mask.contains(perceived.get(s) as usize)),
            )
            .unwrap();
            let ext: BTreeSet<UnitOrder> = enumerate_consistent(&build_dag(slots).unwrap())
                .iter()
                .map(|o| perceived.relabel(o))
                .collect();
            assert_eq!(ext, orders.into_iter().collect::<BTreeSet<_>>());
        }
    }
}

#[test]
fn longer_anchor_runs_still_partition() {
    for k in 1..=4 {
        let encoder = EncoderConfig::new(k).unwrap();
        let pre = preimages(&UnitOrder::IDENTITY, encoder);
        assert_eq!(pre.values().map(BTreeSet::len).sum::<usize>(), 40320);
        assert!(pre.keys().all(|m| m.contains(7)));
    }
}

/// A segment of `cells` cells whose taps fire in a random order inside each
/// cell, with widths large enough that every bin is hit.
fn shuffled_model(cells: usize, rng: &mut ChaCha8Rng) -> DelayLineModel {
    let tap = 3.0;
    let mut positions = vec![0.0; cells * 8];
    for c in 0..cells {
        let mut order: Vec<usize> = (0..8).collect();
        order.shuffle(rng);
        for (rank, &t) in order.iter().enumerate() {
            positions[c * 8 + t] = 5.0 + (c * 8 + rank) as f64 * tap + rng.gen_range(-1.0..1.0);
        }
    }
    DelayLineModel::from_positions(positions, cells as f64 * 8.0 * tap + 20.0).unwrap()
}

fn unit_truth(model: &DelayLineModel, cell: usize) -> UnitOrder {
    let mut labels: [u8; 8] = [0, 1, 2, 3, 4, 5, 6, 7];
    labels.sort_by(|&a, &b| {
        model
            .position(cell * 8 + a as usize)
            .total_cmp(&model.position(cell * 8 + b as usize))
    });
    UnitOrder::new(labels).unwrap()
}

#[test]
fn resolution_on_shuffled_cells_keeps_truth_and_converges() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for ansatz in [Ansatz::Identity, Ansatz::Pattern] {
        let params = PorParams {
            ansatz: ansatz.clone(),
            ..PorParams::default()
        };
        for trial in 0..10u64 {
            let model = shuffled_model(9, &mut rng);
            let group = GroupSelector::new((trial % 3) as usize).unwrap();
            let mut state = PorState::new(0, group, model.num_cells()).unwrap();
            let mut sizes: Vec<usize> = vec![40320; state.units.len()];
            let mut rounds = 0;
            while !state.is_resolved() {
                state = por_iteration(&state, &model, 200_000, trial * 100 + rounds, &params)
                    .unwrap()
                    .state;
                rounds += 1;
                for (u, size) in state.units.iter().zip(sizes.iter_mut()) {
                    let cands = u.candidates.as_ref().unwrap();
                    assert!(cands.contains(&unit_truth(&model, u.cell)));
                    // An unresolved readout is ruled out by its own observation.
                    assert!(cands.len() < *size || *size == 1);
                    *size = cands.len();
                }
                assert!(rounds < 200);
            }
            let order = state.perceived_bins();
            assert_eq!(
                order,
                model.truth(&order).actual_order,
                "{ansatz:?} trial {trial}"
            );
        }
    }
}
