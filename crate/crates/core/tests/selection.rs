use mape_core::fisher::FisherStats;
use mape_core::maskselect::{
    enumerate_optimum, greedy_swap, mask_from_text, mask_to_text, select_mask, warm_start, SelectionProblem, Sense,
};
use mape_core::tinyformer::LayerLayout;
use ndarray::Array2;
use proptest::prelude::*;

fn problem(
    layout: LayerLayout,
    grad: Vec<f64>,
    factors: Vec<f64>,
    diagonal: bool,
    sense: Sense,
    sparsity: f64,
) -> SelectionProblem {
    let m = layout.layer_size();
    let blocks = (0..layout.num_layers)
        .map(|l| {
            let a = Array2::from_shape_fn((m, m), |(i, j)| factors[(l * m * m + i * m + j) % factors.len()]);
            let b = a.dot(&a.t()) / m as f64;
            if diagonal {
                Array2::from_diag(&b.diag())
            } else {
                b
            }
        })
        .collect();
    let fim = FisherStats::from_blocks(layout, blocks, 1).unwrap();
    SelectionProblem::new(sense, grad, fim, sparsity).unwrap()
}

fn arb_problem(diagonal: bool, sense: Sense) -> impl Strategy<Value = SelectionProblem> {
    (1usize..=3, 1usize..=4, 1usize..=8, 0.0f64..0.95).prop_flat_map(move |(layers, heads, filters, s)| {
        let layout = LayerLayout {
            num_layers: layers,
            heads_per_layer: heads,
            filters_per_layer: filters,
        };
        let n = layout.module_count();
        (
            proptest::collection::vec(-1.0f64..1.0, n),
            proptest::collection::vec(-1.0f64..1.0, 16..64),
        )
            .prop_map(move |(g, f)| problem(layout, g, f, diagonal, sense, s))
    })
}

fn layer_counts(p: &SelectionProblem, mask: &[bool]) -> Vec<usize> {
    (0..p.layout.num_layers)
        .map(|l| p.layout.layer_indices(l).iter().filter(|&&i| mask[i]).count())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn diagonal_warm_start_is_layer_optimal(p in arb_problem(true, Sense::Mlr)) {
        let warm = warm_start(&p).unwrap().active();
        for l in 0..p.layout.num_layers {
            let (opt, value) = enumerate_optimum(&p, l).unwrap();
            let local: Vec<bool> = p.layout.layer_indices(l).iter().map(|&i| warm[i]).collect();
            prop_assert_eq!(&local, &opt);
            prop_assert_eq!(p.layer_objective_of(&warm, l), value);
        }
    }

    #[test]
    fn enumerated_then_greedy_then_warm(p in arb_problem(false, Sense::Mlr)) {
        let warm = warm_start(&p).unwrap();
        let greedy = greedy_swap(&p, &warm).unwrap();
        prop_assert_eq!(greedy.active_count(), warm.active_count());
        prop_assert!(greedy.active_count() <= p.budget());
        prop_assert_eq!(layer_counts(&p, &greedy.active()), layer_counts(&p, &warm.active()));
        for l in 0..p.layout.num_layers {
            let (_, best) = enumerate_optimum(&p, l).unwrap();
            let g = p.layer_objective_of(&greedy.active(), l);
            let w = p.layer_objective_of(&warm.active(), l);
            prop_assert!(best <= g + 1e-12);
            prop_assert!(g <= w);
        }
    }

    #[test]
    fn maximizing_sense_never_decreases(p in arb_problem(false, Sense::Mlf)) {
        let warm = warm_start(&p).unwrap();
        let greedy = greedy_swap(&p, &warm).unwrap();
        for l in 0..p.layout.num_layers {
            let (_, best) = enumerate_optimum(&p, l).unwrap();
            let g = p.layer_objective_of(&greedy.active(), l);
            prop_assert!(g >= p.layer_objective_of(&warm.active(), l));
            prop_assert!(best >= g - 1e-12);
        }
    }

    #[test]
    fn positive_scaling_keeps_the_selection(p in arb_problem(false, Sense::Mlr), c in 0.01f64..100.0) {
        prop_assert_eq!(select_mask(&p).unwrap().active(), select_mask(&p.scaled(c)).unwrap().active());
    }

    #[test]
    fn mask_text_round_trips(p in arb_problem(false, Sense::Mlr)) {
        let mask = select_mask(&p).unwrap();
        let (back, sense) = mask_from_text(&mask_to_text(&mask, Some(p.sense))).unwrap();
        prop_assert_eq!(back, mask);
        prop_assert_eq!(sense, Some(Sense::Mlr));
    }
}
