mod common;

use common::{scalar_forward, tiny_instance, trained_tiny};
use r1pool::math::{IndexSet, SeededRng};
use r1pool::model::{AdaptedModel, ClassPrototypes, ForwardOptions, FrozenBackbone, ModelConfig};
use r1pool::pool::{GateVector, MergeStrategy};
use r1pool::router::{gate, GateMode, SelectionConfig};

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn forward_matches_scalar_loops() {
    for mode in [GateMode::Binary, GateMode::MaskedSoftmax] {
        for seed in 0..20 {
            let mut t = tiny_instance(seed, mode);
            let sets = t.sets.clone();
            let trace = t
                .model
                .forward_train(&t.batch, ForwardOptions::fixed(t.selection, &sets))
                .unwrap();
            for (n, x) in t.batch.iter().enumerate() {
                let gates: Vec<GateVector> = trace.layers.iter().map(|l| l.gates[n].clone()).collect();
                // gates themselves from scratch
                for (l, g) in gates.iter().enumerate() {
                    let expect = gate(&trace.layers[l].scores[n], &sets[l], mode).unwrap();
                    assert_eq!(g, &expect);
                }
                let oracle = scalar_forward(&t.model, x, &gates);
                assert!(max_diff(&oracle, &trace.logits[n]) < 1e-12);
            }
        }
    }
}

#[test]
fn merged_weights_equal_gated_forward() {
    for seed in 0..20 {
        let mode = if seed % 2 == 0 { GateMode::Binary } else { GateMode::MaskedSoftmax };
        let (mut model, xs) = trained_tiny(seed, mode);
        for strategy in [
            MergeStrategy::UniformTopk { k: 2 },
            MergeStrategy::FrequencyWeighted { k: 2, alpha: 0.2 },
        ] {
            let gates: Vec<GateVector> = model
                .adapters
                .iter()
                .map(|ad| ad.pool.merge_gate(&ad.memory, strategy).unwrap())
                .collect();
            let mut merged = model.backbone.clone();
            for (l, ad) in model.adapters.iter().enumerate() {
                merged.layers[l].weight = ad.pool.merge_with_gate(&merged.layers[l].weight, &gates[l]).unwrap();
            }
            let sets: Vec<IndexSet> = gates.iter().map(|g| g.support.clone()).collect();
            let sel = SelectionConfig {
                retain: 3,
                gate_mode: GateMode::Binary,
            };
            let before = model.adapters.iter().map(|a| a.memory.clone()).collect::<Vec<_>>();
            let trace = model.forward_train(&xs, ForwardOptions::fixed(sel, &sets)).unwrap();
            let after = model.adapters.iter().map(|a| a.memory.clone()).collect::<Vec<_>>();
            assert_eq!(before, after, "fixed routing must not record");
            for (n, x) in xs.iter().enumerate() {
                let eval = merged.forward_eval(x, &model.prototypes).unwrap();
                let gated = scalar_forward(&model, x, &gates);
                assert!(max_diff(&eval, &gated) < 1e-9, "seed {seed} {strategy:?}");
                if let MergeStrategy::UniformTopk { .. } = strategy {
                    assert!(max_diff(&eval, &trace.logits[n]) < 1e-9);
                }
            }
        }
    }
}

#[test]
fn zero_init_matches_frozen() {
    let mut rng = SeededRng::new(12);
    let mcfg = ModelConfig::default();
    let bb = FrozenBackbone::random(16, &mcfg, &mut rng);
    let protos = ClassPrototypes::new((0..5).map(|_| rng.gaussian_vec(mcfg.hidden_dim, 1.0)).collect()).unwrap();
    let mut model = AdaptedModel::new(bb.clone(), protos.clone(), 12, &mut rng).unwrap();
    let xs: Vec<Vec<f64>> = (0..200).map(|_| rng.gaussian_vec(16, 1.0)).collect();
    let sel = SelectionConfig {
        retain: 8,
        gate_mode: GateMode::MaskedSoftmax,
    };
    let trace = model.forward_train(&xs, ForwardOptions::train(sel)).unwrap();
    for (x, l) in xs.iter().zip(&trace.logits) {
        assert!(max_diff(&bb.forward_eval(x, &protos).unwrap(), l) < 1e-12);
    }
}
