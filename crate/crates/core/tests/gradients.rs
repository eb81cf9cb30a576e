mod common;

use common::{random_subset, tiny_instance};
use r1pool::ago::{ago_grad, ago_loss, PastTaskRecord};
use r1pool::math::{dot, finite_diff_grad, norm, SeededRng};
use r1pool::pool::{ExpertPool, Rank1Expert};
use r1pool::router::GateMode;

#[test]
fn model_gradients_match_finite_differences() {
    for mode in [GateMode::Binary, GateMode::MaskedSoftmax] {
        for seed in 0..60 {
            let mut t = tiny_instance(seed, mode);
            let err = t.worst_rel_error(1e-5);
            assert!(err < 1e-4, "{mode:?} seed {seed}: rel err {err:e}");
        }
    }
}

#[test]
fn binary_router_gets_no_gradient() {
    let mut t = tiny_instance(3, GateMode::Binary);
    let g = t.analytic();
    let f = t.numeric(1e-5);
    let mut offset = 0;
    for (k, len) in t.model.flatten_shapes().into_iter().enumerate() {
        // every layer ends with its router tensor: 2r + 1 tensors per layer
        if k % 7 == 6 {
            assert!(g[offset..offset + len].iter().all(|&v| v == 0.0));
            assert!(norm(&f[offset..offset + len]) < 1e-9);
        }
        offset += len;
    }
}

#[test]
fn ago_gradient_matches_finite_differences() {
    let mut rng = SeededRng::new(77);
    let mut checked = 0;
    while checked < 100 {
        let (d, r, k) = (2 + rng.next_index(5), 3 + rng.next_index(4), 1 + rng.next_index(3));
        let experts: Vec<Rank1Expert> = (0..r)
            .map(|_| Rank1Expert {
                b: rng.gaussian_vec(d, 1.0),
                a: rng.gaussian_vec(2, 1.0),
            })
            .collect();
        let pool = ExpertPool::from_experts(0, d, 2, experts).unwrap();
        let records: Vec<PastTaskRecord> = (0..1 + rng.next_index(3))
            .map(|t| PastTaskRecord {
                task_id: t + 1,
                expert_indices: (0..k).collect(),
                critical_b: (0..k).map(|_| rng.gaussian_vec(d, 1.0)).collect(),
                frequencies: vec![1; k],
            })
            .collect();
        let current = random_subset(&mut rng, r, k.min(r));
        // stay away from the |·| kinks
        let near_kink = current.iter().any(|j| {
            records
                .iter()
                .flat_map(|rec| &rec.critical_b)
                .any(|p| dot(p, &pool.experts[j].b).abs() < 1e-3)
        });
        if near_kink {
            continue;
        }
        let grads = ago_grad(&records, &pool, &current).unwrap();
        for j in 0..r {
            let fd = finite_diff_grad(
                |b| {
                    let mut p = pool.clone();
                    p.experts[j].b = b.to_vec();
                    ago_loss(&records, &p, &current).unwrap()
                },
                &pool.experts[j].b,
                1e-6,
            )
            .unwrap();
            let diff: Vec<f64> = grads[j].iter().zip(&fd).map(|(a, b)| a - b).collect();
            let scale = norm(&grads[j]).max(norm(&fd));
            if scale == 0.0 {
                assert!(!current.contains(j) || records.is_empty());
                continue;
            }
            let rel = norm(&diff) / scale;
            assert!(rel < 1e-6, "instance {checked}, expert {j}: rel {rel:e}");
        }
        checked += 1;
    }
}
