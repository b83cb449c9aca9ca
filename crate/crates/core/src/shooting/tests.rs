use super::*;
use crate::autodiff::{finite_difference_gradient, max_relative_error};
use crate::models::{init_params, TransitionSpec};
use proptest::prelude::*;

fn ll(d: usize, k: usize, h: usize) -> TransitionSpec {
    TransitionSpec::LocallyLinear {
        state_dim: d,
        maps: k,
        hidden: h,
    }
}

fn proj(indices: &[usize]) -> ObservationSpec {
    ObservationSpec::Projection {
        indices: indices.to_vec(),
    }
}

/// f = id (single zero map), g = id.
fn identity_model(d: usize) -> ModelParameters {
    let mut p = init_params(&ll(d, 1, 2), &proj(&(0..d).collect::<Vec<_>>()), 0).unwrap();
    p.get_mut("transition.ll.A.0").unwrap().data_mut().fill(0.0);
    p
}

fn dataset(n: usize, horizon: usize, p: usize, values: Vec<f64>) -> TrajectoryDataset {
    TrajectoryDataset::new(n, horizon, p, values, None, 0.0, false).unwrap()
}

fn wavy(n: usize, horizon: usize, p: usize) -> TrajectoryDataset {
    let values = (0..n * horizon * p)
        .map(|i| ((i as f64) * 0.37).sin() + 0.1 * (i % 7) as f64)
        .collect();
    dataset(n, horizon, p, values)
}

fn nodes(m: usize, d: usize, seed: u64) -> Tensor {
    let data = (0..m * d)
        .map(|i| ((i as f64 + seed as f64) * 1.3).cos())
        .collect();
    Tensor::new(vec![m, d], data).unwrap()
}

#[test]
fn segmentation_examples() {
    let s = Segmentation::new(100, 25).unwrap();
    assert_eq!(s.segments(), 4);
    assert_eq!(s.starts(), vec![0, 25, 50, 75]);
    let ivp = Segmentation::new(10, 10).unwrap();
    assert_eq!(ivp.segments(), 1);
    let err = Segmentation::new(100, 30).unwrap_err();
    assert!(err.to_string().contains("n must divide T"), "{err}");
    assert!(Segmentation::new(10, 0).is_err());
}

#[test]
fn zero_nodes() {
    let ds = wavy(2, 8, 1);
    let seg = Segmentation::new(8, 2).unwrap();
    let store = init_nodes(&ds, seg, NodeInit::Zeros, &proj(&[0]), 3).unwrap();
    assert_eq!(store.len(), 2);
    for j in 0..2 {
        assert_eq!(store.nodes(j).value.shape(), &[4, 3]);
        assert!(store.nodes(j).value.data().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn measurement_prefix_nodes() {
    let mut values = vec![0.0; 8];
    values[0] = 0.8;
    values[4] = -1.5;
    let ds = dataset(1, 8, 1, values);
    let seg = Segmentation::new(8, 4).unwrap();
    let a = init_nodes(&ds, seg, NodeInit::MeasurementPrefix, &proj(&[0]), 3).unwrap();
    assert_eq!(a.node(0, 0), &[0.8, 0.0, 0.0]);
    assert_eq!(a.node(0, 1), &[-1.5, 0.0, 0.0]);
    let b = init_nodes(&ds, seg, NodeInit::MeasurementPrefix, &proj(&[0]), 3).unwrap();
    assert_eq!(a, b);

    let decoder = ObservationSpec::MlpDecoder {
        hidden: vec![4],
        output_dim: 1,
        sigmoid: true,
    };
    assert_eq!(
        init_nodes(&ds, seg, NodeInit::MeasurementPrefix, &decoder, 3).unwrap_err(),
        ShootingError::PrefixNeedsProjection
    );
}

#[test]
fn hand_evaluated_loss() {
    let p = identity_model(1);
    let seg = Segmentation::new(2, 1).unwrap();
    let s = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
    let y = Tensor::new(vec![2, 1], vec![0.5, 0.5]).unwrap();
    let t = trajectory_loss(&p, &s, &y, seg, 1.0).unwrap();
    assert!((t.fit - 0.25).abs() < 1e-15);
    assert!((t.defect - 1.0).abs() < 1e-15);
    assert!((t.total - 1.25).abs() < 1e-15);
}

#[test]
fn ivp_hand_example() {
    let p = identity_model(1);
    let y = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
    assert_eq!(ivp_loss(&p, &[0.0], &y).unwrap(), 1.0);
}

#[test]
fn consistent_nodes_have_zero_defect() {
    let p = init_params(&ll(2, 3, 8), &proj(&[0]), 4).unwrap();
    let seg = Segmentation::new(12, 4).unwrap();
    let rollout = crate::models::iterate(&p, &[0.7, -0.4], 12).unwrap();
    let s =
        Tensor::from_rows(&[rollout[0].clone(), rollout[4].clone(), rollout[8].clone()]).unwrap();
    let y = Tensor::new(vec![12, 1], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
    let t = trajectory_loss(&p, &s, &y, seg, 1e3).unwrap();
    assert!(t.defect < 1e-24, "{}", t.defect);
    assert!((t.total - t.fit).abs() <= 1e3 * 1e-24 + 1e-15);
}

#[test]
fn perfect_model_has_zero_ivp_loss() {
    let p = init_params(&ll(2, 2, 4), &proj(&[0, 1]), 8).unwrap();
    let rollout = crate::models::iterate(&p, &[0.2, 0.9], 9).unwrap();
    let y = Tensor::from_rows(&rollout).unwrap();
    assert!(ivp_loss(&p, &[0.2, 0.9], &y).unwrap() < 1e-28);
}

#[test]
fn batch_loss_is_mean_of_totals() {
    let p = init_params(&ll(2, 2, 4), &proj(&[0]), 1).unwrap();
    let ds = wavy(4, 6, 1);
    let seg = Segmentation::new(6, 3).unwrap();
    let mut store = init_nodes(&ds, seg, NodeInit::MeasurementPrefix, &proj(&[0]), 2).unwrap();
    for j in 0..4 {
        store.nodes_mut(j).value = nodes(2, 2, j as u64);
    }
    let single = batch_loss(&p, &store, &ds, &[2], 5.0).unwrap();
    let direct = trajectory_loss(
        &p,
        &store.nodes(2).value,
        &ds.trajectory_tensor(2),
        seg,
        5.0,
    )
    .unwrap();
    assert_eq!(single, direct.total);

    let a = batch_loss(&p, &store, &ds, &[0, 1, 2, 3], 5.0).unwrap();
    let b = batch_loss(&p, &store, &ds, &[3, 1, 0, 2], 5.0).unwrap();
    assert!((a - b).abs() < 1e-12);

    assert_eq!(
        batch_loss(&p, &store, &ds, &[0, 9], 1.0),
        Err(ShootingError::UnknownTrajectory(9))
    );
    assert_eq!(
        batch_loss(&p, &store, &ds, &[1, 1], 1.0),
        Err(ShootingError::DuplicateTrajectory(1))
    );
    assert_eq!(
        batch_loss(&p, &store, &ds, &[], 1.0),
        Err(ShootingError::EmptyBatch)
    );
}

#[test]
fn identical_trajectories_average_to_either() {
    let p = init_params(&ll(2, 2, 4), &proj(&[0]), 1).unwrap();
    let one = wavy(1, 6, 1);
    let mut values = one.trajectory(0).to_vec();
    values.extend_from_slice(one.trajectory(0));
    let ds = dataset(2, 6, 1, values);
    let seg = Segmentation::new(6, 2).unwrap();
    let store = init_nodes(&ds, seg, NodeInit::MeasurementPrefix, &proj(&[0]), 2).unwrap();
    let both = batch_loss(&p, &store, &ds, &[0, 1], 2.0).unwrap();
    let first = batch_loss(&p, &store, &ds, &[0], 2.0).unwrap();
    assert!((both - first).abs() < 1e-15);
}

#[test]
fn recorded_terms_match_graph_total() {
    let p = init_params(&ll(3, 2, 5), &proj(&[1]), 2).unwrap();
    let ds = wavy(3, 8, 1);
    let seg = Segmentation::new(8, 2).unwrap();
    let store = init_nodes(&ds, seg, NodeInit::MeasurementPrefix, &proj(&[1]), 3).unwrap();
    let grads = batch_gradients(&p, &store, &ds, &[0, 1, 2], 7.0, 3).unwrap();
    let mean = grads
        .per_trajectory
        .iter()
        .map(|(_, t)| t.total)
        .sum::<f64>()
        / 3.0;
    assert!((grads.loss - mean).abs() < 1e-13);
    let value = batch_loss(&p, &store, &ds, &[0, 1, 2], 7.0).unwrap();
    assert!((grads.loss - value).abs() < 1e-13);
}

/// Max relative error of the batch gradients (θ and nodes) against central
/// differences of `batch_loss`.
fn batch_gradient_error(
    p: &ModelParameters,
    store: &ShootingNodeStore,
    ds: &TrajectoryDataset,
    batch: &[usize],
    alpha: f64,
) -> f64 {
    let grads = batch_gradients(p, store, ds, batch, alpha, 2).unwrap();
    let mut worst: f64 = 0.0;
    for (i, t) in p.tensors().iter().enumerate() {
        let numeric = finite_difference_gradient(
            |v| {
                let mut q = p.clone();
                q.tensors_mut()[i].var.value = v.clone();
                batch_loss(&q, store, ds, batch, alpha).unwrap()
            },
            &t.var.value,
            1e-6,
        );
        worst = worst.max(max_relative_error(&grads.params[i], &numeric, 1e-4));
    }
    for (j, g) in &grads.nodes {
        let numeric = finite_difference_gradient(
            |v| {
                let mut s = store.clone();
                s.nodes_mut(*j).value = v.clone();
                batch_loss(p, &s, ds, batch, alpha).unwrap()
            },
            &store.nodes(*j).value,
            1e-6,
        );
        worst = worst.max(max_relative_error(g, &numeric, 1e-4));
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    let decoder = ObservationSpec::MlpDecoder {
        hidden: vec![4],
        output_dim: 2,
        sigmoid: true,
    };
    let cases = [
        (ll(3, 2, 4), proj(&[0]), 3, 2),
        (
            TransitionSpec::FullyConnected {
                state_dim: 2,
                hidden: vec![5],
            },
            decoder,
            2,
            3,
        ),
    ];
    for (c, (t, o, m, n)) in cases.into_iter().enumerate() {
        let mut p = init_params(&t, &o, 30 + c as u64).unwrap();
        for nt in p.tensors_mut() {
            if nt.name.starts_with("transition.ll.A.") || nt.name == "transition.fc.1.weight" {
                nt.var.value = nt.var.value.map(|v| v * 30.0);
            }
        }
        let ds = wavy(3, m * n, o.output_dim());
        let seg = Segmentation::new(m * n, n).unwrap();
        let mut store = init_nodes(&ds, seg, NodeInit::Zeros, &o, t.state_dim()).unwrap();
        for j in 0..3 {
            store.nodes_mut(j).value = nodes(m, t.state_dim(), j as u64 + 5);
        }
        let err = batch_gradient_error(&p, &store, &ds, &[2, 0, 1], 3.0);
        assert!(err < 1e-5, "case {c}: {err}");
    }
}

#[test]
fn interior_nodes_receive_gradient_from_defect() {
    let p = identity_model(1);
    let ds = dataset(1, 3, 1, vec![0.0; 3]);
    let seg = Segmentation::new(3, 1).unwrap();
    let mut store = init_nodes(&ds, seg, NodeInit::Zeros, &proj(&[0]), 1).unwrap();
    // Fit term of the middle node is zero; only the defect moves it.
    store.nodes_mut(0).value = Tensor::new(vec![3, 1], vec![1.0, 0.0, 1.0]).unwrap();
    let fit_only = batch_gradients(&p, &store, &ds, &[0], 0.0, 1).unwrap();
    assert_eq!(fit_only.nodes[0].1.data()[1], 0.0);
    let g = batch_gradients(&p, &store, &ds, &[0], 1.0, 1).unwrap();
    assert!(g.nodes[0].1.data()[1].abs() > 0.1);
}

#[test]
fn zero_decoder_nodes_receive_gradient() {
    let decoder = ObservationSpec::MlpDecoder {
        hidden: vec![8, 8],
        output_dim: 4,
        sigmoid: true,
    };
    let p = init_params(&ll(3, 2, 4), &decoder, 2).unwrap();
    let values = (0..40)
        .map(|i| if i % 3 == 0 { 0.9 } else { 0.1 })
        .collect();
    let ds = dataset(1, 10, 4, values);
    let seg = Segmentation::new(10, 5).unwrap();
    let store = init_nodes(&ds, seg, NodeInit::Zeros, &decoder, 3).unwrap();
    let g = batch_gradients(&p, &store, &ds, &[0], 1.0, 1).unwrap();
    assert!(g.nodes[0].1.data().iter().any(|v| v.abs() > 1e-6));
}

#[test]
fn gradients_do_not_depend_on_thread_count() {
    let p = init_params(&ll(3, 4, 8), &proj(&[0]), 3).unwrap();
    let ds = wavy(9, 10, 1);
    let seg = Segmentation::new(10, 5).unwrap();
    let store = init_nodes(&ds, seg, NodeInit::MeasurementPrefix, &proj(&[0]), 3).unwrap();
    let batch = [4, 1, 7, 0, 8, 2, 5];
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| batch_gradients(&p, &store, &ds, &batch, 10.0, 2).unwrap())
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert_eq!(a.params, b.params);
    assert_eq!(a.nodes, b.nodes);
}

#[test]
fn non_finite_rollout_names_the_trajectory() {
    let mut p = identity_model(1);
    p.get_mut("transition.ll.A.0").unwrap().data_mut()[0] = 1e200;
    let ds = wavy(3, 4, 1);
    let seg = Segmentation::new(4, 4).unwrap();
    let mut store = init_nodes(&ds, seg, NodeInit::Zeros, &proj(&[0]), 1).unwrap();
    store.nodes_mut(1).value = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    match batch_gradients(&p, &store, &ds, &[0, 1, 2], 1.0, 3) {
        Err(ShootingError::NonFinite { trajectory, .. }) => assert_eq!(trajectory, Some(1)),
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

#[test]
fn node_checkpoint_round_trip() {
    let ds = wavy(2, 6, 1);
    let seg = Segmentation::new(6, 3).unwrap();
    let mut store = init_nodes(&ds, seg, NodeInit::MeasurementPrefix, &proj(&[0]), 2).unwrap();
    store.nodes_mut(1).value.data_mut()[3] = -0.125;
    let mut ck = Checkpoint::default();
    store.push_to_checkpoint(&mut ck);
    let back = ShootingNodeStore::from_checkpoint(&ck).unwrap().unwrap();
    assert_eq!(back, store);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn single_segment_equals_ivp_bitwise(
        seed in 0u64..1000,
        horizon in 1usize..12,
        fc in any::<bool>(),
        decoder in any::<bool>(),
        alpha in 0.0f64..100.0,
    ) {
        let d = 3;
        let t = if fc {
            TransitionSpec::FullyConnected { state_dim: d, hidden: vec![6] }
        } else {
            ll(d, 3, 6)
        };
        let o = if decoder {
            ObservationSpec::MlpDecoder { hidden: vec![5], output_dim: 2, sigmoid: true }
        } else {
            proj(&[2, 0])
        };
        let p = init_params(&t, &o, seed).unwrap();
        let y = Tensor::new(
            vec![horizon, 2],
            (0..2 * horizon).map(|i| ((i as f64 + seed as f64) * 0.71).sin()).collect(),
        ).unwrap();
        let x1 = [0.3, -0.2 + seed as f64 * 1e-3, 0.9];
        let seg = Segmentation::new(horizon, horizon).unwrap();
        let s = Tensor::new(vec![1, d], x1.to_vec()).unwrap();
        let terms = trajectory_loss(&p, &s, &y, seg, alpha).unwrap();
        let ivp = ivp_loss(&p, &x1, &y).unwrap();
        prop_assert_eq!(terms.total.to_bits(), ivp.to_bits());
        prop_assert_eq!(terms.defect, 0.0);
    }

    #[test]
    fn zero_penalty_total_is_fit(seed in 0u64..1000, m in 1usize..4, n in 1usize..5) {
        let p = init_params(&ll(2, 2, 4), &proj(&[0]), seed).unwrap();
        let ds = wavy(1, m * n, 1);
        let seg = Segmentation::new(m * n, n).unwrap();
        let s = nodes(m, 2, seed);
        let t = trajectory_loss(&p, &s, &ds.trajectory_tensor(0), seg, 0.0).unwrap();
        prop_assert_eq!(t.total, t.fit);
    }
}
