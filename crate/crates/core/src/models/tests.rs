use super::*;
use crate::autodiff::{finite_difference_gradient, max_relative_error};
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

fn zero_all(p: &mut ModelParameters, prefix: &str) {
    for t in p.tensors_mut() {
        if t.name.starts_with(prefix) {
            t.var.value.data_mut().fill(0.0);
        }
    }
}

#[test]
fn init_is_deterministic_per_seed() {
    let t = ll(3, 4, 8);
    let o = ObservationSpec::MlpDecoder {
        hidden: vec![5],
        output_dim: 7,
        sigmoid: true,
    };
    let a = init_params(&t, &o, 42).unwrap();
    let b = init_params(&t, &o, 42).unwrap();
    assert_eq!(a, b);
    let c = init_params(&t, &o, 43).unwrap();
    assert_ne!(a, c);
}

#[test]
fn locally_linear_default_layout() {
    let p = init_params(&TransitionSpec::locally_linear(3), &proj(&[0]), 0).unwrap();
    let maps: Vec<_> = p
        .tensors()
        .iter()
        .filter(|t| t.name.starts_with("transition.ll.A."))
        .collect();
    assert_eq!(maps.len(), 32);
    assert!(maps.iter().all(|t| t.var.value.shape() == [3, 3]));
    assert_eq!(
        p.get("transition.ll.beta.0.weight").unwrap().shape(),
        &[3, 1024]
    );
    assert_eq!(
        p.get("transition.ll.beta.1.weight").unwrap().shape(),
        &[1024, 32]
    );
    assert_eq!(p.tensors().len(), 32 + 4);
    assert!(p.tensors().iter().all(|t| t.var.requires_grad));
}

#[test]
fn fresh_locally_linear_is_near_identity() {
    use rand::{Rng, SeedableRng};
    let p = init_params(&ll(3, 32, 64), &proj(&[0]), 5).unwrap();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mut x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        x.iter_mut().for_each(|v| *v /= n);
        let fx = p.transition_values(&Tensor::row_vector(&x)).unwrap();
        let diff: f64 = fx
            .data()
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(diff);
    }
    assert!(worst <= 0.1, "worst increment {worst}");
}

#[test]
fn fully_connected_with_zero_weights_is_identity() {
    let mut p = init_params(
        &TransitionSpec::FullyConnected {
            state_dim: 3,
            hidden: vec![6, 6],
        },
        &proj(&[0, 1, 2]),
        1,
    )
    .unwrap();
    zero_all(&mut p, "transition.");
    let x = Tensor::row_vector(&[0.3, -4.0, 2.5]);
    assert_eq!(p.transition_values(&x).unwrap(), x);
}

#[test]
fn fully_connected_single_linear_layer() {
    let mut p = init_params(
        &TransitionSpec::FullyConnected {
            state_dim: 1,
            hidden: vec![],
        },
        &proj(&[0]),
        1,
    )
    .unwrap();
    p.get_mut("transition.fc.0.weight").unwrap().data_mut()[0] = 0.5;
    let y = p.transition_values(&Tensor::row_vector(&[2.0])).unwrap();
    assert_eq!(y.data(), &[3.0]);
}

#[test]
fn fully_connected_state_gradient_matches_finite_differences() {
    let p = init_params(
        &TransitionSpec::FullyConnected {
            state_dim: 3,
            hidden: vec![7, 5],
        },
        &proj(&[0, 1, 2]),
        3,
    )
    .unwrap();
    let x0 = Tensor::row_vector(&[0.4, -0.3, 0.9]);
    let w = Tensor::row_vector(&[1.0, -2.0, 0.5]);
    let mut g = Graph::new();
    let m = p.bind(&mut g, false).unwrap();
    let x = g.param(x0.clone());
    let y = m.transition(&mut g, x).unwrap();
    let wv = g.constant(w.clone());
    let y = g.mul(y, wv).unwrap();
    let l = g.sum(y).unwrap();
    let analytic = g.backward(l).unwrap().get(x).cloned().unwrap();
    let numeric = finite_difference_gradient(
        |t| {
            let f = p.transition_values(t).unwrap();
            f.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        },
        &x0,
        1e-6,
    );
    assert!(max_relative_error(&analytic, &numeric, 1e-3) < 1e-5);
}

#[test]
fn locally_linear_single_zero_map_is_identity() {
    let mut p = init_params(&ll(2, 1, 4), &proj(&[0]), 2).unwrap();
    zero_all(&mut p, "transition.ll.A.");
    let x = Tensor::row_vector(&[1.25, -0.5]);
    assert_eq!(p.transition_values(&x).unwrap(), x);
}

#[test]
fn locally_linear_forced_mixture() {
    let mut p = init_params(&ll(2, 2, 3), &proj(&[0]), 2).unwrap();
    zero_all(&mut p, "transition.ll.beta.1.weight");
    p.get_mut("transition.ll.beta.1.bias")
        .unwrap()
        .data_mut()
        .copy_from_slice(&[0.3f64.ln(), 0.7f64.ln()]);
    *p.get_mut("transition.ll.A.0").unwrap() = Tensor::identity(2);
    *p.get_mut("transition.ll.A.1").unwrap() = Tensor::identity(2).map(|v| -v);
    let x = [2.0, -5.0];
    let y = p.transition_values(&Tensor::row_vector(&x)).unwrap();
    for (a, b) in y.data().iter().zip(&x) {
        assert!((a - 0.6 * b).abs() < 1e-12, "{a} vs {}", 0.6 * b);
    }
}

#[test]
fn projection_selects_coordinates() {
    let p = init_params(&ll(3, 2, 4), &proj(&[0]), 0).unwrap();
    assert_eq!(observe(&p, &[1.5, -2.0, 7.0]).unwrap(), vec![1.5]);
}

#[test]
fn decoder_with_zero_output_layer_is_half() {
    let o = ObservationSpec::MlpDecoder {
        hidden: vec![4],
        output_dim: 6,
        sigmoid: true,
    };
    let mut p = init_params(&ll(3, 2, 4), &o, 0).unwrap();
    zero_all(&mut p, "observation.decoder.1.");
    let y = observe(&p, &[0.3, 2.0, -1.0]).unwrap();
    assert!(y.iter().all(|&v| v == 0.5));
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(init_params(&ll(3, 0, 4), &proj(&[0]), 0).is_err());
    assert!(init_params(&ll(3, 2, 4), &proj(&[3]), 0).is_err());
    assert!(init_params(&ll(3, 2, 4), &proj(&[1, 1]), 0).is_err());
    assert!(init_params(
        &TransitionSpec::FullyConnected {
            state_dim: 0,
            hidden: vec![]
        },
        &proj(&[0]),
        0
    )
    .is_err());
}

#[test]
fn transition_rejects_wrong_dimension() {
    let p = init_params(&ll(3, 2, 4), &proj(&[0]), 0).unwrap();
    let r = p.transition_values(&Tensor::row_vector(&[1.0, 2.0]));
    assert_eq!(
        r,
        Err(ModelError::DimensionMismatch {
            expected: 3,
            got: 2
        })
    );
}

fn doubling_model() -> ModelParameters {
    let mut p = init_params(
        &TransitionSpec::FullyConnected {
            state_dim: 1,
            hidden: vec![],
        },
        &proj(&[0]),
        0,
    )
    .unwrap();
    p.get_mut("transition.fc.0.weight").unwrap().data_mut()[0] = 1.0;
    p
}

#[test]
fn iterate_examples() {
    let p = doubling_model();
    assert_eq!(iterate(&p, &[1.0], 0).unwrap(), vec![vec![1.0]]);
    let states = iterate(&p, &[1.0], 3).unwrap();
    assert_eq!(states, vec![vec![1.0], vec![2.0], vec![4.0], vec![8.0]]);
}

#[test]
fn iterate_reports_non_finite_step() {
    let mut p = doubling_model();
    p.get_mut("transition.fc.0.weight").unwrap().data_mut()[0] = 1e100;
    let err = iterate(&p, &[1.0], 10).unwrap_err();
    assert_eq!(err, ModelError::NonFiniteState { step: 4 });
}

#[test]
fn iterate_composes() {
    let p = init_params(&ll(3, 4, 8), &proj(&[0]), 8).unwrap();
    let x = [0.3, -0.2, 1.1];
    let whole = iterate(&p, &x, 7).unwrap();
    let first = iterate(&p, &x, 3).unwrap();
    let second = iterate(&p, first.last().unwrap(), 4).unwrap();
    assert_eq!(whole[3..], second[..]);
}

/// Gradient of a weighted sum of `g(f^k(x))` w.r.t. the state and every
/// model tensor, compared with central differences.
fn rollout_gradient_error(p: &ModelParameters, x0: &[f64], k: usize) -> f64 {
    let p_dim = p.observation_spec().output_dim();
    let weights: Vec<f64> = (0..p_dim).map(|i| 0.5 + i as f64 * 0.25).collect();
    let value = |params: &ModelParameters, x: &Tensor| -> f64 {
        let states = iterate(params, x.data(), k).unwrap();
        let y = observe(params, states.last().unwrap()).unwrap();
        y.iter().zip(&weights).map(|(a, b)| a * b).sum()
    };

    let mut g = Graph::new();
    let m = p.bind(&mut g, true).unwrap();
    let x = g.param(Tensor::row_vector(x0));
    let states = m.iterate(&mut g, x, k).unwrap();
    let y = m.observe(&mut g, *states.last().unwrap()).unwrap();
    let w = g.constant(Tensor::row_vector(&weights));
    let y = g.mul(y, w).unwrap();
    let l = g.sum(y).unwrap();
    let grads = g.backward(l).unwrap();

    let mut worst = {
        let analytic = grads.get(x).cloned().unwrap();
        let numeric = finite_difference_gradient(|t| value(p, t), &Tensor::row_vector(x0), 1e-6);
        max_relative_error(&analytic, &numeric, 1e-4)
    };
    for (i, t) in p.tensors().iter().enumerate() {
        let analytic = grads
            .get(m.vars()[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.var.value.shape()));
        let numeric = finite_difference_gradient(
            |v| {
                let mut q = p.clone();
                q.tensors_mut()[i].var.value = v.clone();
                value(&q, &Tensor::row_vector(x0))
            },
            &t.var.value,
            1e-6,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric, 1e-4));
    }
    worst
}

#[test]
fn observe_iterate_gradients_match_finite_differences() {
    let decoder = ObservationSpec::MlpDecoder {
        hidden: vec![5],
        output_dim: 4,
        sigmoid: true,
    };
    let cases = [
        (ll(4, 3, 6), proj(&[0, 2])),
        (ll(2, 2, 5), decoder.clone()),
        (
            TransitionSpec::FullyConnected {
                state_dim: 3,
                hidden: vec![6, 4],
            },
            decoder,
        ),
    ];
    for (i, (t, o)) in cases.iter().enumerate() {
        let mut p = init_params(t, o, 100 + i as u64).unwrap();
        // Larger maps so the rollout is far from identity.
        for nt in p.tensors_mut() {
            if nt.name.starts_with("transition.ll.A.") {
                nt.var.value = nt.var.value.map(|v| v * 20.0);
            }
        }
        let x0: Vec<f64> = (0..t.state_dim()).map(|j| 0.3 - 0.2 * j as f64).collect();
        let err = rollout_gradient_error(&p, &x0, 10);
        assert!(err < 1e-5, "case {i}: {err}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let o = ObservationSpec::MlpDecoder {
        hidden: vec![5, 3],
        output_dim: 9,
        sigmoid: true,
    };
    for t in [
        ll(3, 4, 6),
        TransitionSpec::FullyConnected {
            state_dim: 3,
            hidden: vec![4, 2],
        },
    ] {
        for obs in [o.clone(), proj(&[2, 0])] {
            let p = init_params(&t, &obs, 77).unwrap();
            let mut ck = Checkpoint::default();
            ck.push_model(&p);
            ck.push(
                "nodes.0.0",
                Tensor::vector(&[f64::MIN_POSITIVE, -0.0, 1e300]),
            );
            let mut bytes = Vec::new();
            ck.write_to(&mut bytes).unwrap();
            assert_eq!(&bytes[..4], b"SSMP");
            let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
            assert_eq!(back, ck);
            let q = back.to_model().unwrap();
            assert_eq!(q, p);
            let mut again = Vec::new();
            back.write_to(&mut again).unwrap();
            assert_eq!(again, bytes);
        }
    }
}

#[test]
fn checkpoint_rejects_bad_magic() {
    let bytes = b"XXXX\x01\x00\x00\x00".to_vec();
    assert!(matches!(
        Checkpoint::read_from(&mut bytes.as_slice()),
        Err(CheckpointError::BadMagic)
    ));
}

proptest! {
    #[test]
    fn mixture_weights_lie_on_simplex(x in proptest::collection::vec(-50.0f64..50.0, 3), seed in 0u64..20) {
        let p = init_params(&ll(3, 5, 7), &proj(&[0]), seed).unwrap();
        let mut g = Graph::new();
        let m = p.bind(&mut g, false).unwrap();
        let xv = g.constant(Tensor::row_vector(&x));
        let beta = m.mixture_weights(&mut g, xv).unwrap().unwrap();
        let b = g.value(beta).data();
        prop_assert!(b.iter().all(|&v| v >= 0.0));
        prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zeroed_residual_is_identity(x in proptest::collection::vec(-10.0f64..10.0, 3), fc in any::<bool>()) {
        let t = if fc {
            TransitionSpec::FullyConnected { state_dim: 3, hidden: vec![4] }
        } else {
            ll(3, 3, 4)
        };
        let mut p = init_params(&t, &proj(&[0]), 1).unwrap();
        if fc {
            zero_all(&mut p, "transition.fc.1.");
        } else {
            zero_all(&mut p, "transition.ll.A.");
        }
        let xt = Tensor::row_vector(&x);
        prop_assert_eq!(p.transition_values(&xt).unwrap(), xt);
    }

    #[test]
    fn decoder_output_in_unit_interval(x in proptest::collection::vec(-3.0f64..3.0, 2)) {
        let o = ObservationSpec::MlpDecoder { hidden: vec![8], output_dim: 5, sigmoid: true };
        let p = init_params(&ll(2, 2, 3), &o, 4).unwrap();
        let y = observe(&p, &x).unwrap();
        prop_assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
