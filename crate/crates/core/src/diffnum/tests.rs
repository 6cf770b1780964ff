use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::nn::{Conv2d, GruCell, LayerNorm, Linear, Mlp, MultiHeadAttention};
use super::*;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random linear functional so every output element carries gradient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, crate::Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(g.shape(y), &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2]));
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn layer_norm_of_constant_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 6], 3.25));
    let y = g.layer_norm(x, None, None, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn standardized_tokens_have_zero_mean_unit_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand_tensor(&[2, 5, 3], &mut rng));
    let y = g.standardize_tokens(x, 0.0).unwrap();
    let d = g.value(y).data();
    for b in 0..2 {
        for c in 0..3 {
            let col: Vec<f64> = (0..5).map(|i| d[(b * 5 + i) * 3 + c]).collect();
            let mean = col.iter().sum::<f64>() / 5.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_jacobian_at_half() {
    // d softmax_i / d x_j = p_i (delta_ij - p_j)
    let expected = [[0.25, -0.25], [-0.25, 0.25]];
    for (i, row) in expected.iter().enumerate() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2]));
        let y = g.softmax(x).unwrap();
        let sel = g.slice_last(y, i, 1).unwrap();
        let s = g.sum_all(sel);
        let grads = g.backward(s).unwrap();
        let d = grads.get(x).unwrap();
        for j in 0..2 {
            assert!((d[j] - row[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn square_gradient_matches_central_difference() {
    let x = Tensor::scalar(3.0);
    let err = gradient_check(|g, x| g.mul(x, x), &x, 1e-4).unwrap();
    assert!(err < 1e-6, "{err}");
    let mut g = Graph::<f64>::new();
    let v = g.input(x);
    let y = g.mul(v, v).unwrap();
    assert!((g.backward(y).unwrap().get(v).unwrap()[0] - 6.0).abs() < 1e-12);
}

#[test]
fn gradient_check_rejects_bad_eps_and_nonfinite() {
    let x = Tensor::scalar(1.0);
    assert!(gradient_check(|g, x| g.mul(x, x), &x, 0.0).is_err());
    let err = gradient_check(
        |g, x| {
            let y = g.scale(x, f64::INFINITY);
            Ok(g.sum_all(y))
        },
        &x,
        1e-4,
    );
    assert!(matches!(err, Err(crate::Error::Numerical(_))));
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 5]));
    match g.matmul(a, b) {
        Err(crate::Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 5]);
        }
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
}

#[test]
fn gru_cell_gradient_check_8d() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f64>::new();
    let cell = GruCell::new(&mut store, "gru", 8, 8, &mut rng).unwrap();
    let x = rand_tensor(&[1, 8], &mut rng);
    let h = rand_tensor(&[1, 8], &mut rng);
    let err = gradient_check(
        |g, hv| {
            g.bind(&store);
            let xv = g.constant(x.clone());
            let out = cell.forward(g, xv, hv)?;
            project(g, out, 1)
        },
        &h,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-4, "gru wrt state: {err}");
    for id in store.ids() {
        let err = gradient_check_param(
            |g| {
                let xv = g.constant(x.clone());
                let hv = g.constant(h.clone());
                let out = cell.forward(g, xv, hv)?;
                project(g, out, 2)
            },
            &store,
            id,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "gru wrt {}: {err}", store.name(id));
    }
}

#[test]
fn elementwise_and_shape_ops_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&[2, 3, 4], &mut rng);
    let other = rand_tensor(&[2, 3, 4], &mut rng);
    type Case = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var, crate::Error>>;
    let o1 = other.clone();
    let o2 = other.clone();
    let o3 = other.clone();
    let cases: Vec<(&str, Case)> = vec![
        ("add", Box::new(move |g: &mut Graph<f64>, x| {
            let c = g.constant(o1.clone());
            let y = g.add(x, c)?;
            project(g, y, 3)
        })),
        ("sub", Box::new(move |g: &mut Graph<f64>, x| {
            let c = g.constant(o2.clone());
            let y = g.sub(c, x)?;
            project(g, y, 3)
        })),
        ("mul", Box::new(move |g: &mut Graph<f64>, x| {
            let y = g.mul(x, x)?;
            project(g, y, 3)
        })),
        ("sigmoid", Box::new(|g: &mut Graph<f64>, x| {
            let y = g.sigmoid(x);
            project(g, y, 3)
        })),
        ("tanh", Box::new(|g: &mut Graph<f64>, x| {
            let y = g.tanh(x);
            project(g, y, 3)
        })),
        ("exp", Box::new(|g: &mut Graph<f64>, x| {
            let y = g.exp(x);
            project(g, y, 3)
        })),
        ("softmax", Box::new(|g: &mut Graph<f64>, x| {
            let y = g.softmax(x)?;
            project(g, y, 3)
        })),
        ("layer_norm", Box::new(|g: &mut Graph<f64>, x| {
            let y = g.layer_norm(x, None, None, 1e-5)?;
            project(g, y, 3)
        })),
        ("col_normalize", Box::new(|g: &mut Graph<f64>, x| {
            let y = g.sigmoid(x);
            let y = g.col_normalize(y, 1e-8)?;
            project(g, y, 3)
        })),
        ("standardize_tokens", Box::new(|g: &mut Graph<f64>, x| {
            let y = g.standardize_tokens(x, 1e-6)?;
            project(g, y, 3)
        })),
        ("permute", Box::new(|g: &mut Graph<f64>, x| {
            let y = g.reshape(x, &[2, 3, 2, 2])?;
            let y = g.permute_0213(y)?;
            project(g, y, 3)
        })),
        ("slice", Box::new(|g: &mut Graph<f64>, x| {
            let y = g.slice_last(x, 1, 2)?;
            project(g, y, 3)
        })),
        ("gather", Box::new(|g: &mut Graph<f64>, x| {
            let y = g.gather_rows(x, &[vec![2, 0, 2], vec![1, 1, 0]])?;
            project(g, y, 3)
        })),
        ("concat", Box::new(|g: &mut Graph<f64>, x| {
            let y = g.concat_rows(x, x)?;
            project(g, y, 3)
        })),
        ("expand", Box::new(|g: &mut Graph<f64>, x| {
            let y = g.expand(x, &[2])?;
            project(g, y, 3)
        })),
        ("mse", Box::new(move |g: &mut Graph<f64>, x| {
            let c = g.constant(o3.clone());
            g.mse(x, c)
        })),
        ("softmax_nll", Box::new(|g: &mut Graph<f64>, x| {
            let y = g.reshape(x, &[6, 4])?;
            g.softmax_nll(y, vec![Some(0), None, Some(3), Some(1), Some(2), None], 6.0)
        })),
        ("mean", Box::new(|g: &mut Graph<f64>, x| {
            let y = g.mul(x, x)?;
            Ok(g.mean_all(y))
        })),
    ];
    for (name, f) in cases {
        let err = gradient_check(|g, x| f(g, x), &x, 1e-5).unwrap();
        assert!(err < 1e-5, "{name}: {err}");
    }
}

#[test]
fn matmul_variants_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&[2, 3, 4], &mut rng);
    let b = rand_tensor(&[2, 4, 5], &mut rng);
    let bt = rand_tensor(&[2, 5, 4], &mut rng);
    let at = rand_tensor(&[2, 4, 3], &mut rng);
    let w = rand_tensor(&[4, 5], &mut rng);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let lhs = if ta { at.clone() } else { a.clone() };
        let rhs = if tb { bt.clone() } else { b.clone() };
        let err = gradient_check(
            |g, x| {
                let r = g.constant(rhs.clone());
                let y = g.bmm(x, r, ta, tb)?;
                project(g, y, 9)
            },
            &lhs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "bmm lhs ta={ta} tb={tb}: {err}");
        let err = gradient_check(
            |g, y| {
                let l = g.constant(lhs.clone());
                let out = g.bmm(l, y, ta, tb)?;
                project(g, out, 9)
            },
            &rhs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "bmm rhs ta={ta} tb={tb}: {err}");
    }
    let err = gradient_check(
        |g, x| {
            let a = g.constant(a.clone());
            let y = g.matmul(a, x)?;
            project(g, y, 4)
        },
        &w,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "shared matmul: {err}");
}

#[test]
fn conv_layers_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let conv = Conv2d::new(&mut store, "conv", 2, 3, 5, 2, &mut rng).unwrap();
    let img = rand_tensor(&[2, 6, 6, 2], &mut rng);
    let err = gradient_check(
        |g, x| {
            g.bind(&store);
            let y = conv.forward(g, x)?;
            assert_eq!(g.shape(y), &[2, 3, 3, 3]);
            project(g, y, 8)
        },
        &img,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "conv input: {err}");
    for id in store.ids() {
        let err = gradient_check_param(
            |g| {
                let x = g.constant(img.clone());
                let y = conv.forward(g, x)?;
                project(g, y, 8)
            },
            &store,
            id,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "conv {}: {err}", store.name(id));
    }
}

#[test]
fn parameterized_layers_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::<f64>::new();
    let lin = Linear::new(&mut store, "lin", 4, 4, true, &mut rng).unwrap();
    let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
    let mlp = Mlp::new(&mut store, "mlp", 4, 6, 4, &mut rng).unwrap();
    let mha = MultiHeadAttention::new(&mut store, "mha", 4, 4, 2, &mut rng).unwrap();
    // Non-trivial affine terms.
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).contains("ln.") || store.name(id).ends_with("bias") {
            let t = rand_tensor(store.get(id).shape(), &mut rng);
            *store.get_mut(id) = t;
        }
    }
    let x = rand_tensor(&[2, 3, 4], &mut rng);
    let ctx = rand_tensor(&[2, 5, 4], &mut rng);
    let mask_keep = vec![vec![true, false, true, true, true], vec![true, true, true, true, false]];
    let forward = |g: &mut Graph<f64>, x: Var| -> Result<Var, crate::Error> {
        let h = lin.forward(g, x)?;
        let h = ln.forward(g, h)?;
        let h = mlp.forward(g, h)?;
        let c = g.constant(ctx.clone());
        let m = g.constant(nn::key_mask(&mask_keep, 2, 3)?);
        let att = mha.forward(g, h, c, Some(m))?;
        project(g, att.out, 13)
    };
    let err = gradient_check(
        |g, x| {
            g.bind(&store);
            forward(g, x)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "stack wrt input: {err}");
    for id in store.ids() {
        let err = gradient_check_param(
            |g| {
                let xv = g.constant(x.clone());
                forward(g, xv)
            },
            &store,
            id,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "stack wrt {}: {err}", store.name(id));
    }
}

#[test]
fn masked_keys_get_exactly_zero_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", 4, 4, 2, &mut rng).unwrap();
    let mut g = Graph::new();
    g.bind(&store);
    let x = g.constant(rand_tensor(&[1, 3, 4], &mut rng));
    let c = g.constant(rand_tensor(&[1, 4, 4], &mut rng));
    let m = g.constant(nn::key_mask(&[vec![false, true, false, true]], 2, 3).unwrap());
    let att = mha.forward(&mut g, x, c, Some(m)).unwrap();
    for row in g.value(att.weights).data().chunks(4) {
        assert_eq!(row[0], 0.0);
        assert_eq!(row[2], 0.0);
        assert!((row[1] + row[3] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f32>::new();
        let mlp = Mlp::new(&mut store, "mlp", 8, 16, 8, &mut rng).unwrap();
        let mut g = Graph::new();
        g.bind(&store);
        let data: Vec<f32> = (0..32).map(|i| (i as f32 * 0.37).sin()).collect();
        let x = g.constant(Tensor::new(vec![4, 8], data).unwrap());
        let y = mlp.forward(&mut g, x).unwrap();
        let l = g.mean_all(y);
        let grads = g.backward(l).unwrap();
        let p = g.param(mlp.fc1.w);
        (g.value(y).clone(), grads.get(p).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        logits in proptest::collection::vec(-30.0f64..30.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let n = logits.len();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![n], logits.clone()).unwrap());
        let y = g.softmax(x).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let xs = g.constant(Tensor::new(vec![n], shifted).unwrap());
        let ys = g.softmax(xs).unwrap();
        let p = g.value(y).data();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for (a, b) in p.iter().zip(g.value(ys).data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}
