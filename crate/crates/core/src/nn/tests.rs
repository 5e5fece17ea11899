use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[test]
fn linear_identity_and_scalar() {
    let mut store = ParamStore::new();
    let lin = Linear::zeros(&mut store, "id", 3, 3);
    for i in 0..3 {
        store.get_mut(lin.w).data_mut()[i * 3 + i] = 1.0;
    }
    let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap();
    assert_eq!(lin.forward(&store, &x).unwrap(), x);

    let mut store = ParamStore::new();
    let lin = Linear::zeros(&mut store, "s", 1, 1);
    store.get_mut(lin.w).data_mut()[0] = 2.0;
    store.get_mut(lin.b).data_mut()[0] = 1.0;
    let x = Tensor::row(vec![3.0]).unwrap();
    assert_eq!(lin.forward(&store, &x).unwrap().data(), &[7.0]);
    let mut g = store.zero_grads();
    let dx = lin.backward(&store, &mut g, &x, &Tensor::row(vec![1.0]).unwrap());
    assert_eq!(dx.data(), &[2.0]);
    assert_eq!(g.get(lin.w), &[3.0]);
}

#[test]
fn linear_rejects_bad_shapes() {
    let mut store = ParamStore::new();
    let lin = Linear::zeros(&mut store, "l", 3, 2);
    assert!(matches!(
        lin.forward(&store, &Tensor::zeros(&[1, 4])),
        Err(crate::Error::ShapeMismatch { .. })
    ));
    assert!(Tensor::from_vec(&[2, 2], vec![1.0]).is_err());
    assert!(matches!(
        Tensor::row(vec![f64::NAN]),
        Err(crate::Error::NonFinite(_))
    ));
}

/// Random linear functional of a layer stack's output as a scalar loss, with
/// the input held as a parameter so its gradient is checked too.
#[test]
fn layer_stack_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let x_id = store.add("x", rand_tensor(&[3, 5], &mut rng));
    let l1 = Linear::new(&mut store, "l1", 5, 4, &mut rng);
    let ln = LayerNorm::new(&mut store, "ln", 4);
    for v in store.get_mut(ln.gamma).data_mut() {
        *v = rng.gen_range(0.5..1.5);
    }
    for v in store.get_mut(ln.beta).data_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    let l2 = Linear::new(&mut store, "l2", 4, 2, &mut rng);
    let proj = rand_tensor(&[3, 2], &mut rng);

    let f = |s: &ParamStore| {
        let x = s.get(x_id).clone();
        let h1 = l1.forward(s, &x)?;
        let a1 = gelu(&h1);
        let (n1, cache) = ln.forward(s, &a1)?;
        let y = l2.forward(s, &n1)?;
        let loss = dot(&y, &proj);
        let mut g = s.zero_grads();
        let dn1 = l2.backward(s, &mut g, &n1, &proj);
        let da1 = ln.backward(s, &mut g, &cache, &dn1);
        let dh1 = gelu_backward(&h1, &da1);
        let dx = l1.backward(s, &mut g, &x, &dh1);
        g.get_mut(x_id).copy_from_slice(dx.data());
        Ok((loss, g))
    };
    let rep = gradient_check(&mut store, f, &GradCheckOptions::default()).unwrap();
    assert!(rep.passed, "{rep:?}");
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
}

#[test]
fn linear_model_check_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "l", 4, 3, &mut rng);
    let x = rand_tensor(&[2, 4], &mut rng);
    let proj = rand_tensor(&[2, 3], &mut rng);
    let f = |s: &ParamStore| {
        let y = lin.forward(s, &x)?;
        let mut g = s.zero_grads();
        lin.backward(s, &mut g, &x, &proj);
        Ok((dot(&y, &proj), g))
    };
    let rep = gradient_check(&mut store, f, &GradCheckOptions::default()).unwrap();
    assert!(rep.max_rel_err < 1e-8, "{rep:?}");
}

#[test]
fn corrupted_backward_is_caught() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "l", 3, 2, &mut rng);
    let x = rand_tensor(&[1, 3], &mut rng);
    let proj = rand_tensor(&[1, 2], &mut rng);
    let f = |s: &ParamStore| {
        let y = lin.forward(s, &x)?;
        let mut g = s.zero_grads();
        lin.backward(s, &mut g, &x, &proj);
        g.get_mut(lin.w)[1] *= 1.01;
        Ok((dot(&y, &proj), g))
    };
    let rep = gradient_check(&mut store, f, &GradCheckOptions::default()).unwrap();
    assert!(!rep.passed);
    assert_eq!(rep.worst_param, "l.w");
}

#[test]
fn attention_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = rand_tensor(&[1, 4], &mut rng);
    let k = rand_tensor(&[1, 4], &mut rng);
    let v = rand_tensor(&[1, 4], &mut rng);
    let (out, w) = attention(&q, &k, &v).unwrap();
    assert_eq!(out.data(), v.data());
    assert_eq!(w, vec![1.0]);

    // orthogonal query, equal-norm keys: uniform weights
    let q = Tensor::row(vec![0.0, 0.0, 1.0]).unwrap();
    let k = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let v = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 3.0, 4.0, 5.0]).unwrap();
    let (out, _) = attention(&q, &k, &v).unwrap();
    for (a, b) in out.data().iter().zip([2.0, 3.0, 4.0]) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(attention(&q, &Tensor::zeros(&[2, 4]), &v).is_err());
}

#[test]
fn attention_matches_dense_oracle_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (l, d) = (5, 4);
    let mut store = ParamStore::new();
    let q_id = store.add("q", rand_tensor(&[1, d], &mut rng));
    let k_id = store.add("k", rand_tensor(&[l, d], &mut rng));
    let v_id = store.add("v", rand_tensor(&[l, d], &mut rng));
    let proj = rand_tensor(&[1, d], &mut rng);

    // direct recomputation
    let (q, k, v) = (store.get(q_id), store.get(k_id), store.get(v_id));
    let scores: Vec<f64> = (0..l)
        .map(|j| {
            (0..d)
                .map(|c| q.data()[c] * k.data()[j * d + c])
                .sum::<f64>()
                / (d as f64).sqrt()
        })
        .collect();
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    let (out, _) = attention(q, k, v).unwrap();
    for c in 0..d {
        let want: f64 = (0..l)
            .map(|j| scores[j].exp() / z * v.data()[j * d + c])
            .sum();
        assert!((out.data()[c] - want).abs() < 1e-12);
        let col: Vec<f64> = (0..l).map(|j| v.data()[j * d + c]).collect();
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(out.data()[c] >= lo - 1e-12 && out.data()[c] <= hi + 1e-12);
    }

    let f = |s: &ParamStore| {
        let (q, k, v) = (s.get(q_id), s.get(k_id), s.get(v_id));
        let (out, w) = attention(q, k, v)?;
        let (dq, dk, dv) = attention_backward(q, k, v, &w, &proj);
        let mut g = s.zero_grads();
        g.get_mut(q_id).copy_from_slice(dq.data());
        g.get_mut(k_id).copy_from_slice(dk.data());
        g.get_mut(v_id).copy_from_slice(dv.data());
        Ok((dot(&out, &proj), g))
    };
    let rep = gradient_check(&mut store, f, &GradCheckOptions::default()).unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
}

#[test]
fn embedding_lookup_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let emb = Embedding::new(&mut store, "e", 5, 3, &mut rng);
    let row = emb.forward(&store, 2).unwrap();
    assert_eq!(row.data(), &store.get(emb.table).data()[6..9]);
    assert!(emb.forward(&store, 5).is_err());
    let mut g = store.zero_grads();
    emb.backward(&mut g, 2, &Tensor::row(vec![1.0, 2.0, 3.0]).unwrap());
    assert_eq!(&g.get(emb.table)[6..9], &[1.0, 2.0, 3.0]);
    assert!(g.get(emb.table)[..6].iter().all(|v| *v == 0.0));
}

#[test]
fn sinusoid_layout() {
    let e = sinusoidal_embedding(0.0, 8);
    assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    let e = sinusoidal_embedding(3.0, 8);
    assert!((e[0] - 3f64.sin()).abs() < 1e-15);
    assert!((e[4] - 3f64.cos()).abs() < 1e-15);
}

#[test]
fn softplus_is_stable() {
    assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    assert_eq!(softplus(1000.0), 1000.0);
    assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
}

#[test]
fn adamw_zero_gradient_is_noop() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::row(vec![1.0, -2.0]).unwrap());
    let opt = AdamW {
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut st = AdamWState::new(&store);
    let g = store.zero_grads();
    opt.step(&mut store, &mut st, &g);
    assert_eq!(store.get(id).data(), &[1.0, -2.0]);
}

#[test]
fn adamw_descends_and_converges() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::row(vec![1.0]).unwrap());
    let opt = AdamW {
        lr: 0.1,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut st = AdamWState::new(&store);
    let mut g = store.zero_grads();
    g.get_mut(id)[0] = 2.0;
    opt.step(&mut store, &mut st, &g);
    assert!(store.get(id).data()[0] < 1.0);

    // f(w) = Σ a_i (w_i - c_i)², optimum 0
    let a = [1.0, 4.0, 0.5];
    let c = [0.3, -1.2, 2.0];
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::row(vec![0.0; 3]).unwrap());
    let opt = AdamW {
        lr: 0.05,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut st = AdamWState::new(&store);
    let loss = |w: &[f64]| (0..3).map(|i| a[i] * (w[i] - c[i]).powi(2)).sum::<f64>();
    for _ in 0..200 {
        let w = store.get(id).data().to_vec();
        let mut g = store.zero_grads();
        for i in 0..3 {
            g.get_mut(id)[i] = 2.0 * a[i] * (w[i] - c[i]);
        }
        let lr = 0.05 * (1.0 - st.step as f64 / 200.0);
        opt.step_with_lr(&mut store, &mut st, &g, lr);
    }
    assert!(
        loss(store.get(id).data()) < 1e-6,
        "{}",
        loss(store.get(id).data())
    );
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "l", 6, 6, &mut rng);
    let x = rand_tensor(&[4, 6], &mut rng);
    let a = lin.forward(&store, &x).unwrap();
    let b = lin.forward(&store, &x).unwrap();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}
