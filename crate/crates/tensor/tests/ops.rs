use cfm_tensor::gradcheck::check_gradients;
use cfm_tensor::{Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-4;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Weighted sum with fixed pseudo-random weights so that every output
/// element contributes a distinct amount to the scalar.
fn weighted_sum(tape: &mut Tape<f64>, x: Var) -> cfm_tensor::Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919) % 17) as f64 / 17.0 - 0.4).collect();
    let w = tape.constant(Tensor::new(&shape, w)?);
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod))
}

// ---- matmul -------------------------------------------------------------

#[test]
fn matmul_hand_example() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t64(&[2, 1], &[1.0, 1.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(c), &[2, 1]);
    assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 4]);
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 4 + i] = 1.0;
    }
    let mut tape = Tape::<f64>::new();
    let av = tape.constant(a.clone());
    let iv = tape.constant(t64(&[4, 4], &eye));
    let c = tape.matmul(av, iv).unwrap();
    assert_eq!(tape.value(c), &a);
}

#[test]
fn matmul_zero_input_zero_output_and_grads() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(Tensor::zeros(&[2, 3]));
    let b = tape.param(Tensor::zeros(&[3, 2]));
    let c = tape.matmul(a, b).unwrap();
    assert!(tape.value(c).data().iter().all(|&x| x == 0.0));
    let loss = tape.sum(c);
    tape.backward(loss).unwrap();
    assert!(tape.grad(a).unwrap().iter().all(|&x| x == 0.0));
    assert!(tape.grad(b).unwrap().iter().all(|&x| x == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

// ---- relu² ---------------------------------------------------------------

#[test]
fn relu_squared_values_and_gradients() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t64(&[3], &[-2.0, 3.0, 0.0]));
    let y = tape.relu_squared(x);
    assert_eq!(tape.value(y).data(), &[0.0, 9.0, 0.0]);
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 6.0, 0.0]);
}

// ---- rms norm -----------------------------------------------------------

#[test]
fn rms_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let ones = tape.constant(t64(&[4], &[1.0; 4]));
    let gain = tape.constant(t64(&[4], &[1.0; 4]));
    let y = tape.rms_norm(ones, gain, 1e-12).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0).abs() < 1e-9);
    }

    let x = tape.constant(t64(&[2], &[3.0, -3.0]));
    let g2 = tape.constant(t64(&[2], &[1.0, 1.0]));
    let y = tape.rms_norm(x, g2, 0.0).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, -1.0]);

    let zero_gain = tape.constant(t64(&[2], &[0.0, 0.0]));
    let y = tape.rms_norm(x, zero_gain, 1e-6).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
}

// ---- softmax --------------------------------------------------------------

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let u = tape.constant(t64(&[4], &[0.7; 4]));
    let y = tape.softmax(u);
    for &v in tape.value(y).data() {
        assert!((v - 0.25).abs() < 1e-12);
    }

    let x = tape.constant(t64(&[2], &[0.0, 3f64.ln()]));
    let y = tape.softmax(x);
    let d = tape.value(y).data();
    assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);

    let raw = [0.3, -1.2, 2.5];
    let a = tape.constant(t64(&[3], &raw));
    let shifted: Vec<f64> = raw.iter().map(|v| v + 11.0).collect();
    let b = tape.constant(t64(&[3], &shifted));
    let ya = tape.softmax(a);
    let yb = tape.softmax(b);
    for (p, q) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
        assert!((p - q).abs() < 1e-12);
    }
}

// ---- backward -------------------------------------------------------------

#[test]
fn backward_polynomial_and_constant() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(3.0));
    let c = tape.constant(Tensor::scalar(5.0));
    let zero = tape.scale(x, 0.0);
    let y = tape.add(c, zero).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0]);
}

#[test]
fn backward_rejects_non_scalar_and_double_call() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::zeros(&[2]));
    let y = tape.relu_squared(x);
    assert!(matches!(tape.backward(y), Err(TensorError::NonScalarLoss(_))));

    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert_eq!(tape.backward(loss), Err(TensorError::GradientsNotZeroed));
    tape.zero_grad();
    tape.backward(loss).unwrap();
}

// ---- finite-difference oracle per primitive -------------------------------

fn assert_fd<B>(inputs: &[Tensor<f64>], build: B)
where
    B: Fn(&mut Tape<f64>, &[Var]) -> cfm_tensor::Result<Var>,
{
    let report = check_gradients(inputs, FD_STEP, build).unwrap();
    assert!(
        report.max_error() < FD_TOL,
        "relative errors {:?}",
        report.relative_errors
    );
}

#[test]
fn fd_elementwise_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[3, 4]);
    assert_fd(&[a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(s, v[1])?;
        let d = t.sub(d, v[1])?;
        let p = t.mul(d, v[0])?;
        let p = t.scale(p, 0.7);
        weighted_sum(t, p)
    });
    assert_fd(&[a], |t, v| {
        let sq = t.mul(v[0], v[0])?;
        Ok(t.mean(sq))
    });
}

#[test]
fn fd_matmul_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&mut rng, &[2, 3, 5]);
    let w = random(&mut rng, &[5, 4]);
    let b = random(&mut rng, &[4]);
    assert_fd(&[x, w, b], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        let y = t.add_bias(y, v[2])?;
        weighted_sum(t, y)
    });
}

#[test]
fn fd_batch_matmul_both_layouts() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = random(&mut rng, &[3, 4, 2]);
    let b = random(&mut rng, &[3, 2, 5]);
    let bt = random(&mut rng, &[3, 5, 2]);
    assert_fd(&[a.clone(), b], |t, v| {
        let y = t.batch_matmul(v[0], v[1], false)?;
        weighted_sum(t, y)
    });
    assert_fd(&[a, bt], |t, v| {
        let y = t.batch_matmul(v[0], v[1], true)?;
        weighted_sum(t, y)
    });
}

#[test]
fn fd_relu_squared() {
    // keep values away from the kink so central differences stay accurate
    let data: Vec<f64> = (0..12).map(|i| (i as f64 - 5.5) * 0.37).collect();
    assert_fd(&[t64(&[3, 4], &data)], |t, v| {
        let y = t.relu_squared(v[0]);
        weighted_sum(t, y)
    });
}

#[test]
fn fd_rms_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random(&mut rng, &[4, 6]);
    let g = random(&mut rng, &[6]);
    assert_fd(&[x, g], |t, v| {
        let y = t.rms_norm(v[0], v[1], 1e-5)?;
        weighted_sum(t, y)
    });
}

#[test]
fn fd_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random(&mut rng, &[2, 3, 5]);
    assert_fd(&[x], |t, v| {
        let y = t.softmax(v[0]);
        weighted_sum(t, y)
    });
}

#[test]
fn fd_rope_heads_and_token_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random(&mut rng, &[2, 3, 8]);
    let y = random(&mut rng, &[2, 8]);
    let extra = random(&mut rng, &[2, 1, 8]);
    assert_fd(&[x, y, extra], |t, v| {
        let z = t.add_token_broadcast(v[0], v[1])?;
        let z = t.concat_tokens(&[z, v[2]])?;
        let h = t.split_heads(z, 2)?;
        let r = t.rope(h, &[0, 1, 2, 3], 10_000.0)?;
        let m = t.merge_heads(r, 2)?;
        let s = t.select_token(m, 1)?;
        let c = t.concat_last(&[s, v[1]])?;
        weighted_sum(t, c)
    });
}

#[test]
fn split_then_merge_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random(&mut rng, &[2, 3, 8]);
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(x.clone());
    let h = tape.split_heads(v, 4).unwrap();
    assert_eq!(tape.shape(h), &[8, 3, 2]);
    let m = tape.merge_heads(h, 4).unwrap();
    assert_eq!(tape.value(m), &x);
}

#[test]
fn rope_rejects_odd_dimension() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(tape.rope(x, &[0, 1], 10_000.0).is_err());
}

// ---- properties -----------------------------------------------------------

fn shape_strategy() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=8, 1usize..=8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions((rows, cols) in shape_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let mut tape = Tape::<f32>::new();
        let v = tape.constant(Tensor::new(&[rows, cols], x).unwrap());
        let y = tape.softmax(v);
        for row in tape.value(y).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn rms_norm_output_has_unit_rms((rows, cols) in shape_strategy(), seed in any::<u64>(), scale in 1e-2f64..1e2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f32> = (0..rows * cols)
            .map(|_| (rng.gen_range(-1.0..1.0) * scale) as f32)
            .collect();
        let mut tape = Tape::<f32>::new();
        let v = tape.constant(Tensor::new(&[rows, cols], x.clone()).unwrap());
        let g = tape.constant(Tensor::full(&[cols], 1.0));
        let y = tape.rms_norm(v, g, 1e-8).unwrap();
        for (xin, row) in x.chunks(cols).zip(tape.value(y).data().chunks(cols)) {
            let rms_in = (xin.iter().map(|&a| (a as f64).powi(2)).sum::<f64>() / cols as f64).sqrt();
            prop_assume!(rms_in >= 1e-2);
            let rms = (row.iter().map(|&a| (a as f64).powi(2)).sum::<f64>() / cols as f64).sqrt();
            prop_assert!((rms - 1.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn backward_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[3, 4]);
        let w = random(&mut rng, &[4, 2]);
        let f = |t: &mut Tape<f64>, x: Var, w: Var| -> cfm_tensor::Result<Var> {
            let y = t.matmul(x, w)?;
            let y = t.relu_squared(y);
            Ok(t.sum(y))
        };
        let g = |t: &mut Tape<f64>, x: Var| -> cfm_tensor::Result<Var> {
            let s = t.softmax(x);
            let s = t.mul(s, x)?;
            Ok(t.mean(s))
        };
        let grad_of = |combo: &dyn Fn(&mut Tape<f64>, Var, Var) -> cfm_tensor::Result<Var>| {
            let mut t = Tape::new();
            let xv = t.param(x.clone());
            let wv = t.constant(w.clone());
            let out = combo(&mut t, xv, wv).unwrap();
            t.backward(out).unwrap();
            t.grad(xv).unwrap().to_vec()
        };
        let gf = grad_of(&|t, x, w| f(t, x, w));
        let gg = grad_of(&|t, x, _| g(t, x));
        let gc = grad_of(&|t, x, w| {
            let fa = f(t, x, w)?;
            let fa = t.scale(fa, a);
            let gb = g(t, x)?;
            let gb = t.scale(gb, b);
            t.add(fa, gb)
        });
        for ((c, f1), g1) in gc.iter().zip(&gf).zip(&gg) {
            prop_assert!((c - (a * f1 + b * g1)).abs() <= 1e-5 * (1.0 + c.abs()));
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[2, 4, 6]).cast::<f32>();
        let w = random(&mut rng, &[6, 6]).cast::<f32>();
        let run = || {
            let mut t = Tape::<f32>::new();
            let xv = t.param(x.clone());
            let wv = t.param(w.clone());
            let y = t.matmul(xv, wv).unwrap();
            let h = t.split_heads(y, 3).unwrap();
            let s = t.batch_matmul(h, h, true).unwrap();
            let p = t.softmax(s);
            let loss = t.mean(p);
            t.backward(loss).unwrap();
            (t.value(y).clone(), t.grad(wv).unwrap().to_vec())
        };
        let (a1, g1) = run();
        let (a2, g2) = run();
        prop_assert_eq!(a1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        a2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn random_small_shapes_pass_fd((m, k) in shape_strategy(), n in 1usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[m, k]);
        let w = random(&mut rng, &[k, n]);
        let g = random(&mut rng, &[n]);
        let report = check_gradients(&[x, w, g], FD_STEP, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.rms_norm(y, v[2], 1e-3)?;
            let y = t.softmax(y);
            weighted_sum(t, y)
        }).unwrap();
        prop_assert!(report.max_error() < FD_TOL, "{:?}", report.relative_errors);
    }
}
