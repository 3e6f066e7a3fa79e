use cfm_core::forward::TaskKind;
use cfm_core::net::{
    forward, timestep_features, token_layout, Arch, NetConfig, NetInput, TokenKind, VelocityNet,
    RMS_EPS,
};
use cfm_core::rng::stream;
use cfm_tensor::gradcheck::check_gradients;
use cfm_tensor::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

fn random_input(config: &NetConfig, batch: usize, n_obs: usize, seed: u64) -> NetInput {
    let mut rng = stream(seed, &[]);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let m_t = draw(batch * config.dim_m);
    let obs = draw(batch * n_obs * config.obs_token_dim);
    let design = draw(batch * config.design_token_dim);
    let t = (0..batch).map(|k| (k as f64 + 0.5) / batch as f64).collect();
    NetInput {
        batch,
        n_obs,
        m_t,
        t,
        obs,
        design,
    }
}

fn micro(arch: Arch, n_emb: usize, n_head: usize, n_layer: usize) -> NetConfig {
    NetConfig {
        arch,
        n_emb,
        n_head,
        n_layer,
        dim_m: 3,
        obs_token_dim: 3,
        design_token_dim: 2,
        rope_base: 10_000.0,
        time_scale: 100.0,
        mlp_hidden: 8,
        mlp_layers: 2,
        mlp_n_obs: 3,
    }
}

/// Scales the default init so that attention logits are not saturated.
fn random_net(config: NetConfig, seed: u64) -> VelocityNet {
    let mut net = VelocityNet::init(config, &mut stream(seed, &[1])).unwrap();
    let mut rng = stream(seed, &[2]);
    for p in &mut net.params {
        for v in p.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    net
}

// ---- independent reference implementation (plain f64 loops) ---------------

struct Ref<'a> {
    names: &'a [String],
    params: &'a [Tensor<f32>],
}

impl Ref<'_> {
    fn get(&self, name: &str) -> (Vec<f64>, Vec<usize>) {
        let k = self.names.iter().position(|n| n == name).unwrap();
        (self.params[k].to_f64_vec(), self.params[k].shape().to_vec())
    }

    fn linear(&self, x: &[f64], w: &str, b: &str) -> Vec<f64> {
        let (w, s) = self.get(w);
        let (b, _) = self.get(b);
        (0..s[1])
            .map(|j| b[j] + (0..s[0]).map(|i| x[i] * w[i * s[1] + j]).sum::<f64>())
            .collect()
    }

    fn matvec(&self, x: &[f64], w: &str) -> Vec<f64> {
        let (w, s) = self.get(w);
        (0..s[1])
            .map(|j| (0..s[0]).map(|i| x[i] * w[i * s[1] + j]).sum::<f64>())
            .collect()
    }

    fn rms(&self, x: &[f64], g: &str) -> Vec<f64> {
        let (g, _) = self.get(g);
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        x.iter().zip(&g).map(|(v, g)| v * r * g).collect()
    }
}

fn relu2(x: Vec<f64>) -> Vec<f64> {
    x.into_iter().map(|v| v.max(0.0).powi(2)).collect()
}

fn rotate(v: &[f64], pos: usize, base: f64) -> Vec<f64> {
    let d = v.len();
    let mut out = v.to_vec();
    for i in 0..d / 2 {
        let a = pos as f64 * base.powf(-2.0 * i as f64 / d as f64);
        let (c, s) = (a.cos(), a.sin());
        out[2 * i] = v[2 * i] * c - v[2 * i + 1] * s;
        out[2 * i + 1] = v[2 * i] * s + v[2 * i + 1] * c;
    }
    out
}

fn reference_velocity(net: &VelocityNet, input: &NetInput, row: usize) -> Vec<f64> {
    let c = &net.config;
    let r = Ref {
        names: &net.names,
        params: &net.params,
    };
    let e = c.n_emb;
    let feats = timestep_features(input.t[row], e, c.time_scale).unwrap();
    let temb = r.linear(&relu2(r.linear(&feats, "time.w1", "time.b1")), "time.w2", "time.b2");
    let m_t = &input.m_t[row * c.dim_m..(row + 1) * c.dim_m];
    let od = c.obs_token_dim;
    let n = input.n_obs;
    let obs = &input.obs[row * n * od..(row + 1) * n * od];
    let design = &input.design[row * c.design_token_dim..(row + 1) * c.design_token_dim];

    if c.arch == Arch::Mlp {
        let mut h: Vec<f64> = m_t.iter().chain(&temb).chain(obs).chain(design).copied().collect();
        for l in 0..c.mlp_layers {
            h = relu2(r.linear(&h, &format!("mlp{l}.w"), &format!("mlp{l}.b")));
        }
        return r.linear(&h, "head.w", "head.b");
    }

    let mut x: Vec<Vec<f64>> = obs
        .chunks(od)
        .map(|o| r.linear(o, "embed.obs.w", "embed.obs.b"))
        .collect();
    if c.design_token_dim > 0 {
        x.push(r.linear(design, "embed.design.w", "embed.design.b"));
    }
    x.push(r.linear(m_t, "embed.state.w", "embed.state.b"));
    for tok in &mut x {
        for (v, t) in tok.iter_mut().zip(&temb) {
            *v += t;
        }
    }
    let t_len = x.len();
    let hd = c.head_dim();
    for l in 0..c.n_layer {
        let p = |s: &str| format!("block{l}.{s}");
        let h: Vec<Vec<f64>> = x.iter().map(|tok| r.rms(tok, &p("norm1"))).collect();
        let q: Vec<Vec<f64>> = h.iter().map(|v| r.matvec(v, &p("wq"))).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|v| r.matvec(v, &p("wk"))).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|v| r.matvec(v, &p("wv"))).collect();
        let mut ctx = vec![vec![0.0; e]; t_len];
        for head in 0..c.n_head {
            let sl = head * hd..(head + 1) * hd;
            let qh: Vec<Vec<f64>> = (0..t_len).map(|i| rotate(&q[i][sl.clone()], i, c.rope_base)).collect();
            let kh: Vec<Vec<f64>> = (0..t_len).map(|i| rotate(&k[i][sl.clone()], i, c.rope_base)).collect();
            for i in 0..t_len {
                let scores: Vec<f64> = (0..t_len)
                    .map(|j| {
                        qh[i].iter().zip(&kh[j]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = w.iter().sum();
                for j in 0..t_len {
                    for d in 0..hd {
                        ctx[i][head * hd + d] += w[j] / z * v[j][head * hd + d];
                    }
                }
            }
        }
        for i in 0..t_len {
            let o = r.matvec(&ctx[i], &p("wo"));
            for d in 0..e {
                x[i][d] += o[d];
            }
            let h2 = r.rms(&x[i], &p("norm2"));
            let m = r.linear(&relu2(r.linear(&h2, &p("mlp.w1"), &p("mlp.b1"))), &p("mlp.w2"), &p("mlp.b2"));
            for d in 0..e {
                x[i][d] += m[d];
            }
        }
    }
    let s = r.rms(&x[t_len - 1], "final_norm");
    r.linear(&s, "head.w", "head.b")
}

fn assert_matches_reference(net: &VelocityNet, input: &NetInput) {
    let out = net.predict(input).unwrap();
    let dm = net.config.dim_m;
    for row in 0..input.batch {
        let expect = reference_velocity(net, input, row);
        for k in 0..dm {
            let got = out[row * dm + k] as f64;
            assert!(
                (got - expect[k]).abs() < 1e-5 * expect[k].abs().max(1.0),
                "row {row} component {k}: {got} vs {}",
                expect[k]
            );
        }
    }
}

#[test]
fn micro_transformer_matches_reference() {
    let net = random_net(micro(Arch::Transformer, 2, 1, 1), 3);
    assert_matches_reference(&net, &random_input(&net.config, 3, 4, 9));
}

#[test]
fn multi_head_transformer_matches_reference() {
    let net = random_net(micro(Arch::Transformer, 8, 2, 2), 4);
    assert_matches_reference(&net, &random_input(&net.config, 2, 5, 10));
}

#[test]
fn mlp_matches_reference() {
    let net = random_net(micro(Arch::Mlp, 4, 1, 1), 5);
    assert_matches_reference(&net, &random_input(&net.config, 3, 3, 11));
}

#[test]
fn timestep_features_at_zero_and_determinism() {
    let f = timestep_features(0.0, 8, 100.0).unwrap();
    assert_eq!(f, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    assert_eq!(
        timestep_features(0.37, 32, 100.0).unwrap(),
        timestep_features(0.37, 32, 100.0).unwrap()
    );
    assert!(timestep_features(1.2, 8, 100.0).is_err());
    assert!(timestep_features(-0.1, 8, 100.0).is_err());
}

#[test]
fn timestep_embedding_is_lipschitz() {
    let config = NetConfig::transformer(TaskKind::Seir);
    let net = VelocityNet::init(config.clone(), &mut stream(1, &[])).unwrap();
    let base = random_input(&config, 1, 4, 2);
    for t in [0.0, 0.3, 0.9999] {
        let mut a = base.clone();
        a.t = vec![t];
        let mut b = base.clone();
        b.t = vec![t + 1e-9];
        let (va, vb) = (net.predict(&a).unwrap(), net.predict(&b).unwrap());
        for (x, y) in va.iter().zip(&vb) {
            assert!((x - y).abs() < 1e-6);
        }
        let (fa, fb) = (
            timestep_features(t, 32, 100.0).unwrap(),
            timestep_features(t + 1e-9, 32, 100.0).unwrap(),
        );
        for (x, y) in fa.iter().zip(&fb) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn token_counts_per_task() {
    let seir = NetConfig::transformer(TaskKind::Seir);
    let darcy = NetConfig::transformer(TaskKind::Darcy);
    let nonlinear = NetConfig::transformer(TaskKind::Nonlinear);
    assert_eq!(token_layout(&seir, 4).unwrap().len(), 5);
    assert_eq!(token_layout(&darcy, 8).unwrap().len(), 10);
    assert_eq!(token_layout(&nonlinear, 1).unwrap().len(), 2);
    let layout = token_layout(&darcy, 3).unwrap();
    assert_eq!(layout[3], TokenKind::Design);
    assert_eq!(*layout.last().unwrap(), TokenKind::State);
    assert!(token_layout(&seir, 0).is_err());
}

#[test]
fn output_shape_for_any_observation_count() {
    for task in TaskKind::ALL {
        let config = NetConfig::transformer(task);
        let net = VelocityNet::init(config.clone(), &mut stream(2, &[])).unwrap();
        for n in 1..=16 {
            let out = net.predict(&random_input(&config, 2, n, n as u64)).unwrap();
            assert_eq!(out.len(), 2 * task.dim_m());
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let config = NetConfig::transformer(TaskKind::Darcy);
    let net = VelocityNet::init(config.clone(), &mut stream(3, &[])).unwrap();
    let input = random_input(&config, 4, 7, 5);
    let a = net.predict(&input).unwrap();
    let b = net.predict(&input).unwrap();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn mlp_variant_shape_and_zero_weights() {
    let config = NetConfig::mlp(TaskKind::Seir, 4);
    let mut net = VelocityNet::init(config.clone(), &mut stream(4, &[])).unwrap();
    let input = random_input(&config, 3, 4, 6);
    assert_eq!(net.predict(&input).unwrap().len(), 18);
    assert!(net.predict(&random_input(&config, 3, 5, 6)).is_err());
    for p in &mut net.params {
        p.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    assert!(net.predict(&input).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn parameter_count_is_a_function_of_the_config() {
    let config = NetConfig::transformer(TaskKind::Darcy);
    assert_eq!(config.n_layer, 4);
    let a = VelocityNet::init(config.clone(), &mut stream(1, &[])).unwrap();
    let b = VelocityNet::init(config.clone(), &mut stream(2, &[])).unwrap();
    assert_eq!(a.parameter_count(), b.parameter_count());
    assert_eq!(a.parameter_count(), config.parameter_count());
    // 4 blocks of 12·32² + 6·32 (+4·32 bias), embeddings, time MLP, head
    let e = 32;
    let block = 4 * e * e + 2 * e + 2 * 4 * e * e + 4 * e + e;
    let expected = 2 * (e * e + e) + (3 * e + e) + (2 * e + e) + (16 * e + e) + 4 * block + e + (e * 16 + 16);
    assert_eq!(config.parameter_count(), expected);
}

#[test]
fn config_validation() {
    let mut c = NetConfig::transformer(TaskKind::Seir);
    c.n_head = 3;
    assert!(c.validate().is_err());
    c.n_head = 16; // head dim 2
    assert!(c.validate().is_ok());
    c.n_emb = 48; // head dim 3
    assert!(c.validate().is_err());
}

fn gradient_check(config: NetConfig, n_obs: usize) -> f64 {
    let net = random_net(config.clone(), 7);
    let input = random_input(&config, 2, n_obs, 8);
    let target: Vec<f64> = (0..2 * config.dim_m).map(|k| (k as f64 * 0.37).sin()).collect();
    let inputs: Vec<Tensor<f64>> = net.params.iter().map(|p| p.cast()).collect();
    let report = check_gradients(&inputs, 1e-4, |tape: &mut Tape<f64>, vars: &[Var]| {
        let out = forward(&config, tape, vars, &input).map_err(|e| match e {
            cfm_core::Error::Tensor(t) => t,
            other => panic!("{other}"),
        })?;
        let tgt = tape.constant(Tensor::new(&[2, config.dim_m], target.clone())?);
        tape.mse(out, tgt)
    })
    .unwrap();
    report.max_error()
}

#[test]
fn transformer_gradients_match_finite_differences() {
    let err = gradient_check(micro(Arch::Transformer, 8, 2, 2), 3);
    assert!(err < 1e-4, "max relative error {err:e}");
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let err = gradient_check(micro(Arch::Mlp, 4, 1, 1), 3);
    assert!(err < 1e-4, "max relative error {err:e}");
}

fn attention_weights(q: &Tensor<f64>, k: &Tensor<f64>, positions: &[usize]) -> Vec<f64> {
    let mut tape = Tape::<f64>::new();
    let (q, k) = (tape.constant(q.clone()), tape.constant(k.clone()));
    let q = tape.rope(q, positions, 10_000.0).unwrap();
    let k = tape.rope(k, positions, 10_000.0).unwrap();
    let s = tape.batch_matmul(q, k, true).unwrap();
    let w = tape.softmax(s);
    tape.value(w).data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rope_preserves_norm_and_is_identity_at_zero(
        data in prop::collection::vec(-2.0..2.0f64, 8),
        pos in 0usize..500,
    ) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[1, 8], data.clone()).unwrap());
        let r0 = tape.rope(x, &[0], 10_000.0).unwrap();
        prop_assert_eq!(tape.value(r0).data(), &data[..]);
        let rp = tape.rope(x, &[pos], 10_000.0).unwrap();
        let n0: f64 = data.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n1: f64 = tape.value(rp).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((n0 - n1).abs() < 1e-5);
        // pairwise norms are preserved individually
        for i in 0..4 {
            let a = data[2 * i].hypot(data[2 * i + 1]);
            let b = tape.value(rp).data()[2 * i].hypot(tape.value(rp).data()[2 * i + 1]);
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rope_scores_depend_on_relative_position(
        q in prop::collection::vec(-1.0..1.0f64, 4),
        k in prop::collection::vec(-1.0..1.0f64, 4),
        p1 in 0usize..50,
        p2 in 0usize..50,
        shift in 0usize..200,
    ) {
        let dot_at = |a: usize, b: usize| {
            let mut tape = Tape::<f64>::new();
            let qv = tape.constant(Tensor::new(&[1, 4], q.clone()).unwrap());
            let kv = tape.constant(Tensor::new(&[1, 4], k.clone()).unwrap());
            let qr = tape.rope(qv, &[a], 10_000.0).unwrap();
            let kr = tape.rope(kv, &[b], 10_000.0).unwrap();
            tape.value(qr).data().iter().zip(tape.value(kr).data()).map(|(x, y)| x * y).sum::<f64>()
        };
        prop_assert!((dot_at(p1, p2) - dot_at(p1 + shift, p2 + shift)).abs() < 1e-4);
    }

    #[test]
    fn attention_weights_are_shift_invariant(
        q in prop::collection::vec(-1.0..1.0f64, 2 * 5 * 4),
        k in prop::collection::vec(-1.0..1.0f64, 2 * 5 * 4),
        shift in 1usize..100,
    ) {
        let q = Tensor::new(&[2, 5, 4], q).unwrap();
        let k = Tensor::new(&[2, 5, 4], k).unwrap();
        let base: Vec<usize> = (0..5).collect();
        let shifted: Vec<usize> = base.iter().map(|p| p + shift).collect();
        let a = attention_weights(&q, &k, &base);
        let b = attention_weights(&q, &k, &shifted);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-4);
        }
    }
}
