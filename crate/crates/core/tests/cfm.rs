use cfm_core::cfm::{
    integrate, integrate_path, interpolate, loss_and_grads, path_straightness, sample_posterior,
    training_batch, LrSchedule, OdeMethod, SamplerConfig, TrainConfig, Trainer, VelocityField,
};
use cfm_core::data::{epoch_batches, generate_dataset, Batch, DataGenConfig};
use cfm_core::forward::TaskKind;
use cfm_core::net::{NetConfig, NetInput, VelocityNet};
use cfm_core::rng::stream;
use cfm_core::{Error, TaskSpec};
use proptest::prelude::*;

const METHODS: [OdeMethod; 3] = [OdeMethod::Euler, OdeMethod::Midpoint, OdeMethod::Rk4];

fn small_transformer(kind: TaskKind) -> NetConfig {
    NetConfig {
        n_emb: 16,
        n_head: 2,
        n_layer: 1,
        ..NetConfig::transformer(kind)
    }
}

fn net(config: NetConfig, seed: u64) -> VelocityNet {
    VelocityNet::init(config, &mut stream(seed, &[])).unwrap()
}

#[test]
fn interpolation_hits_both_endpoints() {
    let (a, b) = ([1.0, -2.0], [3.0, 5.0]);
    assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
    assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
    assert_eq!(interpolate(&a, &b, 0.25).unwrap(), vec![1.5, -0.25]);
    assert!(interpolate(&a, &b, 1.5).is_err());
    assert!(interpolate(&a, &[1.0], 0.5).is_err());
}

#[test]
fn cosine_schedule_decays_to_zero() {
    let s = LrSchedule::Cosine;
    assert_eq!(s.rate(1e-3, 0, 100), 1e-3);
    assert!((s.rate(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
    assert!(s.rate(1e-3, 100, 100).abs() < 1e-18);
    assert_eq!(LrSchedule::Constant.rate(1e-3, 70, 100), 1e-3);
}

#[test]
fn constant_fields_are_integrated_exactly() {
    let c = [0.5, -1.25];
    let field = (2, move |x: &[f64], _t: f64| -> Vec<f64> { x.iter().enumerate().map(|(i, _)| c[i % 2]).collect() });
    for method in METHODS {
        let x = integrate(&field, &[1.0, 2.0], 7, method).unwrap();
        assert!((x[0] - 1.5).abs() < 1e-14 && (x[1] - 0.75).abs() < 1e-14, "{method:?}");
        let s = path_straightness(&field, &[1.0, 2.0], 7, method).unwrap();
        assert!(s.mean_deviation < 1e-14);
        assert_eq!(s.paths[0].len(), 8);
    }
}

#[test]
fn methods_converge_at_their_orders_on_linear_growth() {
    // x' = x from x(0) = 1 has x(1) = e
    let field = (1, |x: &[f64], _t: f64| x.to_vec());
    let err = |method, steps| (integrate(&field, &[1.0], steps, method).unwrap()[0] - 1f64.exp()).abs();
    for (method, order) in [(OdeMethod::Euler, 1.0), (OdeMethod::Midpoint, 2.0), (OdeMethod::Rk4, 4.0)] {
        let ratio = err(method, 40) / err(method, 80);
        assert!((ratio.log2() - order).abs() < 0.1, "{method:?} ratio {ratio}");
    }
    assert!(err(OdeMethod::Rk4, 50) < 1e-8);
}

#[test]
fn time_dependent_field_sees_stage_times() {
    // x' = 3t² has x(1) − x(0) = 1, which rk4 integrates exactly
    let field = (1, |_x: &[f64], t: f64| vec![3.0 * t * t]);
    let x = integrate(&field, &[0.0], 5, OdeMethod::Rk4).unwrap();
    assert!((x[0] - 1.0).abs() < 1e-14);
}

#[test]
fn rotation_paths_are_curved() {
    let field = (2, |x: &[f64], _t: f64| -> Vec<f64> {
        x.chunks(2).flat_map(|p| [-p[1], p[0]]).collect()
    });
    let s = path_straightness(&field, &[1.0, 0.0, 0.0, 0.0], 200, OdeMethod::Rk4).unwrap();
    // a unit arc of angle 1: sagitta over chord is (1 − cos ½) / (2 sin ½)
    let expect = (1.0 - 0.5f64.cos()) / (2.0 * 0.5f64.sin());
    assert!((s.mean_deviation - expect).abs() < 1e-6, "{}", s.mean_deviation);
    assert_eq!(s.skipped, 1);
}

#[test]
fn integration_reports_non_finite_states() {
    let field = (1, |x: &[f64], _t: f64| vec![f64::MAX; x.len()]);
    assert!(matches!(
        integrate(&field, &[f64::MAX], 2, OdeMethod::Euler),
        Err(Error::NonFinite { .. })
    ));
    assert!(integrate_path(&field, &[0.0], 0, OdeMethod::Euler).is_err());
}

fn nonlinear_input(batch: usize, seed: u64) -> (NetInput, Vec<f64>) {
    let task = TaskSpec::nonlinear();
    let data = generate_dataset(
        &task,
        &DataGenConfig {
            tuples_per_n: batch,
            n_obs: vec![1],
            seed,
        },
    )
    .unwrap();
    let all = Batch {
        shard: 0,
        indices: (0..batch).collect(),
    };
    training_batch(&task, &data, &all, seed, 0).unwrap()
}

fn split(input: &NetInput, target: &[f64], at: usize) -> [(NetInput, Vec<f64>); 2] {
    let part = |lo: usize, hi: usize| {
        let obs_w = input.obs.len() / input.batch;
        (
            NetInput {
                batch: hi - lo,
                n_obs: input.n_obs,
                m_t: input.m_t[lo..hi].to_vec(),
                t: input.t[lo..hi].to_vec(),
                obs: input.obs[lo * obs_w..hi * obs_w].to_vec(),
                design: vec![],
            },
            target[lo..hi].to_vec(),
        )
    };
    [part(0, at), part(at, input.batch)]
}

#[test]
fn gradient_of_a_batch_is_the_mean_of_equal_halves() {
    let net = net(NetConfig::mlp(TaskKind::Nonlinear, 1), 3);
    let (input, target) = nonlinear_input(16, 1);
    let (loss, full) = loss_and_grads(&net, &input, &target).unwrap();
    let [(a, ta), (b, tb)] = split(&input, &target, 8);
    let (la, ga) = loss_and_grads(&net, &a, &ta).unwrap();
    let (lb, gb) = loss_and_grads(&net, &b, &tb).unwrap();
    assert!((loss - 0.5 * (la + lb)).abs() < 1e-5 * loss.max(1.0));
    for ((f, x), y) in full.iter().zip(&ga).zip(&gb) {
        for ((f, x), y) in f.iter().zip(x).zip(y) {
            assert!((f - 0.5 * (x + y)).abs() <= 1e-4 * (1.0 + f.abs()), "{f} vs {x}, {y}");
        }
    }
}

#[test]
fn predicted_velocity_as_target_gives_zero_loss() {
    let net = net(small_transformer(TaskKind::Nonlinear), 5);
    let (input, _) = nonlinear_input(8, 2);
    let target: Vec<f64> = net.predict(&input).unwrap().into_iter().map(f64::from).collect();
    let (loss, grads) = loss_and_grads(&net, &input, &target).unwrap();
    assert!(loss < 1e-12);
    assert!(grads.iter().flatten().all(|g| g.abs() < 1e-5));
}

fn tiny_run(lr: f64, seed: u64) -> Trainer {
    let task = TaskSpec::seir();
    let data = generate_dataset(
        &task,
        &DataGenConfig {
            tuples_per_n: 24,
            n_obs: vec![2, 3],
            seed: 4,
        },
    )
    .unwrap();
    let config = TrainConfig {
        lr,
        epochs: 2,
        batch_size: 8,
        accumulate: 2,
        seed,
        ..Default::default()
    };
    let mut trainer = Trainer::new(net(small_transformer(TaskKind::Seir), 11), &config);
    let mut seen = 0;
    trainer
        .run(&task, &data, &config, |_| {
            seen += 1;
            Ok(())
        })
        .unwrap();
    // 6 batches per epoch in groups of 2
    assert_eq!(seen, 6);
    assert_eq!(Trainer::total_steps(&data, &config), 6);
    trainer
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let before = net(small_transformer(TaskKind::Seir), 11);
    let trainer = tiny_run(0.0, 1);
    assert_eq!(trainer.net.params, before.params);
    assert_eq!(trainer.losses.len(), 6);
}

#[test]
fn training_is_deterministic_per_seed() {
    let a = tiny_run(1e-3, 1);
    let b = tiny_run(1e-3, 1);
    let c = tiny_run(1e-3, 2);
    assert_eq!(a.net.params, b.net.params);
    assert_eq!(a.losses, b.losses);
    assert_ne!(a.net.params, c.net.params);
    assert_eq!(a.cursor.epoch, 2);
}

#[test]
fn accumulated_step_matches_the_mean_gradient() {
    let task = TaskSpec::seir();
    let data = generate_dataset(
        &task,
        &DataGenConfig {
            tuples_per_n: 8,
            n_obs: vec![3, 5],
            seed: 2,
        },
    )
    .unwrap();
    let config = TrainConfig {
        lr: 1e-2,
        lr_schedule: LrSchedule::Constant,
        epochs: 1,
        batch_size: 8,
        accumulate: 2,
        seed: 6,
    };
    let start = net(small_transformer(TaskKind::Seir), 1);
    let mut trainer = Trainer::new(start.clone(), &config);
    trainer.run(&task, &data, &config, |_| Ok(())).unwrap();

    // one Adam step from zero moments moves each weight by lr·g/(|g| + ε)
    // after bias correction, so the update's sign pattern is that of the
    // mean gradient
    let batches = epoch_batches(&data, 8, 6, 0).unwrap();
    assert_eq!(batches.len(), 2);
    let mut mean = vec![];
    for b in &batches {
        let (input, target) = training_batch(&task, &data, b, 6, 0).unwrap();
        let (_, g) = loss_and_grads(&start, &input, &target).unwrap();
        if mean.is_empty() {
            mean = g;
        } else {
            for (m, g) in mean.iter_mut().zip(g) {
                for (a, b) in m.iter_mut().zip(g) {
                    *a = 0.5 * (*a + b);
                }
            }
        }
    }
    for ((p0, p1), g) in start.params.iter().zip(&trainer.net.params).zip(&mean) {
        for ((a, b), g) in p0.data().iter().zip(p1.data()).zip(g) {
            if g.abs() > 1e-4 {
                assert_eq!((b - a).signum(), -g.signum());
                assert!(((b - a).abs() - 1e-2).abs() < 1e-3);
            }
        }
    }
}

#[test]
fn non_finite_loss_stops_before_the_update() {
    let task = TaskSpec::nonlinear();
    let data = generate_dataset(
        &task,
        &DataGenConfig {
            tuples_per_n: 16,
            n_obs: vec![1],
            seed: 1,
        },
    )
    .unwrap();
    let mut broken = net(NetConfig::mlp(TaskKind::Nonlinear, 1), 1);
    broken.params[0].data_mut()[0] = f32::NAN;
    let config = TrainConfig::default();
    let mut trainer = Trainer::new(broken.clone(), &config);
    let err = trainer.run(&task, &data, &config, |_| Ok(())).unwrap_err();
    assert!(matches!(err, Error::NonFinite { step: 0, .. }));
    assert_eq!(trainer.cursor.step, 0);
}

#[test]
fn posterior_ensembles_are_reproducible() {
    let task = TaskSpec::seir();
    let net = net(small_transformer(TaskKind::Seir), 9);
    let sampler = SamplerConfig {
        steps: 10,
        ensemble: 4,
        seed: 3,
        ..Default::default()
    };
    let d = [1.0, 2.0, 3.0, 4.0];
    let e = [1.5, 3.0];
    let a = sample_posterior(&net, &task, &d, &e, &sampler).unwrap();
    let b = sample_posterior(&net, &task, &d, &e, &sampler).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.samples.len(), 4);
    assert_eq!(a.mean().len(), 6);
    let c = sample_posterior(&net, &task, &d, &e, &SamplerConfig { seed: 4, ..sampler }).unwrap();
    assert_ne!(a.samples, c.samples);
}

#[test]
fn ensemble_rows_do_not_interact() {
    let task = TaskSpec::nonlinear();
    let net = net(small_transformer(TaskKind::Nonlinear), 2);
    let sampler = SamplerConfig {
        steps: 5,
        ensemble: 6,
        ..Default::default()
    };
    let many = sample_posterior(&net, &task, &[0.3], &[0.7], &sampler).unwrap();
    let few = sample_posterior(&net, &task, &[0.3], &[0.7], &SamplerConfig { ensemble: 2, ..sampler }).unwrap();
    for (a, b) in few.samples.iter().zip(&many.samples) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

struct Shift(f64);

impl VelocityField for Shift {
    fn dim(&self) -> usize {
        1
    }
    fn velocity(&self, x: &[f64], _t: f64) -> cfm_core::Result<Vec<f64>> {
        Ok(vec![self.0; x.len()])
    }
}

proptest! {
    #[test]
    fn constant_shift_is_exact_for_any_step_count(c in -5.0..5.0f64, x0 in -5.0..5.0f64, steps in 1usize..40) {
        for method in METHODS {
            let x = integrate(&Shift(c), &[x0], steps, method).unwrap();
            prop_assert!((x[0] - (x0 + c)).abs() < 1e-12);
        }
    }
}
