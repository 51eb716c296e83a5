use collage_core::nets::*;
use collage_core::optim::OptimizerKind;
use collage_core::projection::*;
use collage_core::CollageError;
use collage_tensor::{GradCheck, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

struct Models {
    g: Generator,
    d: Discriminator,
    e: Encoder,
    aux: AuxNets,
}

fn models() -> Models {
    let mut r = rng(100);
    let g = Generator::new(GeneratorConfig::desk(), &mut r).unwrap();
    let d = Discriminator::new(DiscriminatorConfig::desk(), &mut r).unwrap();
    let e = Encoder::new(EncoderConfig { tower: DiscriminatorConfig::desk(), latent_dim: 32 }, &mut r).unwrap();
    let aux = AuxNets::new(AuxConfig::new(32), &mut r).unwrap();
    Models { g, d, e, aux }
}

fn target(m: &Models, seed: u64, class: usize) -> (Vec<f64>, Tensor) {
    let z = Tensor::randn(vec![32], 1.0, &mut rng(seed)).into_data();
    let x = m.g.generate(&z, class, &NoHooks).unwrap();
    (z, x)
}

#[test]
fn cosine_loss_is_a_symmetric_distance() {
    let m = models();
    let mut r = rng(1);
    for _ in 0..10 {
        let a = Tensor::uniform(vec![3, 32, 32], 0.0, 1.0, &mut r);
        let b = Tensor::uniform(vec![3, 32, 32], 0.0, 1.0, &mut r);
        let ab = loss_cosine(&m.d, &a, &b).unwrap();
        assert_eq!(ab, loss_cosine(&m.d, &b, &a).unwrap());
        assert_eq!(loss_cosine(&m.d, &a, &a).unwrap(), 0.0);
        assert!((0.0..=2.0).contains(&ab));
        let psi = m.d.psi(&Tensor::new(vec![2, 3, 32, 32], [a.data(), b.data()].concat()).unwrap()).unwrap();
        let f = psi.shape()[1];
        let dot: f64 = psi.data()[..f].iter().zip(&psi.data()[f..]).map(|(p, q)| p * q).sum();
        assert!((ab - (1.0 - dot)).abs() < 1e-12, "{ab} vs {}", 1.0 - dot);
    }
    assert!(loss_cosine(&m.d, &Tensor::zeros(vec![3, 32, 32]), &Tensor::zeros(vec![3, 16, 16])).is_err());
}

#[test]
fn cosine_rows_reach_both_bounds() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 0.0, 0.6, 0.8]).unwrap()).unwrap();
    let b = tape.constant(Tensor::new(vec![3, 2], vec![0.0, 1.0, -1.0, 0.0, 0.6, 0.8]).unwrap()).unwrap();
    let d = cosine_rows(&mut tape, a, b).unwrap();
    assert_eq!(tape.value(d).data(), [1.0, 2.0, 0.0]);
}

#[test]
fn composed_loss_gradients_match_finite_differences() {
    let m = models();
    let (_, x) = target(&m, 2, 3);
    let psi = m.d.psi(&x.clone().reshape(vec![1, 3, 32, 32]).unwrap()).unwrap();
    let mut r = rng(3);
    // Generator and critic are piecewise linear; a short step keeps both
    // evaluations on the same side of every ReLU kink.
    let gc = GradCheck { step: 1e-7, ..GradCheck::default() };
    for probe in 0..20 {
        let z = Tensor::randn(vec![1, 32], 1.0, &mut r);
        let report = gc
            .run(&[z], &mut r, |tape, v| {
                let gp = m.g.bind(tape, false).map_err(to_tensor)?;
                let dp = m.d.bind(tape, false).map_err(to_tensor)?;
                let out = m.g.forward(tape, &gp, v[0], &[3], NormMode::Edit, &NoHooks).map_err(to_tensor)?;
                let feat = m.d.forward(tape, &dp, out.image, None).map_err(to_tensor)?.psi;
                let t = tape.constant(psi.clone())?;
                cosine_rows(tape, feat, t).map_err(to_tensor)
            })
            .unwrap();
        assert!(report.max_rel_err < 1e-4, "probe {probe}: {:e}", report.max_rel_err);
    }
}

fn to_tensor(e: CollageError) -> collage_tensor::TensorError {
    match e {
        CollageError::Tensor(t) => t,
        other => collage_tensor::TensorError::Usage(other.to_string()),
    }
}

#[test]
fn zero_steps_returns_the_starting_point() {
    let m = models();
    let (_, x) = target(&m, 4, 1);
    let cfg = ProjectionConfig { steps: 0, ..Default::default() };
    let p = project_z(&x, 1, &m.g, &m.d, Some(&m.e), &cfg).unwrap();
    assert_eq!(p.z, m.e.encode(&x).unwrap());
    assert_eq!(p.losses.len(), 1);
    assert_eq!(p.best_loss, p.initial_loss());
    assert_eq!(p.best_loss, loss_cosine(&m.d, &m.g.generate(&p.z, 1, &NoHooks).unwrap(), &x).unwrap());

    let q = project_zeta(&x, 1, &m.g, &m.d, Some(&m.e), &m.aux, &cfg).unwrap();
    let z0 = Tensor::new(vec![1, 32], m.e.encode(&x).unwrap()).unwrap();
    assert_eq!(q.z, m.aux.decode_rows(&m.aux.embed_rows(&z0).unwrap()).unwrap().into_data());
}

#[test]
fn best_so_far_is_monotone_and_tracks_the_best_iterate() {
    let m = models();
    let (_, x) = target(&m, 5, 6);
    let cfg = ProjectionConfig { steps: 30, init: Init::Random { seed: 9 }, ..Default::default() };
    let p = project_z(&x, 6, &m.g, &m.d, None, &cfg).unwrap();
    assert_eq!(p.losses.len(), 31);
    let best = p.best_so_far();
    assert!(best.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(*best.last().unwrap(), p.best_loss);
    assert_eq!(p.losses[p.best_iteration], p.best_loss);
    assert!(p.best_loss < p.initial_loss());
    let rendered = loss_cosine(&m.d, &m.g.generate(&p.z, 6, &NoHooks).unwrap(), &x).unwrap();
    assert!((rendered - p.best_loss).abs() < 1e-12);
    assert_eq!(p.iterations_to(p.best_loss).unwrap(), p.losses.iter().position(|&l| l <= p.best_loss).unwrap());
    assert_eq!(p.iterations_to(-1.0), None);

    let mut csv = Vec::new();
    p.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iteration,loss,best_loss");
    assert_eq!(lines.len(), 32);
}

#[test]
fn projection_is_deterministic_and_validates_its_config() {
    let m = models();
    let (_, x) = target(&m, 6, 2);
    let cfg = ProjectionConfig { steps: 5, init: Init::Random { seed: 4 }, ..Default::default() };
    let a = project_zeta(&x, 2, &m.g, &m.d, None, &m.aux, &cfg).unwrap();
    let b = project_zeta(&x, 2, &m.g, &m.d, None, &m.aux, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(matches!(project_z(&x, 2, &m.g, &m.d, None, &ProjectionConfig::default()), Err(CollageError::Parameter(_))));
    let bad = ProjectionConfig { lr: 0.0, ..cfg };
    assert!(matches!(project_z(&x, 2, &m.g, &m.d, None, &bad), Err(CollageError::Parameter(_))));
    let floor = ProjectionConfig { loss_floor: 10.0, steps: 50, ..cfg };
    assert_eq!(project_z(&x, 2, &m.g, &m.d, None, &floor).unwrap().losses.len(), 1);
    let ada = ProjectionConfig { optimizer: OptimizerKind::Adagrad, ..cfg };
    assert_eq!(project_z(&x, 2, &m.g, &m.d, None, &ada).unwrap().losses.len(), 6);
}

#[test]
fn exploding_learning_rates_are_reported_as_divergence() {
    let m = models();
    let (_, x) = target(&m, 7, 0);
    let cfg = ProjectionConfig { steps: 40, lr: 1e6, optimizer: OptimizerKind::Adagrad, init: Init::Random { seed: 1 }, ..Default::default() };
    match project_z(&x, 0, &m.g, &m.d, None, &cfg) {
        Err(CollageError::Diverged(_)) => {}
        Ok(p) => assert!(p.losses.iter().all(|&l| l <= 10.0 * p.losses[0])),
        Err(other) => panic!("{other:?}"),
    }
}

#[test]
fn identity_pretraining_fits_the_round_trip() {
    let mut aux = AuxNets::new(AuxConfig::new(8), &mut rng(8)).unwrap();
    let z = Tensor::randn(vec![64, 8], 1.0, &mut rng(9));
    let before = aux.reconstruction_error(&z).unwrap();
    assert!(aux.pretrain_identity(0, 16, 1e-3, 1).unwrap().is_empty());
    assert_eq!(aux.reconstruction_error(&z).unwrap(), before);
    aux.pretrain_identity(400, 32, 3e-3, 1).unwrap();
    let after = aux.reconstruction_error(&z).unwrap();
    assert!(after < 0.1 * before, "{before} -> {after}");
}

#[test]
fn aux_shapes_and_checkpoints() {
    let cfg = AuxConfig::scaled(48);
    assert_eq!(cfg.hidden, [96, 512, 96]);
    assert_eq!(AuxConfig::new(8).zeta_dim(), 512);
    let aux = AuxNets::new(AuxConfig::new(8), &mut rng(10)).unwrap();
    let z = Tensor::randn(vec![3, 8], 1.0, &mut rng(11));
    let zeta = aux.embed_rows(&z).unwrap();
    assert_eq!(zeta.shape(), [3, 512]);
    assert_eq!(aux.decode_rows(&zeta).unwrap().shape(), [3, 8]);
    let mut aux = aux;
    aux.params_mut().round_to_f32();
    let ck = collage_core::checkpoint::Checkpoint::from_bytes(&aux.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap();
    let back = AuxNets::from_checkpoint(&ck).unwrap();
    assert_eq!(back.embed_rows(&z).unwrap(), aux.embed_rows(&z).unwrap());
    assert!(AuxNets::new(AuxConfig { latent_dim: 8, hidden: [4, 0, 4] }, &mut rng(1)).is_err());
}

#[test]
fn encoder_training_is_deterministic_and_inert_at_zero_steps() {
    let m = models();
    let mut e = m.e.clone();
    let none = EncoderTrainConfig { steps: 0, ..Default::default() };
    assert!(train_encoder(&m.g, &m.d, &mut e, &none).unwrap().is_empty());
    assert_eq!(e.to_checkpoint().unwrap(), m.e.to_checkpoint().unwrap());

    let cfg = EncoderTrainConfig { steps: 3, batch_size: 2, lr: 1e-3, ..Default::default() };
    let (mut e1, mut e2) = (m.e.clone(), m.e.clone());
    let c1 = train_encoder(&m.g, &m.d, &mut e1, &cfg).unwrap();
    let c2 = train_encoder(&m.g, &m.d, &mut e2, &cfg).unwrap();
    assert_eq!(c1, c2);
    assert_eq!(c1.len(), 3);
    assert_eq!(e1.to_checkpoint().unwrap(), e2.to_checkpoint().unwrap());
    assert_ne!(e1.to_checkpoint().unwrap(), m.e.to_checkpoint().unwrap());
    let bad = EncoderTrainConfig { batch_size: 0, ..cfg };
    assert!(train_encoder(&m.g, &m.d, &mut e1, &bad).is_err());
}

#[test]
fn aux_training_runs_the_configured_schedule() {
    let m = models();
    let mut aux = m.aux.clone();
    let none = AuxTrainConfig { steps: 0, identity_steps: 0, ..Default::default() };
    let log = train_aux(&m.g, &m.d, &m.e, &mut aux, &none).unwrap();
    assert!(log.identity.is_empty() && log.unrolled.is_empty());
    assert_eq!(aux.to_checkpoint().unwrap(), m.aux.to_checkpoint().unwrap());

    let cfg = AuxTrainConfig { steps: 2, identity_steps: 3, batch_size: 2, ..Default::default() };
    let (mut a1, mut a2) = (m.aux.clone(), m.aux.clone());
    let l1 = train_aux(&m.g, &m.d, &m.e, &mut a1, &cfg).unwrap();
    let l2 = train_aux(&m.g, &m.d, &m.e, &mut a2, &cfg).unwrap();
    assert_eq!(l1, l2);
    assert_eq!((l1.identity.len(), l1.unrolled.len(), l1.reconstruction.len()), (3, 2, 2));
    assert_eq!(a1.to_checkpoint().unwrap(), a2.to_checkpoint().unwrap());

    let bad = AuxTrainConfig { step_weights: vec![1.0], ..cfg };
    assert!(train_aux(&m.g, &m.d, &m.e, &mut a1, &bad).is_err());
}
