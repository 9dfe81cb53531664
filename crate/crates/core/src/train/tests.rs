use super::*;
use crate::mesh::{build_pairwise_graph, sample_surface, DEFAULT_GEODESIC_CUTOFF};
use crate::render::{render_views, RenderConfig};
use crate::synth::{ShapeFamily, SyntheticShapeSpec};
use crate::view_select::{generate_candidates, greedy_select, SelectConfig};
use rand::Rng;

fn small_render() -> RenderConfig {
    RenderConfig {
        width: 32,
        height: 32,
        ..RenderConfig::default()
    }
}

fn shape(family: ShapeFamily, seed: u64) -> TrainingShape {
    shape_at(family, seed, &small_render())
}

fn shape_at(family: ShapeFamily, seed: u64, cfg: &RenderConfig) -> TrainingShape {
    let lm = SyntheticShapeSpec::sample(family, seed).build().unwrap();
    let points = sample_surface(&lm.mesh, 256, seed).unwrap();
    let cands = generate_candidates(&points, &lm.mesh.bounding_sphere()).unwrap();
    let vps = greedy_select(&cands, &points, &lm.mesh, &SelectConfig::default(), cfg).unwrap();
    let views = render_views(&lm.mesh, &vps, cfg).unwrap();
    TrainingShape {
        name: format!("{}-{seed}", family.name()),
        category: family.name().to_string(),
        face_areas: lm.mesh.face_areas().to_vec(),
        graph: build_pairwise_graph(&lm.mesh, DEFAULT_GEODESIC_CUTOFF),
        labels: lm.labels,
        views: Arc::new(views),
    }
}

#[test]
fn sgd_without_momentum_is_plain_gradient_step() {
    let sgd = Sgd {
        learning_rate: 0.1,
        momentum: 0.0,
        weight_decay: 0.01,
    };
    let mut p = vec![1.0f32, -2.0, 0.5];
    let g = vec![0.5f32, 0.25, -1.0];
    let mut v = vec![3.0f32; 3];
    let before = p.clone();
    sgd.step(&mut p, &g, &mut v);
    for i in 0..3 {
        let expect = before[i] - 0.1 * (g[i] + 2.0 * 0.01 * before[i]);
        assert!((p[i] - expect).abs() < 1e-7);
    }
    let still = Sgd {
        weight_decay: 0.0,
        ..sgd
    };
    let mut v = vec![0.0f32; 3];
    let before = p.clone();
    still.step(&mut p, &[0.0; 3], &mut v);
    assert_eq!(p, before);
}

#[test]
fn crf_step_clamps_at_zero() {
    let sgd = Sgd {
        learning_rate: 1.0,
        momentum: 0.9,
        weight_decay: 0.0,
    };
    let mut crf = CrfParams::new(2);
    let mut vel = CrfParams::zeros(2);
    let mut g = CrfParams::zeros(2);
    g.w_adj = 5.0;
    g.w_label = vec![-1.0, 0.5, 0.5, 0.0];
    sgd.step_crf(&mut crf, &g, &mut vel);
    assert_eq!(crf.w_adj, 0.0);
    assert_eq!(crf.w_label, vec![2.0, 0.5, 0.5, 1.0]);
    crf.validate().unwrap();
}

#[test]
fn accuracy_examples() {
    let areas = vec![1.0, 2.0, 3.0];
    assert_eq!(accuracy(&[0, 1, 1], &[0, 1, 1], &areas).unwrap(), 1.0);
    assert_eq!(accuracy(&[1, 1, 0], &[0, 1, 1], &areas).unwrap(), 2.0 / 6.0);
    assert!(accuracy(&[0], &[0, 1], &[1.0, 1.0]).is_err());

    // Uniform random predictions over 4 labels on equal-area faces.
    let n = 4000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let acc = accuracy(&pred, &truth, &vec![1.0; n]).unwrap();
    let sigma = (0.25f64 * 0.75 / n as f64).sqrt();
    assert!((acc - 0.25).abs() < 3.0 * sigma, "{acc}");
}

#[test]
fn evaluation_aggregates() {
    let r = |c: &str, a: f64| ShapeResult {
        name: String::new(),
        category: c.into(),
        accuracy: a,
    };
    let e = Evaluation::from_results(vec![r("mug", 1.0), r("mug", 0.5), r("table", 0.9)]).unwrap();
    assert_eq!(e.per_category["mug"], 0.75);
    assert!((e.category_average - 0.825).abs() < 1e-12);
    assert!((e.dataset_average - 0.8).abs() < 1e-12);
    assert!(e.table().contains("table             0.900"));
    assert!(Evaluation::from_results(vec![]).is_err());
    let net: Network<f32> = Network::init(&NetworkSpec::reference(2, 2), 0).unwrap();
    assert!(evaluate(&net, &CrfParams::new(2), &MeanFieldConfig::default(), &[]).is_err());
}

#[test]
fn checkpoint_round_trip_and_rng_resume() {
    let s = shape(ShapeFamily::Mug, 1);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(&NetworkSpec::reference(2, 2), cfg.clone()).unwrap();
    t.run_epoch(std::slice::from_ref(&s)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    t.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), t.checkpoint.to_bytes().unwrap());
    assert_eq!(back, t.checkpoint);

    // Resuming continues exactly like the uninterrupted run.
    let mut resumed = Trainer::resume(back, cfg).unwrap();
    t.run_epoch(std::slice::from_ref(&s)).unwrap();
    resumed.run_epoch(std::slice::from_ref(&s)).unwrap();
    assert_eq!(resumed.checkpoint.to_bytes().unwrap(), t.checkpoint.to_bytes().unwrap());
    assert_eq!(resumed.log.last(), t.log.last());
}

#[test]
fn view_subsets_are_resampled() {
    let mut t = Trainer::new(&NetworkSpec::reference(2, 2), TrainConfig::default()).unwrap();
    let draws: Vec<Vec<usize>> = (0..5).map(|_| t.sample_views(12)).collect();
    assert!(draws.iter().all(|d| d.len() == 8 && d.iter().all(|&v| v < 12)));
    assert!(draws.windows(2).any(|w| w[0] != w[1]));
    assert_eq!(t.sample_views(3), vec![0, 1, 2]);
}

#[test]
fn step_loss_is_deterministic_and_finite() {
    let s = shape(ShapeFamily::Table, 2);
    let t = Trainer::new(&NetworkSpec::reference(2, 2), TrainConfig::default()).unwrap();
    let views = [0, 2, 3];
    let a = t.evaluate_step(&s, &views, Phase::Joint).unwrap();
    let b = t.evaluate_step(&s, &views, Phase::Joint).unwrap();
    assert_eq!(a.record, b.record);
    assert_eq!(a.net_grads, b.net_grads);
    assert!(a.record.nll.is_finite() && a.record.reg.is_finite());
    assert!(a.crf_grads.is_some());
    let u = t.evaluate_step(&s, &views, Phase::UnaryOnly).unwrap();
    assert!(u.crf_grads.is_none() && u.net_grads.is_some());
    let c = t.evaluate_step(&s, &views, Phase::CrfOnly).unwrap();
    assert!(c.net_grads.is_none() && c.crf_grads.is_some());
}

#[test]
fn training_overfits_a_single_shape() {
    // The handle is too thin to survive the silhouette band at low resolution.
    let s = shape_at(ShapeFamily::Mug, 4, &RenderConfig::default());
    let cfg = TrainConfig {
        epochs: 200,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(&NetworkSpec::reference(2, 2), cfg.clone()).unwrap();
    t.train(std::slice::from_ref(&s)).unwrap();
    let e = evaluate(
        &t.checkpoint.network,
        &t.checkpoint.crf,
        &cfg.mean_field,
        std::slice::from_ref(&s),
    )
    .unwrap();
    assert!(e.dataset_average >= 0.99, "{}", e.dataset_average);

    // Same seed, same data: same loss curve.
    let mut again = Trainer::new(&NetworkSpec::reference(2, 2), cfg).unwrap();
    for _ in 0..5 {
        again.run_epoch(std::slice::from_ref(&s)).unwrap();
    }
    assert_eq!(&again.log[..], &t.log[..5]);
}

#[test]
fn clipping_bounds_the_joint_norm() {
    let spec = NetworkSpec::reference(2, 2);
    let mut net = Some(Network::<f32>::init(&spec, 3).unwrap());
    let mut crf = Some(CrfParams::new(2));
    let before = net.clone().unwrap();
    let norm = clip_global_norm(&mut net, &mut crf, 1.0);
    let expect = (before.squared_norm() as f64 + 6.0).sqrt();
    assert!((norm - expect).abs() < 1e-3 * expect);
    let after_sq =
        net.as_ref().unwrap().squared_norm() as f64 + crf.as_ref().unwrap().flat().iter().map(|v| v * v).sum::<f64>();
    assert!((after_sq.sqrt() - 1.0).abs() < 1e-4);
    // Direction is kept.
    let k = 1.0 / expect;
    for (a, b) in net.unwrap().params().zip(before.params()) {
        assert!((*a as f64 - *b as f64 * k).abs() < 1e-6);
    }

    let mut small = Some(CrfParams::new(2));
    assert_eq!(clip_global_norm(&mut None, &mut small, 10.0), 6f64.sqrt());
    assert_eq!(small.unwrap(), CrfParams::new(2));
}

#[test]
fn crf_weights_stay_in_their_box() {
    let mut crf = CrfParams::new(2);
    crf.w_adj = 3.0;
    crf.w_label[1] = -0.5;
    crf.clamp_to(1.0);
    assert_eq!(crf.flat(), vec![1.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
}
