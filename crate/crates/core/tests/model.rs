use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use searth::autodiff::grad_check_coords;
use searth::geometry::latitude_weights;
use searth::model::{probe_boundary_shapes, BoundModel, StageShapes};
use searth::training::weighted_mae_loss;
use searth::{Graph, LatLonGrid, MaskMode, Model, ModelConfig, Result, Tensor, Var};

fn field(rng: &mut ChaCha8Rng, c: &ModelConfig) -> Tensor<f64> {
    Tensor::from_fn(vec![c.n_channels, c.n_lat, c.n_lon], |_| rng.random_range(-1.0..1.0))
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn roll(t: &Tensor<f64>, axis: usize, shift: isize) -> Tensor<f64> {
    t.roll(axis, shift).unwrap()
}

#[test]
fn full_preset_boundary_shapes_and_size() {
    let cfg = ModelConfig::full();
    cfg.validate().unwrap();
    let n = cfg.param_count();
    assert!((480_000_000..=720_000_000).contains(&n), "param count {n}");
    let shapes = probe_boundary_shapes::<f32>(&cfg, 0).unwrap();
    assert_eq!(
        shapes,
        StageShapes {
            embed: [768, 90, 180],
            core: [1536, 45, 90],
            output: [69, 180, 360]
        }
    );
    assert_eq!(cfg.stage_shapes(), shapes);
}

#[test]
fn toy_forward_shape_and_zero_weights_persist() {
    let cfg = ModelConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (field(&mut rng, &cfg), field(&mut rng, &cfg));
    let init = Model::<f64>::init(cfg.clone(), 0).unwrap();
    let out = init.rollout(&a, &b, 2).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[1].shape(), &[4, 16, 32]);
    let zero = Model::<f64>::zeros(cfg).unwrap();
    assert_eq!(zero.rollout(&a, &b, 1).unwrap()[0], b);
}

#[test]
fn init_is_seeded() {
    let cfg = ModelConfig::tiny();
    assert_eq!(
        Model::<f64>::init(cfg.clone(), 3).unwrap(),
        Model::<f64>::init(cfg.clone(), 3).unwrap()
    );
    assert_ne!(
        Model::<f64>::init(cfg.clone(), 3).unwrap(),
        Model::<f64>::init(cfg, 4).unwrap()
    );
}

fn zonal_violation(mode: MaskMode, seed: u64) -> f64 {
    let cfg = ModelConfig {
        mask_mode: mode,
        ..ModelConfig::toy()
    };
    let model = Model::<f64>::random(cfg.clone(), seed, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let (a, b) = (field(&mut rng, &cfg), field(&mut rng, &cfg));
    let shift = 4 * cfg.window.1 as isize;
    let plain = model.rollout(&a, &b, 1).unwrap().remove(0);
    let rolled = model
        .rollout(&roll(&a, 2, shift), &roll(&b, 2, shift), 1)
        .unwrap()
        .remove(0);
    max_abs_diff(&roll(&plain, 2, shift), &rolled)
}

#[test]
fn earth_mode_commutes_with_zonal_rolls() {
    for seed in 0..3 {
        let earth = zonal_violation(MaskMode::Earth, seed);
        assert!(earth <= 1e-8, "earth seed {seed}: {earth}");
        let planar = zonal_violation(MaskMode::Planar, seed);
        assert!(planar > 1e-3, "planar seed {seed}: {planar}");
    }
}

#[test]
fn earth_mode_does_not_commute_with_meridional_rolls() {
    let cfg = ModelConfig::toy();
    let model = Model::<f64>::random(cfg.clone(), 5, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a, b) = (field(&mut rng, &cfg), field(&mut rng, &cfg));
    let shift = cfg.window.0 as isize;
    let plain = model.rollout(&a, &b, 1).unwrap().remove(0);
    let rolled = model
        .rollout(&roll(&a, 1, shift), &roll(&b, 1, shift), 1)
        .unwrap()
        .remove(0);
    assert!(max_abs_diff(&roll(&plain, 1, shift), &rolled) > 1e-3);
}

/// The whole parameter vector as one flat input, split back into named
/// tensors inside the function under test.
fn flat_loss(
    cfg: &ModelConfig,
    x: (&Tensor<f64>, &Tensor<f64>),
    target: &Tensor<f64>,
    weights: &[f64],
) -> impl Fn(&Var<f64>) -> Result<Var<f64>> {
    let cfg = cfg.clone();
    let (a, b, y, w) = (x.0.clone(), x.1.clone(), target.clone(), weights.to_vec());
    move |flat: &Var<f64>| {
        let g = flat.graph();
        let mut vars = HashMap::new();
        let mut at = 0;
        for (name, shape) in cfg.param_layout() {
            let n: usize = shape.iter().product();
            vars.insert(name, flat.narrow(0, at, n)?.reshape(shape)?);
            at += n;
        }
        let bound = BoundModel::new(&cfg, g.clone(), vars)?;
        let pred = bound.forward_step(&g.constant(a.clone()), &g.constant(b.clone()), None)?;
        weighted_mae_loss(&[pred], std::slice::from_ref(&y), &w)
    }
}

fn gradcheck_model(cfg: ModelConfig, coords: Option<Vec<usize>>) -> f64 {
    let model = Model::<f64>::random(cfg.clone(), 11, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (a, b, y) = (field(&mut rng, &cfg), field(&mut rng, &cfg), field(&mut rng, &cfg));
    let weights = LatLonGrid::cell_centered(cfg.n_lat, cfg.n_lon).unwrap().weights();
    let flat = Tensor::new(vec![model.param_count()], model.params.flatten()).unwrap();
    let f = flat_loss(&cfg, (&a, &b), &y, &weights);
    grad_check_coords(f, &flat, 1e-5, coords.as_deref())
        .unwrap()
        .max_rel_error
}

#[test]
fn tiny_model_gradcheck_all_parameters() {
    let err = gradcheck_model(ModelConfig::tiny(), None);
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn toy_model_gradcheck_sampled_parameters() {
    let cfg = ModelConfig::toy();
    let n = cfg.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let coords: Vec<usize> = (0..60).map(|_| rng.random_range(0..n)).collect();
    let err = gradcheck_model(cfg, Some(coords));
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn grid_weights_feed_the_loss() {
    let grid = LatLonGrid::cell_centered(16, 32).unwrap();
    let w = latitude_weights(grid.latitudes()).unwrap();
    assert_eq!(w, grid.weights());
    assert!((w.iter().sum::<f64>() - 16.0).abs() < 1e-12);
}

#[test]
fn bind_rejects_wrong_parameter_shape() {
    let cfg = ModelConfig::tiny();
    let g = Graph::new();
    let mut vars: HashMap<String, Var<f64>> = cfg
        .param_layout()
        .into_iter()
        .map(|(n, s)| (n, g.constant(Tensor::zeros(s))))
        .collect();
    vars.insert("merge.bias".into(), g.constant(Tensor::zeros(vec![3])));
    let err = BoundModel::new(&cfg, g, vars).err().expect("shape mismatch");
    assert!(err.to_string().contains("merge.bias"));
}
