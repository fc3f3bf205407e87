//! Per-example gradients against independent oracles: central finite
//! differences and a hand-written batch-level backprop for one hidden layer.

use cyclic_dp_core::nn::{
    example_loss, forward, init_params, per_example_gradients, Activation, ArchitectureSpec,
    Batch, ModelParams,
};
use cyclic_dp_core::rng::NoiseSource;
use cyclic_dp_core::Matrix;
use proptest::prelude::*;

const FD_STEP: f64 = 1e-5;

fn arch(act: Activation) -> ArchitectureSpec {
    ArchitectureSpec::new(vec![3, 4, 1], act).unwrap()
}

fn random_case(rng: &mut NoiseSource, act: Activation) -> (ModelParams, Vec<f64>, u8) {
    let a = arch(act);
    let flat: Vec<f64> = (0..a.param_count()).map(|_| rng.standard_normal()).collect();
    let params = ModelParams::unflatten(&a, &flat).unwrap();
    let x: Vec<f64> = (0..3).map(|_| rng.standard_normal()).collect();
    let y = u8::from(rng.bernoulli(0.5));
    (params, x, y)
}

fn fd_gradient(params: &ModelParams, x: &[f64], y: u8) -> Vec<f64> {
    let base = params.flatten();
    (0..base.len())
        .map(|i| {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i] += FD_STEP;
            minus[i] -= FD_STEP;
            let lp = example_loss(&ModelParams::unflatten(params.arch(), &plus).unwrap(), x, y).unwrap();
            let lm = example_loss(&ModelParams::unflatten(params.arch(), &minus).unwrap(), x, y).unwrap();
            (lp - lm) / (2.0 * FD_STEP)
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn relative_error(got: &[f64], want: &[f64]) -> f64 {
    let diff: Vec<f64> = got.iter().zip(want).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(want).max(1e-12)
}

#[test]
fn matches_finite_differences_on_random_cases() {
    for act in [Activation::Relu, Activation::Tanh] {
        let mut rng = NoiseSource::new(2024, 7);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let (params, x, y) = random_case(&mut rng, act);
            let batch = Batch::new(Matrix::from_rows(&[x.clone()]).unwrap(), vec![y]).unwrap();
            let g = per_example_gradients(&params, &batch).unwrap().remove(0);
            let fd = fd_gradient(&params, &x, y);
            worst = worst.max(relative_error(&g, &fd));
        }
        assert!(worst <= 1e-4, "{act:?}: worst relative error {worst}");
    }
}

/// Gradient of the mean loss for a `d → h → 1` relu network, written
/// directly in batch form.
fn batch_mean_gradient(params: &ModelParams, x: &Matrix, y: &[u8]) -> Vec<f64> {
    let l = params.layers();
    let (d, h) = (l[0].inputs(), l[0].outputs());
    let n = x.rows() as f64;
    let mut g_w1 = vec![0.0; h * d];
    let mut g_b1 = vec![0.0; h];
    let mut g_w2 = vec![0.0; h];
    let mut g_b2 = 0.0;
    for (r, &label) in y.iter().enumerate() {
        let xi = x.row(r);
        let z1: Vec<f64> = (0..h)
            .map(|j| l[0].bias[j] + (0..d).map(|k| l[0].weights[j * d + k] * xi[k]).sum::<f64>())
            .collect();
        let a1: Vec<f64> = z1.iter().map(|z| z.max(0.0)).collect();
        let z2 = l[1].bias[0] + (0..h).map(|j| l[1].weights[j] * a1[j]).sum::<f64>();
        let err = 1.0 / (1.0 + (-z2).exp()) - f64::from(label);
        g_b2 += err / n;
        for j in 0..h {
            g_w2[j] += err * a1[j] / n;
            let back = if z1[j] > 0.0 { err * l[1].weights[j] } else { 0.0 };
            g_b1[j] += back / n;
            for k in 0..d {
                g_w1[j * d + k] += back * xi[k] / n;
            }
        }
    }
    let mut flat = g_w1;
    flat.extend(g_b1);
    flat.extend(g_w2);
    flat.push(g_b2);
    flat
}

#[test]
fn mean_of_per_example_gradients_is_gradient_of_mean_loss() {
    let mut rng = NoiseSource::new(77, 1);
    let params = init_params(&arch(Activation::Relu), 5);
    let rows: Vec<Vec<f64>> = (0..32).map(|_| (0..3).map(|_| rng.standard_normal()).collect()).collect();
    let labels: Vec<u8> = (0..32).map(|_| u8::from(rng.bernoulli(0.4))).collect();
    let x = Matrix::from_rows(&rows).unwrap();
    let batch = Batch::new(x.clone(), labels.clone()).unwrap();
    let per = per_example_gradients(&params, &batch).unwrap();
    let mut mean = vec![0.0; params.param_count()];
    for g in &per {
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v / per.len() as f64;
        }
    }
    let oracle = batch_mean_gradient(&params, &x, &labels);
    for (a, b) in mean.iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
    }
}

proptest! {
    #[test]
    fn flatten_unflatten_round_trips(values in prop::collection::vec(-1e6f64..1e6, 21)) {
        // [3,4,1] has 3*4 + 4 + 4 + 1 = 21 parameters
        let a = arch(Activation::Tanh);
        let p = ModelParams::unflatten(&a, &values).unwrap();
        prop_assert_eq!(p.flatten(), values);
    }

    #[test]
    fn forward_is_strictly_inside_unit_interval(
        seed in any::<u64>(),
        x in prop::collection::vec(-1e4f64..1e4, 3),
        scale in 0.0f64..100.0,
    ) {
        let mut p = init_params(&arch(Activation::Relu), seed);
        for l in p.layers_mut() {
            for w in &mut l.weights {
                *w *= scale;
            }
        }
        let probs = forward(&p, &Matrix::from_rows(&[x]).unwrap()).unwrap();
        prop_assert!(probs[0] > 0.0 && probs[0] < 1.0);
    }

    #[test]
    fn gradients_are_deterministic(seed in any::<u64>(), x in prop::collection::vec(-3f64..3.0, 3)) {
        let p = init_params(&arch(Activation::Relu), seed);
        let b = Batch::new(Matrix::from_rows(&[x]).unwrap(), vec![1]).unwrap();
        prop_assert_eq!(per_example_gradients(&p, &b).unwrap(), per_example_gradients(&p, &b).unwrap());
    }
}
