use causalnl_core::datasets::ImageShape;
use causalnl_core::losses::{self, ElboWeights};
use causalnl_core::model::{argmax, reparameterize, standard_normal, Architecture, Branch, GaussianParams, Predict};
use causalnl_core::nn::AdamConfig;
use causalnl_core::rng;
use causalnl_core::Tensor;

fn random_batch(n: usize, m: usize, seed: u64) -> Tensor {
    standard_normal(vec![n, m], &mut rng::derive(seed, &[]))
}

#[test]
fn soft_labels_are_distributions() {
    let mut r = rng::derive(1, &[]);
    let branch = Branch::new(Architecture::mlp(2, 4, 3), &mut r).unwrap();
    let x = random_batch(50, 2, 2).map(|v| 10.0 * v);
    let out = branch.infer(&x, &mut r).unwrap();
    for row in out.soft_label.rows() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|q| *q >= 0.0));
    }
}

#[test]
fn forward_is_deterministic_given_seed() {
    let arch = Architecture::mlp(2, 2, 1);
    let x = random_batch(16, 2, 3);
    let run = || {
        let mut branch = Branch::new(arch, &mut rng::derive(7, &[1])).unwrap();
        branch.forward(&x, &mut rng::derive(7, &[2])).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn initial_label_mass_is_spread_over_ten_classes() {
    for (arch, seed) in [
        (Architecture::mlp(20, 10, 4), 0),
        (
            Architecture::conv_small(
                ImageShape {
                    channels: 1,
                    height: 28,
                    width: 28,
                },
                10,
                25,
            ),
            1,
        ),
    ] {
        let mut r = rng::derive(seed, &[]);
        let branch = Branch::new(arch, &mut r).unwrap();
        let x = random_batch(64, arch.feature_dim, seed + 10).map(|v| v.abs().min(1.0));
        let out = branch.infer(&x, &mut r).unwrap();
        for k in 0..10 {
            let mass = out.soft_label.rows().map(|row| row[k]).sum::<f64>() / 64.0;
            assert!((0.02..=0.3).contains(&mass), "class {k} mass {mass}");
        }
    }
}

#[test]
fn one_dimensional_latent_pipeline_runs() {
    let mut r = rng::derive(4, &[]);
    let mut branch = Branch::new(Architecture::mlp(2, 2, 1), &mut r).unwrap();
    let x = random_batch(8, 2, 5);
    let out = branch.forward(&x, &mut r).unwrap();
    assert_eq!(out.latent.shape(), &[8, 1]);
    let (total, grads) =
        losses::negative_elbo_with_gradients(&x, &out, &[0, 1, 0, 1, 0, 1, 0, 1], &ElboWeights::default()).unwrap();
    assert!(total.total.is_finite());
    branch.backward(&out, grads);
    branch.adam_step(&AdamConfig::default());
}

#[test]
fn reparameterize_derivatives_match_finite_differences() {
    let mu = [0.3, -1.2];
    let lv = [0.4, -0.8];
    let eps = Tensor::new(vec![1, 2], vec![0.7, -1.5]).unwrap();
    let z = |m: [f64; 2], l: [f64; 2]| {
        let g = GaussianParams {
            mean: Tensor::new(vec![1, 2], m.to_vec()).unwrap(),
            log_variance: Tensor::new(vec![1, 2], l.to_vec()).unwrap(),
        };
        reparameterize(&g, &eps).into_data()
    };
    let h = 1e-6;
    for j in 0..2 {
        let (mut up, mut down) = (mu, mu);
        up[j] += h;
        down[j] -= h;
        let dmu = (z(up, lv)[j] - z(down, lv)[j]) / (2.0 * h);
        assert!((dmu - 1.0).abs() < 1e-5);

        let (mut up, mut down) = (lv, lv);
        up[j] += h;
        down[j] -= h;
        let dlv = (z(mu, up)[j] - z(mu, down)[j]) / (2.0 * h);
        let analytic = 0.5 * (0.5 * lv[j]).exp() * eps.data()[j];
        assert!((dlv - analytic).abs() <= 1e-5 * analytic.abs());
    }
}

#[test]
fn predictions_equal_argmax_oracle() {
    let mut r = rng::derive(6, &[]);
    let branch = Branch::new(Architecture::mlp(3, 5, 2), &mut r).unwrap();
    let x = random_batch(200, 3, 8);
    let logits = branch.label_encoder.logits(&x).unwrap();
    let oracle: Vec<usize> = logits
        .rows()
        .map(|row| {
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    assert_eq!(branch.predict(&x), oracle);
    assert_eq!(argmax(&[0.1, 2.0, -1.0]), 1);
}
