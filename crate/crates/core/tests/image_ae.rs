use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use xmodal_core::autodiff::{gradient_check_params, Graph, ParamStore, Tensor};
use xmodal_core::image_ae::{
    discriminator_loss, generator_adversarial_loss, kl_closed_form, stack_images, standard_normal,
    ImageAeConfig, ImageAutoencoder,
};

const LN2: f64 = core::f64::consts::LN_2;

fn small_config() -> ImageAeConfig {
    ImageAeConfig {
        base_resolution: 4,
        branches: 3,
        embed_dim: 6,
        cond_dim: 3,
        noise_dim: 2,
        gen_channels: 3,
        enc_channels: 2,
        disc_channels: 2,
        ..ImageAeConfig::default()
    }
}

fn random_images(n: usize, side: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[n, 3, side, side], |_| rng.random_range(-1.0..1.0)).unwrap()
}

/// Flat-coloured rectangles on a white background.
fn blocks_dataset(n: usize, side: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let palette = [
        [1.0, -1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
        [1.0, 1.0, -1.0],
    ];
    (0..n)
        .map(|i| {
            let colour = palette[i % palette.len()];
            let (x0, y0) = (rng.random_range(2..side / 2), rng.random_range(2..side / 2));
            let extent = side / 3;
            Tensor::from_fn(&[3, side, side], |k| {
                let (ch, y, x) = (k / (side * side), (k / side) % side, k % side);
                if (y0..y0 + extent).contains(&y) && (x0..x0 + extent).contains(&x) {
                    colour[ch]
                } else {
                    1.0
                }
            })
            .unwrap()
        })
        .collect()
}

/// Sets every head so that both discriminator outputs are exactly 0.5.
fn neutralise_heads(model: &mut ImageAutoencoder) {
    let ids: Vec<_> = model
        .disc_store
        .ids()
        .filter(|&id| {
            let n = model.disc_store.name(id);
            n.contains(".uncond.") || n.contains(".cond.")
        })
        .collect();
    for id in ids {
        model.disc_store.get_mut(id).values_mut().fill(0.0);
    }
}

#[test]
fn encoder_is_deterministic_with_configured_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = ImageAutoencoder::new(ImageAeConfig::default(), &mut rng).unwrap();
    let img = random_images(1, 32, &mut rng)
        .reshaped(&[3, 32, 32])
        .unwrap();
    let a = model.encode_image(&img).unwrap();
    let b = model.encode_image(&img).unwrap();
    assert_eq!(a.len(), 64);
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.is_finite()));

    let mut other = img.clone();
    other.values_mut()[5 * 32 + 7] += 0.5;
    assert_ne!(model.encode_image(&other).unwrap(), a);
}

#[test]
fn encoder_rejects_wrong_resolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = ImageAutoencoder::new(ImageAeConfig::default(), &mut rng).unwrap();
    let img = Tensor::zeros(&[3, 16, 16]).unwrap();
    assert!(model.encode_image(&img).is_err());
}

#[test]
fn kl_is_zero_at_the_prior_and_half_d_for_unit_means() {
    assert_eq!(kl_closed_form(&[0.0; 7], &[0.0; 7]), 0.0);
    for d in [1usize, 5, 16] {
        let kl = kl_closed_form(&vec![1.0; d], &vec![0.0; d]);
        assert!((kl - 0.5 * d as f64).abs() <= 1e-9);
    }
}

#[test]
fn kl_matches_monte_carlo_estimate() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 4;
    let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let logvar: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let closed = kl_closed_form(&mu, &logvar);

    // log q(x) - log p(x) for x = μ + σε; the 2π terms cancel.
    let n = 100_000;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let mut r = 0.0;
        for k in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            let x = mu[k] + (0.5 * logvar[k]).exp() * e;
            r += -0.5 * logvar[k] - 0.5 * e * e + 0.5 * x * x;
        }
        sum += r;
        sum_sq += r * r;
    }
    let mean = sum / n as f64;
    let var = sum_sq / n as f64 - mean * mean;
    let se = (var / n as f64).sqrt();
    assert!(
        (mean - closed).abs() <= 3.0 * se,
        "mc {mean} closed {closed} se {se}"
    );
}

#[test]
fn cond_augment_uses_mean_without_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = ImageAutoencoder::new(small_config(), &mut rng).unwrap();
    let psi: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (c0, kl0) = model.cond_augment_with(&psi, None).unwrap();
    let eps = Tensor::zeros(&[1, 3]).unwrap();
    let (c1, kl1) = model.cond_augment_with(&psi, Some(&eps)).unwrap();
    assert_eq!(c0, c1);
    assert_eq!(kl0, kl1);
    assert!(kl0 >= 0.0);
    let (c2, _) = model.cond_augment(&psi, &mut rng).unwrap();
    assert_ne!(c0, c2);
}

#[test]
fn generator_resolutions_double_and_outputs_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = ImageAutoencoder::new(ImageAeConfig::default(), &mut rng).unwrap();
    let c: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let z: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let out = model.generate(&c, &z).unwrap();
    let sides: Vec<usize> = out.iter().map(|t| t.shape()[1]).collect();
    assert_eq!(sides, vec![8, 16, 32]);
    for t in &out {
        assert_eq!(t.shape()[0], 3);
        assert!(t.values().iter().all(|v| v.abs() < 1.0));
    }
    assert_eq!(model.generate(&c, &z).unwrap(), out);

    let mut z2 = z.clone();
    z2[0] += 1.0;
    let moved = model.generate(&c, &z2).unwrap();
    assert_ne!(moved[2].values(), out[2].values());
}

#[test]
fn uniform_heads_give_four_ln2_for_discriminator() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut model = ImageAutoencoder::new(small_config(), &mut rng).unwrap();
    neutralise_heads(&mut model);
    let x = random_images(3, 16, &mut rng);
    let eps = standard_normal(&[3, 3], &mut rng).unwrap();
    let z = standard_normal(&[3, 2], &mut rng).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x);
    let (total, branches) = model
        .discriminator_objective(&mut g, &model.gen_store, &model.disc_store, xv, &eps, &z)
        .unwrap();
    for b in branches {
        assert!((g.value(b).item() - 4.0 * LN2).abs() <= 1e-9);
    }
    assert!((g.value(total).item() - 12.0 * LN2).abs() <= 1e-9);
}

#[test]
fn perfect_discriminator_loss_vanishes() {
    let mut g = Graph::new();
    let mut last = f64::INFINITY;
    for eps in [1e-2, 1e-4, 1e-8] {
        let hi = g.constant(Tensor::full(&[4, 1], 1.0 - eps).unwrap());
        let lo = g.constant(Tensor::full(&[4, 1], eps).unwrap());
        let l = discriminator_loss(&mut g, hi, lo, hi, lo).unwrap();
        let v = g.value(l).item();
        assert!(v < last && v >= 0.0);
        last = v;
    }
    assert!(last < 1e-7);
}

#[test]
fn discriminator_loss_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let b = 5;
    let probs: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..b).map(|_| rng.random_range(0.01..0.99)).collect())
        .collect();
    let mut g = Graph::new();
    let v: Vec<_> = probs
        .iter()
        .map(|p| g.constant(Tensor::new(&[b, 1], p.clone()).unwrap()))
        .collect();
    let l = discriminator_loss(&mut g, v[0], v[1], v[2], v[3]).unwrap();
    let mut expect = 0.0;
    for i in 0..b {
        expect -= probs[0][i].ln() / b as f64;
        expect -= (1.0 - probs[1][i]).ln() / b as f64;
        expect -= probs[2][i].ln() / b as f64;
        expect -= (1.0 - probs[3][i]).ln() / b as f64;
    }
    assert!((g.value(l).item() - expect).abs() <= 1e-12);

    let lg = generator_adversarial_loss(&mut g, v[1], v[3]).unwrap();
    let mut expect_g = 0.0;
    for i in 0..b {
        expect_g -= (probs[1][i].ln() + probs[3][i].ln()) / b as f64;
    }
    assert!((g.value(lg).item() - expect_g).abs() <= 1e-12);
}

fn adversarial_only(branches: usize, base: usize) -> (f64, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = ImageAeConfig {
        base_resolution: base,
        branches,
        lambda_kl: 0.0,
        lambda_rec: 0.0,
        ..small_config()
    };
    let side = cfg.top_resolution();
    let mut model = ImageAutoencoder::new(cfg, &mut rng).unwrap();
    neutralise_heads(&mut model);
    let x = random_images(2, side, &mut rng);
    let eps = standard_normal(&[2, 3], &mut rng).unwrap();
    let z = standard_normal(&[2, 2], &mut rng).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x);
    let obj = model
        .generator_objective(&mut g, &model.gen_store, &model.disc_store, xv, &eps, &z)
        .unwrap();
    (
        g.value(obj.total).item(),
        obj.adversarial.iter().map(|&a| g.value(a).item()).collect(),
    )
}

#[test]
fn generator_loss_at_uniform_heads() {
    let (one, _) = adversarial_only(1, 16);
    assert!((one - 2.0 * LN2).abs() <= 1e-9, "{one}");
    let (three, per_branch) = adversarial_only(3, 4);
    assert!((three - 6.0 * LN2).abs() <= 1e-9, "{three}");
    let summed: f64 = per_branch.iter().sum();
    assert!((summed - three).abs() <= 1e-12);
}

#[test]
fn total_generator_loss_is_sum_of_branch_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = ImageAeConfig {
        lambda_kl: 0.0,
        lambda_rec: 0.0,
        ..small_config()
    };
    let model = ImageAutoencoder::new(cfg, &mut rng).unwrap();
    let x = random_images(2, 16, &mut rng);
    let eps = standard_normal(&[2, 3], &mut rng).unwrap();
    let z = standard_normal(&[2, 2], &mut rng).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x);
    let obj = model
        .generator_objective(&mut g, &model.gen_store, &model.disc_store, xv, &eps, &z)
        .unwrap();
    // Each branch loss recomputed independently from its own heads.
    let mut independent = 0.0;
    for (d, &u) in model.discriminators.iter().zip(&obj.pass.images) {
        let (pu, pc) = d.heads(&mut g, &model.disc_store, u, obj.pass.c).unwrap();
        let l = generator_adversarial_loss(&mut g, pu, pc).unwrap();
        independent += g.value(l).item();
    }
    assert!((g.value(obj.total).item() - independent).abs() <= 1e-12);
}

#[test]
fn generator_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let model = ImageAutoencoder::new(small_config(), &mut rng).unwrap();
    let x = random_images(2, 16, &mut rng);
    let eps = standard_normal(&[2, 3], &mut rng).unwrap();
    let z = standard_normal(&[2, 2], &mut rng).unwrap();
    let mut store = model.gen_store.clone();
    let err = gradient_check_params(&mut store, 96, 1e-6, |g, s| {
        let xv = g.constant(x.clone());
        Ok(model
            .generator_objective(g, s, &model.disc_store, xv, &eps, &z)?
            .total)
    })
    .unwrap();
    assert!(err <= 1e-5, "{err}");
}

#[test]
fn discriminator_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = ImageAutoencoder::new(small_config(), &mut rng).unwrap();
    let x = random_images(2, 16, &mut rng);
    let eps = standard_normal(&[2, 3], &mut rng).unwrap();
    let z = standard_normal(&[2, 2], &mut rng).unwrap();
    let mut store = model.disc_store.clone();
    let err = gradient_check_params(&mut store, 96, 1e-6, |g, s| {
        let xv = g.constant(x.clone());
        Ok(model
            .discriminator_objective(g, &model.gen_store, s, xv, &eps, &z)?
            .0)
    })
    .unwrap();
    assert!(err <= 1e-5, "{err}");
}

#[test]
fn checkpoint_round_trip_reproduces_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = ImageAutoencoder::new(small_config(), &mut rng).unwrap();
    let named = model.export();
    let mut other =
        ImageAutoencoder::new(small_config(), &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    let img = random_images(1, 16, &mut rng)
        .reshaped(&[3, 16, 16])
        .unwrap();
    assert_ne!(
        other.encode_image(&img).unwrap(),
        model.encode_image(&img).unwrap()
    );
    other.import(&named).unwrap();
    assert_eq!(
        other.encode_image(&img).unwrap(),
        model.encode_image(&img).unwrap()
    );
    let c = [0.1, -0.2, 0.3];
    let z = [0.5, 0.5];
    assert_eq!(
        other.generate(&c, &z).unwrap(),
        model.generate(&c, &z).unwrap()
    );

    let mut wrong = ImageAutoencoder::new(ImageAeConfig::default(), &mut rng).unwrap();
    assert!(wrong.import(&named).is_err());
}

#[test]
fn pipeline_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = ImageAutoencoder::new(ImageAeConfig::default(), &mut rng).unwrap();
        let img = random_images(1, 32, &mut rng)
            .reshaped(&[3, 32, 32])
            .unwrap();
        let psi = model.encode_image(&img).unwrap();
        let (c, _) = model.cond_augment(&psi, &mut rng).unwrap();
        let z = standard_normal(&[16], &mut rng).unwrap();
        model.generate(&c, z.values()).unwrap()
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        let xb: Vec<u64> = x.values().iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u64> = y.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(xb, yb);
    }
}

#[test]
fn training_halves_reconstruction_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let data = blocks_dataset(64, 32, &mut rng);
    let cfg = ImageAeConfig::default();
    let batch = cfg.batch_size;
    let mut model = ImageAutoencoder::new(cfg, &mut rng).unwrap();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut first = None;
    let mut recent = Vec::new();
    for step in 0..200 {
        if step % (data.len() / batch) == 0 {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        }
        let start = (step * batch) % data.len();
        let picked: Vec<&Tensor> = order[start..start + batch]
            .iter()
            .map(|&i| &data[i])
            .collect();
        let x = stack_images(&picked).unwrap();
        let losses = model.train_step(&x, &mut rng).unwrap();
        assert!(
            losses.discriminator > 0.0 && losses.discriminator < 8.0 * LN2 * 3.0,
            "step {step}: {losses:?}"
        );
        if first.is_none() {
            first = Some(losses.reconstruction);
        }
        recent.push(losses.reconstruction);
    }
    let first = first.unwrap();
    let tail: f64 = recent[190..].iter().sum::<f64>() / 10.0;
    assert!(tail <= 0.5 * first, "first {first}, final {tail}");
}

#[test]
fn invalid_configuration_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for cfg in [
        ImageAeConfig {
            branches: 0,
            ..ImageAeConfig::default()
        },
        ImageAeConfig {
            base_resolution: 6,
            ..ImageAeConfig::default()
        },
        ImageAeConfig {
            base_resolution: 4,
            branches: 2,
            ..ImageAeConfig::default()
        },
        ImageAeConfig {
            lr: 0.0,
            ..ImageAeConfig::default()
        },
    ] {
        assert!(ImageAutoencoder::new(cfg, &mut rng).is_err());
    }
    let _ = ParamStore::new();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_non_negative(mu in proptest::collection::vec(-5.0f64..5.0, 1..10), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logvar: Vec<f64> = mu.iter().map(|_| rng.random_range(-4.0..4.0)).collect();
        let kl = kl_closed_form(&mu, &logvar);
        prop_assert!(kl > 0.0);
    }

    #[test]
    fn branch_resolutions_double(branches in 1usize..5) {
        let base = 64 >> (branches - 1);
        let cfg = ImageAeConfig { base_resolution: base, branches, ..small_config() };
        let model = ImageAutoencoder::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let out = model.generate(&[0.2, 0.1, -0.3], &[1.0, -1.0]).unwrap();
        prop_assert_eq!(out.len(), branches);
        for w in out.windows(2) {
            prop_assert_eq!(w[1].shape()[1], 2 * w[0].shape()[1]);
            prop_assert_eq!(w[1].shape()[2], 2 * w[0].shape()[2]);
        }
    }
}
