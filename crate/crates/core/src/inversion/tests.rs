use super::*;
use crate::encoding::{Encoding, KSpace, SamplingMask};
use crate::generator::{GeneratorConfig, OutputKind};
use crate::phantom::simulate_coils;
use proptest::prelude::*;
use rand::Rng;

fn small(seed: u64) -> Generator {
    Generator::new(GeneratorConfig::new(16, 8, 8, OutputKind::Magnitude), seed).unwrap()
}

fn random_latents(g: &Generator, rng: &mut ChaCha8Rng, scale: f64) -> LatentSet {
    LatentSet {
        styles: (0..g.blocks())
            .map(|_| (0..g.d_lat()).map(|_| rng.random_range(-scale..scale)).collect())
            .collect(),
    }
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

/// Threshold found by bisection on `Σ max(|d_i| − θ, 0) = r`.
fn bisection_projection(v: &[f64], c: &[f64], r: f64) -> Vec<f64> {
    let d: Vec<f64> = v.iter().zip(c).map(|(a, b)| a - b).collect();
    if d.iter().map(|x| x.abs()).sum::<f64>() <= r {
        return v.to_vec();
    }
    let (mut lo, mut hi) = (0.0, d.iter().fold(0.0f64, |m, x| m.max(x.abs())));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let s: f64 = d.iter().map(|x| (x.abs() - mid).max(0.0)).sum();
        if s > r {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let th = 0.5 * (lo + hi);
    d.iter().zip(c).map(|(x, b)| b + x.signum() * (x.abs() - th).max(0.0)).collect()
}

#[test]
fn projection_examples() {
    assert_eq!(project_l1_ball(&[0.2, -0.3], &[0.0, 0.0], 1.0), vec![0.2, -0.3]);
    let p = project_l1_ball(&[3.0, 0.0], &[0.0, 0.0], 1.0);
    assert!(l1(&p, &[1.0, 0.0]) < 1e-15);
    let p = project_l1_ball(&[2.0, 2.0], &[0.0, 0.0], 2.0);
    assert!(l1(&p, &[1.0, 1.0]) < 1e-15);
    assert_eq!(project_l1_ball(&[5.0, 1.0], &[1.0, 1.0], 0.0), vec![1.0, 1.0]);
    assert_eq!(project_l1_ball(&[5e9, -1.0], &[0.0, 0.0], f64::INFINITY), vec![5e9, -1.0]);
}

/// The (2,2) example against a brute-force grid search of the constrained
/// minimiser.
#[test]
fn projection_matches_grid_search() {
    let v = [2.0, 2.0];
    let mut best = (f64::INFINITY, [0.0, 0.0]);
    let n = 2000;
    for i in 0..=n {
        for j in 0..=n {
            let u = [-2.0 + 4.0 * i as f64 / n as f64, -2.0 + 4.0 * j as f64 / n as f64];
            if u[0].abs() + u[1].abs() > 2.0 + 1e-12 {
                continue;
            }
            let dist = (u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2);
            if dist < best.0 {
                best = (dist, u);
            }
        }
    }
    let p = project_l1_ball(&v, &[0.0, 0.0], 2.0);
    assert!(l1(&p, &best.1) < 1e-3 * 2.0);
}

#[test]
fn projection_satisfies_kkt_conditions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.random_range(3..=10);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = rng.random_range(0.05..4.0);
        let p = project_l1_ball(&v, &c, r);
        assert!(l1(&p, &bisection_projection(&v, &c, r)) < 1e-8);
        if l1(&v, &c) > r {
            assert!((l1(&p, &c) - r).abs() < 1e-10);
            // common shrinkage on the support, below-threshold elsewhere
            let th: Vec<f64> = (0..n)
                .filter(|&i| p[i] != c[i])
                .map(|i| (v[i] - c[i]).abs() - (p[i] - c[i]).abs())
                .collect();
            let t0 = th[0];
            assert!(th.iter().all(|t| (t - t0).abs() < 1e-10));
            assert!((0..n).filter(|&i| p[i] == c[i]).all(|i| (v[i] - c[i]).abs() <= t0 + 1e-10));
        }
    }
}

proptest! {
    #[test]
    fn projection_is_feasible_and_idempotent(
        v in prop::collection::vec(-10.0f64..10.0, 1..12),
        shift in -2.0f64..2.0,
        r in 0.0f64..5.0,
    ) {
        let c: Vec<f64> = v.iter().enumerate().map(|(i, _)| shift * (i as f64).sin()).collect();
        let p = project_l1_ball(&v, &c, r);
        prop_assert!(l1(&p, &c) <= r + 1e-12);
        let q = project_l1_ball(&p, &c, r);
        prop_assert!(l1(&p, &q) <= 1e-12);
    }

    #[test]
    fn projection_is_no_farther_than_any_feasible_point(
        v in prop::collection::vec(-5.0f64..5.0, 2..8),
        r in 0.1f64..3.0,
        seed in 0u64..1000,
    ) {
        let c = vec![0.0; v.len()];
        let p = project_l1_ball(&v, &c, r);
        let dp: f64 = v.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let u: Vec<f64> = v.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            let u = project_l1_ball(&u, &c, r * rng.random_range(0.0..1.0));
            let du: f64 = v.iter().zip(&u).map(|(a, b)| (a - b).powi(2)).sum();
            prop_assert!(dp <= du + 1e-12);
        }
    }
}

#[test]
fn ball_constraint_validation() {
    let c = LatentSet::zeros(3, 4);
    assert!(BallConstraint::new(c.clone(), vec![1.0; 2]).is_err());
    assert!(BallConstraint::new(c.clone(), vec![1.0, -1.0, 1.0]).is_err());
    let b = BallConstraint::new(c, vec![1.0, f64::INFINITY, 0.0]).unwrap();
    let mut w = LatentSet::broadcast(&[3.0, 0.0, 0.0, 0.0], 3);
    b.project(&mut w);
    assert_eq!(w.styles[0], vec![1.0, 0.0, 0.0, 0.0]);
    assert_eq!(w.styles[1], vec![3.0, 0.0, 0.0, 0.0]);
    assert_eq!(w.styles[2], vec![0.0; 4]);
    assert!(b.violation(&w) <= 0.0);
}

#[test]
fn config_validation() {
    let cfg = IloConfig::for_blocks(3);
    assert_eq!(cfg.layer_schedule, vec![2, 1]);
    assert_eq!(cfg.steps_per_stage, 500);
    assert!(cfg.validate(3).is_ok());
    let mut bad = cfg.clone();
    bad.layer_schedule = vec![3];
    assert!(bad.validate(3).is_err());
    bad.layer_schedule = vec![0];
    assert!(bad.validate(3).is_err());
    let mut bad = cfg;
    bad.steps_per_stage = 0;
    assert!(bad.validate(3).is_err());
    assert!(IloConfig::plain(10, 0.0).validate(3).is_err());
}

#[test]
fn zero_radius_returns_init() {
    let g = small(1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let init = random_latents(&g, &mut rng, 1.0);
    let target = g.render(&random_latents(&g, &mut rng, 1.0)).unwrap();
    let ball = BallConstraint::uniform(init.clone(), 0.0).unwrap();
    let cfg = IloConfig::for_blocks(g.blocks()).with_budget(20, 20);
    let out = ilo_invert(&g, &target, &init, &cfg, Some(&ball)).unwrap();
    assert_eq!(out.latents, init);
}

/// With no cuts the inversion is Adam on the flat latent vector; replayed
/// here by hand.
#[test]
fn empty_schedule_is_plain_descent() {
    let g = small(2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let init = random_latents(&g, &mut rng, 1.0);
    let target = g.render(&random_latents(&g, &mut rng, 1.0)).unwrap();
    let steps = 30;
    let out = ilo_invert(&g, &target, &init, &IloConfig::plain(steps, 0.02), None).unwrap();

    let mut x = init.flat();
    let mut adam = AdamState::new(x.len(), 0.02);
    let mut best = (f64::INFINITY, x.clone());
    for k in 0..=steps {
        let w = LatentSet::from_flat(&x, g.blocks()).unwrap();
        let trace = g.forward(&w).unwrap();
        let img = trace.image.clone().unwrap();
        let resid: Vec<f64> = img.iter().zip(&target).map(|(a, b)| a - b).collect();
        let l: f64 = resid.iter().map(|r| r * r).sum();
        if l < best.0 {
            best = (l, x.clone());
        }
        if k == steps {
            break;
        }
        let up: Vec<f64> = resid.iter().map(|r| 2.0 * r).collect();
        let gr = g.backward(&trace, Upstream::Image(&up), false).unwrap();
        // cosine decay from the full rate to 5%
        let lr = 0.02 * (0.05 + 0.475 * (1.0 + (std::f64::consts::PI * (k as f64 / steps as f64)).cos()));
        adam.step_with_lr(&mut x, &gr.styles.flat(), lr).unwrap();
    }
    assert_eq!(out.latents.flat(), best.1);
    assert_eq!(out.loss, best.0);
}

#[test]
fn stage_losses_never_exceed_the_start() {
    let g = small(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let init = random_latents(&g, &mut rng, 1.0);
    let target = g.render(&random_latents(&g, &mut rng, 1.0)).unwrap();
    let cfg = IloConfig::for_blocks(g.blocks()).with_budget(40, 40);
    let out = ilo_invert(&g, &target, &init, &cfg, None).unwrap();
    assert_eq!(out.stage_losses.len(), cfg.layer_schedule.len() + 1);
    let mut prev = out.initial_loss;
    for &l in &out.stage_losses {
        assert!(l <= prev);
        prev = l;
    }
    assert_eq!(out.loss, *out.stage_losses.last().unwrap());
    assert!(out.loss < 0.5 * out.initial_loss);
    let img = g.render(&out.latents).unwrap();
    let l: f64 = img.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum();
    assert_eq!(l, out.loss);
}

#[test]
fn self_inversion_recovers_a_range_image() {
    let g = small(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let truth = random_latents(&g, &mut rng, 0.5);
    let target = g.render(&truth).unwrap();
    let init = random_latents(&g, &mut rng, 0.5);
    let cfg = IloConfig::for_blocks(g.blocks()).with_budget(150, 300);
    let out = ilo_invert(&g, &target, &init, &cfg, None).unwrap();
    let err = rel_l2(&g.render(&out.latents).unwrap(), &target);
    assert!(err < 1e-2, "relative error {err}");
}

#[test]
fn ball_is_respected_throughout() {
    let g = small(5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let init = random_latents(&g, &mut rng, 0.5);
    let target = g.render(&random_latents(&g, &mut rng, 2.0)).unwrap();
    let ball = BallConstraint::uniform(init.clone(), 0.3).unwrap();
    let cfg = IloConfig::for_blocks(g.blocks()).with_budget(20, 20);
    let out = ilo_invert(&g, &target, &init, &cfg, Some(&ball)).unwrap();
    assert!(ball.violation(&out.latents) <= 1e-12);
    assert!(out.loss < out.initial_loss);
}

#[test]
fn frozen_blocks_keep_their_styles() {
    let g = small(6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let init = random_latents(&g, &mut rng, 0.5);
    let target = g.render(&random_latents(&g, &mut rng, 0.5)).unwrap();
    let cfg = IloConfig::for_blocks(g.blocks()).with_budget(20, 20);
    let out = Ilo::new(&g, &cfg)
        .unwrap()
        .freeze(&[1, 3])
        .unwrap()
        .run(&init, squared_error(&target))
        .unwrap();
    assert_eq!(out.latents.styles[0], init.styles[0]);
    assert_eq!(out.latents.styles[2], init.styles[2]);
    assert_ne!(out.latents.styles[1], init.styles[1]);
    assert!(Ilo::new(&g, &cfg).unwrap().freeze(&[4]).is_err());
}

#[test]
fn non_finite_loss_reports_best_latents() {
    let g = small(7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let init = random_latents(&g, &mut rng, 0.5);
    let cfg = IloConfig::plain(10, 0.02);
    let mut calls = 0;
    let err = Ilo::new(&g, &cfg)
        .unwrap()
        .run(&init, |img: &[f64]| {
            calls += 1;
            let l = if calls > 3 { f64::NAN } else { img.iter().sum() };
            Ok((l, vec![1.0; img.len()]))
        })
        .unwrap_err();
    assert!(err.is_numerical());
    match err {
        Error::Breakdown { best, .. } => assert_eq!(best.blocks(), g.blocks()),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn mismatched_inputs_are_rejected() {
    let g = small(8);
    let init = LatentSet::zeros(g.blocks(), g.d_lat());
    let cfg = IloConfig::plain(1, 0.02);
    assert!(ilo_invert(&g, &[0.0; 10], &init, &cfg, None).is_err());
    assert!(ilo_invert(&g, &[0.0; 256], &LatentSet::zeros(2, 8), &cfg, None).is_err());
    let ball = BallConstraint::uniform(LatentSet::zeros(2, 8), 1.0).unwrap();
    assert!(ilo_invert(&g, &[0.0; 256], &init, &cfg, Some(&ball)).is_err());
}

fn quick_adapt() -> AdaptConfig {
    AdaptConfig {
        ilo: IloConfig::for_blocks(3).with_budget(30, 30),
        passes: 2,
        param_steps: 40,
        lr_params: 1e-3,
    }
}

fn blob(shift: f64) -> Vec<f64> {
    (0..256)
        .map(|i| {
            let (r, c) = ((i / 16) as f64 - 7.5, (i % 16) as f64 - 7.5 + shift);
            0.1 + 0.7 * (-(r * r + 0.5 * c * c) / 20.0).exp()
        })
        .collect()
}

#[test]
fn huge_alpha_pins_the_weights() {
    let g = small(9);
    let init = mean_latents(&g, 16, 0).unwrap();
    let out = adapt_network(&g, &blob(1.0), &init, 1e12, &quick_adapt()).unwrap();
    let diff = out
        .generator
        .params()
        .iter()
        .zip(g.params())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(diff < 1e-6, "max |Δθ| = {diff}");
}

#[test]
fn adaptation_never_worsens_a_pass() {
    let g = small(10);
    let init = mean_latents(&g, 16, 0).unwrap();
    let reference = blob(0.0);
    let out = adapt_network(&g, &reference, &init, 0.0, &quick_adapt()).unwrap();
    assert_eq!(out.passes.len(), 2);
    for p in &out.passes {
        assert!(p.after <= p.before);
    }
    let first = out.passes[0].before;
    let last = out.passes[1].after;
    assert!(last < 0.8 * first, "{first} -> {last}");
    let fit = rel_l2(&out.generator.render(&out.latents).unwrap(), &reference);
    assert!((fit - last).abs() < 1e-12);
    assert_eq!(g.params(), small(10).params());
}

#[test]
fn adaptation_rejects_bad_inputs() {
    let g = small(11);
    let init = mean_latents(&g, 4, 0).unwrap();
    assert!(adapt_network(&g, &[0.0; 5], &init, 0.0, &quick_adapt()).is_err());
    assert!(adapt_network(&g, &blob(0.0), &init, -1.0, &quick_adapt()).is_err());
}

fn full_acquisition(g: &Generator, images: &[Vec<C64>], coils: usize, uniform: bool) -> Acquisition {
    let n = g.size();
    let mask = SamplingMask::fully_sampled(n, n, images.len());
    let enc = Encoding::new(mask.clone(), simulate_coils(n, n, coils, uniform).unwrap()).unwrap();
    let x = crate::series::ImageSeries::from_frames(n, n, images).unwrap();
    let y: KSpace = enc.forward(&x).unwrap();
    Acquisition::new(enc, y, (0..images.len()).map(|t| 10.0 * (t + 1) as f64).collect()).unwrap()
}

/// One uniform coil with full sampling is a unitary map, so the k-space
/// loss equals the image loss and the trajectories coincide.
#[test]
fn dc_init_with_unitary_encoding_matches_image_inversion() {
    let g = small(12);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let target = g.render(&random_latents(&g, &mut rng, 0.5)).unwrap();
    let img: Vec<C64> = target.iter().map(|&v| C64::new(v, 0.0)).collect();
    let acq = full_acquisition(&g, &[img], 1, true);
    let init = random_latents(&g, &mut rng, 0.5);
    let cfg = IloConfig::for_blocks(g.blocks()).with_budget(15, 15);
    let ones = vec![C64::new(1.0, 0.0); 256];
    let dc = latent_init_dc(&g, &acq, &ones, 0, &init, &cfg, None).unwrap();
    let im = ilo_invert(&g, &target, &init, &cfg, None).unwrap();
    assert!((dc.loss - im.loss).abs() <= 1e-9 * im.initial_loss);
    assert!(l1(&dc.latents.flat(), &im.latents.flat()) < 1e-6);
}

#[test]
fn dc_init_fits_consistent_multicoil_data() {
    let g = small(13);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let truth = random_latents(&g, &mut rng, 0.5);
    let mag = g.render(&truth).unwrap();
    let phase: Vec<C64> = (0..256).map(|i| C64::from_polar(1.0, 0.3 * ((i % 16) as f64 / 16.0))).collect();
    let frames: Vec<Vec<C64>> = vec![
        vec![C64::new(0.0, 0.0); 256],
        mag.iter().zip(&phase).map(|(&m, p)| p * m).collect(),
    ];
    let acq = full_acquisition(&g, &frames, 3, false);
    let init = random_latents(&g, &mut rng, 0.5);
    let cfg = IloConfig::for_blocks(g.blocks()).with_budget(150, 300);
    let out = latent_init_dc(&g, &acq, &phase, 1, &init, &cfg, None).unwrap();
    let y2 = acq.kspace.frame(1).iter().map(|z| z.norm_sqr()).sum::<f64>();
    assert!(out.loss < 1e-4 * y2, "{} vs {}", out.loss, y2);
    assert!(latent_init_dc(&g, &acq, &phase, 2, &init, &cfg, None).is_err());
    assert!(latent_init_dc(&g, &acq, &phase[1..], 1, &init, &cfg, None).is_err());
}

#[test]
fn dc_init_with_zero_ball_returns_init() {
    let g = small(14);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let img: Vec<C64> = g.render(&random_latents(&g, &mut rng, 0.5)).unwrap().into_iter().map(|v| C64::new(v, 0.0)).collect();
    let acq = full_acquisition(&g, &[img], 2, false);
    let init = random_latents(&g, &mut rng, 0.5);
    let ball = BallConstraint::uniform(init.clone(), 0.0).unwrap();
    let ones = vec![C64::new(1.0, 0.0); 256];
    let cfg = IloConfig::for_blocks(g.blocks()).with_budget(5, 5);
    let out = latent_init_dc(&g, &acq, &ones, 0, &init, &cfg, Some(&ball)).unwrap();
    assert_eq!(out.latents, init);
}
