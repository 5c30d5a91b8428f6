//! End-to-end acceptance run: one line per criterion, non-zero exit if any
//! fails. Trains the 64×64 checkpoint once and reuses it throughout; the
//! whole run takes about a quarter of an hour on one core.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hdt::encoding::{make_mask, Acquisition, Encoding, MaskOptions, SamplingMask};
use hdt::generator::{Generator, GeneratorConfig, LatentSet, OutputKind, Upstream};
use hdt::inversion::{ilo_invert, mean_latents, project_l1_ball};
use hdt::numerics::{rel_error, rel_error_real, svd_full, CgOptions, C64};
use hdt::phantom::{echo_times, render_tissue, simulate_coils, simulate_multi_te, PhantomSpec};
use hdt::recon::{alternate, ReconConfig};
use hdt::series::ImageSeries;
use hdt::subspace::{estimate_basis, subspace_recon, Regularizer, SolveOptions};
use hdt_cli::commands::{self, Context, Manifest};
use hdt_cli::config::{RunConfig, Variant};
use hdt_cli::pipeline::{self, Metrics};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> hdt::Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[C64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn random_complex(rng: &mut ChaCha8Rng, n: usize) -> Vec<C64> {
    (0..n).map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()
}

fn adjointness() -> hdt::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let (h, w) = [(16, 16), (32, 16), (16, 32), (32, 32)][case % 4];
        let frames = 1 + case % 4;
        let opts = MaskOptions {
            acceleration: [1.0, 2.0, 3.0, 4.0][(case / 4) % 4],
            center_all: 2,
            center_first: 4,
            shared: case % 2 == 0,
            seed: case as u64,
        };
        let mask = make_mask(h, w, frames, &opts)?;
        let coils = 1 + case % 3;
        let mut enc = Encoding::new(mask, simulate_coils(h, w, coils, case % 5 == 0)?)?;
        if case % 3 == 0 {
            let field: Vec<f64> = (0..h * w).map(|_| rng.random_range(-40.0..40.0)).collect();
            let times: Vec<f64> = (1..=frames).map(|t| 0.002 * t as f64).collect();
            enc = enc.with_field_map(&field, &times)?;
        }
        let x = ImageSeries::new(h, w, frames, random_complex(&mut rng, h * w * frames))?;
        let ax = enc.forward(&x)?;
        let y = ax.with_data(random_complex(&mut rng, ax.data().len()))?;
        let aty = enc.adjoint(&y)?;
        let gap = (inner(ax.data(), y.data()) - inner(x.data(), aty.data())).norm() / (norm(ax.data()) * norm(y.data()));
        worst = worst.max(gap);
    }
    outcome(worst < 1e-10, format!("worst normalised gap {worst:.2e} over 100 pairs"))
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / s).collect()
}

fn dotr(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn gradient_check() -> hdt::Result<Outcome> {
    let h = 1e-5;
    let g0 = Generator::new(GeneratorConfig::new(16, 16, 8, OutputKind::Magnitude), 7)?;
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let w = g0.latents_from_code(&g0.sample_code(&mut rng))?;
    let u: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
    let probe = |img: &[f64]| dotr(&u, img);

    let trace = g0.forward(&w)?;
    let grads = g0.backward(&trace, Upstream::Image(&u), true)?;
    let (gw, gp) = (grads.styles.flat(), grads.params.expect("requested"));
    let cut = 1;
    let mid = g0.forward_to(&w, cut)?.activation;
    let tail = g0.forward_from(&mid, &w)?;
    let gint = g0.backward(&tail, Upstream::Image(&u), false)?.input.expect("cut trace").flat();

    let (mut ew, mut ei, mut ep) = (0.0f64, 0.0f64, 0.0f64);
    let mut g = g0.clone();
    for _ in 0..50 {
        let d = unit(&mut rng, gw.len());
        let at = |s: f64| -> hdt::Result<f64> {
            let f: Vec<f64> = w.flat().iter().zip(&d).map(|(a, b)| a + s * b).collect();
            Ok(probe(&g0.render(&LatentSet::from_flat(&f, g0.blocks())?)?))
        };
        ew = ew.max(rel((at(h)? - at(-h)?) / (2.0 * h), dotr(&gw, &d)));

        let d = unit(&mut rng, gint.len());
        let at = |s: f64| -> hdt::Result<f64> {
            let f: Vec<f64> = mid.flat().iter().zip(&d).map(|(a, b)| a + s * b).collect();
            Ok(probe(&g0.forward_from(&mid.with_flat(&f)?, &w)?.image.expect("full pass")))
        };
        ei = ei.max(rel((at(h)? - at(-h)?) / (2.0 * h), dotr(&gint, &d)));

        let d = unit(&mut rng, gp.len());
        let mut at = |s: f64| -> hdt::Result<f64> {
            let p: Vec<f64> = g0.params().iter().zip(&d).map(|(a, b)| a + s * b).collect();
            g.set_params(&p)?;
            Ok(probe(&g.render(&w)?))
        };
        ep = ep.max(rel((at(h)? - at(-h)?) / (2.0 * h), dotr(&gp, &d)));
    }
    let worst = ew.max(ei).max(ep);
    outcome(
        worst < 1e-4,
        format!("max rel error latents {ew:.1e}, intermediate {ei:.1e}, parameters {ep:.1e}"),
    )
}

/// Projection by enumerating every candidate support and keeping the one
/// whose threshold satisfies the optimality conditions.
fn kkt_oracle(v: &[f64], c: &[f64], r: f64) -> Vec<f64> {
    let d: Vec<f64> = v.iter().zip(c).map(|(a, b)| a - b).collect();
    if d.iter().map(|x| x.abs()).sum::<f64>() <= r {
        return v.to_vec();
    }
    let n = d.len();
    for set in 1u32..(1 << n) {
        let members: Vec<usize> = (0..n).filter(|i| set & (1 << i) != 0).collect();
        let theta = (members.iter().map(|&i| d[i].abs()).sum::<f64>() - r) / members.len() as f64;
        if theta < 0.0 {
            continue;
        }
        let fits = (0..n).all(|i| if set & (1 << i) != 0 { d[i].abs() >= theta } else { d[i].abs() <= theta });
        if fits {
            return d.iter().zip(c).map(|(x, b)| b + x.signum() * (x.abs() - theta).max(0.0)).collect();
        }
    }
    unreachable!("some support satisfies the conditions")
}

fn l1_ball() -> hdt::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(3..=10);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = rng.random_range(0.0..4.0);
        let p = project_l1_ball(&v, &c, r);
        let o = kkt_oracle(&v, &c, r);
        worst = worst.max(p.iter().zip(&o).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    outcome(worst < 1e-8, format!("max deviation {worst:.1e} over 200 cases"))
}

fn subspace_exactness() -> hdt::Result<Outcome> {
    let tissue = render_tissue(&PhantomSpec::brain(64, 64))?;
    let tes = echo_times(8.8, 8.8, 8);
    let x = simulate_multi_te(&tissue, &tes)?;
    let s = svd_full(&x.casorati())?.s;
    let ratio = s[3] / s[0];
    let enc = Encoding::new(SamplingMask::fully_sampled(64, 64, 8), simulate_coils(64, 64, 4, false)?)?;
    let y = enc.forward(&x)?;
    let acq = Acquisition::new(enc, y, tes)?;
    let v = estimate_basis(&x, 3)?;
    let opts = SolveOptions {
        cg: CgOptions {
            tol: 1e-14,
            max_iter: 200,
        },
        ..SolveOptions::default()
    };
    let (model, _) = subspace_recon(&acq, &v, &Regularizer::none(), None, &opts)?;
    let err = rel_error(model.series(64, 64)?.data(), x.data());
    outcome(err < 1e-8 && ratio < 1e-10, format!("rel error {err:.1e}, σ₄/σ₁ {ratio:.1e}"))
}

fn self_inversion(cfg: &RunConfig, g: &Generator) -> hdt::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let target = g.render(&g.latents_from_code(&g.sample_code(&mut rng))?)?;
    let ilo = pipeline::ilo_config(cfg, g.blocks());
    let mut errs = Vec::new();
    for _ in 0..5 {
        let init = g.latents_from_code(&g.sample_code(&mut rng))?;
        let inv = ilo_invert(g, &target, &init, &ilo, None)?;
        errs.push(rel_error_real(&g.render(&inv.latents)?, &target));
    }
    let worst = errs.iter().copied().fold(0.0, f64::max);
    outcome(worst < 1e-2, format!("rel errors {}", list(&errs, 4)))
}

fn list(v: &[f64], digits: usize) -> String {
    v.iter().map(|x| format!("{x:.digits$}")).collect::<Vec<_>>().join(" ")
}

fn adaptation(cfg: &RunConfig, pretrained: &Generator, adapted: &Generator, data: &pipeline::Dataset) -> hdt::Result<Outcome> {
    let echo = data.truth.frames() / 2;
    let target = pipeline::held_out_image(data, echo);
    let init = mean_latents(pretrained, 64, 0)?;
    let before = pipeline::latent_fit_error(cfg, pretrained, &target, &init)?;
    let after = pipeline::latent_fit_error(cfg, adapted, &target, &init)?;
    let gain = 1.0 - after / before;
    outcome(
        after < before && gain >= 0.3,
        format!("echo {} fit error {before:.4} -> {after:.4} ({:.1}% lower)", echo + 1, 100.0 * gain),
    )
}

struct SweepRow {
    af: f64,
    metrics: Vec<(Variant, Metrics, f64)>,
}

fn ordering(rows: &[SweepRow]) -> hdt::Result<Outcome> {
    let mut pass = true;
    let mut detail = Vec::new();
    for row in rows {
        let get = |v| row.metrics.iter().find(|(rv, _, _)| *rv == v).expect("variant ran");
        let (p, s, b) = (get(Variant::Proposed), get(Variant::Sparsity), get(Variant::Subspace));
        let ok_img = p.1.rel_l2 < s.1.rel_l2 && s.1.rel_l2 < b.1.rel_l2;
        let ok_t2 = p.1.t2_error < s.1.t2_error && s.1.t2_error < b.1.t2_error;
        let slowest = row.metrics.iter().map(|m| m.2).fold(0.0, f64::max);
        pass &= ok_img && ok_t2 && slowest < 300.0;
        detail.push(format!(
            "af {}: img {:.4}<{:.4}<{:.4} t2 {:.4}<{:.4}<{:.4} ({:.0}s max)",
            row.af, p.1.rel_l2, s.1.rel_l2, b.1.rel_l2, p.1.t2_error, s.1.t2_error, b.1.t2_error, slowest
        ));
    }
    outcome(pass, detail.join("; "))
}

fn convergence(cfg: &RunConfig, prep: &pipeline::Prepared, g: &Generator, truth: &ImageSeries) -> hdt::Result<Outcome> {
    let mut cfg = cfg.clone();
    cfg.recon.outer_iters = 6;
    let mut pass = true;
    let mut detail = Vec::new();
    for v in [Variant::Proposed, Variant::Gan] {
        let run = pipeline::reconstruct(&cfg, prep, v, Some(g), Some(truth))?;
        let e = &run.state.history.rel_error;
        let (early, late) = ((e[1] - e[0]).abs(), (e[5] - e[4]).abs());
        pass &= late < early;
        detail.push(format!("{v}: |Δ1→2| {early:.1e}, |Δ5→6| {late:.1e}"));
    }
    outcome(pass, detail.join("; "))
}

fn coefficient_mode(cfg: &RunConfig) -> hdt::Result<Outcome> {
    let (gm, gp) = pipeline::train_coefficient_priors(cfg)?;
    let adapted = pipeline::adapt_coefficient_prior(cfg, &gm)?;
    let data = pipeline::coefficient_data(cfg)?;
    let c = pipeline::coefficient_compare(cfg, &data, &adapted.generator, &gp)?;
    let matched = (c.baseline_data_loss - c.proposed_data_loss).abs() / c.proposed_data_loss;
    outcome(
        c.proposed_error < c.baseline_error && matched < 1e-3,
        format!(
            "rel error {:.4} vs baseline {:.4} at data loss {:.4e} (mismatch {matched:.1e}, baseline λ₂ {:.3})",
            c.proposed_error, c.baseline_error, c.proposed_data_loss, c.baseline_lambda2
        ),
    )
}

fn degenerate_lambda(prep: &pipeline::Prepared) -> hdt::Result<Outcome> {
    let frames = prep.basis.cols();
    let mut rc = ReconConfig::contrast(frames, 5, 64);
    rc.lambda1 = vec![0.0; frames];
    rc.lambda2 = 1e-6;
    rc.init_lambda2 = None;
    rc.outer_iters = 3;
    let state = alternate(&prep.acq, &prep.basis, None, &rc, None, None)?;
    let reg = Regularizer::JointSparsity {
        lambda2: 1e-6,
        irls_eps: None,
    };
    let (model, _) = subspace_recon(&prep.acq, &prep.basis, &reg, None, &rc.solve)?;
    let err = rel_error(state.u.data(), model.u.data());
    outcome(err < 1e-8, format!("rel difference {err:.1e}"))
}

fn style_mixing(g: &Generator) -> hdt::Result<Outcome> {
    let deltas = pipeline::style_mix_deltas(g, 20, 105)?;
    let blocks = g.blocks();
    let mean = |b: usize| deltas.iter().map(|r| r[b]).sum::<f64>() / deltas.len() as f64;
    let means: Vec<f64> = (0..blocks).map(mean).collect();
    outcome(
        means[0] > means[blocks - 1],
        format!("mean ‖Δ‖ per swapped block, coarse to fine: {}", list(&means, 3)),
    )
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.phantom.size = 16;
    cfg.phantom.corpus_subjects = 2;
    cfg.phantom.corpus_echoes = 2;
    cfg.acquisition.echoes = 4;
    cfg.acquisition.af = 2.0;
    cfg.acquisition.center_lines = 4;
    cfg.acquisition.navigator_lines = 4;
    cfg.generator.d_lat = 8;
    cfg.generator.base = 4;
    cfg.train.epochs = 2;
    cfg.adapt.passes = 1;
    cfg.adapt.param_steps = 6;
    cfg.adapt.steps_per_stage = 4;
    cfg.adapt.refine_steps = 4;
    cfg.ilo.steps_per_stage = 4;
    cfg.ilo.refine_steps = 4;
    cfg.recon.rank = 2;
    cfg.recon.outer_iters = 2;
    cfg.recon.steps_per_stage = 3;
    cfg.recon.refine_steps = 3;
    cfg.recon.init_steps_per_stage = 3;
    cfg.recon.init_refine_steps = 3;
    cfg.report.af_sweep = vec![2.0];
    cfg.stylemix.pairs = 3;
    cfg.stylemix.sources = 2;
    cfg
}

/// `(directory, artifact, crc)` for every manifest under `root`.
fn crc_table(root: &Path) -> hdt::Result<Vec<(String, String, u32)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            }
        }
        if dir.join("manifest.toml").exists() {
            let rel = dir.strip_prefix(root).expect("under root").display().to_string();
            for a in Manifest::read(&dir)?.artifacts {
                out.push((rel.clone(), a.name, a.crc32));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn determinism() -> hdt::Result<Outcome> {
    let run = |root: &Path| -> hdt::Result<Vec<(String, String, u32)>> {
        let ctx = Context::new(tiny_config(), root.to_path_buf(), 1);
        commands::simulate(&ctx)?;
        commands::train(&ctx)?;
        commands::adapt(&ctx)?;
        for v in Variant::ALL {
            commands::recon(&ctx, v)?;
        }
        commands::report(&ctx)?;
        commands::stylemix(&ctx)?;
        let mut big = ctx.clone();
        big.cfg = RunConfig::default();
        big.root = root.join("default");
        commands::simulate(&big)?;
        crc_table(root)
    };
    let (a, b) = (tempdir()?, tempdir()?);
    let (ta, tb) = (run(a.path())?, run(b.path())?);
    outcome(ta == tb && !ta.is_empty(), format!("{} artifacts compared across two runs", ta.len()))
}

fn tempdir() -> hdt::Result<tempfile::TempDir> {
    Ok(tempfile::tempdir()?)
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(usize, &str, hdt::Result<Outcome>, f64)> = Vec::new();
    let mut record = |id: usize, name: &'static str, f: &mut dyn FnMut() -> hdt::Result<Outcome>| {
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        let line = match &r {
            Ok(o) => format!("{} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail),
            Err(e) => format!("FAIL error: {e}"),
        };
        println!("criterion {id:>2} {name}: {line} [{secs:.1}s]");
        results.push((id, name, r, secs));
    };

    record(1, "adjointness", &mut adjointness);
    record(2, "gradient check", &mut gradient_check);
    record(3, "l1-ball projection", &mut l1_ball);
    record(4, "subspace exactness", &mut subspace_exactness);

    let cfg = RunConfig::default();
    let t = Instant::now();
    let trained = pipeline::corpus(&cfg).and_then(|images| pipeline::pretrain(&cfg, &images));
    println!("(trained the 64×64 checkpoint in {:.0}s)", t.elapsed().as_secs_f64());
    match trained {
        Err(e) => {
            let msg = e.to_string();
            for (id, name) in [(5, "self-inversion"), (6, "adaptation"), (7, "method ordering"), (8, "convergence"), (11, "style mixing")] {
                record(id, name, &mut || Err(hdt::Error::Data(format!("training failed: {msg}"))));
            }
        }
        Ok((g, _)) => {
            record(5, "self-inversion", &mut || self_inversion(&cfg, &g));
            let mut rows = Vec::new();
            let mut at4 = None;
            let mut sweep = || -> hdt::Result<()> {
                for &af in &cfg.report.af_sweep {
                    let mut c = cfg.clone();
                    c.acquisition.af = af;
                    let data = pipeline::simulate(&c)?;
                    let prep = pipeline::prepare(&c, &data)?;
                    let reference = pipeline::sos_adaptation_reference(&c, &prep)?;
                    let adapted = pipeline::adapt(&c, &g, &reference)?.generator;
                    let mut metrics = Vec::new();
                    for v in [Variant::Subspace, Variant::Sparsity, Variant::Proposed] {
                        let t = Instant::now();
                        let run = pipeline::reconstruct(&c, &prep, v, Some(&adapted), Some(&data.truth))?;
                        let (m, _) = pipeline::metrics(&run.series, &data.truth, &data.tissue, &data.echo_times)?;
                        metrics.push((v, m, t.elapsed().as_secs_f64()));
                    }
                    rows.push(SweepRow { af, metrics });
                    if af == 4.0 {
                        at4 = Some((c, data, prep, adapted));
                    }
                }
                Ok(())
            };
            let swept = sweep();
            match &at4 {
                Some((c, data, _, adapted)) => record(6, "adaptation", &mut || adaptation(c, &g, adapted, data)),
                None => record(6, "adaptation", &mut || outcome(false, "AF 4 missing from the sweep".into())),
            }
            match swept {
                Ok(()) => record(7, "method ordering", &mut || ordering(&rows)),
                Err(e) => {
                    let msg = e.to_string();
                    record(7, "method ordering", &mut || Err(hdt::Error::Data(msg.clone())))
                }
            }
            match &at4 {
                Some((c, data, prep, adapted)) => {
                    record(8, "convergence", &mut || convergence(c, prep, adapted, &data.truth))
                }
                None => record(8, "convergence", &mut || outcome(false, "AF 4 missing from the sweep".into())),
            }
            record(11, "style mixing", &mut || style_mixing(&g));
        }
    }

    record(9, "coefficient mode", &mut || coefficient_mode(&cfg));
    record(10, "degenerate λ", &mut || {
        let data = pipeline::simulate(&cfg)?;
        degenerate_lambda(&pipeline::prepare(&cfg, &data)?)
    });
    record(12, "determinism", &mut determinism);

    let failed: Vec<usize> = results
        .iter()
        .filter(|(_, _, r, _)| !matches!(r, Ok(o) if o.pass))
        .map(|(id, ..)| *id)
        .collect();
    println!(
        "acceptance: {} of {} criteria passed in {:.0}s",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
