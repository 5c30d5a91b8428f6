//! In-memory pipeline stages. Commands in [`crate::commands`] wrap these
//! with file input and output.

use hdt::encoding::{make_mask, Acquisition, Encoding, KSpace, MaskOptions, SamplingMask};
use hdt::generator::{style_mix, train, Generator, GeneratorConfig, LatentSet, OutputKind, TrainConfig, TrainLog};
use hdt::inversion::{adapt_network, ilo_invert, mean_latents, AdaptConfig, Adaptation, BallConstraint, IloConfig};
use hdt::numerics::{rel_error, rel_error_real, CMatrix, C64};
use hdt::phantom::{
    add_noise_slice, apply_phase, contrast_image, render_tissue, simulate_coils, simulate_multi_te, NoiseModel,
    PhantomSpec, PhaseSpec, TissueMaps,
};
use hdt::recon::{alternate, fit_t2, intensity_scale, normalized, t2_error, Priors, ReconConfig, ReconState, T2Fit};
use hdt::series::ImageSeries;
use hdt::subspace::{estimate_basis, navigator, sos_reference, SolveOptions};
use hdt::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, Variant};

/// Independent stream seeds derived from the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream.wrapping_mul(0xbf58_476d_1ce4_e5b9).rotate_left(17)
}

const MASK_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const PHASE_STREAM: u64 = 3;
const INIT_STREAM: u64 = 4;
const MIX_STREAM: u64 = 5;
const TRAIN_STREAM: u64 = 6;

/// A simulated multi-echo acquisition together with its ground truth.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// Complex echo images `[T, H, W]`.
    pub truth: ImageSeries,
    pub tissue: TissueMaps,
    pub echo_times: Vec<f64>,
    pub sensitivities: Vec<Vec<C64>>,
    pub mask: SamplingMask,
    pub kspace: KSpace,
    /// Coil-combined images of the navigator band.
    pub navigator: ImageSeries,
}

impl Dataset {
    pub fn acquisition(&self) -> Result<Acquisition> {
        let enc = Encoding::new(self.mask.clone(), self.sensitivities.clone())?;
        Acquisition::new(enc, self.kspace.clone(), self.echo_times.clone())
    }
}

pub fn phantom_spec(size: usize, subject: u64) -> PhantomSpec {
    if subject == 0 {
        PhantomSpec::brain(size, size)
    } else {
        PhantomSpec::subject(size, size, subject)
    }
}

/// Renders the phantom, applies smooth phase, encodes and adds noise.
pub fn simulate(cfg: &RunConfig) -> Result<Dataset> {
    let a = &cfg.acquisition;
    let size = cfg.phantom.size;
    let tissue = render_tissue(&phantom_spec(size, cfg.phantom.subject))?;
    let tes = cfg.echo_times();
    let te_max = *tes.last().expect("at least two echoes");
    let phase = PhaseSpec::random(derive_seed(cfg.seed, PHASE_STREAM), a.phase_gradient, te_max, a.phase_drift);
    let truth = apply_phase(&simulate_multi_te(&tissue, &tes)?, &phase, &tes)?;
    let sensitivities = simulate_coils(size, size, a.coils, false)?;
    let mask = make_mask(
        size,
        size,
        tes.len(),
        &MaskOptions {
            acceleration: a.af,
            center_all: a.center_lines,
            center_first: a.center_lines,
            shared: false,
            seed: derive_seed(cfg.seed, MASK_STREAM),
        },
    )?;
    let enc = Encoding::new(mask.clone(), sensitivities.clone())?;
    let clean = enc.forward(&truth)?;
    let rms = clean.norm() / (clean.data().len() as f64).sqrt();
    let noisy = add_noise_slice(
        clean.data(),
        NoiseModel {
            sigma: a.noise_sigma * rms,
            seed: derive_seed(cfg.seed, NOISE_STREAM),
        },
    )?;
    let kspace = clean.with_data(noisy)?;
    let acq = Acquisition::new(enc, kspace.clone(), tes.clone())?;
    let nav = navigator(&acq, a.navigator_lines)?;
    Ok(Dataset {
        truth,
        tissue,
        echo_times: tes,
        sensitivities,
        mask,
        kspace,
        navigator: nav,
    })
}

/// `Aᴴy` divided by the coil sum of squares: the truth itself when the data
/// are fully sampled and noiseless.
pub fn combined_adjoint(acq: &Acquisition) -> Result<ImageSeries> {
    let mut x = acq.encoding.adjoint(&acq.kspace)?;
    let sens = acq.encoding.sensitivities();
    let n = x.voxels();
    let sos: Vec<f64> = (0..n).map(|i| sens.iter().map(|s| s[i].norm_sqr()).sum()).collect();
    for t in 0..x.frames() {
        for (z, &s) in x.frame_mut(t).iter_mut().zip(&sos) {
            *z = if s > 0.0 { *z / s } else { C64::new(0.0, 0.0) };
        }
    }
    Ok(x)
}

/// Magnitude contrast images of the corpus subjects, each subject scaled by
/// the intensity rule applied to its first echo.
pub fn corpus(cfg: &RunConfig) -> Result<Vec<Vec<f64>>> {
    let p = &cfg.phantom;
    let tes = cfg.echo_times();
    let (first, last) = (tes[0], *tes.last().expect("echoes"));
    let k = p.corpus_echoes.max(1);
    let mut out = Vec::with_capacity(p.corpus_subjects * k);
    for i in 0..p.corpus_subjects {
        let tissue = render_tissue(&PhantomSpec::subject(p.size, p.size, p.corpus_seed + i as u64))?;
        let scale = intensity_scale(&contrast_image(&tissue, first));
        for j in 0..k {
            let te = if k == 1 { first } else { first + (last - first) * j as f64 / (k - 1) as f64 };
            out.push(contrast_image(&tissue, te).iter().map(|v| v / scale).collect());
        }
    }
    Ok(out)
}

pub fn generator_config(cfg: &RunConfig) -> GeneratorConfig {
    GeneratorConfig::new(cfg.phantom.size, cfg.generator.d_lat, cfg.generator.base, OutputKind::Magnitude)
}

pub fn train_config(cfg: &RunConfig) -> TrainConfig {
    let t = &cfg.train;
    TrainConfig {
        epochs: t.epochs,
        inner_steps: t.inner_steps,
        batch: t.batch,
        lr_params: t.lr_params,
        lr_latent: t.lr_latent,
        seed: derive_seed(cfg.seed, TRAIN_STREAM),
    }
}

/// Pretrains the magnitude generator on `images`.
pub fn pretrain(cfg: &RunConfig, images: &[Vec<f64>]) -> Result<(Generator, TrainLog)> {
    let mut g = Generator::new(generator_config(cfg), cfg.seed)?;
    let log = train(&mut g, images, &train_config(cfg))?;
    Ok((g, log))
}

pub fn ilo_config(cfg: &RunConfig, blocks: usize) -> IloConfig {
    let s = &cfg.ilo;
    let mut ilo = IloConfig::for_blocks(blocks).with_budget(s.steps_per_stage, s.refine_steps);
    ilo.lr_latent = s.lr;
    ilo.mu = s.mu;
    ilo
}

pub fn adapt_config(cfg: &RunConfig, blocks: usize) -> AdaptConfig {
    let a = &cfg.adapt;
    let mut c = AdaptConfig::for_blocks(blocks);
    c.ilo = c.ilo.with_budget(a.steps_per_stage, a.refine_steps);
    c.passes = a.passes;
    c.param_steps = a.param_steps;
    c.lr_params = a.lr_params;
    c
}

/// Normalised acquisition, its scale factor, and the temporal basis
/// estimated from the navigator band.
pub struct Prepared {
    pub acq: Acquisition,
    pub factor: f64,
    pub basis: CMatrix,
}

pub fn prepare(cfg: &RunConfig, data: &Dataset) -> Result<Prepared> {
    let (acq, factor) = normalized(&data.acquisition()?)?;
    let nav = navigator(&acq, cfg.acquisition.navigator_lines)?;
    let basis = estimate_basis(&nav, cfg.recon.rank)?;
    Ok(Prepared { acq, factor, basis })
}

/// Sum-of-squares reference from the sparsity-regularised subspace
/// reconstruction, mapped into the generator's intensity range.
pub fn sos_adaptation_reference(cfg: &RunConfig, prep: &Prepared) -> Result<Vec<f64>> {
    let mut rc = recon_config(cfg, Variant::Sparsity, 0)?;
    rc.lambda2 = cfg.adapt.reference_lambda2;
    rc.outer_iters = 1;
    let state = alternate(&prep.acq, &prep.basis, None, &rc, None, None)?;
    let sos = sos_reference(&state.series()?);
    let s = intensity_scale(&sos);
    Ok(sos.iter().map(|v| v / s).collect())
}

pub fn adapt(cfg: &RunConfig, pretrained: &Generator, reference: &[f64]) -> Result<Adaptation> {
    let init = mean_latents(pretrained, 64, derive_seed(cfg.seed, INIT_STREAM))?;
    adapt_network(pretrained, reference, &init, cfg.adapt.alpha, &adapt_config(cfg, pretrained.blocks()))
}

/// Held-out representation check: echo `echo` of the ground truth,
/// scaled by the intensity rule on the first echo.
pub fn held_out_image(data: &Dataset, echo: usize) -> Vec<f64> {
    let s = intensity_scale(&data.truth.magnitudes(0));
    data.truth.magnitudes(echo).iter().map(|v| v / s).collect()
}

/// Relative error of a latent-only fit of `target`.
pub fn latent_fit_error(cfg: &RunConfig, g: &Generator, target: &[f64], init: &LatentSet) -> Result<f64> {
    let inv = ilo_invert(g, target, init, &ilo_config(cfg, g.blocks()), None)?;
    Ok(rel_error_real(&g.render(&inv.latents)?, target))
}

/// Reconstruction settings of a variant.
pub fn recon_config(cfg: &RunConfig, variant: Variant, blocks: usize) -> Result<ReconConfig> {
    let r = &cfg.recon;
    let frames = cfg.acquisition.echoes;
    let d_lat = cfg.generator.d_lat;
    let mut rc = ReconConfig::contrast(frames, blocks.max(2), d_lat);
    rc.outer_iters = r.outer_iters;
    let start = blocks.saturating_sub(1).max(1);
    rc.ilo = IloConfig::starting_at(start).with_budget(r.steps_per_stage, r.refine_steps);
    rc.init_ilo = IloConfig::starting_at(start).with_budget(r.init_steps_per_stage, r.init_refine_steps);
    let radius = if r.ball_radius < 0.0 {
        BallConstraint::default_radius(d_lat)
    } else {
        r.ball_radius
    };
    rc.ball_radii = std::iter::once(f64::INFINITY).chain(std::iter::repeat(radius)).take(frames).collect();
    rc.cold_start = r.cold_start;
    rc.solve = SolveOptions {
        irls_iters: r.irls_iters,
        cg: hdt::numerics::CgOptions {
            max_iter: r.cg_iters,
            ..SolveOptions::default().cg
        },
        ..SolveOptions::default()
    };
    let (lambda1, lambda2, init) = match variant {
        Variant::Subspace => (vec![0.0; frames], 0.0, None),
        Variant::Sparsity => (vec![0.0; frames], r.lambda2_sparsity, None),
        Variant::Gan => (cfg.lambda1_schedule(), 0.0, Some(r.lambda2_sparsity)),
        Variant::Proposed => (cfg.lambda1_schedule(), r.lambda2, Some(r.lambda2_sparsity)),
    };
    rc.lambda1 = lambda1;
    rc.lambda2 = lambda2;
    rc.init_lambda2 = init;
    Ok(rc)
}

/// Output of one reconstruction run, rescaled to the data's units.
pub struct ReconRun {
    pub variant: Variant,
    pub state: ReconState,
    pub series: ImageSeries,
}

pub fn reconstruct(
    cfg: &RunConfig,
    prep: &Prepared,
    variant: Variant,
    generator: Option<&Generator>,
    truth: Option<&ImageSeries>,
) -> Result<ReconRun> {
    let blocks = generator.map_or(2, Generator::blocks);
    let rc = recon_config(cfg, variant, blocks)?;
    let priors = if variant.uses_generator() {
        let g = generator.ok_or_else(|| Error::Usage(format!("variant {variant} needs a generator checkpoint")))?;
        Some(Priors {
            magnitude: g,
            phase: None,
        })
    } else {
        None
    };
    let scaled_truth = truth.map(|t| t.scaled(1.0 / prep.factor));
    let state = alternate(&prep.acq, &prep.basis, priors, &rc, None, scaled_truth.as_ref())?;
    let series = state.series()?.scaled(prep.factor);
    Ok(ReconRun { variant, state, series })
}

/// Error metrics of one reconstruction against the ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub rel_l2: f64,
    pub per_echo: Vec<f64>,
    /// Mean `|T̂2 − T2| / T2` over the support.
    pub t2_error: f64,
    pub t2_pixels: usize,
}

pub fn metrics(x: &ImageSeries, truth: &ImageSeries, tissue: &TissueMaps, tes: &[f64]) -> Result<(Metrics, T2Fit)> {
    truth.check_shape(x)?;
    let per_echo = (0..x.frames()).map(|t| rel_error(x.frame(t), truth.frame(t))).collect();
    let fit = fit_t2(x, tes, &tissue.support_mask)?;
    let (t2, count) = t2_error(&fit, &tissue.t2_map, &tissue.support_mask);
    Ok((
        Metrics {
            rel_l2: rel_error(x.data(), truth.data()),
            per_echo,
            t2_error: t2,
            t2_pixels: count,
        },
        fit,
    ))
}

/// `‖G(w_a with blocks from w_b) − G(w_a)‖_F` for every single block.
pub fn style_mix_deltas(g: &Generator, pairs: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, MIX_STREAM));
    let mut out = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let wa = g.latents_from_code(&g.sample_code(&mut rng))?;
        let wb = g.latents_from_code(&g.sample_code(&mut rng))?;
        let base = g.render(&wa)?;
        let mut row = Vec::with_capacity(g.blocks());
        for b in 1..=g.blocks() {
            let mixed = style_mix(g, &wa, &wb, &[b])?;
            let d: f64 = mixed.iter().zip(&base).map(|(a, c)| (a - c).powi(2)).sum();
            row.push(d.sqrt());
        }
        out.push(row);
    }
    Ok(out)
}

/// Grid of style-mixed images: row `i` takes source A `i`, column `j`
/// swaps the blocks of group `j` from source B `i`.
pub fn style_mix_grid(
    g: &Generator,
    sources: usize,
    groups: &[Vec<usize>],
    seed: u64,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, MIX_STREAM ^ 0xff));
    let mut rows = Vec::with_capacity(sources);
    for _ in 0..sources {
        let wa = g.latents_from_code(&g.sample_code(&mut rng))?;
        let wb = g.latents_from_code(&g.sample_code(&mut rng))?;
        let mut row = Vec::with_capacity(groups.len() + 2);
        row.push(g.render(&wa)?);
        row.push(g.render(&wb)?);
        for grp in groups {
            row.push(style_mix(g, &wa, &wb, grp)?);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Smooth phase bounded by `limit` radians on the grid, for the
/// coefficient-mode series and the phase network's corpus.
pub fn bounded_phase(seed: u64, size: usize, limit: f64) -> PhaseSpec {
    let mut p = PhaseSpec::random(seed, 1.5, 1.0, 0.0);
    let peak = p.map(size, size, 0.0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > limit {
        let s = limit / peak;
        p.coeffs.iter_mut().for_each(|c| *c *= s);
        p.drift.iter_mut().for_each(|c| *c *= s);
    }
    p
}

const PHASE_LIMIT: f64 = 2.5;

/// Noisy, fully sampled multi-coil acquisition of an exact low-rank series
/// built from coefficient maps.
pub struct CoefficientData {
    pub acq: Acquisition,
    pub truth: ImageSeries,
    pub u_true: CMatrix,
    pub v_true: CMatrix,
}

pub fn coefficient_data(cfg: &RunConfig) -> Result<CoefficientData> {
    let c = &cfg.coefficient;
    let tissue = render_tissue(&phantom_spec(c.size, cfg.phantom.subject))?;
    let phase = bounded_phase(derive_seed(cfg.seed, PHASE_STREAM), c.size, PHASE_LIMIT);
    let cs = hdt::phantom::simulate_coefficient_series(&tissue, c.rank, c.frames, Some(&phase))?;
    let mask = SamplingMask::fully_sampled(c.size, c.size, c.frames);
    let enc = Encoding::new(mask, simulate_coils(c.size, c.size, c.coils, false)?)?;
    let clean = enc.forward(&cs.series)?;
    let rms = clean.norm() / (clean.data().len() as f64).sqrt();
    let noisy = add_noise_slice(
        clean.data(),
        NoiseModel {
            sigma: c.noise_sigma * rms,
            seed: derive_seed(cfg.seed, NOISE_STREAM),
        },
    )?;
    let times = (1..=c.frames).map(|t| t as f64).collect();
    let acq = Acquisition::new(enc, clean.with_data(noisy)?, times)?;
    Ok(CoefficientData {
        acq,
        truth: cs.series,
        u_true: cs.u_true,
        v_true: cs.v_true,
    })
}

/// Corpora of the coefficient-mode priors: per-rank coefficient magnitudes
/// (each scaled by the intensity rule) and bounded smooth phase maps.
pub fn coefficient_corpora(cfg: &RunConfig) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let c = &cfg.coefficient;
    let mut mags = Vec::new();
    let mut phases = Vec::new();
    for i in 0..c.corpus_subjects {
        let seed = cfg.phantom.corpus_seed + i as u64;
        let tissue = render_tissue(&PhantomSpec::subject(c.size, c.size, seed))?;
        let cs = hdt::phantom::simulate_coefficient_series(&tissue, c.rank, c.frames, None)?;
        for r in 0..c.rank {
            let col: Vec<f64> = (0..cs.u_true.rows()).map(|k| cs.u_true.get(k, r).norm()).collect();
            let s = intensity_scale(&col);
            mags.push(col.iter().map(|v| v / s).collect());
        }
        let p = bounded_phase(derive_seed(seed, PHASE_STREAM), c.size, PHASE_LIMIT);
        phases.push(p.map(c.size, c.size, 0.0));
    }
    Ok((mags, phases))
}

/// Trains the magnitude and phase networks of coefficient mode.
pub fn train_coefficient_priors(cfg: &RunConfig) -> Result<(Generator, Generator)> {
    let c = &cfg.coefficient;
    let (mags, phases) = coefficient_corpora(cfg)?;
    let mut tc = train_config(cfg);
    tc.epochs = c.epochs;
    let d = cfg.generator.d_lat;
    let mut gm = Generator::new(GeneratorConfig::new(c.size, d, cfg.generator.base, OutputKind::Magnitude), cfg.seed)?;
    train(&mut gm, &mags, &tc)?;
    let mut gp = Generator::new(GeneratorConfig::new(c.size, d, cfg.generator.base, OutputKind::Phase), cfg.seed + 1)?;
    train(&mut gp, &phases, &tc)?;
    Ok((gm, gp))
}

/// Echo time of the anatomical image the magnitude prior adapts to in
/// coefficient mode; none of the coefficient maps uses this contrast.
pub const COEFFICIENT_REFERENCE_TE: f64 = 80.0;

/// Adapts the magnitude prior to an anatomical image of the subject.
pub fn adapt_coefficient_prior(cfg: &RunConfig, gm: &Generator) -> Result<Adaptation> {
    let tissue = render_tissue(&phantom_spec(cfg.coefficient.size, cfg.phantom.subject))?;
    let img = contrast_image(&tissue, COEFFICIENT_REFERENCE_TE);
    let s = intensity_scale(&img);
    let reference: Vec<f64> = img.iter().map(|v| v / s).collect();
    adapt(cfg, gm, &reference)
}

/// Coefficient-mode comparison at matched data consistency.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientComparison {
    pub proposed_error: f64,
    pub baseline_error: f64,
    pub proposed_data_loss: f64,
    pub baseline_data_loss: f64,
    /// Edge-penalty weight the baseline needed to match.
    pub baseline_lambda2: f64,
}

/// Runs the proposed coefficient-mode reconstruction with the true basis,
/// then tunes the edge-weighted baseline by bisection on `log λ₂` until its
/// data loss matches.
pub fn coefficient_compare(cfg: &RunConfig, data: &CoefficientData, gm: &Generator, gp: &Generator) -> Result<CoefficientComparison> {
    let c = &cfg.coefficient;
    let (acq, factor) = normalized(&data.acq)?;
    let truth = data.truth.scaled(1.0 / factor);
    let mut rc = ReconConfig::coefficient(c.rank, gm.blocks(), gm.d_lat());
    rc.lambda1 = vec![c.lambda1; c.rank];
    rc.lambda2 = c.lambda2;
    rc.init_lambda2 = Some(c.lambda2_baseline);
    rc.outer_iters = cfg.recon.outer_iters;
    let state = alternate(
        &acq,
        &data.v_true,
        Some(Priors {
            magnitude: gm,
            phase: Some(gp),
        }),
        &rc,
        None,
        Some(&truth),
    )?;
    let proposed_error = rel_error(state.series()?.data(), truth.data());
    let target = *state.history.data_loss.last().expect("outer_iters >= 1");
    let weights = state.edge_weights.clone().expect("coefficient mode sets edge weights");
    let baseline = |l2: f64| -> Result<(f64, f64)> {
        let reg = hdt::subspace::Regularizer::EdgeTikhonov {
            lambda2: l2,
            weights: weights.clone(),
        };
        let (model, report) = hdt::subspace::subspace_recon(&acq, &data.v_true, &reg, None, &rc.solve)?;
        let x = model.series(acq.encoding.height(), acq.encoding.width())?;
        Ok((*report.data_loss.last().expect("non-empty"), rel_error(x.data(), truth.data())))
    };
    // data loss grows with λ₂; bracket, then bisect in log space
    let (mut lo, mut hi) = (1e-6f64, 1e3f64);
    let mut best = (c.lambda2_baseline, baseline(c.lambda2_baseline)?);
    for _ in 0..40 {
        let mid = (lo * hi).sqrt();
        let (loss, err) = baseline(mid)?;
        if (loss - target).abs() < (best.1 .0 - target).abs() {
            best = (mid, (loss, err));
        }
        if loss < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo < 1.0 + 1e-6 {
            break;
        }
    }
    Ok(CoefficientComparison {
        proposed_error,
        baseline_error: best.1 .1,
        proposed_data_loss: target,
        baseline_data_loss: best.1 .0,
        baseline_lambda2: best.0,
    })
}
