//! Integrated reconstruction: alternating minimisation over generator
//! latents (Subproblem I) and subspace coefficients (Subproblem II).
//!
//! The joint objective is
//!
//! ```text
//! ‖A(UV) − y‖² + Σ_t λ₁,t ‖(UV)_t − s·Φ_t ⊙ G(w_t)‖² + λ₂ R(UV)
//! ```
//!
//! in contrast mode, where `G` represents magnitudes, `Φ_t` are phase maps
//! frozen from the initial reconstruction and `s` maps generator intensities
//! to data intensities. In coefficient mode the prior acts on the columns of
//! `U` instead: `Σ_r λ₁,r ‖U_r − s_r·G(w_r) e^{iG_φ(w_φ,r)}‖²`.
//!
//! Regularisation weights are meant for data normalised with
//! [`normalized`].

use std::fmt::Write as _;

use crate::encoding::Acquisition;
use crate::error::{Error, Result};
use crate::generator::{Generator, LatentSet};
use crate::inversion::{latent_init_dc, mean_latents, BallConstraint, Ilo, IloConfig};
use crate::numerics::{rel_error, CMatrix, C64};
use crate::series::ImageSeries;
use crate::subspace::{
    adjoint_spectral_norm, extract_phase, sos_reference, subspace_recon, EdgeWeights, Prior, Problem, Regularizer,
    SolveOptions, SolveReport, SubspaceOperator,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Prior on each echo image; `λ₁` has one entry per frame.
    Contrast,
    /// Prior on each coefficient map; `λ₁` has one entry per rank.
    Coefficient,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconConfig {
    pub mode: Mode,
    pub lambda1: Vec<f64>,
    pub lambda2: f64,
    /// `λ₂` of the initial reconstruction; `None` reuses `lambda2`.
    pub init_lambda2: Option<f64>,
    pub outer_iters: usize,
    /// Inversion settings of Subproblem I.
    pub ilo: IloConfig,
    /// Inversion settings of the k-space latent initialisation.
    pub init_ilo: IloConfig,
    /// ℓ₁-ball radius linking frame `t` to frame `t−1` (contrast mode);
    /// entry 0 bounds the first frame around its own starting latents.
    pub ball_radii: Vec<f64>,
    /// 1-based latent blocks held at their current styles.
    pub freeze_blocks: Vec<usize>,
    /// Restart Subproblem I from the initial latents every iteration.
    pub cold_start: bool,
    /// Magnitude/phase alternations per coefficient (coefficient mode).
    pub magphase_rounds: usize,
    /// Edge weights of the coefficient-mode penalty; `None` derives them
    /// from the initial adjoint images.
    pub edge_weights: Option<EdgeWeights>,
    /// Relative magnitude below which extracted phase is set to zero.
    pub phase_eps: f64,
    pub solve: SolveOptions,
}

impl ReconConfig {
    /// Contrast-mode defaults for `frames` echoes and a generator with
    /// `blocks` blocks.
    pub fn contrast(frames: usize, blocks: usize, d_lat: usize) -> Self {
        let start = blocks.saturating_sub(1);
        Self {
            mode: Mode::Contrast,
            lambda1: vec![0.04; frames],
            lambda2: 2e-7,
            init_lambda2: None,
            outer_iters: 5,
            ilo: IloConfig::starting_at(start).with_budget(15, 40),
            init_ilo: IloConfig::starting_at(start).with_budget(40, 80),
            ball_radii: std::iter::once(f64::INFINITY)
                .chain(std::iter::repeat(BallConstraint::default_radius(d_lat)))
                .take(frames)
                .collect(),
            freeze_blocks: Vec::new(),
            cold_start: false,
            magphase_rounds: 2,
            edge_weights: None,
            phase_eps: 1e-3,
            solve: SolveOptions::default(),
        }
    }

    /// Coefficient-mode defaults for rank `rank`.
    pub fn coefficient(rank: usize, blocks: usize, d_lat: usize) -> Self {
        let start = blocks.saturating_sub(2).max(1);
        Self {
            mode: Mode::Coefficient,
            lambda1: vec![1.6; rank],
            lambda2: 0.3,
            init_lambda2: Some(0.6),
            outer_iters: 5,
            ilo: IloConfig::starting_at(start).with_budget(15, 40),
            init_ilo: IloConfig::starting_at(start).with_budget(40, 80),
            ball_radii: vec![BallConstraint::default_radius(d_lat); rank],
            freeze_blocks: Vec::new(),
            cold_start: false,
            magphase_rounds: 2,
            edge_weights: None,
            phase_eps: 1e-3,
            solve: SolveOptions::default(),
        }
    }

    fn gan_active(&self) -> bool {
        self.lambda1.iter().any(|&l| l != 0.0)
    }

    fn validate(&self, frames: usize, rank: usize) -> Result<()> {
        let want = match self.mode {
            Mode::Contrast => frames,
            Mode::Coefficient => rank,
        };
        if self.lambda1.len() != want {
            return Err(Error::Usage(format!("{} λ₁ values, expected {want}", self.lambda1.len())));
        }
        if self.mode == Mode::Contrast && self.ball_radii.len() != frames {
            return Err(Error::Usage(format!("{} ball radii, expected {frames}", self.ball_radii.len())));
        }
        let lambdas = self.lambda1.iter().chain([&self.lambda2]).chain(self.init_lambda2.as_ref());
        if lambdas.clone().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Usage("regularisation weights must be finite and non-negative".into()));
        }
        if self.ball_radii.iter().any(|r| r.is_nan() || *r < 0.0) {
            return Err(Error::Usage("ball radii must be non-negative".into()));
        }
        if self.outer_iters == 0 {
            return Err(Error::Usage("outer_iters must be at least 1".into()));
        }
        Ok(())
    }

    fn regularizer(&self, lambda2: f64, weights: Option<&EdgeWeights>, eps: Option<f64>) -> Regularizer {
        match self.mode {
            Mode::Contrast => Regularizer::JointSparsity {
                lambda2,
                irls_eps: eps,
            },
            Mode::Coefficient => Regularizer::EdgeTikhonov {
                lambda2,
                weights: weights.expect("coefficient mode has weights").clone(),
            },
        }
    }
}

/// Generator priors: magnitude network and, in coefficient mode, an
/// optional phase network.
#[derive(Clone, Copy)]
pub struct Priors<'a> {
    pub magnitude: &'a Generator,
    pub phase: Option<&'a Generator>,
}

/// Per-iteration records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub data_loss: Vec<f64>,
    pub objective: Vec<f64>,
    /// Relative ℓ₂ error of `UV` against the supplied truth.
    pub rel_error: Vec<f64>,
}

impl History {
    pub fn len(&self) -> usize {
        self.data_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data_loss.is_empty()
    }

    /// `iteration,data_loss,objective,rel_error`, one row per iteration
    /// (1-based); `rel_error` is empty without truth.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,data_loss,objective,rel_error\n");
        for i in 0..self.len() {
            let err = self.rel_error.get(i).map_or(String::new(), |e| format!("{e:e}"));
            writeln!(s, "{},{:e},{:e},{}", i + 1, self.data_loss[i], self.objective[i], err).expect("string write");
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct ReconState {
    pub mode: Mode,
    pub height: usize,
    pub width: usize,
    /// `N × R` coefficients.
    pub u: CMatrix,
    /// `R × T` basis.
    pub v: CMatrix,
    /// Magnitude latents, one set per frame (contrast) or rank (coefficient).
    pub latents: Vec<LatentSet>,
    /// Phase-network latents per rank (coefficient mode with a phase net).
    pub phase_latents: Vec<LatentSet>,
    /// Unit-modulus phase maps per frame (contrast mode).
    pub phase_maps: Option<ImageSeries>,
    /// Generator-to-data intensity factors: one (contrast) or one per rank.
    pub scales: Vec<f64>,
    /// ε of the smoothed sparsity term, fixed from the initial solve.
    pub irls_eps: Option<f64>,
    pub edge_weights: Option<EdgeWeights>,
    pub history: History,
    /// Non-fatal solver events, in order.
    pub warnings: Vec<String>,
    init_latents: Vec<LatentSet>,
    init_phase_latents: Vec<LatentSet>,
}

impl ReconState {
    pub fn series(&self) -> Result<ImageSeries> {
        ImageSeries::from_casorati(self.height, self.width, &self.u.matmul(&self.v)?)
    }

    /// Current prior targets: `s·Φ_t ⊙ G(w_t)` per frame, or
    /// `s_r·G(w_r) e^{iG_φ}` per rank.
    pub fn prior_targets(&self, priors: &Priors<'_>) -> Result<PriorTargets> {
        match self.mode {
            Mode::Contrast => {
                let phase = self.phase_maps.as_ref().expect("contrast state has phase maps");
                let frames: Result<Vec<Vec<C64>>> = self
                    .latents
                    .iter()
                    .enumerate()
                    .map(|(t, w)| {
                        let m = priors.magnitude.render(w)?;
                        Ok(m.iter().zip(phase.frame(t)).map(|(&a, p)| p * (a * self.scales[0])).collect())
                    })
                    .collect();
                Ok(PriorTargets::Frames(ImageSeries::from_frames(self.height, self.width, &frames?)?))
            }
            Mode::Coefficient => {
                let n = self.height * self.width;
                let mut cols = Vec::with_capacity(self.latents.len());
                for (r, w) in self.latents.iter().enumerate() {
                    let m = priors.magnitude.render(w)?;
                    let ph = match (priors.phase, self.phase_latents.get(r)) {
                        (Some(gp), Some(wp)) => gp.render(wp)?,
                        _ => vec![0.0; n],
                    };
                    cols.push(
                        m.iter()
                            .zip(&ph)
                            .map(|(&a, &p)| C64::from_polar(a * self.scales[r], p))
                            .collect::<Vec<_>>(),
                    );
                }
                Ok(PriorTargets::Coefficients(CMatrix::from_fn(n, cols.len(), |i, r| cols[r][i])))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum PriorTargets {
    Frames(ImageSeries),
    Coefficients(CMatrix),
}

/// Copy of `acq` scaled so the Casorati matrix of `Aᴴy` has unit spectral
/// norm, and the factor that was divided out.
pub fn normalized(acq: &Acquisition) -> Result<(Acquisition, f64)> {
    let s = adjoint_spectral_norm(acq)?;
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Data("k-space has no energy to normalise".into()));
    }
    Ok((acq.scaled(1.0 / s), s))
}

/// Maps magnitudes to the generator's output range: the 99th percentile
/// lands at 0.9.
pub fn intensity_scale(magnitudes: &[f64]) -> f64 {
    let mut v: Vec<f64> = magnitudes.iter().copied().filter(|m| m.is_finite()).collect();
    if v.is_empty() {
        return 1.0;
    }
    v.sort_by(f64::total_cmp);
    let q = v[((v.len() - 1) as f64 * 0.99).round() as usize];
    if q > 0.0 {
        q / 0.9
    } else {
        1.0
    }
}

fn column_magnitudes(u: &CMatrix, r: usize) -> Vec<f64> {
    (0..u.rows()).map(|i| u.get(i, r).norm()).collect()
}

/// Starting point: a regularised subspace reconstruction, phase maps and
/// intensity scales.
fn initial_state(
    acq: &Acquisition,
    v: &CMatrix,
    cfg: &ReconConfig,
    init_u: Option<&CMatrix>,
) -> Result<(ReconState, SolveReport)> {
    let enc = &acq.encoding;
    let (h, w) = (enc.height(), enc.width());
    let edge_weights = match cfg.mode {
        Mode::Contrast => None,
        Mode::Coefficient => Some(match &cfg.edge_weights {
            Some(wts) => wts.clone(),
            None => EdgeWeights::from_reference(&sos_reference(&enc.adjoint(&acq.kspace)?), h, w)?,
        }),
    };
    let reg0 = cfg.regularizer(cfg.init_lambda2.unwrap_or(cfg.lambda2), edge_weights.as_ref(), None);
    let (model, report) = subspace_recon(acq, v, &reg0, init_u, &cfg.solve)?;
    let mut warnings = Vec::new();
    if !report.cg_converged {
        warnings.push("initial solve: CG hit its iteration cap".to_string());
    }
    let u = model.u.clone();
    let (phase_maps, scales) = match cfg.mode {
        Mode::Contrast => {
            let x = ImageSeries::from_casorati(h, w, &u.matmul(v)?)?;
            let s = intensity_scale(&x.magnitudes(0));
            (Some(extract_phase(&x, cfg.phase_eps)), vec![s])
        }
        Mode::Coefficient => (None, (0..u.cols()).map(|r| intensity_scale(&column_magnitudes(&u, r))).collect()),
    };
    let state = ReconState {
        mode: cfg.mode,
        height: h,
        width: w,
        u,
        v: v.clone(),
        latents: Vec::new(),
        phase_latents: Vec::new(),
        phase_maps,
        scales,
        irls_eps: report.irls_eps,
        edge_weights,
        history: History::default(),
        warnings,
        init_latents: Vec::new(),
        init_phase_latents: Vec::new(),
    };
    Ok((state, report))
}

/// Contrast-mode latent initialisation: each frame is fitted to its own
/// k-space, starting from and constrained around the previous frame.
fn initial_latents(state: &mut ReconState, acq: &Acquisition, g: &Generator, cfg: &ReconConfig) -> Result<()> {
    let phase = state.phase_maps.clone().expect("contrast state has phase maps");
    let s = state.scales[0];
    let mut prev = mean_latents(g, 64, 0)?;
    let mut out = Vec::with_capacity(acq.encoding.frames());
    for t in 0..acq.encoding.frames() {
        let ball = chain_ball(&prev, cfg.ball_radii[t])?;
        let scaled_phase: Vec<C64> = phase.frame(t).iter().map(|p| p * s).collect();
        let w = match latent_init_dc(g, acq, &scaled_phase, t, &prev, &cfg.init_ilo, ball.as_ref()) {
            Ok(inv) => inv.latents,
            Err(Error::Breakdown { message, best }) => {
                state.warnings.push(format!("latent init, frame {t}: {message}"));
                *best
            }
            Err(e) => return Err(e),
        };
        prev = w.clone();
        out.push(w);
    }
    state.init_latents = out.clone();
    state.latents = out;
    Ok(())
}

fn chain_ball(center: &LatentSet, radius: f64) -> Result<Option<BallConstraint>> {
    if radius.is_finite() {
        Ok(Some(BallConstraint::uniform(center.clone(), radius)?))
    } else {
        Ok(None)
    }
}

/// Subproblem I: refit the latents to the current coefficients.
pub fn solve_subproblem_i(state: &mut ReconState, priors: &Priors<'_>, cfg: &ReconConfig) -> Result<()> {
    match state.mode {
        Mode::Contrast => contrast_latents(state, priors.magnitude, cfg),
        Mode::Coefficient => coefficient_latents(state, priors, cfg),
    }
}

fn contrast_latents(state: &mut ReconState, g: &Generator, cfg: &ReconConfig) -> Result<()> {
    let x = state.series()?;
    let s = state.scales[0];
    let starts = if cfg.cold_start {
        state.init_latents.clone()
    } else {
        state.latents.clone()
    };
    for t in 0..x.frames() {
        let target: Vec<f64> = x.frame(t).iter().map(|z| z.norm() / s).collect();
        let center = if t == 0 { &starts[0] } else { &state.latents[t - 1] };
        let ball = chain_ball(center, cfg.ball_radii[t])?;
        let ilo = Ilo::new(g, &cfg.ilo)?.with_ball(ball.as_ref())?.freeze(&cfg.freeze_blocks)?;
        let mut init = starts[t].clone();
        if let Some(b) = &ball {
            b.project(&mut init);
        }
        match ilo.run(&init, crate::inversion::squared_error(&target)) {
            Ok(inv) => state.latents[t] = inv.latents,
            Err(e) if e.is_numerical() => state.warnings.push(format!("subproblem I, frame {t}: {e}")),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn coefficient_latents(state: &mut ReconState, priors: &Priors<'_>, cfg: &ReconConfig) -> Result<()> {
    let g = priors.magnitude;
    let n = state.height * state.width;
    for r in 0..state.u.cols() {
        let s = state.scales[r];
        let target: Vec<C64> = (0..n).map(|i| state.u.get(i, r) / s).collect();
        let (mut wm, mut wp) = if cfg.cold_start {
            (state.init_latents[r].clone(), state.init_phase_latents.get(r).cloned())
        } else {
            (state.latents[r].clone(), state.phase_latents.get(r).cloned())
        };
        let outcome = (|| -> Result<()> {
            for _ in 0..cfg.magphase_rounds.max(1) {
                let phase = match (priors.phase, &wp) {
                    (Some(gp), Some(w)) => gp.render(w)?,
                    _ => vec![0.0; n],
                };
                // magnitude step: ‖U − m e^{iφ}‖² has gradient 2(m − Re(U e^{−iφ}))
                let proj: Vec<f64> = target.iter().zip(&phase).map(|(u, &p)| (u * C64::from_polar(1.0, -p)).re).collect();
                let mag_loss = |m: &[f64]| -> Result<(f64, Vec<f64>)> {
                    let l = m
                        .iter()
                        .zip(&target)
                        .zip(&phase)
                        .map(|((&a, u), &p)| (u - C64::from_polar(a, p)).norm_sqr())
                        .sum();
                    Ok((l, m.iter().zip(&proj).map(|(a, b)| 2.0 * (a - b)).collect()))
                };
                wm = Ilo::new(g, &cfg.ilo)?.freeze(&cfg.freeze_blocks)?.run(&wm, mag_loss)?.latents;
                if let (Some(gp), Some(w)) = (priors.phase, wp.as_mut()) {
                    let mag = g.render(&wm)?;
                    // phase step: gradient 2m·Im(conj(U) e^{iφ})
                    let phase_loss = |ph: &[f64]| -> Result<(f64, Vec<f64>)> {
                        let mut l = 0.0;
                        let grad = ph
                            .iter()
                            .zip(&target)
                            .zip(&mag)
                            .map(|((&p, u), &m)| {
                                let e = C64::from_polar(1.0, p);
                                l += (u - e * m).norm_sqr();
                                2.0 * m * (u.conj() * e).im
                            })
                            .collect();
                        Ok((l, grad))
                    };
                    *w = Ilo::new(gp, &cfg.ilo)?.freeze(&cfg.freeze_blocks)?.run(w, phase_loss)?.latents;
                }
            }
            Ok(())
        })();
        match outcome {
            Ok(()) => {
                state.latents[r] = wm;
                if let Some(w) = wp {
                    state.phase_latents[r] = w;
                }
            }
            Err(e) if e.is_numerical() => state.warnings.push(format!("subproblem I, coefficient {r}: {e}")),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Subproblem II: coefficients given the current prior targets (`None`
/// when every `λ₁` vanishes).
pub fn solve_subproblem_ii(
    state: &mut ReconState,
    acq: &Acquisition,
    targets: Option<PriorTargets>,
    cfg: &ReconConfig,
) -> Result<SolveReport> {
    let op = SubspaceOperator::new(&acq.encoding, &state.v)?;
    let reg = cfg.regularizer(cfg.lambda2, state.edge_weights.as_ref(), state.irls_eps);
    let prior = targets.map(|t| match t {
        PriorTargets::Frames(series) => Prior::Frames {
            lambda: cfg.lambda1.clone(),
            targets: series,
        },
        PriorTargets::Coefficients(m) => Prior::Coefficients {
            lambda: cfg.lambda1.clone(),
            targets: m,
        },
    });
    let problem = Problem {
        op: &op,
        kspace: &acq.kspace,
        regularizer: &reg,
        prior: prior.as_ref(),
    };
    let report = problem.solve(Some(&state.u), &cfg.solve)?;
    if !report.cg_converged {
        state.warnings.push("subproblem II: CG hit its iteration cap".to_string());
    }
    state.u = report.u.clone();
    Ok(report)
}

/// Runs the alternating reconstruction.
///
/// `priors` may be omitted when every `λ₁` is zero; `truth` enables the
/// error history.
pub fn alternate(
    acq: &Acquisition,
    v: &CMatrix,
    priors: Option<Priors<'_>>,
    cfg: &ReconConfig,
    init_u: Option<&CMatrix>,
    truth: Option<&ImageSeries>,
) -> Result<ReconState> {
    let enc = &acq.encoding;
    cfg.validate(enc.frames(), v.rows())?;
    if v.cols() != enc.frames() {
        return Err(Error::Shape(format!("basis has {} frames, data has {}", v.cols(), enc.frames())));
    }
    let gan = cfg.gan_active();
    let priors = match priors {
        Some(p) => {
            if p.magnitude.size() != enc.height() || enc.height() != enc.width() {
                return Err(Error::Shape("generator size does not match the image grid".into()));
            }
            if let Some(gp) = p.phase {
                if gp.size() != p.magnitude.size() {
                    return Err(Error::Shape("phase and magnitude networks differ in size".into()));
                }
            }
            Some(p)
        }
        None if gan => return Err(Error::Usage("λ₁ > 0 needs a generator".into())),
        None => None,
    };
    if let Some(t) = truth {
        if t.frames() != enc.frames() || t.height() != enc.height() || t.width() != enc.width() {
            return Err(Error::Shape("truth does not match the acquisition".into()));
        }
    }
    let (mut state, initial) = initial_state(acq, v, cfg, init_u)?;
    if let (true, Some(p)) = (gan, priors.as_ref()) {
        match cfg.mode {
            Mode::Contrast => initial_latents(&mut state, acq, p.magnitude, cfg)?,
            Mode::Coefficient => {
                let r = v.rows();
                state.init_latents = vec![mean_latents(p.magnitude, 64, 0)?; r];
                state.latents = state.init_latents.clone();
                if let Some(gp) = p.phase {
                    state.init_phase_latents = vec![mean_latents(gp, 64, 1)?; r];
                    state.phase_latents = state.init_phase_latents.clone();
                }
                solve_subproblem_i(&mut state, p, cfg)?;
            }
        }
    }
    // Without prior terms every round poses the initial problem again.
    let same_problem = !gan && cfg.init_lambda2.is_none_or(|l| l == cfg.lambda2);
    for _ in 0..cfg.outer_iters {
        if same_problem {
            state.history.data_loss.push(*initial.data_loss.last().expect("non-empty"));
            state.history.objective.push(*initial.objective.last().expect("non-empty"));
            if let Some(t) = truth {
                state.history.rel_error.push(rel_error(state.series()?.data(), t.data()));
            }
            continue;
        }
        let targets = match (gan, priors.as_ref()) {
            (true, Some(p)) => Some(state.prior_targets(p)?),
            _ => None,
        };
        let report = solve_subproblem_ii(&mut state, acq, targets, cfg)?;
        if let (true, Some(p)) = (gan, priors.as_ref()) {
            solve_subproblem_i(&mut state, p, cfg)?;
        }
        state.history.data_loss.push(*report.data_loss.last().expect("non-empty"));
        state.history.objective.push(*report.objective.last().expect("non-empty"));
        if let Some(t) = truth {
            state.history.rel_error.push(rel_error(state.series()?.data(), t.data()));
        }
    }
    Ok(state)
}

/// Per-pixel mono-exponential fit.
#[derive(Clone, Debug, PartialEq)]
pub struct T2Fit {
    /// Milliseconds; zero outside the support and where invalid.
    pub t2: Vec<f64>,
    pub rho0: Vec<f64>,
    /// False outside the support or where the fitted slope is not negative.
    pub valid: Vec<bool>,
}

/// Weighted log-linear fit of `S(TE) = ρ₀ exp(−TE/T2)`, weights `S²`.
pub fn fit_t2(x: &ImageSeries, echo_times: &[f64], support: &[bool]) -> Result<T2Fit> {
    let (n, nt) = (x.voxels(), x.frames());
    if nt < 2 {
        return Err(Error::Data("T2 fitting needs at least two echoes".into()));
    }
    if echo_times.len() != nt || support.len() != n {
        return Err(Error::Shape("echo times or support do not match the series".into()));
    }
    let mut fit = T2Fit {
        t2: vec![0.0; n],
        rho0: vec![0.0; n],
        valid: vec![false; n],
    };
    for i in (0..n).filter(|&i| support[i]) {
        let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (t, &te) in echo_times.iter().enumerate() {
            let s = x.frame(t)[i].norm().max(1e-9);
            let (wt, y) = (s * s, s.ln());
            sw += wt;
            sx += wt * te;
            sy += wt * y;
            sxx += wt * te * te;
            sxy += wt * te * y;
        }
        let det = sw * sxx - sx * sx;
        if det <= 0.0 {
            continue;
        }
        let slope = (sw * sxy - sx * sy) / det;
        let intercept = (sy - slope * sx) / sw;
        if slope < 0.0 && slope.is_finite() {
            fit.t2[i] = -1.0 / slope;
            fit.rho0[i] = intercept.exp();
            fit.valid[i] = true;
        }
    }
    Ok(fit)
}

/// Mean `|T̂2 − T2|/T2` over support pixels with a valid fit and a positive
/// true T2, and the number of pixels used.
pub fn t2_error(fit: &T2Fit, truth: &[f64], support: &[bool]) -> (f64, usize) {
    let mut acc = 0.0;
    let mut count = 0;
    for i in 0..truth.len() {
        if support[i] && fit.valid[i] && truth[i] > 0.0 {
            acc += (fit.t2[i] - truth[i]).abs() / truth[i];
            count += 1;
        }
    }
    (if count > 0 { acc / count as f64 } else { f64::NAN }, count)
}
