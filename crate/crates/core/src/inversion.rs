//! Latent-space machinery: ℓ₁-ball projection, layer-wise inversion through
//! an intermediate activation, subject-specific adaptation of the network
//! weights, and latent initialisation straight from k-space.
//!
//! All inversions minimise a loss of the rendered image. The loss is an
//! arbitrary closure returning its value and its gradient with respect to
//! the image, so the same machinery serves image-domain targets, complex
//! targets split into magnitude and phase, and k-space data terms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoding::Acquisition;
use crate::error::{Error, Result};
use crate::generator::{Activation, Generator, LatentSet, Upstream};
use crate::numerics::{AdamState, C64};

/// Euclidean projection of `v` onto `{u : ‖u − center‖₁ ≤ radius}`.
///
/// Sort-based threshold search; an infinite radius returns `v`, a zero
/// (or negative) radius returns `center`.
///
/// # Panics
/// If `v` and `center` differ in length.
pub fn project_l1_ball(v: &[f64], center: &[f64], radius: f64) -> Vec<f64> {
    assert_eq!(v.len(), center.len(), "ball centre has the wrong dimension");
    let d: Vec<f64> = v.iter().zip(center).map(|(a, c)| a - c).collect();
    if d.iter().map(|x| x.abs()).sum::<f64>() <= radius {
        return v.to_vec();
    }
    if radius.is_nan() || radius <= 0.0 {
        return center.to_vec();
    }
    let mut mags: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    mags.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &m) in mags.iter().enumerate() {
        cumsum += m;
        let t = (cumsum - radius) / (j + 1) as f64;
        if m - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    d.iter()
        .zip(center)
        .map(|(&x, &c)| c + x.signum() * (x.abs() - theta).max(0.0))
        .collect()
}

/// Per-block ℓ₁ balls around a centre latent set.
#[derive(Clone, Debug, PartialEq)]
pub struct BallConstraint {
    pub center: LatentSet,
    /// One radius per block; `f64::INFINITY` leaves a block free.
    pub radii: Vec<f64>,
}

impl BallConstraint {
    pub fn new(center: LatentSet, radii: Vec<f64>) -> Result<Self> {
        if radii.len() != center.blocks() {
            return Err(Error::Shape(format!(
                "{} radii for {} latent blocks",
                radii.len(),
                center.blocks()
            )));
        }
        if radii.iter().any(|r| r.is_nan() || *r < 0.0) {
            return Err(Error::Data("ball radii must be non-negative".into()));
        }
        Ok(Self { center, radii })
    }

    pub fn uniform(center: LatentSet, radius: f64) -> Result<Self> {
        let n = center.blocks();
        Self::new(center, vec![radius; n])
    }

    /// `0.5·√d_lat`.
    pub fn default_radius(d_lat: usize) -> f64 {
        0.5 * (d_lat as f64).sqrt()
    }

    pub fn project(&self, w: &mut LatentSet) {
        for ((s, c), &r) in w.styles.iter_mut().zip(&self.center.styles).zip(&self.radii) {
            if r.is_finite() {
                *s = project_l1_ball(s, c, r);
            }
        }
    }

    /// Largest violation `‖w_b − c_b‖₁ − l_b` over blocks (≤ 0 inside).
    pub fn violation(&self, w: &LatentSet) -> f64 {
        w.styles
            .iter()
            .zip(&self.center.styles)
            .zip(&self.radii)
            .map(|((s, c), &r)| s.iter().zip(c).map(|(a, b)| (a - b).abs()).sum::<f64>() - r)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn check(&self, g: &Generator) -> Result<()> {
        if self.center.blocks() != g.blocks() || self.center.styles.iter().any(|s| s.len() != g.d_lat()) {
            return Err(Error::Shape("ball centre does not match the generator".into()));
        }
        Ok(())
    }
}

/// Settings of the layer-wise inversion.
#[derive(Clone, Debug, PartialEq)]
pub struct IloConfig {
    /// First cut visited (blocks counted from the input).
    pub start_layer: usize,
    /// Cuts visited in order; empty means plain latent descent.
    pub layer_schedule: Vec<usize>,
    pub steps_per_stage: usize,
    pub lr_latent: f64,
    /// Full-latent descent steps after the last cut.
    pub refine_steps: usize,
    /// Weight of the pull of the free activation towards the range of the
    /// earlier blocks.
    pub mu: f64,
}

impl IloConfig {
    /// Cuts `L−1, L−2, …, 1`, 500 steps per stage, 1500 refinement steps.
    pub fn for_blocks(blocks: usize) -> Self {
        Self::starting_at(blocks.saturating_sub(1))
    }

    /// Descending schedule from `start` down to 1.
    pub fn starting_at(start: usize) -> Self {
        Self {
            start_layer: start,
            layer_schedule: (1..=start).rev().collect(),
            steps_per_stage: 500,
            lr_latent: 0.05,
            refine_steps: 1500,
            mu: 1e-3,
        }
    }

    /// No cuts: `steps` of plain latent descent.
    pub fn plain(steps: usize, lr: f64) -> Self {
        Self {
            start_layer: 0,
            layer_schedule: Vec::new(),
            steps_per_stage: 1,
            lr_latent: lr,
            refine_steps: steps,
            mu: 1e-3,
        }
    }

    /// Same schedule shape with a different budget.
    pub fn with_budget(mut self, steps_per_stage: usize, refine_steps: usize) -> Self {
        self.steps_per_stage = steps_per_stage;
        self.refine_steps = refine_steps;
        self
    }

    pub fn validate(&self, blocks: usize) -> Result<()> {
        if let Some(&c) = self.layer_schedule.iter().find(|&&c| c == 0 || c >= blocks) {
            return Err(Error::Index {
                index: c,
                max: blocks.saturating_sub(1),
            });
        }
        if !self.layer_schedule.is_empty() && self.steps_per_stage == 0 {
            return Err(Error::Usage("steps_per_stage must be at least 1".into()));
        }
        if !(self.lr_latent > 0.0 && self.lr_latent.is_finite()) {
            return Err(Error::Usage(format!("latent learning rate {} is not positive", self.lr_latent)));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Usage(format!("activation weight {} is not non-negative", self.mu)));
        }
        Ok(())
    }
}

/// Result of an inversion: the lowest-loss latents seen.
#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    pub latents: LatentSet,
    pub loss: f64,
    pub initial_loss: f64,
    /// Best loss after each cut stage, then after refinement.
    pub stage_losses: Vec<f64>,
}

struct Best {
    loss: f64,
    latents: LatentSet,
}

impl Best {
    fn offer(&mut self, loss: f64, w: &LatentSet) {
        if loss < self.loss {
            self.loss = loss;
            self.latents = w.clone();
        }
    }

    fn breakdown(&self, loss: f64, stage: &str) -> Error {
        Error::Breakdown {
            message: format!("loss became {loss} during {stage}"),
            best: Box::new(self.latents.clone()),
        }
    }
}

/// A configured inversion against one generator.
pub struct Ilo<'a> {
    g: &'a Generator,
    cfg: &'a IloConfig,
    ball: Option<&'a BallConstraint>,
    frozen: Vec<bool>,
}

impl<'a> Ilo<'a> {
    pub fn new(g: &'a Generator, cfg: &'a IloConfig) -> Result<Self> {
        cfg.validate(g.blocks())?;
        Ok(Self {
            g,
            cfg,
            ball: None,
            frozen: vec![false; g.blocks()],
        })
    }

    pub fn with_ball(mut self, ball: Option<&'a BallConstraint>) -> Result<Self> {
        if let Some(b) = ball {
            b.check(self.g)?;
        }
        self.ball = ball;
        Ok(self)
    }

    /// Holds the listed blocks (1-based) at their initial styles.
    pub fn freeze(mut self, blocks: &[usize]) -> Result<Self> {
        for &b in blocks {
            if b == 0 || b > self.g.blocks() {
                return Err(Error::Index {
                    index: b,
                    max: self.g.blocks(),
                });
            }
            self.frozen[b - 1] = true;
        }
        Ok(self)
    }

    /// Runs the schedule against `loss`, which maps an image to its loss
    /// and image gradient.
    pub fn run<F>(&self, init: &LatentSet, mut loss: F) -> Result<Inversion>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let g = self.g;
        if init.blocks() != g.blocks() || init.styles.iter().any(|s| s.len() != g.d_lat()) {
            return Err(Error::Shape("initial latents do not match the generator".into()));
        }
        let mut w = init.clone();
        self.project(&mut w);
        let (l0, _) = loss(&g.render(&w)?)?;
        let mut best = Best {
            loss: l0,
            latents: w.clone(),
        };
        if !l0.is_finite() {
            return Err(best.breakdown(l0, "initial evaluation"));
        }
        let mut stage_losses = Vec::with_capacity(self.cfg.layer_schedule.len() + 1);
        for &cut in &self.cfg.layer_schedule {
            let mut w = best.latents.clone();
            self.stage(cut, &mut w, &mut loss, &mut best)?;
            stage_losses.push(best.loss);
        }
        if self.cfg.refine_steps > 0 {
            let mut w = best.latents.clone();
            self.descend(&mut w, &mut loss, &mut best)?;
        }
        stage_losses.push(best.loss);
        Ok(Inversion {
            latents: best.latents,
            loss: best.loss,
            initial_loss: l0,
            stage_losses,
        })
    }

    fn project(&self, w: &mut LatentSet) {
        if let Some(b) = self.ball {
            b.project(w);
        }
    }

    fn mask_frozen(&self, grads: &mut LatentSet) {
        for (s, &f) in grads.styles.iter_mut().zip(&self.frozen) {
            if f {
                s.fill(0.0);
            }
        }
    }

    /// Optimise the activation at `cut` with the later styles, then pull
    /// the earlier styles onto the optimised activation.
    fn stage<F>(&self, cut: usize, w: &mut LatentSet, loss: &mut F, best: &mut Best) -> Result<()>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let g = self.g;
        let d = g.d_lat();
        let mut act = g.forward_to(w, cut)?.activation;
        let anchor = act.flat();
        let n_act = anchor.len();
        let mut x = anchor.clone();
        x.extend(w.styles[cut..].iter().flatten());
        let mut adam = AdamState::new(x.len(), self.cfg.lr_latent);
        for k in 0..self.cfg.steps_per_stage {
            let lr = self.cfg.lr_latent * decay(k, self.cfg.steps_per_stage);
            let trace = g.forward_from(&act, w)?;
            let (l, gimg) = loss(trace.image.as_deref().expect("full pass"))?;
            if !l.is_finite() {
                return Err(best.breakdown(l, &format!("activation stage at cut {cut}")));
            }
            let mut grads = g.backward(&trace, Upstream::Image(&gimg), false)?;
            self.mask_frozen(&mut grads.styles);
            let mut grad = grads.input.expect("cut trace").flat();
            for ((gv, a), b) in grad.iter_mut().zip(&x[..n_act]).zip(&anchor) {
                *gv += 2.0 * self.cfg.mu * (a - b);
            }
            grad.extend(grads.styles.styles[cut..].iter().flatten());
            adam.step_with_lr(&mut x, &grad, lr)?;
            act = act.with_flat(&x[..n_act])?;
            for (b, s) in w.styles[cut..].iter_mut().enumerate() {
                s.copy_from_slice(&x[n_act + b * d..n_act + (b + 1) * d]);
            }
            self.project(w);
            for (b, s) in w.styles[cut..].iter().enumerate() {
                x[n_act + b * d..n_act + (b + 1) * d].copy_from_slice(s);
            }
        }
        self.back_project(cut, &act, w)?;
        let (l, _) = loss(&g.render(w)?)?;
        if !l.is_finite() {
            return Err(best.breakdown(l, &format!("back-projection at cut {cut}")));
        }
        best.offer(l, w);
        Ok(())
    }

    /// Fit styles `1..=cut` so the earlier blocks reproduce `target`.
    fn back_project(&self, cut: usize, target: &Activation, w: &mut LatentSet) -> Result<()> {
        let g = self.g;
        let d = g.d_lat();
        let mut x: Vec<f64> = w.styles[..cut].iter().flatten().copied().collect();
        let mut adam = AdamState::new(x.len(), self.cfg.lr_latent);
        for k in 0..self.cfg.steps_per_stage {
            let lr = self.cfg.lr_latent * decay(k, self.cfg.steps_per_stage);
            let trace = g.forward_to(w, cut)?;
            let a = &trace.activation;
            let gf: Vec<f64> = a.features.iter().zip(&target.features).map(|(p, q)| 2.0 * (p - q)).collect();
            let gs: Vec<f64> = a.skip.iter().zip(&target.skip).map(|(p, q)| 2.0 * (p - q)).collect();
            let mut grads = g.backward(
                &trace,
                Upstream::Activation {
                    features: &gf,
                    skip: &gs,
                },
                false,
            )?;
            self.mask_frozen(&mut grads.styles);
            let grad: Vec<f64> = grads.styles.styles[..cut].iter().flatten().copied().collect();
            adam.step_with_lr(&mut x, &grad, lr)?;
            for (b, s) in w.styles[..cut].iter_mut().enumerate() {
                s.copy_from_slice(&x[b * d..(b + 1) * d]);
            }
            self.project(w);
            for (b, s) in w.styles[..cut].iter().enumerate() {
                x[b * d..(b + 1) * d].copy_from_slice(s);
            }
        }
        Ok(())
    }

    fn descend<F>(&self, w: &mut LatentSet, loss: &mut F, best: &mut Best) -> Result<()>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let g = self.g;
        let mut x = w.flat();
        let mut adam = AdamState::new(x.len(), self.cfg.lr_latent);
        for k in 0..self.cfg.refine_steps {
            let lr = self.cfg.lr_latent * decay(k, self.cfg.refine_steps);
            let trace = g.forward(w)?;
            let (l, gimg) = loss(trace.image.as_deref().expect("full pass"))?;
            if !l.is_finite() {
                return Err(best.breakdown(l, "refinement"));
            }
            best.offer(l, w);
            let mut grads = g.backward(&trace, Upstream::Image(&gimg), false)?;
            self.mask_frozen(&mut grads.styles);
            adam.step_with_lr(&mut x, &grads.styles.flat(), lr)?;
            *w = LatentSet::from_flat(&x, g.blocks())?;
            self.project(w);
            x = w.flat();
        }
        let (l, _) = loss(&g.render(w)?)?;
        if !l.is_finite() {
            return Err(best.breakdown(l, "refinement"));
        }
        best.offer(l, w);
        Ok(())
    }
}

/// Cosine step-size decay to 5% over `n` steps.
fn decay(k: usize, n: usize) -> f64 {
    let frac = k as f64 / n.max(1) as f64;
    0.05 + 0.475 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Squared-error loss `‖image − target‖²` and its gradient.
pub fn squared_error(target: &[f64]) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> + '_ {
    move |img: &[f64]| {
        let grad: Vec<f64> = img.iter().zip(target).map(|(a, b)| 2.0 * (a - b)).collect();
        let l = grad.iter().map(|v| 0.25 * v * v).sum();
        Ok((l, grad))
    }
}

/// Layer-wise inversion of an image-domain target.
pub fn ilo_invert(
    g: &Generator,
    target: &[f64],
    init: &LatentSet,
    cfg: &IloConfig,
    ball: Option<&BallConstraint>,
) -> Result<Inversion> {
    let pixels = g.size() * g.size();
    if target.len() != pixels {
        return Err(Error::Shape(format!(
            "target has {} pixels, generator makes {pixels}",
            target.len()
        )));
    }
    Ilo::new(g, cfg)?.with_ball(ball)?.run(init, squared_error(target))
}

/// Average of the styles of `samples` random codes, repeated per block.
pub fn mean_latents(g: &Generator, samples: usize, seed: u64) -> Result<LatentSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0; g.d_lat()];
    for _ in 0..samples.max(1) {
        let w = g.map(&g.sample_code(&mut rng))?.w;
        acc.iter_mut().zip(&w).for_each(|(a, b)| *a += b);
    }
    let n = samples.max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(LatentSet::broadcast(&acc, g.blocks()))
}

/// Settings of [`adapt_network`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptConfig {
    pub ilo: IloConfig,
    /// Number of latent-fit / weight-fit alternations.
    pub passes: usize,
    pub param_steps: usize,
    pub lr_params: f64,
}

impl AdaptConfig {
    pub fn for_blocks(blocks: usize) -> Self {
        Self {
            ilo: IloConfig::for_blocks(blocks).with_budget(150, 100),
            passes: 3,
            param_steps: 600,
            lr_params: 1e-2,
        }
    }
}

/// Representation errors of one adaptation pass, as relative ℓ₂ errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptPass {
    /// After the latent fit, before the weight update.
    pub before: f64,
    /// After the weight update.
    pub after: f64,
}

#[derive(Clone, Debug)]
pub struct Adaptation {
    pub generator: Generator,
    pub latents: LatentSet,
    pub passes: Vec<AdaptPass>,
}

/// Fits latents to `reference` with the weights fixed, then the weights
/// with the latents fixed under a pull `α‖θ − θ_p‖²` towards the
/// pretrained weights; repeats `cfg.passes` times.
///
/// The weight update is Adam on the data term followed by the exact
/// proximal step of the pull, so very large `α` pins the weights. Each pass
/// keeps the weights with the lowest representation error, which can only
/// improve on the weights it started from.
pub fn adapt_network(
    pretrained: &Generator,
    reference: &[f64],
    init: &LatentSet,
    alpha: f64,
    cfg: &AdaptConfig,
) -> Result<Adaptation> {
    if !(alpha >= 0.0) {
        return Err(Error::Usage(format!("adaptation weight {alpha} must be non-negative")));
    }
    let pixels = pretrained.size() * pretrained.size();
    if reference.len() != pixels {
        return Err(Error::Shape(format!(
            "reference has {} pixels, generator makes {pixels}",
            reference.len()
        )));
    }
    let ref_norm_sqr: f64 = reference.iter().map(|v| v * v).sum();
    let rel = |l: f64| (l / ref_norm_sqr.max(f64::MIN_POSITIVE)).sqrt();
    let theta_p = pretrained.params().to_vec();
    let mut g = pretrained.clone();
    let mut w = init.clone();
    let mut passes = Vec::with_capacity(cfg.passes);
    for pass in 0..cfg.passes {
        w = ilo_invert(&g, reference, &w, &cfg.ilo, None)?.latents;
        let mut loss = squared_error(reference);
        let mut theta = g.params().to_vec();
        let (start, _) = loss(&g.render(&w)?)?;
        let mut best = (start, theta.clone());
        let limit = 10.0 * start.max(1e-12 * ref_norm_sqr);
        let mut adam = AdamState::new(theta.len(), cfg.lr_params);
        for step in 0..=cfg.param_steps {
            let trace = g.forward(&w)?;
            let (l, gimg) = loss(trace.image.as_deref().expect("full pass"))?;
            if !l.is_finite() || l > limit {
                return Err(Error::Diverged(format!(
                    "adaptation pass {pass}, step {step}: loss {l:.3e} from {start:.3e}"
                )));
            }
            if l < best.0 {
                best = (l, theta.clone());
            }
            if step == cfg.param_steps {
                break;
            }
            let gp = g.backward(&trace, Upstream::Image(&gimg), true)?.params.expect("requested");
            // linear warm-up: Adam's first steps move every weight by ~lr
            let warm = ((step + 1) as f64 / (cfg.param_steps as f64 * 0.1).max(1.0)).min(1.0);
            adam.step_with_lr(&mut theta, &gp, cfg.lr_params * warm)?;
            if alpha > 0.0 {
                let shrink = 1.0 / (1.0 + 2.0 * cfg.lr_params * warm * alpha);
                for (t, p) in theta.iter_mut().zip(&theta_p) {
                    *t = p + (*t - p) * shrink;
                }
            }
            g.set_params(&theta)?;
        }
        g.set_params(&best.1)?;
        passes.push(AdaptPass {
            before: rel(start),
            after: rel(best.0),
        });
    }
    Ok(Adaptation {
        generator: g,
        latents: w,
        passes,
    })
}

/// Fits the latents of frame `t` directly to its k-space samples:
/// `Σ_c ‖y_{c,t} − Ω_t F S_c (Φ_t ⊙ G(w))‖²`.
pub fn latent_init_dc(
    g: &Generator,
    acq: &Acquisition,
    phase: &[C64],
    t: usize,
    init: &LatentSet,
    cfg: &IloConfig,
    ball: Option<&BallConstraint>,
) -> Result<Inversion> {
    let enc = &acq.encoding;
    if enc.height() != g.size() || enc.width() != g.size() {
        return Err(Error::Shape("encoding grid does not match the generator".into()));
    }
    if phase.len() != g.size() * g.size() {
        return Err(Error::Shape("phase map size does not match the generator".into()));
    }
    if t >= enc.frames() {
        return Err(Error::Index {
            index: t,
            max: enc.frames() - 1,
        });
    }
    let y = acq.kspace.frame(t);
    let loss = |img: &[f64]| -> Result<(f64, Vec<f64>)> {
        let x: Vec<C64> = img.iter().zip(phase).map(|(&m, p)| p * m).collect();
        let mut r = enc.forward_frame(&x, t)?;
        r.iter_mut().zip(y).for_each(|(a, b)| *a -= b);
        let l = r.iter().map(|z| z.norm_sqr()).sum();
        let back = enc.adjoint_frame(&r, t)?;
        let grad = back.iter().zip(phase).map(|(b, p)| 2.0 * (p.conj() * b).re).collect();
        Ok((l, grad))
    };
    Ilo::new(g, cfg)?.with_ball(ball)?.run(init, loss)
}

#[cfg(test)]
mod tests;
