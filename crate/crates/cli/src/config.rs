//! Run configuration: a TOML document with one table per pipeline stage.
//!
//! Every field has a default, so an empty file is a complete desk-scale
//! configuration. Unknown keys are rejected. Commands write the resolved
//! configuration next to their outputs as `config.toml`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use hdt::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub phantom: PhantomSection,
    pub acquisition: AcquisitionSection,
    pub generator: GeneratorSection,
    pub train: TrainSection,
    pub adapt: AdaptSection,
    pub ilo: IloSection,
    pub recon: ReconSection,
    pub coefficient: CoefficientSection,
    pub report: ReportSection,
    pub stylemix: StylemixSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    /// Square grid size; a power of two.
    pub size: usize,
    /// Subject drawn from the brain family; 0 is the canonical layout.
    pub subject: u64,
    /// Number of subjects in the pretraining corpus.
    pub corpus_subjects: usize,
    /// Corpus subjects use seeds `corpus_seed + i`.
    pub corpus_seed: u64,
    /// Echo times per corpus subject, spread over the acquisition range.
    pub corpus_echoes: usize,
}

impl Default for PhantomSection {
    fn default() -> Self {
        Self {
            size: 64,
            subject: 0,
            corpus_subjects: 24,
            corpus_seed: 1000,
            corpus_echoes: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionSection {
    pub echoes: usize,
    /// Milliseconds.
    pub te_first: f64,
    pub te_spacing: f64,
    pub coils: usize,
    pub af: f64,
    /// Central phase-encode lines sampled at every echo.
    pub center_lines: usize,
    /// Width of the navigator band used to estimate the temporal basis.
    pub navigator_lines: usize,
    /// Complex noise standard deviation, relative to the RMS of the fully
    /// sampled noiseless k-space.
    pub noise_sigma: f64,
    /// Bound on the spatial phase gradient, radians per half field of view.
    pub phase_gradient: f64,
    pub phase_drift: f64,
}

impl Default for AcquisitionSection {
    fn default() -> Self {
        Self {
            echoes: 8,
            te_first: 8.8,
            te_spacing: 8.8,
            coils: 4,
            af: 4.0,
            center_lines: 8,
            navigator_lines: 8,
            noise_sigma: 0.03,
            phase_gradient: 1.0,
            phase_drift: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub d_lat: usize,
    /// Channel width of the widest block.
    pub base: usize,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self { d_lat: 64, base: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub inner_steps: usize,
    pub batch: usize,
    pub lr_params: f64,
    pub lr_latent: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 40,
            inner_steps: 4,
            batch: 2,
            lr_params: 1e-2,
            lr_latent: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSection {
    /// Proximity weight `α` towards the pretrained weights.
    pub alpha: f64,
    pub passes: usize,
    pub param_steps: usize,
    pub lr_params: f64,
    pub steps_per_stage: usize,
    pub refine_steps: usize,
    /// Sparsity weight of the subspace reconstruction whose sum of squares
    /// is the adaptation reference.
    pub reference_lambda2: f64,
}

impl Default for AdaptSection {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            passes: 3,
            param_steps: 600,
            lr_params: 1e-2,
            steps_per_stage: 150,
            refine_steps: 100,
            reference_lambda2: 1e-4,
        }
    }
}

/// Standalone inversion settings (self-inversion checks and held-out fits).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IloSection {
    pub steps_per_stage: usize,
    pub refine_steps: usize,
    pub lr: f64,
    pub mu: f64,
}

impl Default for IloSection {
    fn default() -> Self {
        Self {
            steps_per_stage: 500,
            refine_steps: 1500,
            lr: 0.05,
            mu: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconSection {
    pub rank: usize,
    pub outer_iters: usize,
    pub lambda1: f64,
    /// Multiplier of `λ₁` on the last `late_echoes` echoes.
    pub late_factor: f64,
    pub late_echoes: usize,
    /// `λ₂` when combined with the generator prior.
    pub lambda2: f64,
    /// `λ₂` of the sparsity-only variant, also the mild initial value of the
    /// generator-only variant.
    pub lambda2_sparsity: f64,
    /// ℓ₁-ball radius between neighbouring echoes; negative selects
    /// `0.5·√d_lat`.
    pub ball_radius: f64,
    pub steps_per_stage: usize,
    pub refine_steps: usize,
    pub init_steps_per_stage: usize,
    pub init_refine_steps: usize,
    pub cold_start: bool,
    pub irls_iters: usize,
    pub cg_iters: usize,
}

impl Default for ReconSection {
    fn default() -> Self {
        Self {
            rank: 3,
            outer_iters: 5,
            lambda1: 0.04,
            late_factor: 1.0,
            late_echoes: 0,
            lambda2: 2e-7,
            lambda2_sparsity: 1e-6,
            ball_radius: -1.0,
            steps_per_stage: 15,
            refine_steps: 40,
            init_steps_per_stage: 40,
            init_refine_steps: 80,
            cold_start: false,
            irls_iters: 30,
            cg_iters: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoefficientSection {
    pub size: usize,
    pub rank: usize,
    pub frames: usize,
    pub coils: usize,
    /// Relative to the RMS of the clean k-space.
    pub noise_sigma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Edge-penalty weight of the baseline before matching.
    pub lambda2_baseline: f64,
    pub corpus_subjects: usize,
    pub epochs: usize,
}

impl Default for CoefficientSection {
    fn default() -> Self {
        Self {
            size: 32,
            rank: 3,
            frames: 16,
            coils: 4,
            noise_sigma: 1.0,
            lambda1: 0.8,
            lambda2: 0.3,
            lambda2_baseline: 0.6,
            corpus_subjects: 24,
            epochs: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub af_sweep: Vec<f64>,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            af_sweep: vec![2.0, 3.0, 4.0, 5.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StylemixSection {
    pub pairs: usize,
    /// Rows of the image grid.
    pub sources: usize,
}

impl Default for StylemixSection {
    fn default() -> Self {
        Self { pairs: 20, sources: 4 }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            phantom: PhantomSection::default(),
            acquisition: AcquisitionSection::default(),
            generator: GeneratorSection::default(),
            train: TrainSection::default(),
            adapt: AdaptSection::default(),
            ilo: IloSection::default(),
            recon: ReconSection::default(),
            coefficient: CoefficientSection::default(),
            report: ReportSection::default(),
            stylemix: StylemixSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Usage(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Usage(format!("config: {m}")));
        let p = &self.phantom;
        if !p.size.is_power_of_two() || p.size < 8 {
            return bad("phantom.size must be a power of two, at least 8");
        }
        let a = &self.acquisition;
        if a.echoes < 2 || a.coils == 0 {
            return bad("acquisition needs at least two echoes and one coil");
        }
        if !(a.te_first > 0.0 && a.te_spacing > 0.0) {
            return bad("echo times must be positive");
        }
        if !(a.af >= 1.0) || !(a.noise_sigma >= 0.0) {
            return bad("acquisition.af must be at least 1 and noise_sigma non-negative");
        }
        if a.navigator_lines > a.center_lines {
            return bad("acquisition.navigator_lines must not exceed center_lines");
        }
        let r = &self.recon;
        if r.rank == 0 || r.rank > a.echoes {
            return bad("recon.rank must lie in 1..=echoes");
        }
        if r.late_echoes > a.echoes {
            return bad("recon.late_echoes exceeds the number of echoes");
        }
        if self.report.af_sweep.iter().any(|&af| !(af >= 1.0)) {
            return bad("report.af_sweep entries must be at least 1");
        }
        let c = &self.coefficient;
        if !c.size.is_power_of_two() || c.size < 8 || c.rank == 0 || c.rank > c.frames {
            return bad("coefficient section needs a power-of-two size and 1 <= rank <= frames");
        }
        Ok(())
    }

    pub fn echo_times(&self) -> Vec<f64> {
        let a = &self.acquisition;
        hdt::phantom::echo_times(a.te_first, a.te_spacing, a.echoes)
    }

    /// Per-echo `λ₁` with the late-echo factor applied.
    pub fn lambda1_schedule(&self) -> Vec<f64> {
        let r = &self.recon;
        let t = self.acquisition.echoes;
        (0..t)
            .map(|i| {
                if i + r.late_echoes >= t {
                    r.lambda1 * r.late_factor
                } else {
                    r.lambda1
                }
            })
            .collect()
    }
}

/// Reconstruction variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Data consistency only.
    Subspace,
    /// Joint sparsity, no generator prior.
    Sparsity,
    /// Generator prior, no sparsity.
    Gan,
    /// Generator prior and joint sparsity.
    Proposed,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Subspace, Variant::Sparsity, Variant::Gan, Variant::Proposed];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Subspace => "subspace",
            Variant::Sparsity => "sparsity",
            Variant::Gan => "gan",
            Variant::Proposed => "proposed",
        }
    }

    pub fn uses_generator(self) -> bool {
        matches!(self, Variant::Gan | Variant::Proposed)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown variant {s:?}; expected subspace, sparsity, gan or proposed")))
    }
}
