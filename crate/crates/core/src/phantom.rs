//! Synthetic ground truth: ellipse phantoms, multi-echo decay, smooth phase,
//! coil sensitivities, noise and the coefficient-series (spectroscopic-style)
//! simulation.
//!
//! Geometry is expressed in normalised coordinates: the grid spans
//! `[-1, 1]²` and pixel `(row, col)` sits at its centre
//! `x = (col + ½)/W·2 − 1`, `y = (row + ½)/H·2 − 1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{CMatrix, ComplexTensor, C64};
use crate::series::ImageSeries;

#[derive(Clone, Debug, PartialEq)]
pub struct Ellipse {
    pub center: (f64, f64),
    /// Semi-axes along the ellipse's own x and y directions.
    pub axes: (f64, f64),
    /// Counter-clockwise rotation in radians.
    pub angle: f64,
    pub proton_density: f64,
    /// Milliseconds.
    pub t2: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.axes.0;
        let v = (-dx * s + dy * c) / self.axes.1;
        u * u + v * v <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    /// Painter's order: later ellipses overwrite earlier ones.
    pub ellipses: Vec<Ellipse>,
    pub seed: u64,
}

/// Tissue classes of the default brain-like phantom: three distinct T2
/// values, so the noiseless multi-echo Casorati matrix has rank three.
const GM_T2: f64 = 95.0;
const WM_T2: f64 = 65.0;
const CSF_T2: f64 = 280.0;

fn ellipse(cx: f64, cy: f64, ax: f64, ay: f64, angle: f64, pd: f64, t2: f64) -> Ellipse {
    Ellipse {
        center: (cx, cy),
        axes: (ax, ay),
        angle,
        proton_density: pd,
        t2,
    }
}

impl PhantomSpec {
    /// Brain-like layout: grey-matter shell, white-matter core, ventricles,
    /// deep nuclei and a small long-T2 lesion.
    pub fn brain(height: usize, width: usize) -> Self {
        let ellipses = vec![
            ellipse(0.0, 0.0, 0.78, 0.92, 0.0, 0.80, GM_T2),
            ellipse(0.0, 0.03, 0.62, 0.76, 0.0, 0.62, WM_T2),
            ellipse(-0.33, -0.42, 0.16, 0.09, 0.5, 0.78, GM_T2),
            ellipse(0.35, -0.40, 0.15, 0.08, -0.6, 0.78, GM_T2),
            ellipse(-0.45, 0.30, 0.10, 0.22, 0.2, 0.76, GM_T2),
            ellipse(0.47, 0.28, 0.09, 0.20, -0.25, 0.76, GM_T2),
            ellipse(-0.16, -0.02, 0.08, 0.30, 0.28, 1.0, CSF_T2),
            ellipse(0.16, -0.02, 0.08, 0.30, -0.28, 1.0, CSF_T2),
            ellipse(-0.27, 0.38, 0.10, 0.13, 0.0, 0.85, GM_T2),
            ellipse(0.27, 0.38, 0.10, 0.13, 0.0, 0.85, GM_T2),
            ellipse(0.30, -0.60, 0.07, 0.07, 0.0, 0.9, CSF_T2),
            ellipse(0.0, 0.62, 0.12, 0.05, 0.0, 0.70, WM_T2),
        ];
        Self {
            height,
            width,
            ellipses,
            seed: 0,
        }
    }

    /// A randomised member of the brain family: global rotation/scale and
    /// per-ellipse jitter of geometry and proton density; the T2 of each
    /// tissue class is scaled by one factor per class so the class
    /// structure (and the exact Casorati rank) survives.
    pub fn subject(height: usize, width: usize, seed: u64) -> Self {
        let base = Self::brain(height, width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let rot: f64 = rng.random_range(-0.15..0.15);
        let scale: f64 = rng.random_range(0.9..1.06);
        let shift = (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
        let mut classes: Vec<(f64, f64)> = Vec::new();
        let mut ellipses = Vec::with_capacity(base.ellipses.len());
        for e in &base.ellipses {
            let factor = match classes.iter().find(|(t2, _)| *t2 == e.t2) {
                Some(&(_, f)) => f,
                None => {
                    let f = rng.random_range(0.85..1.2);
                    classes.push((e.t2, f));
                    f
                }
            };
            let (s, c) = rot.sin_cos();
            let cx = e.center.0 + rng.random_range(-0.04..0.04);
            let cy = e.center.1 + rng.random_range(-0.04..0.04);
            let center = (
                scale * (cx * c - cy * s) + shift.0,
                scale * (cx * s + cy * c) + shift.1,
            );
            let axes = (
                scale * e.axes.0 * rng.random_range(0.88..1.12),
                scale * e.axes.1 * rng.random_range(0.88..1.12),
            );
            let pd = (e.proton_density * rng.random_range(0.9..1.1)).min(1.0);
            ellipses.push(Ellipse {
                center,
                axes,
                angle: e.angle + rot + rng.random_range(-0.12..0.12),
                proton_density: pd,
                t2: e.t2 * factor,
            });
        }
        Self {
            height,
            width,
            ellipses,
            seed,
        }
    }

    /// Centred disc, handy for geometry tests.
    pub fn disc(height: usize, width: usize, radius: f64, pd: f64, t2: f64) -> Self {
        Self {
            height,
            width,
            ellipses: vec![ellipse(0.0, 0.0, radius, radius, 0.0, pd, t2)],
            seed: 0,
        }
    }
}

/// Normalised coordinate of pixel `(row, col)`.
pub fn pixel_coords(row: usize, col: usize, height: usize, width: usize) -> (f64, f64) {
    (
        (col as f64 + 0.5) / width as f64 * 2.0 - 1.0,
        (row as f64 + 0.5) / height as f64 * 2.0 - 1.0,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct TissueMaps {
    pub height: usize,
    pub width: usize,
    pub proton_density: Vec<f64>,
    /// Milliseconds; zero outside the support.
    pub t2_map: Vec<f64>,
    pub support_mask: Vec<bool>,
}

pub fn render_tissue(spec: &PhantomSpec) -> Result<TissueMaps> {
    if spec.ellipses.is_empty() {
        return Err(Error::Spec("phantom has no ellipses".into()));
    }
    for e in &spec.ellipses {
        if e.proton_density < 0.0 || !(e.axes.0 > 0.0 && e.axes.1 > 0.0) {
            return Err(Error::Spec(format!("invalid ellipse {e:?}")));
        }
        if e.proton_density > 0.0 && e.t2 <= 0.0 {
            return Err(Error::Spec(format!("non-positive T2 in {e:?}")));
        }
    }
    let (h, w) = (spec.height, spec.width);
    let n = h * w;
    let mut pd = vec![0.0; n];
    let mut t2 = vec![0.0; n];
    for row in 0..h {
        for col in 0..w {
            let (x, y) = pixel_coords(row, col, h, w);
            if let Some(e) = spec.ellipses.iter().rev().find(|e| e.contains(x, y)) {
                pd[row * w + col] = e.proton_density;
                t2[row * w + col] = e.t2;
            }
        }
    }
    let support: Vec<bool> = pd.iter().map(|&p| p > 0.0).collect();
    for (t, &s) in t2.iter_mut().zip(&support) {
        if !s {
            *t = 0.0;
        }
    }
    Ok(TissueMaps {
        height: h,
        width: w,
        proton_density: pd,
        t2_map: t2,
        support_mask: support,
    })
}

/// `TE_k = first + k·spacing`, in milliseconds.
pub fn echo_times(first: f64, spacing: f64, count: usize) -> Vec<f64> {
    (0..count).map(|k| first + k as f64 * spacing).collect()
}

/// Mono-exponential decay `ρ₀·exp(−TE/T2)` per pixel, real valued.
pub fn simulate_multi_te(tissue: &TissueMaps, tes: &[f64]) -> Result<ImageSeries> {
    if tes.is_empty() || tes.iter().any(|&te| !(te > 0.0)) {
        return Err(Error::Data("echo times must be positive".into()));
    }
    let n = tissue.height * tissue.width;
    let mut data = Vec::with_capacity(n * tes.len());
    for &te in tes {
        for i in 0..n {
            let v = if tissue.support_mask[i] {
                tissue.proton_density[i] * (-te / tissue.t2_map[i]).exp()
            } else {
                0.0
            };
            data.push(C64::new(v, 0.0));
        }
    }
    ImageSeries::new(tissue.height, tissue.width, tes.len(), data)
}

/// Low-order polynomial phase with a slow linear drift in echo time:
/// `φ(x, y, TE) = p(x, y) + (TE / te_ref)·(d₀ + d₁x + d₂y)` where `p` has
/// degree ≤ 2.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSpec {
    /// `[c, x, y, x², xy, y²]`
    pub coeffs: [f64; 6],
    /// `[c, x, y]` per `te_ref` milliseconds.
    pub drift: [f64; 3],
    pub te_ref: f64,
}

impl PhaseSpec {
    pub fn zero() -> Self {
        Self {
            coeffs: [0.0; 6],
            drift: [0.0; 3],
            te_ref: 1.0,
        }
    }

    /// Random smooth phase whose gradient magnitude stays below
    /// `max_gradient` (radians per normalised unit) for every TE up to
    /// `te_max`. `drift_fraction` sets how much of that budget the echo-time
    /// drift may take.
    pub fn random(seed: u64, max_gradient: f64, te_max: f64, drift_fraction: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coeffs = [0.0; 6];
        for c in coeffs.iter_mut() {
            *c = rng.random_range(-1.0..1.0);
        }
        let mut drift = [0.0; 3];
        for d in drift.iter_mut() {
            *d = rng.random_range(-1.0..1.0);
        }
        let mut spec = Self {
            coeffs,
            drift,
            te_ref: te_max,
        };
        coeffs[0] *= std::f64::consts::PI;
        spec.coeffs[0] = coeffs[0];
        let poly = spec.poly_gradient_bound();
        let drift_b = spec.drift_gradient_bound();
        let budget_poly = max_gradient * (1.0 - drift_fraction);
        let budget_drift = max_gradient * drift_fraction;
        if poly > 0.0 {
            for c in spec.coeffs[1..].iter_mut() {
                *c *= budget_poly / poly;
            }
        }
        if drift_b > 0.0 {
            for d in spec.drift[1..].iter_mut() {
                *d *= budget_drift / drift_b;
            }
        }
        spec.drift[0] *= 0.5;
        spec
    }

    fn poly_gradient_bound(&self) -> f64 {
        let c = &self.coeffs;
        let gx = c[1].abs() + 2.0 * c[3].abs() + c[4].abs();
        let gy = c[2].abs() + c[4].abs() + 2.0 * c[5].abs();
        (gx * gx + gy * gy).sqrt()
    }

    fn drift_gradient_bound(&self) -> f64 {
        (self.drift[1].powi(2) + self.drift[2].powi(2)).sqrt()
    }

    /// Upper bound of `|∇φ|` on `[-1,1]²` at echo time `te`.
    pub fn gradient_bound(&self, te: f64) -> f64 {
        let c = &self.coeffs;
        let k = te / self.te_ref;
        let gx = (c[1] + k * self.drift[1]).abs() + 2.0 * c[3].abs() + c[4].abs();
        let gy = (c[2] + k * self.drift[2]).abs() + c[4].abs() + 2.0 * c[5].abs();
        (gx * gx + gy * gy).sqrt()
    }

    pub fn value(&self, x: f64, y: f64, te: f64) -> f64 {
        let c = &self.coeffs;
        let k = te / self.te_ref;
        c[0] + c[1] * x + c[2] * y + c[3] * x * x + c[4] * x * y + c[5] * y * y
            + k * (self.drift[0] + self.drift[1] * x + self.drift[2] * y)
    }

    pub fn map(&self, height: usize, width: usize, te: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(height * width);
        for row in 0..height {
            for col in 0..width {
                let (x, y) = pixel_coords(row, col, height, width);
                out.push(self.value(x, y, te));
            }
        }
        out
    }
}

/// Multiplies frame `t` by `exp(i·φ(·, TE_t))`.
pub fn apply_phase(series: &ImageSeries, phase: &PhaseSpec, tes: &[f64]) -> Result<ImageSeries> {
    if tes.len() != series.frames() {
        return Err(Error::Shape(format!(
            "{} echo times for {} frames",
            tes.len(),
            series.frames()
        )));
    }
    let (h, w) = (series.height(), series.width());
    let mut out = series.clone();
    for (t, &te) in tes.iter().enumerate() {
        let map = phase.map(h, w, te);
        for (z, &p) in out.frame_mut(t).iter_mut().zip(&map) {
            *z *= C64::from_polar(1.0, p);
        }
    }
    Ok(out)
}

/// Smooth receive sensitivities: Gaussian magnitude centred at points
/// spread evenly around (just outside) the field of view, with a linear
/// phase ramp per coil. Scaled so the mean sum-of-squares over the grid is
/// one. `uniform` with one coil gives `S ≡ 1`.
pub fn simulate_coils(height: usize, width: usize, n_coils: usize, uniform: bool) -> Result<Vec<Vec<C64>>> {
    if n_coils == 0 {
        return Err(Error::Data("need at least one coil".into()));
    }
    if uniform {
        let scale = 1.0 / (n_coils as f64).sqrt();
        return Ok(vec![vec![C64::new(scale, 0.0); height * width]; n_coils]);
    }
    let sigma = 1.0;
    let mut maps = Vec::with_capacity(n_coils);
    for c in 0..n_coils {
        let theta = 2.0 * std::f64::consts::PI * c as f64 / n_coils as f64 + std::f64::consts::FRAC_PI_4;
        let (px, py) = (1.3 * theta.cos(), 1.3 * theta.sin());
        let mut map = Vec::with_capacity(height * width);
        for row in 0..height {
            for col in 0..width {
                let (x, y) = pixel_coords(row, col, height, width);
                let d2 = (x - px).powi(2) + (y - py).powi(2);
                let mag = (-d2 / (2.0 * sigma * sigma)).exp();
                let phase = 0.6 * (x * theta.cos() + y * theta.sin()) + c as f64 * 0.7;
                map.push(C64::from_polar(mag, phase));
            }
        }
        maps.push(map);
    }
    let n = (height * width) as f64;
    let mean_sos: f64 = maps.iter().flatten().map(|z| z.norm_sqr()).sum::<f64>() / n;
    let scale = 1.0 / mean_sos.sqrt();
    for m in maps.iter_mut() {
        for z in m.iter_mut() {
            *z *= scale;
        }
    }
    Ok(maps)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    /// Standard deviation per real/imaginary component.
    pub sigma: f64,
    pub seed: u64,
}

/// Adds i.i.d. Gaussian noise to real and imaginary parts.
pub fn add_noise_slice(values: &[C64], nm: NoiseModel) -> Result<Vec<C64>> {
    if !(nm.sigma >= 0.0) {
        return Err(Error::Data("noise sigma must be non-negative".into()));
    }
    if nm.sigma == 0.0 {
        return Ok(values.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(nm.seed);
    let normal = Normal::new(0.0, nm.sigma).map_err(|e| Error::Data(e.to_string()))?;
    Ok(values
        .iter()
        .map(|z| {
            let re = normal.sample(&mut rng);
            let im = normal.sample(&mut rng);
            z + C64::new(re, im)
        })
        .collect())
}

pub fn add_noise(k: &ComplexTensor, nm: NoiseModel) -> Result<ComplexTensor> {
    ComplexTensor::new(k.dims().to_vec(), add_noise_slice(k.data(), nm)?)
}

/// Exact low-rank series built from tissue-dependent spatial coefficient
/// maps and orthonormal decaying-oscillation temporal functions.
#[derive(Clone, Debug)]
pub struct CoefficientSeries {
    pub series: ImageSeries,
    /// `N × R`
    pub u_true: CMatrix,
    /// `R × T`, orthonormal rows.
    pub v_true: CMatrix,
}

pub fn simulate_coefficient_series(
    tissue: &TissueMaps,
    rank: usize,
    frames: usize,
    phase: Option<&PhaseSpec>,
) -> Result<CoefficientSeries> {
    if rank == 0 || rank > frames {
        return Err(Error::Rank {
            rank,
            max: frames,
        });
    }
    let (h, w) = (tissue.height, tissue.width);
    let n = h * w;
    // Temporal functions: damped complex exponentials, then Gram–Schmidt.
    let mut rows: Vec<Vec<C64>> = Vec::with_capacity(rank);
    for r in 0..rank {
        let tau = frames as f64 * [0.7, 0.35, 0.2, 0.5, 0.25][r % 5];
        let freq = [0.0, 0.07, -0.12, 0.18, -0.23][r % 5] + 0.01 * (r / 5) as f64;
        let mut v: Vec<C64> = (0..frames)
            .map(|t| {
                C64::from_polar(
                    (-(t as f64) / tau).exp(),
                    2.0 * std::f64::consts::PI * freq * t as f64,
                )
            })
            .collect();
        for _ in 0..2 {
            for prev in &rows {
                let proj: C64 = prev.iter().zip(&v).map(|(a, b)| a.conj() * b).sum();
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= proj * p;
                }
            }
        }
        let nv = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if nv < 1e-12 {
            return Err(Error::Numerical("degenerate temporal basis".into()));
        }
        rows.push(v.into_iter().map(|z| z / nv).collect());
    }
    let v_true = CMatrix::from_fn(rank, frames, |r, t| rows[r][t]);
    let phase_map = phase.map(|p| p.map(h, w, 0.0));
    let u_true = CMatrix::from_fn(n, rank, |i, r| {
        if !tissue.support_mask[i] {
            return C64::new(0.0, 0.0);
        }
        let pd = tissue.proton_density[i];
        let t2 = tissue.t2_map[i];
        let power = 1.0 + 0.5 * (r / 3) as f64;
        let decay = [0.0, 40.0, 120.0][r % 3];
        let mag = pd.powf(power) * (-decay / t2).exp();
        let ph = phase_map.as_ref().map_or(0.0, |m| m[i]);
        C64::from_polar(mag, ph)
    });
    let casorati = u_true.matmul(&v_true)?;
    let series = ImageSeries::from_casorati(h, w, &casorati)?;
    Ok(CoefficientSeries {
        series,
        u_true,
        v_true,
    })
}

/// Magnitude image of one echo time, `ρ₀·exp(−TE/T2)`.
pub fn contrast_image(tissue: &TissueMaps, te: f64) -> Vec<f64> {
    tissue
        .proton_density
        .iter()
        .zip(&tissue.t2_map)
        .zip(&tissue.support_mask)
        .map(|((&pd, &t2), &s)| if s { pd * (-te / t2).exp() } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::svd_full;

    #[test]
    fn disc_support_matches_analytic_membership() {
        let spec = PhantomSpec::disc(64, 64, 0.5, 1.0, 80.0);
        let t = render_tissue(&spec).unwrap();
        let mut expected = 0;
        for row in 0..64 {
            for col in 0..64 {
                let (x, y) = pixel_coords(row, col, 64, 64);
                if x * x + y * y <= 0.25 {
                    expected += 1;
                }
            }
        }
        assert_eq!(t.support_mask.iter().filter(|&&s| s).count(), expected);
    }

    #[test]
    fn interior_point_is_contained() {
        let e = ellipse(0.1, -0.2, 0.3, 0.1, 0.7, 1.0, 50.0);
        assert!(e.contains(0.1, -0.2));
        assert!(e.contains(0.1 + 0.2 * 0.7f64.cos(), -0.2 + 0.2 * 0.7f64.sin()));
        assert!(!e.contains(0.1, 0.2));
    }

    #[test]
    fn later_ellipse_wins_overlap() {
        let spec = PhantomSpec {
            height: 16,
            width: 16,
            ellipses: vec![
                ellipse(0.0, 0.0, 0.8, 0.8, 0.0, 1.0, 50.0),
                ellipse(0.0, 0.0, 0.3, 0.3, 0.0, 0.5, 120.0),
            ],
            seed: 0,
        };
        let t = render_tissue(&spec).unwrap();
        let centre = 8 * 16 + 8;
        assert_eq!(t.t2_map[centre], 120.0);
        assert_eq!(t.proton_density[centre], 0.5);
    }

    #[test]
    fn empty_spec_is_rejected() {
        let spec = PhantomSpec {
            height: 8,
            width: 8,
            ellipses: vec![],
            seed: 0,
        };
        assert!(matches!(render_tissue(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn decay_values_are_analytic() {
        let t = render_tissue(&PhantomSpec::disc(8, 8, 0.9, 1.0, 80.0)).unwrap();
        let s = simulate_multi_te(&t, &[80.0, 1e-9]).unwrap();
        let c = 4 * 8 + 4;
        assert!((s.frame(0)[c].re - (-1.0f64).exp()).abs() < 1e-15);
        assert!((s.frame(1)[c].re - 1.0).abs() < 1e-9);
    }

    #[test]
    fn three_t2_classes_give_rank_three() {
        let t = render_tissue(&PhantomSpec::brain(64, 64)).unwrap();
        let s = simulate_multi_te(&t, &echo_times(8.8, 8.8, 16)).unwrap();
        let svd = svd_full(&s.casorati()).unwrap();
        assert!(svd.s[3] / svd.s[0] < 1e-10, "σ₄/σ₁ = {}", svd.s[3] / svd.s[0]);
        assert!(svd.s[2] / svd.s[0] > 1e-6);
    }

    #[test]
    fn decay_is_monotone_in_te() {
        let t = render_tissue(&PhantomSpec::subject(32, 32, 5)).unwrap();
        let s = simulate_multi_te(&t, &echo_times(5.0, 10.0, 6)).unwrap();
        for i in 0..s.voxels() {
            if t.support_mask[i] {
                for k in 1..6 {
                    assert!(s.frame(k)[i].re < s.frame(k - 1)[i].re);
                }
            }
        }
    }

    #[test]
    fn subjects_keep_three_classes() {
        let t = render_tissue(&PhantomSpec::subject(64, 64, 77)).unwrap();
        let s = simulate_multi_te(&t, &echo_times(8.8, 8.8, 8)).unwrap();
        let svd = svd_full(&s.casorati()).unwrap();
        assert!(svd.s[3] / svd.s[0] < 1e-10);
    }

    #[test]
    fn uniform_single_coil_is_identity() {
        let maps = simulate_coils(4, 4, 1, true).unwrap();
        assert!(maps[0].iter().all(|&z| z == C64::new(1.0, 0.0)));
    }

    #[test]
    fn coil_sum_of_squares_is_positive() {
        let maps = simulate_coils(64, 64, 4, false).unwrap();
        for i in 0..64 * 64 {
            let sos: f64 = maps.iter().map(|m| m[i].norm_sqr()).sum();
            assert!(sos > 0.0);
        }
        assert_eq!(maps, simulate_coils(64, 64, 4, false).unwrap());
    }

    #[test]
    fn zero_sigma_is_bit_exact() {
        let v = vec![C64::new(1.5, -0.25); 10];
        let out = add_noise_slice(&v, NoiseModel { sigma: 0.0, seed: 1 }).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn noise_statistics() {
        let v = vec![C64::new(0.0, 0.0); 1_000_000];
        let nm = NoiseModel { sigma: 0.1, seed: 9 };
        let out = add_noise_slice(&v, nm).unwrap();
        let n = out.len() as f64;
        let (mr, mi) = (
            out.iter().map(|z| z.re).sum::<f64>() / n,
            out.iter().map(|z| z.im).sum::<f64>() / n,
        );
        let sr = (out.iter().map(|z| (z.re - mr).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let si = (out.iter().map(|z| (z.im - mi).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((0.0995..=0.1005).contains(&sr), "{sr}");
        assert!((0.0995..=0.1005).contains(&si), "{si}");
        assert_eq!(out, add_noise_slice(&v, nm).unwrap());
    }

    #[test]
    fn phase_gradient_respects_bound() {
        let bound = 1.5;
        let p = PhaseSpec::random(3, bound, 70.0, 0.3);
        for te in [0.0, 35.0, 70.0] {
            assert!(p.gradient_bound(te) <= bound * (1.0 + 1e-12));
            // finite-difference check on a grid
            let h = 1e-6;
            for i in 0..21 {
                for j in 0..21 {
                    let (x, y) = (-1.0 + 0.1 * i as f64, -1.0 + 0.1 * j as f64);
                    let gx = (p.value(x + h, y, te) - p.value(x - h, y, te)) / (2.0 * h);
                    let gy = (p.value(x, y + h, te) - p.value(x, y - h, te)) / (2.0 * h);
                    assert!((gx * gx + gy * gy).sqrt() <= bound + 1e-6);
                }
            }
        }
    }

    #[test]
    fn coefficient_series_is_exact_rank() {
        let t = render_tissue(&PhantomSpec::brain(32, 32)).unwrap();
        let phase = PhaseSpec::random(1, 1.0, 1.0, 0.0);
        let cs = simulate_coefficient_series(&t, 3, 16, Some(&phase)).unwrap();
        let svd = svd_full(&cs.series.casorati()).unwrap();
        assert!(svd.s[3] / svd.s[0] < 1e-10);
        assert!(svd.s[2] / svd.s[0] > 1e-6);
        let rebuilt = cs.u_true.matmul(&cs.v_true).unwrap();
        let diff: f64 = rebuilt
            .data()
            .iter()
            .zip(cs.series.casorati().data())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
        let vv = cs.v_true.matmul(&cs.v_true.adjoint()).unwrap();
        for r in 0..3 {
            for s in 0..3 {
                let e = if r == s { 1.0 } else { 0.0 };
                assert!((vv.get(r, s) - e).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn rank_one_coefficient_series_frames_are_proportional() {
        let t = render_tissue(&PhantomSpec::disc(16, 16, 0.6, 1.0, 80.0)).unwrap();
        let cs = simulate_coefficient_series(&t, 1, 5, None).unwrap();
        let base = cs.series.frame(0).to_vec();
        for k in 1..5 {
            let ratio = cs.v_true.get(0, k) / cs.v_true.get(0, 0);
            for (a, b) in cs.series.frame(k).iter().zip(&base) {
                assert!((a - b * ratio).norm() < 1e-12);
            }
        }
        assert!(matches!(
            simulate_coefficient_series(&t, 6, 5, None),
            Err(Error::Rank { .. })
        ));
    }
}
