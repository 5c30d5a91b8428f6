//! Low-rank subspace model `X ≈ U V` with a fixed temporal basis `V`, and
//! the regularized least-squares solver for the spatial coefficients `U`.
//!
//! The solver works in coefficient space throughout. Because the rows of
//! `V` are orthonormal, `‖(D U V)_g‖₂` over the `T` temporal channels of a
//! gradient location equals `‖(D U)_g‖₂` over the `R` coefficient channels,
//! so group norms are evaluated on `U` directly.

use crate::encoding::{central_rows, Acquisition, Encoding, KSpace};
use crate::error::{Error, Result};
use crate::numerics::{cg_solve, norm, svd_truncated, CMatrix, CgOptions, C64};
use crate::numerics::{Direction, Fft2Plan};
use crate::series::ImageSeries;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceModel {
    /// `N × R`
    pub u: CMatrix,
    /// `R × T`, orthonormal rows.
    pub v: CMatrix,
}

impl SubspaceModel {
    pub fn rank(&self) -> usize {
        self.v.rows()
    }

    pub fn series(&self, height: usize, width: usize) -> Result<ImageSeries> {
        ImageSeries::from_casorati(height, width, &self.u.matmul(&self.v)?)
    }
}

/// `U = X Vᴴ`, the orthogonal projection coefficients of a series.
pub fn project_onto(x: &ImageSeries, v: &CMatrix) -> Result<CMatrix> {
    if v.cols() != x.frames() {
        return Err(Error::Shape(format!(
            "basis has {} frames, series has {}",
            v.cols(),
            x.frames()
        )));
    }
    x.casorati().matmul(&v.adjoint())
}

/// Zero-filled, coil-combined images of the central `band` k-space rows.
pub fn navigator(acq: &Acquisition, band: usize) -> Result<ImageSeries> {
    let enc = &acq.encoding;
    let rows = central_rows(enc.height(), band);
    let common = enc.mask().common_rows();
    if let Some(r) = rows.iter().find(|r| !common.contains(r)) {
        return Err(Error::Mask(format!("navigator row {r} is not sampled at every echo")));
    }
    enc.adjoint_rows(&acq.kspace, Some(&rows))
}

/// Top-`rank` right singular vectors of the Casorati matrix, as rows.
pub fn estimate_basis(navigator: &ImageSeries, rank: usize) -> Result<CMatrix> {
    Ok(svd_truncated(&navigator.casorati(), rank)?.vt)
}

/// Per-pixel `sqrt(Σ_t |x_t|²)`, scaled so the maximum is one.
pub fn sos_reference(x: &ImageSeries) -> Vec<f64> {
    let n = x.voxels();
    let mut out = vec![0.0; n];
    for t in 0..x.frames() {
        for (o, z) in out.iter_mut().zip(x.frame(t)) {
            *o += z.norm_sqr();
        }
    }
    for o in out.iter_mut() {
        *o = o.sqrt();
    }
    let max = out.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for o in out.iter_mut() {
            *o /= max;
        }
    }
    out
}

/// Unit-modulus phase `x/|x|`, or one where `|x|` is at most `eps` times the
/// largest magnitude of the frame.
pub fn extract_phase(x: &ImageSeries, eps: f64) -> ImageSeries {
    let mut out = x.clone();
    for t in 0..x.frames() {
        let max = x.frame(t).iter().map(|z| z.norm()).fold(0.0, f64::max);
        for z in out.frame_mut(t) {
            let m = z.norm();
            *z = if m > eps * max && m > 0.0 { *z / m } else { C64::new(1.0, 0.0) };
        }
    }
    out
}

/// Periodic forward differences of one image: `(dx, dy)`.
pub fn gradient(img: &[C64], height: usize, width: usize) -> (Vec<C64>, Vec<C64>) {
    let mut dx = vec![ZERO; img.len()];
    let mut dy = vec![ZERO; img.len()];
    for i in 0..height {
        let i1 = (i + 1) % height;
        for j in 0..width {
            let j1 = (j + 1) % width;
            let p = i * width + j;
            dx[p] = img[i * width + j1] - img[p];
            dy[p] = img[i1 * width + j] - img[p];
        }
    }
    (dx, dy)
}

/// Adjoint of [`gradient`], accumulated into `out`.
fn gradient_adjoint_add(dx: &[C64], dy: &[C64], height: usize, width: usize, out: &mut [C64]) {
    for i in 0..height {
        let im = (i + height - 1) % height;
        for j in 0..width {
            let jm = (j + width - 1) % width;
            let p = i * width + j;
            out[p] += dx[i * width + jm] - dx[p] + dy[im * width + j] - dy[p];
        }
    }
}

/// Per-edge weights of the weighted difference operator `D_w`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeWeights {
    pub height: usize,
    pub width: usize,
    pub wx: Vec<f64>,
    pub wy: Vec<f64>,
}

impl EdgeWeights {
    pub fn uniform(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            wx: vec![1.0; height * width],
            wy: vec![1.0; height * width],
        }
    }

    /// `exp(−|∇x_ref|²/σ²)` per edge, `σ` the median gradient magnitude
    /// (over pixels with non-zero gradient, if the plain median vanishes).
    pub fn from_reference(reference: &[f64], height: usize, width: usize) -> Result<Self> {
        if reference.len() != height * width {
            return Err(Error::Shape("reference size does not match grid".into()));
        }
        let img: Vec<C64> = reference.iter().map(|&v| C64::new(v, 0.0)).collect();
        let (dx, dy) = gradient(&img, height, width);
        let mut mags: Vec<f64> = dx
            .iter()
            .zip(&dy)
            .map(|(a, b)| (a.norm_sqr() + b.norm_sqr()).sqrt())
            .collect();
        mags.sort_by(f64::total_cmp);
        let mut sigma = median_sorted(&mags);
        if sigma == 0.0 {
            let nz: Vec<f64> = mags.iter().copied().filter(|&m| m > 0.0).collect();
            sigma = median_sorted(&nz);
        }
        if sigma == 0.0 {
            return Ok(Self::uniform(height, width));
        }
        let s2 = sigma * sigma;
        Ok(Self {
            height,
            width,
            wx: dx.iter().map(|d| (-d.norm_sqr() / s2).exp()).collect(),
            wy: dy.iter().map(|d| (-d.norm_sqr() / s2).exp()).collect(),
        })
    }
}

fn median_sorted(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else if v.len() % 2 == 1 {
        v[v.len() / 2]
    } else {
        0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Regularizer {
    /// `λ₂ ‖D(UV)‖₂,₁`, ε-smoothed, by iteratively reweighted least squares.
    JointSparsity {
        lambda2: f64,
        /// Smoothing floor; `None` means 1e-6 of the initial median group
        /// norm.
        irls_eps: Option<f64>,
    },
    /// `λ₂ ‖D_w(UV)‖²`, one quadratic solve.
    EdgeTikhonov { lambda2: f64, weights: EdgeWeights },
}

impl Regularizer {
    pub fn none() -> Self {
        Regularizer::JointSparsity {
            lambda2: 0.0,
            irls_eps: None,
        }
    }

    pub fn lambda2(&self) -> f64 {
        match self {
            Regularizer::JointSparsity { lambda2, .. } | Regularizer::EdgeTikhonov { lambda2, .. } => *lambda2,
        }
    }
}

/// Quadratic coupling to generator outputs.
#[derive(Clone, Debug)]
pub enum Prior {
    /// `Σ_t λ_t ‖(UV)_t − g_t‖²`
    Frames { lambda: Vec<f64>, targets: ImageSeries },
    /// `Σ_r λ_r ‖U_r − g_r‖²`, targets `N × R`.
    Coefficients { lambda: Vec<f64>, targets: CMatrix },
}

impl Prior {
    /// `(gram, rhs)` with `gram` acting as `U ↦ U·gram`.
    fn normal_terms(&self, v: &CMatrix) -> Result<(CMatrix, CMatrix)> {
        let r = v.rows();
        match self {
            Prior::Frames { lambda, targets } => {
                if lambda.len() != v.cols() || targets.frames() != v.cols() {
                    return Err(Error::Shape("prior does not match basis length".into()));
                }
                let gram = CMatrix::from_fn(r, r, |a, b| {
                    (0..v.cols()).map(|t| v.get(a, t) * v.get(b, t).conj() * lambda[t]).sum()
                });
                let n = targets.voxels();
                let mut rhs = CMatrix::zeros(n, r);
                for (t, &l) in lambda.iter().enumerate() {
                    if l == 0.0 {
                        continue;
                    }
                    let g = targets.frame(t);
                    for i in 0..n {
                        for a in 0..r {
                            let cur = rhs.get(i, a);
                            rhs.set(i, a, cur + g[i] * v.get(a, t).conj() * l);
                        }
                    }
                }
                Ok((gram, rhs))
            }
            Prior::Coefficients { lambda, targets } => {
                if lambda.len() != r || targets.cols() != r {
                    return Err(Error::Shape("prior does not match rank".into()));
                }
                let gram = CMatrix::from_fn(r, r, |a, b| {
                    if a == b {
                        C64::new(lambda[a], 0.0)
                    } else {
                        ZERO
                    }
                });
                let rhs = CMatrix::from_fn(targets.rows(), r, |i, a| targets.get(i, a) * lambda[a]);
                Ok((gram, rhs))
            }
        }
    }

    fn value(&self, u: &CMatrix, v: &CMatrix) -> Result<f64> {
        match self {
            Prior::Frames { lambda, targets } => {
                let x = u.matmul(v)?;
                let n = u.rows();
                let mut acc = 0.0;
                for (t, &l) in lambda.iter().enumerate() {
                    if l == 0.0 {
                        continue;
                    }
                    let g = targets.frame(t);
                    acc += l * (0..n).map(|i| (x.get(i, t) - g[i]).norm_sqr()).sum::<f64>();
                }
                Ok(acc)
            }
            Prior::Coefficients { lambda, targets } => {
                let mut acc = 0.0;
                for (a, &l) in lambda.iter().enumerate() {
                    acc += l * (0..u.rows()).map(|i| (u.get(i, a) - targets.get(i, a)).norm_sqr()).sum::<f64>();
                }
                Ok(acc)
            }
        }
    }
}

/// `A(·V)` restricted to coefficient space, with a fast normal operator.
///
/// Without field-map phase, `AᴴA` in coefficient space factorises as
/// `U_r ↦ Σ_c S̄_c F⁻¹ Σ_{r'} Q_{r r'}(k_y) F(S_c U_{r'})` where
/// `Q_{r r'}(k_y) = Σ_t conj(V_{rt}) V_{r't} m_t(k_y)`, so one application
/// costs `2·C·R` FFTs instead of `2·C·T`.
pub struct SubspaceOperator<'a> {
    enc: &'a Encoding,
    v: CMatrix,
    /// Per k-space row, `R × R` row-major.
    q: Vec<Vec<C64>>,
    plan: Fft2Plan,
}

impl<'a> SubspaceOperator<'a> {
    pub fn new(enc: &'a Encoding, v: &CMatrix) -> Result<Self> {
        if v.cols() != enc.frames() {
            return Err(Error::Shape(format!(
                "basis has {} frames, acquisition has {}",
                v.cols(),
                enc.frames()
            )));
        }
        let r = v.rows();
        let h = enc.height();
        let mut q = vec![vec![ZERO; r * r]; h];
        for t in 0..enc.frames() {
            for &row in enc.mask().rows(t) {
                for a in 0..r {
                    for b in 0..r {
                        q[row][a * r + b] += v.get(a, t).conj() * v.get(b, t);
                    }
                }
            }
        }
        Ok(Self {
            enc,
            v: v.clone(),
            q,
            plan: Fft2Plan::new(h, enc.width())?,
        })
    }

    pub fn basis(&self) -> &CMatrix {
        &self.v
    }

    pub fn encoding(&self) -> &Encoding {
        self.enc
    }

    pub fn voxels(&self) -> usize {
        self.enc.height() * self.enc.width()
    }

    pub fn rank(&self) -> usize {
        self.v.rows()
    }

    pub fn series(&self, u: &CMatrix) -> Result<ImageSeries> {
        ImageSeries::from_casorati(self.enc.height(), self.enc.width(), &u.matmul(&self.v)?)
    }

    pub fn forward(&self, u: &CMatrix) -> Result<KSpace> {
        self.enc.forward(&self.series(u)?)
    }

    /// `(Aᴴy) Vᴴ`
    pub fn adjoint(&self, y: &KSpace) -> Result<CMatrix> {
        project_onto(&self.enc.adjoint(y)?, &self.v)
    }

    /// `(AᴴA(UV)) Vᴴ` on a row-major `N × R` buffer.
    pub fn normal(&self, u: &[C64]) -> Vec<C64> {
        let (h, w, r) = (self.enc.height(), self.enc.width(), self.rank());
        let n = h * w;
        if self.enc.has_field_map() {
            let um = CMatrix::new(n, r, u.to_vec()).expect("buffer length");
            let x = self.series(&um).expect("shapes agree");
            let nx = self.enc.normal(&x).expect("shapes agree");
            return project_onto(&nx, &self.v).expect("shapes agree").into_data();
        }
        let mut out = vec![ZERO; n * r];
        let mut k = vec![vec![ZERO; n]; r];
        let mut mixed = vec![ZERO; n];
        let mut tmp = vec![ZERO; r];
        for s in self.enc.sensitivities() {
            for (a, ka) in k.iter_mut().enumerate() {
                for (i, kv) in ka.iter_mut().enumerate() {
                    *kv = s[i] * u[i * r + a];
                }
                self.plan.process(ka, Direction::Forward);
            }
            for a in 0..r {
                for row in 0..h {
                    let qrow = &self.q[row][a * r..(a + 1) * r];
                    let dst = &mut mixed[row * w..(row + 1) * w];
                    if qrow.iter().all(|z| *z == ZERO) {
                        dst.fill(ZERO);
                        continue;
                    }
                    for (col, d) in dst.iter_mut().enumerate() {
                        for (b, t) in tmp.iter_mut().enumerate() {
                            *t = k[b][row * w + col];
                        }
                        *d = qrow.iter().zip(&tmp).map(|(q, kv)| q * kv).sum();
                    }
                }
                self.plan.process(&mut mixed, Direction::Inverse);
                for i in 0..n {
                    out[i * r + a] += s[i].conj() * mixed[i];
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveOptions {
    pub cg: CgOptions,
    /// Reweighting passes for the joint-sparsity term.
    pub irls_iters: usize,
    /// Stop reweighting once `‖ΔU‖/‖U‖` falls below this.
    pub irls_tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            cg: CgOptions {
                tol: 1e-8,
                max_iter: 100,
            },
            irls_iters: 30,
            irls_tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub u: CMatrix,
    /// Objective before solving (index 0) and after each pass.
    pub objective: Vec<f64>,
    /// `‖A(UV) − y‖²` alongside `objective`.
    pub data_loss: Vec<f64>,
    /// The ε actually used (joint sparsity only).
    pub irls_eps: Option<f64>,
    pub cg_iterations: usize,
    /// False if any inner solve hit its iteration cap.
    pub cg_converged: bool,
}

/// Everything the coefficient solver needs besides the starting point.
pub struct Problem<'a> {
    pub op: &'a SubspaceOperator<'a>,
    pub kspace: &'a KSpace,
    pub regularizer: &'a Regularizer,
    pub prior: Option<&'a Prior>,
}

/// Per-group norms of `D U` (x edges then y edges).
fn group_norms(u: &[C64], r: usize, h: usize, w: usize) -> Vec<f64> {
    let n = h * w;
    let mut acc = vec![0.0; 2 * n];
    let mut col = vec![ZERO; n];
    for a in 0..r {
        for i in 0..n {
            col[i] = u[i * r + a];
        }
        let (dx, dy) = gradient(&col, h, w);
        for i in 0..n {
            acc[i] += dx[i].norm_sqr();
            acc[n + i] += dy[i].norm_sqr();
        }
    }
    acc.into_iter().map(f64::sqrt).collect()
}

fn huber(r: f64, eps: f64) -> f64 {
    if r >= eps {
        r
    } else {
        r * r / (2.0 * eps) + eps / 2.0
    }
}

/// `Σ_r Dᴴ diag(wx, wy) D U_r` added into `out` with factor `scale`.
fn weighted_laplacian_add(u: &[C64], r: usize, h: usize, w: usize, wx: &[f64], wy: &[f64], scale: f64, out: &mut [C64]) {
    let n = h * w;
    let mut col = vec![ZERO; n];
    let mut acc = vec![ZERO; n];
    for a in 0..r {
        for i in 0..n {
            col[i] = u[i * r + a];
        }
        let (mut dx, mut dy) = gradient(&col, h, w);
        for i in 0..n {
            dx[i] *= wx[i];
            dy[i] *= wy[i];
        }
        acc.fill(ZERO);
        gradient_adjoint_add(&dx, &dy, h, w, &mut acc);
        for i in 0..n {
            out[i * r + a] += acc[i] * scale;
        }
    }
}

impl Problem<'_> {
    fn dims(&self) -> (usize, usize, usize) {
        (self.op.enc.height(), self.op.enc.width(), self.op.rank())
    }

    pub fn data_loss(&self, u: &CMatrix) -> Result<f64> {
        let y = self.op.forward(u)?;
        Ok(y
            .data()
            .iter()
            .zip(self.kspace.data())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum())
    }

    /// Full (ε-smoothed) objective.
    pub fn objective(&self, u: &CMatrix, eps: Option<f64>) -> Result<(f64, f64)> {
        let (h, w, r) = self.dims();
        let data = self.data_loss(u)?;
        let mut total = data;
        if let Some(p) = self.prior {
            total += p.value(u, &self.op.v)?;
        }
        match self.regularizer {
            Regularizer::JointSparsity { lambda2, .. } if *lambda2 > 0.0 => {
                let eps = eps.unwrap_or(0.0);
                total += lambda2 * group_norms(u.data(), r, h, w).iter().map(|&g| huber(g, eps)).sum::<f64>();
            }
            Regularizer::EdgeTikhonov { lambda2, weights } => {
                let n = h * w;
                let mut col = vec![ZERO; n];
                let mut acc = 0.0;
                for a in 0..r {
                    for i in 0..n {
                        col[i] = u.get(i, a);
                    }
                    let (dx, dy) = gradient(&col, h, w);
                    for i in 0..n {
                        acc += weights.wx[i] * dx[i].norm_sqr() + weights.wy[i] * dy[i].norm_sqr();
                    }
                }
                total += lambda2 * acc;
            }
            _ => {}
        }
        Ok((total, data))
    }

    /// Smoothing floor for the joint-sparsity term at `u`.
    pub fn default_eps(&self, u: &CMatrix) -> f64 {
        let (h, w, r) = self.dims();
        let mut g = group_norms(u.data(), r, h, w);
        g.sort_by(f64::total_cmp);
        let mut m = median_sorted(&g);
        if m == 0.0 {
            m = g.last().copied().unwrap_or(0.0);
        }
        if m == 0.0 {
            1e-12
        } else {
            1e-6 * m
        }
    }

    /// Minimises the objective over `U`, starting from `init` or, when
    /// absent, from the zero-filled projection `(Aᴴy)Vᴴ`.
    pub fn solve(&self, init: Option<&CMatrix>, opts: &SolveOptions) -> Result<SolveReport> {
        let (h, w, r) = self.dims();
        let n = h * w;
        let b0 = self.op.adjoint(self.kspace)?;
        let mut u = match init {
            Some(u) if u.rows() == n && u.cols() == r => u.clone(),
            Some(_) => return Err(Error::Shape("initial coefficients have the wrong shape".into())),
            None => b0.clone(),
        };
        let (gram, prior_rhs) = match self.prior {
            Some(p) => {
                let (g, rhs) = p.normal_terms(&self.op.v)?;
                (Some(g), Some(rhs))
            }
            None => (None, None),
        };
        let mut rhs = b0.into_data();
        if let Some(p) = &prior_rhs {
            for (a, b) in rhs.iter_mut().zip(p.data()) {
                *a += b;
            }
        }
        let apply_base = |x: &[C64], out: &mut Vec<C64>| {
            *out = self.op.normal(x);
            if let Some(g) = &gram {
                for i in 0..n {
                    for a in 0..r {
                        let s: C64 = (0..r).map(|b| x[i * r + b] * g.get(b, a)).sum();
                        out[i * r + a] += s;
                    }
                }
            }
        };

        let eps = match self.regularizer {
            Regularizer::JointSparsity { irls_eps: Some(e), .. } => Some(*e),
            Regularizer::JointSparsity { lambda2, .. } if *lambda2 > 0.0 => Some(self.default_eps(&u)),
            _ => None,
        };
        let (obj0, data0) = self.objective(&u, eps)?;
        let mut report = SolveReport {
            u: u.clone(),
            objective: vec![obj0],
            data_loss: vec![data0],
            irls_eps: eps,
            cg_iterations: 0,
            cg_converged: true,
        };

        let passes = match self.regularizer {
            Regularizer::JointSparsity { lambda2, .. } if *lambda2 > 0.0 => opts.irls_iters.max(1),
            _ => 1,
        };
        for _ in 0..passes {
            let (wx, wy, scale) = match self.regularizer {
                Regularizer::JointSparsity { lambda2, .. } if *lambda2 > 0.0 => {
                    let e = eps.expect("eps set for sparsity");
                    let g = group_norms(u.data(), r, h, w);
                    let wts: Vec<f64> = g.iter().map(|&v| 1.0 / v.max(e)).collect();
                    (wts[..n].to_vec(), wts[n..].to_vec(), *lambda2 / 2.0)
                }
                Regularizer::EdgeTikhonov { lambda2, weights } => {
                    if weights.height != h || weights.width != w {
                        return Err(Error::Shape("edge weights do not match grid".into()));
                    }
                    (weights.wx.clone(), weights.wy.clone(), *lambda2)
                }
                _ => (Vec::new(), Vec::new(), 0.0),
            };
            let apply = |x: &[C64]| {
                let mut out = Vec::new();
                apply_base(x, &mut out);
                if scale > 0.0 {
                    weighted_laplacian_add(x, r, h, w, &wx, &wy, scale, &mut out);
                }
                out
            };
            let outcome = cg_solve(apply, &rhs, Some(u.data()), opts.cg)?;
            report.cg_iterations += outcome.iterations;
            report.cg_converged &= outcome.converged;
            let next = CMatrix::new(n, r, outcome.x)?;
            let change = {
                let d: Vec<C64> = next.data().iter().zip(u.data()).map(|(a, b)| a - b).collect();
                norm(&d) / norm(next.data()).max(f64::MIN_POSITIVE)
            };
            let (obj, data) = self.objective(&next, eps)?;
            if !obj.is_finite() {
                return Err(Error::Numerical("non-finite objective in coefficient solve".into()));
            }
            u = next;
            report.objective.push(obj);
            report.data_loss.push(data);
            if change < opts.irls_tol {
                break;
            }
        }
        report.u = u;
        Ok(report)
    }
}

/// Regularized subspace reconstruction with fixed `V`.
pub fn subspace_recon(
    acq: &Acquisition,
    v: &CMatrix,
    reg: &Regularizer,
    init: Option<&CMatrix>,
    opts: &SolveOptions,
) -> Result<(SubspaceModel, SolveReport)> {
    let op = SubspaceOperator::new(&acq.encoding, v)?;
    let problem = Problem {
        op: &op,
        kspace: &acq.kspace,
        regularizer: reg,
        prior: None,
    };
    let report = problem.solve(init, opts)?;
    Ok((
        SubspaceModel {
            u: report.u.clone(),
            v: v.clone(),
        },
        report,
    ))
}

/// Largest singular value of the Casorati matrix of `Aᴴy`; dividing the
/// k-space by it puts data of any scale on a common footing.
pub fn adjoint_spectral_norm(acq: &Acquisition) -> Result<f64> {
    let x = acq.encoding.adjoint(&acq.kspace)?;
    let s = svd_truncated(&x.casorati(), 1)?;
    Ok(s.s[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{make_mask, MaskOptions, SamplingMask};
    use crate::numerics::{dot, rel_error, svd_full};
    use crate::phantom::{echo_times, render_tissue, simulate_coils, simulate_multi_te, PhantomSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CMatrix {
        CMatrix::from_fn(rows, cols, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    fn acquisition(h: usize, frames: usize, af: f64, seed: u64) -> (Acquisition, ImageSeries) {
        let tissue = render_tissue(&PhantomSpec::brain(h, h)).unwrap();
        let x = simulate_multi_te(&tissue, &echo_times(8.8, 8.8, frames)).unwrap();
        let mask = if af == 1.0 {
            SamplingMask::fully_sampled(h, h, frames)
        } else {
            make_mask(
                h,
                h,
                frames,
                &MaskOptions {
                    acceleration: af,
                    center_all: 4,
                    center_first: 4,
                    shared: false,
                    seed,
                },
            )
            .unwrap()
        };
        let enc = Encoding::new(mask, simulate_coils(h, h, 4, false).unwrap()).unwrap();
        let y = enc.forward(&x).unwrap();
        (Acquisition::new(enc, y, echo_times(8.8, 8.8, frames)).unwrap(), x)
    }

    #[test]
    fn fast_normal_matches_generic_path() {
        let (acq, _) = acquisition(16, 5, 2.0, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = svd_truncated(&random_matrix(&mut rng, 3, 5), 3).unwrap().vt;
        let op = SubspaceOperator::new(&acq.encoding, &v).unwrap();
        let u = random_matrix(&mut rng, 256, 3);
        let fast = op.normal(u.data());
        let x = op.series(&u).unwrap();
        let slow = project_onto(&acq.encoding.normal(&x).unwrap(), &v).unwrap();
        assert!(rel_error(&fast, slow.data()) < 1e-12);
    }

    #[test]
    fn gradient_adjoint_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, w) = (6, 8);
        let x: Vec<C64> = (0..h * w).map(|_| C64::new(rng.random(), rng.random())).collect();
        let px: Vec<C64> = (0..h * w).map(|_| C64::new(rng.random(), rng.random())).collect();
        let py: Vec<C64> = (0..h * w).map(|_| C64::new(rng.random(), rng.random())).collect();
        let (dx, dy) = gradient(&x, h, w);
        let lhs = dot(&dx, &px) + dot(&dy, &py);
        let mut adj = vec![ZERO; h * w];
        gradient_adjoint_add(&px, &py, h, w, &mut adj);
        let rhs = dot(&x, &adj);
        assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn basis_spans_true_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let uf = random_matrix(&mut rng, 64, 2);
        let vf = random_matrix(&mut rng, 2, 6);
        let x = ImageSeries::from_casorati(8, 8, &uf.matmul(&vf).unwrap()).unwrap();
        let v = estimate_basis(&x, 2).unwrap();
        // principal angles: singular values of V·Q where Q spans the true rows
        let q = svd_truncated(&vf, 2).unwrap().vt;
        let m = v.matmul(&q.adjoint()).unwrap();
        let s = svd_full(&m).unwrap().s;
        for sv in s {
            assert!((1.0 - sv).abs() < 1e-10);
        }
        let vv = v.matmul(&v.adjoint()).unwrap();
        assert!(rel_error(vv.data(), CMatrix::identity(2).data()) < 1e-10);
    }

    #[test]
    fn full_rank_basis_is_complete() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = ImageSeries::from_casorati(4, 4, &random_matrix(&mut rng, 16, 5)).unwrap();
        let v = estimate_basis(&x, 5).unwrap();
        let p = v.adjoint().matmul(&v).unwrap();
        assert!(rel_error(p.data(), CMatrix::identity(5).data()) < 1e-10);
        assert!(matches!(estimate_basis(&x, 6), Err(Error::Rank { .. })));
    }

    #[test]
    fn navigator_projection_of_three_class_phantom() {
        let (acq, _) = acquisition(32, 8, 4.0, 1);
        let nav = navigator(&acq, 4).unwrap();
        let v = estimate_basis(&nav, 3).unwrap();
        let u = project_onto(&nav, &v).unwrap();
        let back = u.matmul(&v).unwrap();
        assert!(rel_error(back.data(), nav.casorati().data()) < 1e-8);
    }

    #[test]
    fn navigator_requires_common_centre() {
        let (acq, _) = acquisition(32, 4, 4.0, 1);
        assert!(matches!(navigator(&acq, 12), Err(Error::Mask(_))));
    }

    #[test]
    fn exact_recovery_from_full_sampling() {
        let (acq, x) = acquisition(32, 8, 1.0, 0);
        let v = estimate_basis(&x, 3).unwrap();
        let opts = SolveOptions {
            cg: CgOptions {
                tol: 1e-14,
                max_iter: 200,
            },
            ..SolveOptions::default()
        };
        let (model, report) = subspace_recon(&acq, &v, &Regularizer::none(), None, &opts).unwrap();
        let rec = model.series(32, 32).unwrap();
        assert!(rel_error(rec.data(), x.data()) < 1e-8);
        let rel_resid = report.data_loss.last().unwrap().sqrt() / acq.kspace.norm();
        assert!(rel_resid < 1e-10, "{rel_resid}");
    }

    #[test]
    fn irls_objective_is_non_increasing() {
        let (acq, x) = acquisition(32, 8, 4.0, 2);
        let v = estimate_basis(&x, 3).unwrap();
        let reg = Regularizer::JointSparsity {
            lambda2: 1e-2,
            irls_eps: None,
        };
        let opts = SolveOptions {
            irls_iters: 8,
            ..SolveOptions::default()
        };
        let (_, report) = subspace_recon(&acq, &v, &reg, None, &opts).unwrap();
        for w in report.objective.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "{:?}", report.objective);
        }
    }

    #[test]
    fn sparsity_beats_plain_least_squares() {
        let (acq, x) = acquisition(32, 8, 4.0, 7);
        let nav = navigator(&acq, 4).unwrap();
        let v = estimate_basis(&nav, 3).unwrap();
        let opts = SolveOptions::default();
        let (plain, _) = subspace_recon(&acq, &v, &Regularizer::none(), None, &opts).unwrap();
        let reg = Regularizer::JointSparsity {
            lambda2: 1e-5,
            irls_eps: None,
        };
        let (sparse, _) = subspace_recon(&acq, &v, &reg, None, &opts).unwrap();
        let e_plain = rel_error(plain.series(32, 32).unwrap().data(), x.data());
        let e_sparse = rel_error(sparse.series(32, 32).unwrap().data(), x.data());
        assert!(e_sparse < e_plain, "{e_sparse} vs {e_plain}");
    }

    #[test]
    fn edge_weights_fall_at_edges() {
        let mut img = vec![0.0; 64];
        for i in 0..8 {
            for j in 4..8 {
                img[i * 8 + j] = 1.0;
            }
        }
        let e = EdgeWeights::from_reference(&img, 8, 8).unwrap();
        assert!(e.wx[3] < 0.5);
        assert!((e.wx[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sos_and_phase() {
        let frame: Vec<C64> = (0..4).map(|i| C64::new(i as f64, 0.0)).collect();
        let one = ImageSeries::from_frames(2, 2, &[frame.clone()]).unwrap();
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in sos_reference(&one).iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let rot = C64::from_polar(1.0, std::f64::consts::FRAC_PI_4);
        let two = ImageSeries::from_frames(2, 2, &[frame.iter().map(|z| z * rot).collect()]).unwrap();
        let p = extract_phase(&two, 1e-12);
        assert_eq!(p.frame(0)[0], C64::new(1.0, 0.0));
        for z in &p.frame(0)[1..] {
            assert!((z - rot).norm() < 1e-15);
        }
        let doubled = ImageSeries::from_frames(2, 2, &[frame.clone(), frame]).unwrap();
        let s1 = sos_reference(&one);
        let s2 = sos_reference(&doubled);
        assert!(s1.iter().zip(&s2).all(|(a, b)| (a - b).abs() < 1e-15));
    }
}
