//! Cartesian undersampling masks and the multi-coil, multi-echo encoding
//! operator `A: x_t ↦ M_t F (S_c ⊙ x_t)`.
//!
//! Phase-encode lines are rows of k-space. The FFT is unshifted, so the
//! "centre" of k-space is row 0 and its neighbours modulo `H`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{ComplexTensor, Direction, Fft2Plan, C64};
use crate::series::ImageSeries;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskOptions {
    /// Nominal acceleration: each frame keeps `round(H / af)` lines.
    pub acceleration: f64,
    /// Central lines sampled in every frame.
    pub center_all: usize,
    /// Central lines sampled in the first frame (at least `center_all`).
    pub center_first: usize,
    /// Reuse one random draw for all frames instead of redrawing per frame.
    pub shared: bool,
    pub seed: u64,
}

impl Default for MaskOptions {
    fn default() -> Self {
        Self {
            acceleration: 4.0,
            center_all: 4,
            center_first: 4,
            shared: false,
            seed: 0,
        }
    }
}

/// Sampled phase-encode rows per frame, sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplingMask {
    height: usize,
    width: usize,
    rows: Vec<Vec<usize>>,
}

/// Row indices of the `count` lowest frequencies, `-count/2 .. count/2`
/// wrapped modulo `height`.
pub fn central_rows(height: usize, count: usize) -> Vec<usize> {
    let half = (count / 2) as isize;
    let mut rows: Vec<usize> = (0..count as isize)
        .map(|k| (k - half).rem_euclid(height as isize) as usize)
        .collect();
    rows.sort_unstable();
    rows
}

pub fn make_mask(height: usize, width: usize, frames: usize, opts: &MaskOptions) -> Result<SamplingMask> {
    if height == 0 || width == 0 || frames == 0 {
        return Err(Error::Mask("empty grid".into()));
    }
    let af = opts.acceleration;
    if !(af >= 1.0) || af > height as f64 {
        return Err(Error::Mask(format!("acceleration {af} outside [1, {height}]")));
    }
    let lines = ((height as f64 / af).round() as usize).max(1);
    let first = opts.center_first.max(opts.center_all);
    if first > lines {
        return Err(Error::Mask(format!(
            "{first} central lines do not fit in {lines} lines per frame"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut draw = |center: usize| -> Vec<usize> {
        let fixed = central_rows(height, center);
        let pool: Vec<usize> = (0..height).filter(|r| !fixed.contains(r)).collect();
        let extra = lines - center;
        let mut rows = fixed;
        rows.extend(sample(&mut rng, pool.len(), extra).into_iter().map(|i| pool[i]));
        rows.sort_unstable();
        rows
    };
    let mut rows = Vec::with_capacity(frames);
    if opts.shared {
        let common = draw(opts.center_all);
        for t in 0..frames {
            if t == 0 && first > opts.center_all {
                // widen the first frame's centre, keep the common pattern
                let mut r = common.clone();
                for c in central_rows(height, first) {
                    if !r.contains(&c) {
                        r.push(c);
                    }
                }
                r.sort_unstable();
                rows.push(r);
            } else {
                rows.push(common.clone());
            }
        }
    } else {
        for t in 0..frames {
            rows.push(draw(if t == 0 { first } else { opts.center_all }));
        }
    }
    Ok(SamplingMask {
        height,
        width,
        rows,
    })
}

impl SamplingMask {
    /// Mask from explicit row lists.
    pub fn from_rows(height: usize, width: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Mask("mask has no frames".into()));
        }
        let mut rows = rows;
        for r in rows.iter_mut() {
            r.sort_unstable();
            r.dedup();
            if r.iter().any(|&i| i >= height) {
                return Err(Error::Mask(format!("row index outside 0..{height}")));
            }
        }
        Ok(Self {
            height,
            width,
            rows,
        })
    }

    pub fn fully_sampled(height: usize, width: usize, frames: usize) -> Self {
        Self {
            height,
            width,
            rows: vec![(0..height).collect(); frames],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frames(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self, t: usize) -> &[usize] {
        &self.rows[t]
    }

    pub fn lines_per_frame(&self) -> Vec<usize> {
        self.rows.iter().map(Vec::len).collect()
    }

    /// Rows sampled in every frame.
    pub fn common_rows(&self) -> Vec<usize> {
        self.rows[0]
            .iter()
            .copied()
            .filter(|r| self.rows.iter().all(|rs| rs.binary_search(r).is_ok()))
            .collect()
    }

    /// Dense `[T, H, W]` 0/1 map.
    pub fn to_bits(&self) -> Vec<u8> {
        let (h, w) = (self.height, self.width);
        let mut bits = vec![0u8; self.frames() * h * w];
        for (t, rows) in self.rows.iter().enumerate() {
            for &r in rows {
                bits[(t * h + r) * w..(t * h + r + 1) * w].fill(1);
            }
        }
        bits
    }

    /// Inverse of [`to_bits`](Self::to_bits); every row must be all zeros
    /// or all ones.
    pub fn from_bits(frames: usize, height: usize, width: usize, bits: &[u8]) -> Result<Self> {
        if bits.len() != frames * height * width {
            return Err(Error::Shape("bitmask size does not match dimensions".into()));
        }
        let mut rows = Vec::with_capacity(frames);
        for t in 0..frames {
            let mut r = Vec::new();
            for row in 0..height {
                let line = &bits[(t * height + row) * width..(t * height + row + 1) * width];
                if line.iter().all(|&b| b != 0) {
                    r.push(row);
                } else if line.iter().any(|&b| b != 0) {
                    return Err(Error::Mask(format!("partial line at frame {t}, row {row}")));
                }
            }
            rows.push(r);
        }
        Self::from_rows(height, width, rows)
    }
}

/// Sampled k-space values only: for each frame, each coil, each sampled row
/// in ascending order, `W` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpace {
    mask: SamplingMask,
    coils: usize,
    offsets: Vec<usize>,
    data: Vec<C64>,
}

impl KSpace {
    pub fn zeros(mask: &SamplingMask, coils: usize) -> Self {
        let mut offsets = Vec::with_capacity(mask.frames() + 1);
        let mut acc = 0;
        for t in 0..mask.frames() {
            offsets.push(acc);
            acc += coils * mask.rows(t).len() * mask.width();
        }
        offsets.push(acc);
        Self {
            mask: mask.clone(),
            coils,
            offsets,
            data: vec![C64::new(0.0, 0.0); acc],
        }
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn coils(&self) -> usize {
        self.coils
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn with_data(&self, data: Vec<C64>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "k-space holds {} samples, got {}",
                self.data.len(),
                data.len()
            )));
        }
        Ok(Self {
            data,
            ..self.clone()
        })
    }

    /// Samples of frame `t`, coil `c`: `rows(t).len() × W`.
    pub fn block(&self, t: usize, c: usize) -> &[C64] {
        let len = self.mask.rows(t).len() * self.mask.width();
        let start = self.offsets[t] + c * len;
        &self.data[start..start + len]
    }

    pub fn block_mut(&mut self, t: usize, c: usize) -> &mut [C64] {
        let len = self.mask.rows(t).len() * self.mask.width();
        let start = self.offsets[t] + c * len;
        &mut self.data[start..start + len]
    }

    /// Zero-filled dense `[T, C, H, W]` tensor.
    pub fn to_dense(&self) -> ComplexTensor {
        let (h, w, tn, cn) = (self.mask.height(), self.mask.width(), self.mask.frames(), self.coils);
        let mut out = ComplexTensor::zeros(vec![tn, cn, h, w]);
        let dense = out.data_mut();
        for t in 0..tn {
            for c in 0..cn {
                let block = self.block(t, c);
                for (k, &r) in self.mask.rows(t).iter().enumerate() {
                    let dst = ((t * cn + c) * h + r) * w;
                    dense[dst..dst + w].copy_from_slice(&block[k * w..(k + 1) * w]);
                }
            }
        }
        out
    }

    /// Gathers the sampled rows of a dense `[T, C, H, W]` tensor.
    pub fn from_dense(mask: &SamplingMask, dense: &ComplexTensor) -> Result<Self> {
        let dims = dense.dims();
        if dims.len() != 4 || dims[0] != mask.frames() || dims[2] != mask.height() || dims[3] != mask.width() {
            return Err(Error::Shape(format!("dense k-space {dims:?} does not match mask")));
        }
        let (h, w, cn) = (mask.height(), mask.width(), dims[1]);
        let mut out = Self::zeros(mask, cn);
        for t in 0..mask.frames() {
            for c in 0..cn {
                let rows = mask.rows(t).to_vec();
                let block = out.block_mut(t, c);
                for (k, &r) in rows.iter().enumerate() {
                    let src = ((t * cn + c) * h + r) * w;
                    block[k * w..(k + 1) * w].copy_from_slice(&dense.data()[src..src + w]);
                }
            }
        }
        Ok(out)
    }

    /// All coil blocks of frame `t`, coil-major.
    pub fn frame(&self, t: usize) -> &[C64] {
        &self.data[self.offsets[t]..self.offsets[t + 1]]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [C64] {
        &mut self.data[self.offsets[t]..self.offsets[t + 1]]
    }

    pub fn norm(&self) -> f64 {
        crate::numerics::norm(&self.data)
    }
}

/// The encoding operator for one acquisition.
#[derive(Clone, Debug)]
pub struct Encoding {
    height: usize,
    width: usize,
    mask: SamplingMask,
    sensitivities: Vec<Vec<C64>>,
    /// Per-frame off-resonance phase `exp(i2π f τ_t)`, if any.
    field_phase: Option<Vec<Vec<C64>>>,
    plan: Fft2Plan,
}

impl Encoding {
    pub fn new(mask: SamplingMask, sensitivities: Vec<Vec<C64>>) -> Result<Self> {
        let (h, w) = (mask.height(), mask.width());
        if sensitivities.is_empty() {
            return Err(Error::Data("need at least one coil".into()));
        }
        if sensitivities.iter().any(|s| s.len() != h * w) {
            return Err(Error::Shape("sensitivity map size does not match mask grid".into()));
        }
        let plan = Fft2Plan::new(h, w)?;
        Ok(Self {
            height: h,
            width: w,
            mask,
            sensitivities,
            field_phase: None,
            plan,
        })
    }

    /// Adds a field-map phase `exp(i2π f(r) τ_t)`; `field_hz` per pixel,
    /// `times_s` per frame.
    pub fn with_field_map(mut self, field_hz: &[f64], times_s: &[f64]) -> Result<Self> {
        if field_hz.len() != self.height * self.width || times_s.len() != self.mask.frames() {
            return Err(Error::Shape("field map or timing size mismatch".into()));
        }
        let phases = times_s
            .iter()
            .map(|&tau| {
                field_hz
                    .iter()
                    .map(|&f| C64::from_polar(1.0, 2.0 * std::f64::consts::PI * f * tau))
                    .collect()
            })
            .collect();
        self.field_phase = Some(phases);
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frames(&self) -> usize {
        self.mask.frames()
    }

    pub fn coils(&self) -> usize {
        self.sensitivities.len()
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn has_field_map(&self) -> bool {
        self.field_phase.is_some()
    }

    pub fn sensitivities(&self) -> &[Vec<C64>] {
        &self.sensitivities
    }

    fn check(&self, x: &ImageSeries) -> Result<()> {
        if x.height() != self.height || x.width() != self.width || x.frames() != self.frames() {
            return Err(Error::Shape(format!(
                "series {}x{}x{} does not match operator {}x{}x{}",
                x.frames(),
                x.height(),
                x.width(),
                self.frames(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &ImageSeries) -> Result<KSpace> {
        self.check(x)?;
        let mut out = KSpace::zeros(&self.mask, self.coils());
        for t in 0..self.frames() {
            let samples = self.forward_frame(x.frame(t), t)?;
            out.frame_mut(t).copy_from_slice(&samples);
        }
        Ok(out)
    }

    /// Encodes one image as frame `t`; the result has the layout of
    /// [`KSpace::frame`].
    pub fn forward_frame(&self, image: &[C64], t: usize) -> Result<Vec<C64>> {
        self.check_frame(image.len(), t)?;
        let w = self.width;
        let rows = self.mask.rows(t);
        let mut out = Vec::with_capacity(self.coils() * rows.len() * w);
        let mut buf = vec![C64::new(0.0, 0.0); self.height * w];
        let frame = self.phased(image, t);
        for s in &self.sensitivities {
            for ((b, &v), &sv) in buf.iter_mut().zip(frame.iter()).zip(s) {
                *b = v * sv;
            }
            self.plan.process(&mut buf, Direction::Forward);
            for &r in rows {
                out.extend_from_slice(&buf[r * w..(r + 1) * w]);
            }
        }
        Ok(out)
    }

    /// Adjoint of [`Encoding::forward_frame`].
    pub fn adjoint_frame(&self, samples: &[C64], t: usize) -> Result<Vec<C64>> {
        self.check_frame(self.height * self.width, t)?;
        let len = self.mask.rows(t).len() * self.width;
        if samples.len() != self.coils() * len {
            return Err(Error::Shape(format!(
                "frame {t} holds {} samples, got {}",
                self.coils() * len,
                samples.len()
            )));
        }
        let mut acc = vec![C64::new(0.0, 0.0); self.height * self.width];
        self.accumulate_adjoint(&mut acc, t, |c| &samples[c * len..(c + 1) * len], None);
        self.unphase(&mut acc, t);
        Ok(acc)
    }

    fn check_frame(&self, len: usize, t: usize) -> Result<()> {
        if t >= self.frames() {
            return Err(Error::Index {
                index: t,
                max: self.frames() - 1,
            });
        }
        if len != self.height * self.width {
            return Err(Error::Shape(format!("image has {len} pixels, grid has {}", self.height * self.width)));
        }
        Ok(())
    }

    fn accumulate_adjoint<'b>(&self, acc: &mut [C64], t: usize, block: impl Fn(usize) -> &'b [C64], keep: Option<&[usize]>) {
        let w = self.width;
        let mut buf = vec![C64::new(0.0, 0.0); self.height * w];
        for (c, s) in self.sensitivities.iter().enumerate() {
            buf.fill(C64::new(0.0, 0.0));
            let data = block(c);
            for (k, &r) in self.mask.rows(t).iter().enumerate() {
                if keep.is_some_and(|keep| !keep.contains(&r)) {
                    continue;
                }
                buf[r * w..(r + 1) * w].copy_from_slice(&data[k * w..(k + 1) * w]);
            }
            self.plan.process(&mut buf, Direction::Inverse);
            for ((a, &b), sv) in acc.iter_mut().zip(buf.iter()).zip(s) {
                *a += sv.conj() * b;
            }
        }
    }

    pub fn adjoint(&self, y: &KSpace) -> Result<ImageSeries> {
        if y.mask != self.mask || y.coils != self.coils() {
            return Err(Error::Shape("k-space does not match operator".into()));
        }
        self.adjoint_rows(y, None)
    }

    /// Adjoint restricted to a subset of rows (the navigator band); rows not
    /// listed are treated as zero.
    pub fn adjoint_rows(&self, y: &KSpace, keep: Option<&[usize]>) -> Result<ImageSeries> {
        let (h, w) = (self.height, self.width);
        let mut out = ImageSeries::zeros(h, w, self.frames());
        for t in 0..self.frames() {
            let mut acc = vec![C64::new(0.0, 0.0); h * w];
            self.accumulate_adjoint(&mut acc, t, |c| y.block(t, c), keep);
            self.unphase(&mut acc, t);
            out.frame_mut(t).copy_from_slice(&acc);
        }
        Ok(out)
    }

    /// `AᴴA x` without materialising k-space.
    pub fn normal(&self, x: &ImageSeries) -> Result<ImageSeries> {
        self.check(x)?;
        let (h, w) = (self.height, self.width);
        let mut out = ImageSeries::zeros(h, w, self.frames());
        let mut buf = vec![C64::new(0.0, 0.0); h * w];
        let mut keep = vec![false; h];
        for t in 0..self.frames() {
            keep.fill(false);
            for &r in self.mask.rows(t) {
                keep[r] = true;
            }
            let frame = self.phased(x.frame(t), t);
            let mut acc = vec![C64::new(0.0, 0.0); h * w];
            for s in &self.sensitivities {
                for ((b, &v), &sv) in buf.iter_mut().zip(frame.iter()).zip(s) {
                    *b = v * sv;
                }
                self.plan.process(&mut buf, Direction::Forward);
                for (r, &k) in keep.iter().enumerate() {
                    if !k {
                        buf[r * w..(r + 1) * w].fill(C64::new(0.0, 0.0));
                    }
                }
                self.plan.process(&mut buf, Direction::Inverse);
                for ((a, &b), sv) in acc.iter_mut().zip(buf.iter()).zip(s) {
                    *a += sv.conj() * b;
                }
            }
            self.unphase(&mut acc, t);
            out.frame_mut(t).copy_from_slice(&acc);
        }
        Ok(out)
    }

    fn phased(&self, frame: &[C64], t: usize) -> Vec<C64> {
        match &self.field_phase {
            Some(p) => frame.iter().zip(&p[t]).map(|(a, b)| a * b).collect(),
            None => frame.to_vec(),
        }
    }

    fn unphase(&self, frame: &mut [C64], t: usize) {
        if let Some(p) = &self.field_phase {
            for (a, b) in frame.iter_mut().zip(&p[t]) {
                *a *= b.conj();
            }
        }
    }

    /// Largest eigenvalue of `AᴴA` by power iteration.
    pub fn spectral_norm_sqr(&self, iterations: usize, seed: u64) -> Result<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.height * self.width * self.frames();
        let data: Vec<C64> = (0..n)
            .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let mut x = ImageSeries::new(self.height, self.width, self.frames(), data)?;
        let mut lambda = 0.0;
        for _ in 0..iterations.max(1) {
            let nx = crate::numerics::norm(x.data());
            if nx == 0.0 {
                return Ok(0.0);
            }
            x = x.scaled(1.0 / nx);
            let y = self.normal(&x)?;
            lambda = crate::numerics::dot(x.data(), y.data()).re;
            x = y;
        }
        Ok(lambda)
    }
}

/// One undersampled acquisition: operator, measured samples and echo
/// times (milliseconds).
#[derive(Clone, Debug)]
pub struct Acquisition {
    pub encoding: Encoding,
    pub kspace: KSpace,
    pub echo_times: Vec<f64>,
}

impl Acquisition {
    pub fn new(encoding: Encoding, kspace: KSpace, echo_times: Vec<f64>) -> Result<Self> {
        if kspace.mask() != encoding.mask() || kspace.coils() != encoding.coils() {
            return Err(Error::Shape("k-space does not match operator".into()));
        }
        if echo_times.len() != encoding.frames() {
            return Err(Error::Shape(format!(
                "{} echo times for {} frames",
                echo_times.len(),
                encoding.frames()
            )));
        }
        Ok(Self {
            encoding,
            kspace,
            echo_times,
        })
    }

    /// Same acquisition with k-space multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let data = self.kspace.data().iter().map(|z| z * factor).collect();
        Self {
            encoding: self.encoding.clone(),
            kspace: self.kspace.with_data(data).expect("same length"),
            echo_times: self.echo_times.clone(),
        }
    }
}
