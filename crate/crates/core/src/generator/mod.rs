//! Style-modulated multi-resolution generator with exact reverse-mode
//! gradients.
//!
//! The synthesis network has `L = log2(H) − 1` blocks at resolutions
//! `4, 8, …, H`. Block `b` takes its own style vector `w_b`, turns it into
//! per-channel scales through an affine map, applies a 3×3 modulated and
//! demodulated convolution followed by a leaky rectifier, and adds a 1×1
//! modulated projection of its features to the upsampled running image
//! (skip architecture). The first block starts from a learned constant.
//! A two-layer mapping network turns codes `z` into styles.
//!
//! A *cut* `c ∈ 1..L` splits the network into `G₁` (blocks `1..=c`) and
//! `G₂` (blocks `c+1..=L`); the state passed between them, an
//! [`Activation`], is the intermediate latent of layer-wise inversion.

mod checkpoint;
pub mod ops;
mod train;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use ops::{conv3x3, conv3x3_input_grad, conv3x3_weight_grad, lrelu, lrelu_grad, upsample, upsample_adjoint};

pub use checkpoint::{load_checkpoint, save_checkpoint, checkpoint_container, from_container};
pub use train::{style_mix, train, TrainConfig, TrainLog};

const DEMOD_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputKind {
    /// `sigmoid`, range `(0, 1)`.
    Magnitude,
    /// `π·tanh`, range `(−π, π)`.
    Phase,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    /// Output side length; a power of two, at least 8.
    pub size: usize,
    pub d_lat: usize,
    /// Feature channels per block, `L` entries.
    pub channels: Vec<usize>,
    pub output: OutputKind,
}

impl GeneratorConfig {
    /// Channel widths taper at the fine scales: `base` up to 16×16, then
    /// halved per octave (not below 8).
    pub fn new(size: usize, d_lat: usize, base: usize, output: OutputKind) -> Self {
        let blocks = Self::block_count(size);
        let channels = (0..blocks)
            .map(|b| {
                let res = 4usize << b;
                if res <= 16 {
                    base
                } else {
                    (base >> (res / 16).trailing_zeros()).max(8)
                }
            })
            .collect();
        Self {
            size,
            d_lat,
            channels,
            output,
        }
    }

    fn block_count(size: usize) -> usize {
        if size < 8 {
            0
        } else {
            size.trailing_zeros() as usize - 1
        }
    }

    pub fn blocks(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.size.is_power_of_two() || self.size < 8 {
            return Err(Error::Dimension(format!("generator size {} must be a power of two ≥ 8", self.size)));
        }
        if self.channels.len() != Self::block_count(self.size) {
            return Err(Error::Shape(format!(
                "{} channel entries for {} blocks",
                self.channels.len(),
                Self::block_count(self.size)
            )));
        }
        if self.d_lat == 0 || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Shape("latent width and channels must be positive".into()));
        }
        Ok(())
    }

    /// Side length after block `b` (0-based).
    pub fn resolution(&self, b: usize) -> usize {
        4 << b
    }

    fn in_channels(&self, b: usize) -> usize {
        if b == 0 {
            self.channels[0]
        } else {
            self.channels[b - 1]
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct BlockOffsets {
    affine: usize,
    affine_bias: usize,
    conv: usize,
    conv_bias: usize,
    rgb_affine: usize,
    rgb_affine_bias: usize,
    rgb: usize,
    rgb_bias: usize,
}

/// Named slices of the flat parameter vector.
#[derive(Clone, Debug)]
pub struct Layout {
    pub entries: Vec<(String, usize, Vec<usize>)>,
    map_w1: usize,
    map_b1: usize,
    map_w2: usize,
    map_b2: usize,
    constant: usize,
    blocks: Vec<BlockOffsets>,
    total: usize,
}

impl Layout {
    fn new(cfg: &GeneratorConfig) -> Self {
        let d = cfg.d_lat;
        let mut entries = Vec::new();
        let mut off = 0;
        let mut push = |name: String, dims: Vec<usize>| -> usize {
            let start = off;
            off += dims.iter().product::<usize>();
            entries.push((name, start, dims));
            start
        };
        let map_w1 = push("mapping.0.weight".into(), vec![d, d]);
        let map_b1 = push("mapping.0.bias".into(), vec![d]);
        let map_w2 = push("mapping.1.weight".into(), vec![d, d]);
        let map_b2 = push("mapping.1.bias".into(), vec![d]);
        let constant = push("synthesis.const".into(), vec![cfg.channels[0], 4, 4]);
        let mut blocks = Vec::new();
        for b in 0..cfg.blocks() {
            let (cin, cout) = (cfg.in_channels(b), cfg.channels[b]);
            blocks.push(BlockOffsets {
                affine: push(format!("block{b}.affine.weight"), vec![cin, d]),
                affine_bias: push(format!("block{b}.affine.bias"), vec![cin]),
                conv: push(format!("block{b}.conv.weight"), vec![cout, cin, 3, 3]),
                conv_bias: push(format!("block{b}.conv.bias"), vec![cout]),
                rgb_affine: push(format!("block{b}.to_image.affine.weight"), vec![cout, d]),
                rgb_affine_bias: push(format!("block{b}.to_image.affine.bias"), vec![cout]),
                rgb: push(format!("block{b}.to_image.weight"), vec![cout]),
                rgb_bias: push(format!("block{b}.to_image.bias"), vec![1]),
            });
        }
        Self {
            entries,
            map_w1,
            map_b1,
            map_w2,
            map_b2,
            constant,
            blocks,
            total: off,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// Per-block style vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSet {
    pub styles: Vec<Vec<f64>>,
}

impl LatentSet {
    pub fn zeros(blocks: usize, d_lat: usize) -> Self {
        Self {
            styles: vec![vec![0.0; d_lat]; blocks],
        }
    }

    /// The same style in every block.
    pub fn broadcast(w: &[f64], blocks: usize) -> Self {
        Self {
            styles: vec![w.to_vec(); blocks],
        }
    }

    pub fn blocks(&self) -> usize {
        self.styles.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.styles.concat()
    }

    pub fn from_flat(flat: &[f64], blocks: usize) -> Result<Self> {
        if blocks == 0 || flat.len() % blocks != 0 {
            return Err(Error::Shape(format!("{} values do not split into {blocks} blocks", flat.len())));
        }
        let d = flat.len() / blocks;
        Ok(Self {
            styles: flat.chunks(d).map(<[f64]>::to_vec).collect(),
        })
    }
}

/// Network state after block `c` (1-based count of executed blocks).
#[derive(Clone, Debug, PartialEq)]
pub struct Activation {
    pub cut: usize,
    /// `channels × r × r`
    pub features: Vec<f64>,
    /// `r × r` running image (pre-squash).
    pub skip: Vec<f64>,
}

impl Activation {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.features.clone();
        v.extend_from_slice(&self.skip);
        v
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Activation> {
        if flat.len() != self.features.len() + self.skip.len() {
            return Err(Error::Shape("activation length mismatch".into()));
        }
        let (f, s) = flat.split_at(self.features.len());
        Ok(Activation {
            cut: self.cut,
            features: f.to_vec(),
            skip: s.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.len() + self.skip.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
struct BlockCache {
    x_in: Vec<f64>,
    s: Vec<f64>,
    xs: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
    y: Vec<f64>,
    a: Vec<f64>,
    s2: Vec<f64>,
}

/// Recorded forward pass: everything `backward` needs.
#[derive(Clone, Debug)]
pub struct Trace {
    model_id: u64,
    revision: u64,
    from: usize,
    to: usize,
    styles: LatentSet,
    caches: Vec<BlockCache>,
    /// Squashed image when the pass reached the last block.
    pub image: Option<Vec<f64>>,
    /// Activation at `to` (always recorded).
    pub activation: Activation,
}

/// Cotangent fed to [`Generator::backward`].
pub enum Upstream<'a> {
    Image(&'a [f64]),
    Activation { features: &'a [f64], skip: &'a [f64] },
}

#[derive(Clone, Debug)]
pub struct Gradients {
    /// One entry per block; zero for blocks outside the traced range.
    pub styles: LatentSet,
    /// Gradient with respect to the input activation, for cut traces.
    pub input: Option<Activation>,
    /// Gradient with respect to the flat parameter vector, if requested.
    pub params: Option<Vec<f64>>,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
pub struct Generator {
    config: GeneratorConfig,
    layout: Layout,
    params: Vec<f64>,
    id: u64,
    revision: u64,
}

impl Clone for Generator {
    /// A clone is a distinct model: traces of one cannot be replayed on the
    /// other.
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.clone(),
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            revision: 0,
        }
    }
}

/// Mapping-network forward record.
#[derive(Clone, Debug)]
pub struct MappingTrace {
    model_id: u64,
    revision: u64,
    z: Vec<f64>,
    inv_norm: f64,
    zn: Vec<f64>,
    h1: Vec<f64>,
    p1: Vec<f64>,
    p2: Vec<f64>,
    pub w: Vec<f64>,
}

fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64], bias: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|i| bias[i] + m[i * cols..(i + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

/// `gx += Mᵀ g`, `gM += g xᵀ`, `gb += g` (the latter two when `gp` given).
fn matvec_backward(
    m: &[f64],
    rows: usize,
    cols: usize,
    x: &[f64],
    g: &[f64],
    gx: &mut [f64],
    gp: Option<(&mut [f64], &mut [f64])>,
) {
    for i in 0..rows {
        let gi = g[i];
        if gi == 0.0 {
            continue;
        }
        for (gxj, mij) in gx.iter_mut().zip(&m[i * cols..(i + 1) * cols]) {
            *gxj += mij * gi;
        }
    }
    if let Some((gm, gb)) = gp {
        for i in 0..rows {
            gb[i] += g[i];
            for (gmj, xj) in gm[i * cols..(i + 1) * cols].iter_mut().zip(x) {
                *gmj += g[i] * xj;
            }
        }
    }
}

impl Generator {
    /// Fresh network with seeded Gaussian initialisation.
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_lat as f64;
        let mut fill = |params: &mut [f64], start: usize, len: usize, scale: f64, offset: f64| {
            for p in &mut params[start..start + len] {
                let n: f64 = StandardNormal.sample(&mut rng);
                *p = offset + scale * n;
            }
        };
        let dl = config.d_lat;
        let gain = 2f64.sqrt();
        fill(&mut params, layout.map_w1, dl * dl, gain / d.sqrt(), 0.0);
        fill(&mut params, layout.map_w2, dl * dl, gain / d.sqrt(), 0.0);
        fill(&mut params, layout.constant, config.channels[0] * 16, 1.0, 0.0);
        for (b, off) in layout.blocks.iter().enumerate() {
            let (cin, cout) = (config.in_channels(b), config.channels[b]);
            fill(&mut params, off.affine, cin * dl, 1.0 / d.sqrt(), 0.0);
            fill(&mut params, off.affine_bias, cin, 0.0, 1.0);
            fill(&mut params, off.conv, cout * cin * 9, 1.0, 0.0);
            fill(&mut params, off.rgb_affine, cout * dl, 1.0 / d.sqrt(), 0.0);
            fill(&mut params, off.rgb_affine_bias, cout, 0.0, 1.0);
            fill(&mut params, off.rgb, cout, 1.0 / (cout as f64).sqrt(), 0.0);
        }
        Ok(Self {
            config,
            layout,
            params,
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            revision: 0,
        })
    }

    /// Network with explicit parameters (e.g. from a checkpoint).
    pub fn from_params(config: GeneratorConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Shape(format!(
                "{} parameters for a layout of {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            revision: 0,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn blocks(&self) -> usize {
        self.config.blocks()
    }

    pub fn d_lat(&self) -> usize {
        self.config.d_lat
    }

    pub fn size(&self) -> usize {
        self.config.size
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Replaces the parameters; invalidates outstanding traces.
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape("parameter vector length mismatch".into()));
        }
        self.params.copy_from_slice(params);
        self.revision += 1;
        Ok(())
    }

    /// Mutates the parameters in place; invalidates outstanding traces.
    pub fn update_params(&mut self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.params);
        self.revision += 1;
    }

    fn check_latents(&self, w: &LatentSet) -> Result<()> {
        if w.blocks() != self.blocks() || w.styles.iter().any(|s| s.len() != self.d_lat()) {
            return Err(Error::Shape(format!(
                "latent set has {} blocks, generator needs {} of width {}",
                w.blocks(),
                self.blocks(),
                self.d_lat()
            )));
        }
        Ok(())
    }

    fn check_trace(&self, model_id: u64, revision: u64) -> Result<()> {
        if model_id != self.id || revision != self.revision {
            return Err(Error::Usage(
                "trace was recorded on a different model or before a parameter update".into(),
            ));
        }
        Ok(())
    }

    /// Code-to-style mapping: normalise `z`, two leaky-rectified layers.
    pub fn map(&self, z: &[f64]) -> Result<MappingTrace> {
        let d = self.d_lat();
        if z.len() != d {
            return Err(Error::Shape(format!("code has {} entries, expected {d}", z.len())));
        }
        let ms = z.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv_norm = 1.0 / (ms + 1e-8).sqrt();
        let zn: Vec<f64> = z.iter().map(|v| v * inv_norm).collect();
        let p = &self.params;
        let l = &self.layout;
        let p1 = matvec(&p[l.map_w1..l.map_w1 + d * d], d, d, &zn, &p[l.map_b1..l.map_b1 + d]);
        let h1: Vec<f64> = p1.iter().map(|&v| lrelu(v)).collect();
        let p2 = matvec(&p[l.map_w2..l.map_w2 + d * d], d, d, &h1, &p[l.map_b2..l.map_b2 + d]);
        let w = p2.iter().map(|&v| lrelu(v)).collect();
        Ok(MappingTrace {
            model_id: self.id,
            revision: self.revision,
            z: z.to_vec(),
            inv_norm,
            zn,
            h1,
            p1,
            p2,
            w,
        })
    }

    /// Pulls a style cotangent back to the code; accumulates mapping
    /// parameter gradients into `gparams` when given.
    pub fn map_backward(&self, trace: &MappingTrace, gw: &[f64], gparams: Option<&mut [f64]>) -> Result<Vec<f64>> {
        self.check_trace(trace.model_id, trace.revision)?;
        let d = self.d_lat();
        let p = &self.params;
        let l = &self.layout;
        let g2: Vec<f64> = gw.iter().zip(&trace.p2).map(|(g, &v)| g * lrelu_grad(v)).collect();
        let mut gh1 = vec![0.0; d];
        let mut gzn = vec![0.0; d];
        match gparams {
            Some(gp) => {
                let (lo, hi) = gp.split_at_mut(l.map_w2);
                let (gw2, rest) = hi.split_at_mut(d * d);
                matvec_backward(&p[l.map_w2..l.map_w2 + d * d], d, d, &trace.h1, &g2, &mut gh1, Some((gw2, &mut rest[..d])));
                let g1: Vec<f64> = gh1.iter().zip(&trace.p1).map(|(g, &v)| g * lrelu_grad(v)).collect();
                let (gw1, rest1) = lo[l.map_w1..].split_at_mut(d * d);
                matvec_backward(&p[l.map_w1..l.map_w1 + d * d], d, d, &trace.zn, &g1, &mut gzn, Some((gw1, &mut rest1[..d])));
            }
            None => {
                matvec_backward(&p[l.map_w2..l.map_w2 + d * d], d, d, &trace.h1, &g2, &mut gh1, None);
                let g1: Vec<f64> = gh1.iter().zip(&trace.p1).map(|(g, &v)| g * lrelu_grad(v)).collect();
                matvec_backward(&p[l.map_w1..l.map_w1 + d * d], d, d, &trace.zn, &g1, &mut gzn, None);
            }
        }
        // zn = z · inv_norm, inv_norm = (mean z² + ε)^{-1/2}
        let dotp: f64 = gzn.iter().zip(&trace.z).map(|(a, b)| a * b).sum();
        let k = trace.inv_norm.powi(3) * dotp / d as f64;
        Ok(gzn
            .iter()
            .zip(&trace.z)
            .map(|(g, z)| g * trace.inv_norm - k * z)
            .collect())
    }

    /// Styles of a code, repeated for every block.
    pub fn latents_from_code(&self, z: &[f64]) -> Result<LatentSet> {
        Ok(LatentSet::broadcast(&self.map(z)?.w, self.blocks()))
    }

    /// Full synthesis pass.
    pub fn forward(&self, w: &LatentSet) -> Result<Trace> {
        self.run(None, w, self.blocks())
    }

    /// Image only.
    pub fn render(&self, w: &LatentSet) -> Result<Vec<f64>> {
        Ok(self.forward(w)?.image.expect("full pass yields an image"))
    }

    /// `G₁`: blocks `1..=cut`.
    pub fn forward_to(&self, w: &LatentSet, cut: usize) -> Result<Trace> {
        if cut == 0 || cut > self.blocks() {
            return Err(Error::Index {
                index: cut,
                max: self.blocks(),
            });
        }
        self.run(None, w, cut)
    }

    /// `G₂`: blocks `cut+1..=L` from an intermediate activation.
    pub fn forward_from(&self, input: &Activation, w: &LatentSet) -> Result<Trace> {
        let c = input.cut;
        if c == 0 || c >= self.blocks() {
            return Err(Error::Index {
                index: c,
                max: self.blocks() - 1,
            });
        }
        let r = self.config.resolution(c - 1);
        if input.features.len() != self.config.channels[c - 1] * r * r || input.skip.len() != r * r {
            return Err(Error::Shape("activation does not match cut layer".into()));
        }
        self.run(Some(input), w, self.blocks())
    }

    fn run(&self, input: Option<&Activation>, w: &LatentSet, to: usize) -> Result<Trace> {
        self.check_latents(w)?;
        let cfg = &self.config;
        let p = &self.params;
        let d = cfg.d_lat;
        let from = input.map_or(0, |a| a.cut);
        let (mut feat, mut skip) = match input {
            Some(a) => (a.features.clone(), a.skip.clone()),
            None => (Vec::new(), Vec::new()),
        };
        let mut caches = Vec::with_capacity(to - from);
        for b in from..to {
            let off = self.layout.blocks[b];
            let (cin, cout, r) = (cfg.in_channels(b), cfg.channels[b], cfg.resolution(b));
            let rr = r * r;
            let x_in = if b == 0 {
                p[self.layout.constant..self.layout.constant + cin * 16].to_vec()
            } else {
                upsample(&feat, cin, r / 2)
            };
            let s = matvec(&p[off.affine..off.affine + cin * d], cin, d, &w.styles[b], &p[off.affine_bias..off.affine_bias + cin]);
            let mut xs = x_in.clone();
            for (i, &si) in s.iter().enumerate() {
                xs[i * rr..(i + 1) * rr].iter_mut().for_each(|v| *v *= si);
            }
            let wc = &p[off.conv..off.conv + cout * cin * 9];
            let mut c = vec![0.0; cout * rr];
            conv3x3(&xs, cin, r, wc, cout, &mut c);
            let dm: Vec<f64> = (0..cout)
                .map(|o| {
                    let mut acc = DEMOD_EPS;
                    for (i, &si) in s.iter().enumerate() {
                        let k = &wc[(o * cin + i) * 9..(o * cin + i) * 9 + 9];
                        acc += si * si * k.iter().map(|v| v * v).sum::<f64>();
                    }
                    1.0 / acc.sqrt()
                })
                .collect();
            let mut y = vec![0.0; cout * rr];
            for o in 0..cout {
                let bias = p[off.conv_bias + o];
                for (yv, cv) in y[o * rr..(o + 1) * rr].iter_mut().zip(&c[o * rr..(o + 1) * rr]) {
                    *yv = dm[o] * cv + bias;
                }
            }
            let a: Vec<f64> = y.iter().map(|&v| lrelu(v)).collect();
            let s2 = matvec(&p[off.rgb_affine..off.rgb_affine + cout * d], cout, d, &w.styles[b], &p[off.rgb_affine_bias..off.rgb_affine_bias + cout]);
            let mut img = if b == 0 { vec![0.0; rr] } else { upsample(&skip, 1, r / 2) };
            let bias = p[off.rgb_bias];
            for o in 0..cout {
                let k = p[off.rgb + o] * s2[o];
                for (iv, av) in img.iter_mut().zip(&a[o * rr..(o + 1) * rr]) {
                    *iv += k * av;
                }
            }
            img.iter_mut().for_each(|v| *v += bias);
            feat = a.clone();
            skip = img;
            caches.push(BlockCache {
                x_in,
                s,
                xs,
                c,
                d: dm,
                y,
                a,
                s2,
            });
        }
        let image = (to == cfg.blocks()).then(|| {
            skip.iter()
                .map(|&v| match cfg.output {
                    OutputKind::Magnitude => 1.0 / (1.0 + (-v).exp()),
                    OutputKind::Phase => std::f64::consts::PI * v.tanh(),
                })
                .collect()
        });
        Ok(Trace {
            model_id: self.id,
            revision: self.revision,
            from,
            to,
            styles: w.clone(),
            caches,
            image,
            activation: Activation {
                cut: to,
                features: feat,
                skip,
            },
        })
    }

    /// Exact vector-Jacobian product of a recorded pass.
    pub fn backward(&self, trace: &Trace, upstream: Upstream<'_>, want_params: bool) -> Result<Gradients> {
        self.check_trace(trace.model_id, trace.revision)?;
        let cfg = &self.config;
        let p = &self.params;
        let d = cfg.d_lat;
        let last = trace.to - 1;
        let r_last = cfg.resolution(last);
        let (mut ga, mut gskip) = match upstream {
            Upstream::Image(g) => {
                let img = trace
                    .image
                    .as_ref()
                    .ok_or_else(|| Error::Usage("image cotangent for a partial pass".into()))?;
                if g.len() != img.len() {
                    return Err(Error::Shape("upstream image size mismatch".into()));
                }
                let gs: Vec<f64> = g
                    .iter()
                    .zip(img)
                    .map(|(gv, &o)| match cfg.output {
                        OutputKind::Magnitude => gv * o * (1.0 - o),
                        OutputKind::Phase => {
                            let t = o / std::f64::consts::PI;
                            gv * std::f64::consts::PI * (1.0 - t * t)
                        }
                    })
                    .collect();
                (vec![0.0; cfg.channels[last] * r_last * r_last], gs)
            }
            Upstream::Activation { features, skip } => {
                if features.len() != trace.activation.features.len() || skip.len() != trace.activation.skip.len() {
                    return Err(Error::Shape("upstream activation size mismatch".into()));
                }
                (features.to_vec(), skip.to_vec())
            }
        };
        let mut gstyles = LatentSet::zeros(cfg.blocks(), d);
        let mut gp = want_params.then(|| vec![0.0; p.len()]);
        let mut input_grad = None;
        for b in (trace.from..trace.to).rev() {
            let cache = &trace.caches[b - trace.from];
            let off = self.layout.blocks[b];
            let (cin, cout, r) = (cfg.in_channels(b), cfg.channels[b], cfg.resolution(b));
            let rr = r * r;
            let wb = &trace.styles.styles[b];

            // to-image projection
            let mut gs2 = vec![0.0; cout];
            for o in 0..cout {
                let ap = &cache.a[o * rr..(o + 1) * rr];
                let dotv: f64 = ap.iter().zip(&gskip).map(|(a, g)| a * g).sum();
                let ro = p[off.rgb + o];
                gs2[o] = ro * dotv;
                let k = ro * cache.s2[o];
                for (gav, gv) in ga[o * rr..(o + 1) * rr].iter_mut().zip(&gskip) {
                    *gav += k * gv;
                }
                if let Some(gp) = gp.as_mut() {
                    gp[off.rgb + o] += cache.s2[o] * dotv;
                }
            }
            if let Some(gp) = gp.as_mut() {
                gp[off.rgb_bias] += gskip.iter().sum::<f64>();
            }
            {
                let gw = &mut gstyles.styles[b];
                match gp.as_mut() {
                    Some(gp) => {
                        let (lo, hi) = gp.split_at_mut(off.rgb_affine_bias);
                        matvec_backward(&p[off.rgb_affine..off.rgb_affine + cout * d], cout, d, wb, &gs2, gw, Some((&mut lo[off.rgb_affine..off.rgb_affine + cout * d], &mut hi[..cout])));
                    }
                    None => matvec_backward(&p[off.rgb_affine..off.rgb_affine + cout * d], cout, d, wb, &gs2, gw, None),
                }
            }

            // activation and demodulated convolution
            let gy: Vec<f64> = ga.iter().zip(&cache.y).map(|(g, &y)| g * lrelu_grad(y)).collect();
            let mut gc = vec![0.0; cout * rr];
            let mut gd = vec![0.0; cout];
            for o in 0..cout {
                let gyo = &gy[o * rr..(o + 1) * rr];
                gd[o] = gyo.iter().zip(&cache.c[o * rr..(o + 1) * rr]).map(|(a, b)| a * b).sum();
                for (gcv, gyv) in gc[o * rr..(o + 1) * rr].iter_mut().zip(gyo) {
                    *gcv = cache.d[o] * gyv;
                }
                if let Some(gp) = gp.as_mut() {
                    gp[off.conv_bias + o] += gyo.iter().sum::<f64>();
                }
            }
            let wc = &p[off.conv..off.conv + cout * cin * 9];
            let mut gs = vec![0.0; cin];
            for o in 0..cout {
                let k3 = -gd[o] * cache.d[o].powi(3);
                if k3 == 0.0 {
                    continue;
                }
                for i in 0..cin {
                    let si = cache.s[i];
                    let kk = &wc[(o * cin + i) * 9..(o * cin + i) * 9 + 9];
                    gs[i] += k3 * si * kk.iter().map(|v| v * v).sum::<f64>();
                    if let Some(gp) = gp.as_mut() {
                        for (q, &wv) in kk.iter().enumerate() {
                            gp[off.conv + (o * cin + i) * 9 + q] += k3 * wv * si * si;
                        }
                    }
                }
            }
            if let Some(gp) = gp.as_mut() {
                conv3x3_weight_grad(&gc, cout, r, &cache.xs, cin, &mut gp[off.conv..off.conv + cout * cin * 9]);
            }
            let mut gxs = vec![0.0; cin * rr];
            conv3x3_input_grad(&gc, cout, r, wc, cin, &mut gxs);
            let mut gx = gxs.clone();
            for i in 0..cin {
                let plane = i * rr..(i + 1) * rr;
                gs[i] += gxs[plane.clone()].iter().zip(&cache.x_in[plane.clone()]).map(|(a, b)| a * b).sum::<f64>();
                gx[plane].iter_mut().for_each(|v| *v *= cache.s[i]);
            }
            {
                let gw = &mut gstyles.styles[b];
                match gp.as_mut() {
                    Some(gp) => {
                        let (lo, hi) = gp.split_at_mut(off.affine_bias);
                        matvec_backward(&p[off.affine..off.affine + cin * d], cin, d, wb, &gs, gw, Some((&mut lo[off.affine..off.affine + cin * d], &mut hi[..cin])));
                    }
                    None => matvec_backward(&p[off.affine..off.affine + cin * d], cin, d, wb, &gs, gw, None),
                }
            }

            // into the previous block
            if b == 0 {
                if let Some(gp) = gp.as_mut() {
                    for (g, v) in gp[self.layout.constant..self.layout.constant + cin * 16].iter_mut().zip(&gx) {
                        *g += v;
                    }
                }
            } else {
                ga = upsample_adjoint(&gx, cin, r / 2);
                gskip = upsample_adjoint(&gskip, 1, r / 2);
                if b == trace.from {
                    input_grad = Some(Activation {
                        cut: b,
                        features: ga.clone(),
                        skip: gskip.clone(),
                    });
                }
            }
        }
        Ok(Gradients {
            styles: gstyles,
            input: input_grad,
            params: gp,
        })
    }

    /// Draws a code from the standard normal (seeded).
    pub fn sample_code(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.d_lat()).map(|_| StandardNormal.sample(rng)).collect()
    }
}
