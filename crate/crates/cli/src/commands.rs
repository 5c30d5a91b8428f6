//! File-level commands. Every command writes its resolved configuration
//! (`config.toml`) and a manifest (`manifest.toml`) listing each artifact
//! with its dimensions and CRC-32.
//!
//! Run directory layout under `--out ROOT`:
//!
//! ```text
//! ROOT/data/af<AF>/        simulate
//! ROOT/train/              train
//! ROOT/adapt/              adapt
//! ROOT/recon/af<AF>/<variant>/   recon
//! ROOT/report/             report
//! ROOT/stylemix/           stylemix
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hdt::encoding::{KSpace, SamplingMask};
use hdt::generator::{checkpoint_container, load_checkpoint, Generator, LatentSet};
use hdt::inversion::mean_latents;
use hdt::io::{file_crc, TensorFile};
use hdt::numerics::{ComplexTensor, C64};
use hdt::phantom::TissueMaps;
use hdt::series::ImageSeries;
use hdt::{Error, Result};

use crate::config::{RunConfig, Variant};
use crate::pipeline::{self, Dataset, Metrics};
use crate::report::{mosaic, num, write_pgm, write_pgm_window, Csv};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    pub file: String,
    pub dims: Vec<usize>,
    pub crc32: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub echo_times: Vec<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub artifacts: Vec<Artifact>,
}

impl Manifest {
    fn new(command: &str, cfg: &RunConfig, threads: usize) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            threads,
            ..Self::default()
        }
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("manifest.toml"))?;
        toml::from_str(&text).map_err(|e| Error::Format(format!("manifest: {}", e.message())))
    }

    pub fn artifact(&self, name: &str) -> Result<&Artifact> {
        self.artifacts
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Data(format!("manifest has no artifact {name:?}")))
    }
}

/// Output directory plus the manifest being assembled.
struct Output {
    dir: PathBuf,
    manifest: Manifest,
}

impl Output {
    fn create(dir: PathBuf, command: &str, cfg: &RunConfig, threads: usize) -> Result<Self> {
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
        Ok(Self {
            dir,
            manifest: Manifest::new(command, cfg, threads),
        })
    }

    fn tensor(&mut self, name: &str, t: &TensorFile) -> Result<()> {
        let file = format!("{name}.hdt");
        let path = self.dir.join(&file);
        t.write(&path)?;
        self.record(name, file, t.dims().to_vec())
    }

    fn record(&mut self, name: &str, file: String, dims: Vec<usize>) -> Result<()> {
        let crc32 = file_crc(&self.dir.join(&file))?;
        self.manifest.artifacts.push(Artifact {
            name: name.to_string(),
            file,
            dims,
            crc32,
        });
        Ok(())
    }

    fn text(&mut self, file: &str, content: &str) -> Result<()> {
        std::fs::write(self.dir.join(file), content)?;
        let name = file.rsplit_once('.').map_or(file, |(stem, _)| stem);
        self.record(name, file.to_string(), Vec::new())
    }

    /// Grayscale image scaled to `[lo, hi]`; `hi = None` uses the maximum.
    fn pgm(&mut self, file: &str, w: usize, h: usize, values: &[f64], lo: f64, hi: Option<f64>) -> Result<()> {
        let path = self.dir.join(file);
        match hi {
            Some(hi) => write_pgm_window(&path, w, h, values, lo, hi)?,
            None => write_pgm(&path, w, h, values)?,
        }
        let name = file.rsplit_once('.').map_or(file, |(stem, _)| stem);
        self.record(name, file.to_string(), vec![h, w])
    }

    fn finish(self) -> Result<PathBuf> {
        let text = toml::to_string(&self.manifest).expect("manifest serialises");
        std::fs::write(self.dir.join("manifest.toml"), text)?;
        Ok(self.dir)
    }
}

/// Shared command context.
#[derive(Clone, Debug)]
pub struct Context {
    pub cfg: RunConfig,
    pub root: PathBuf,
    pub threads: usize,
}

impl Context {
    pub fn new(cfg: RunConfig, root: PathBuf, threads: usize) -> Self {
        Self { cfg, root, threads }
    }

    fn af_label(af: f64) -> String {
        if af.fract() == 0.0 {
            format!("af{}", af as u64)
        } else {
            format!("af{af}")
        }
    }

    pub fn data_dir(&self, af: f64) -> PathBuf {
        self.root.join("data").join(Self::af_label(af))
    }

    pub fn recon_dir(&self, af: f64, variant: Variant) -> PathBuf {
        self.root.join("recon").join(Self::af_label(af)).join(variant.name())
    }

    pub fn train_checkpoint(&self) -> PathBuf {
        self.root.join("train").join("generator.hdc")
    }

    pub fn adapted_checkpoint(&self) -> PathBuf {
        self.root.join("adapt").join("adapted.hdc")
    }
}

fn series_tensor(x: &ImageSeries) -> Result<TensorFile> {
    TensorFile::complex(vec![x.frames(), x.height(), x.width()], x.data().to_vec())
}

fn series_from(t: &TensorFile) -> Result<ImageSeries> {
    match t.dims() {
        [f, h, w] => ImageSeries::new(*h, *w, *f, t.as_complex()?.to_vec()),
        d => Err(Error::Shape(format!("expected [T, H, W], found {d:?}"))),
    }
}

fn latents_tensor(ws: &[LatentSet]) -> Result<TensorFile> {
    let blocks = ws.first().map_or(0, LatentSet::blocks);
    let d = ws.first().and_then(|w| w.styles.first()).map_or(0, Vec::len);
    TensorFile::real(vec![ws.len(), blocks, d], ws.iter().flat_map(LatentSet::flat).collect())
}

/// `simulate`: writes the dataset for the configured acceleration.
pub fn simulate(ctx: &Context) -> Result<PathBuf> {
    let cfg = &ctx.cfg;
    let data = pipeline::simulate(cfg)?;
    let mut out = Output::create(ctx.data_dir(cfg.acquisition.af), "simulate", cfg, ctx.threads)?;
    write_dataset(&mut out, &data)?;
    out.manifest.echo_times = data.echo_times.clone();
    out.finish()
}

fn write_dataset(out: &mut Output, d: &Dataset) -> Result<()> {
    let (h, w) = (d.tissue.height, d.tissue.width);
    out.tensor("truth", &series_tensor(&d.truth)?)?;
    let mut tissue = d.tissue.proton_density.clone();
    tissue.extend(&d.tissue.t2_map);
    out.tensor("tissue", &TensorFile::real(vec![2, h, w], tissue)?)?;
    let support = d.tissue.support_mask.iter().map(|&b| u8::from(b)).collect();
    out.tensor("support_mask", &TensorFile::mask(vec![h, w], support)?)?;
    let sens: Vec<C64> = d.sensitivities.iter().flatten().copied().collect();
    out.tensor(
        "sensitivities",
        &TensorFile::complex(vec![d.sensitivities.len(), h, w], sens)?,
    )?;
    out.tensor("mask", &TensorFile::mask(vec![d.mask.frames(), h, w], d.mask.to_bits())?)?;
    let dense = d.kspace.to_dense();
    out.tensor("kspace", &TensorFile::complex(dense.dims().to_vec(), dense.into_data())?)?;
    out.tensor("navigator", &series_tensor(&d.navigator)?)?;
    Ok(())
}

/// Reads a dataset written by [`simulate`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = Manifest::read(dir)?;
    let read = |name: &str| -> Result<TensorFile> { TensorFile::read(&dir.join(&manifest.artifact(name)?.file)) };
    let truth = series_from(&read("truth")?)?;
    let (frames, h, w) = (truth.frames(), truth.height(), truth.width());
    let tissue_t = read("tissue")?;
    tissue_t.expect_dims(&[2, h, w])?;
    let tv = tissue_t.as_real()?;
    let support_t = read("support_mask")?;
    support_t.expect_dims(&[h, w])?;
    let tissue = TissueMaps {
        height: h,
        width: w,
        proton_density: tv[..h * w].to_vec(),
        t2_map: tv[h * w..].to_vec(),
        support_mask: support_t.as_mask()?.iter().map(|&b| b != 0).collect(),
    };
    let sens_t = read("sensitivities")?;
    let coils = sens_t.dims().first().copied().unwrap_or(0);
    sens_t.expect_dims(&[coils, h, w])?;
    let sensitivities = sens_t.as_complex()?.chunks(h * w).map(<[C64]>::to_vec).collect();
    let mask_t = read("mask")?;
    mask_t.expect_dims(&[frames, h, w])?;
    let mask = SamplingMask::from_bits(frames, h, w, mask_t.as_mask()?)?;
    let k_t = read("kspace")?;
    k_t.expect_dims(&[frames, coils, h, w])?;
    let kspace = KSpace::from_dense(&mask, &ComplexTensor::new(k_t.dims().to_vec(), k_t.as_complex()?.to_vec())?)?;
    let navigator = series_from(&read("navigator")?)?;
    if manifest.echo_times.len() != frames {
        return Err(Error::Data("manifest echo times do not match the data".into()));
    }
    Ok(Dataset {
        truth,
        tissue,
        echo_times: manifest.echo_times,
        sensitivities,
        mask,
        kspace,
        navigator,
    })
}

/// `train`: pretrains the magnitude generator on the phantom corpus.
pub fn train(ctx: &Context) -> Result<PathBuf> {
    let cfg = &ctx.cfg;
    let images = pipeline::corpus(cfg)?;
    let (g, log) = pipeline::pretrain(cfg, &images)?;
    let mut out = Output::create(ctx.root.join("train"), "train", cfg, ctx.threads)?;
    write_checkpoint(&mut out, "generator", &g)?;
    let mut csv = Csv::new(&["epoch", "loss"]);
    for (i, l) in log.epoch_loss.iter().enumerate() {
        csv.row(&[(i + 1).to_string(), num(*l)]);
    }
    out.text("train_log.csv", csv.as_str())?;
    out.finish()
}

fn write_checkpoint(out: &mut Output, name: &str, g: &Generator) -> Result<()> {
    let file = format!("{name}.hdc");
    checkpoint_container(g)?.write(&out.dir.join(&file))?;
    out.record(name, file, vec![g.params().len()])
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Usage(format!("{what} not found at {}; run the earlier stage first", path.display())))
    }
}

/// `adapt`: adapts the pretrained generator to the SoS reference of the
/// dataset at the configured acceleration.
pub fn adapt(ctx: &Context) -> Result<PathBuf> {
    let cfg = &ctx.cfg;
    let ckpt = ctx.train_checkpoint();
    require(&ckpt, "pretrained checkpoint")?;
    let data_dir = ctx.data_dir(cfg.acquisition.af);
    require(&data_dir, "dataset")?;
    let g = load_checkpoint(&ckpt)?;
    let data = load_dataset(&data_dir)?;
    let prep = pipeline::prepare(cfg, &data)?;
    let reference = pipeline::sos_adaptation_reference(cfg, &prep)?;
    let adaptation = pipeline::adapt(cfg, &g, &reference)?;
    let size = g.size();
    let mut out = Output::create(ctx.root.join("adapt"), "adapt", cfg, ctx.threads)?;
    write_checkpoint(&mut out, "adapted", &adaptation.generator)?;
    out.tensor("reference", &TensorFile::real(vec![size, size], reference.clone())?)?;
    out.tensor("latents", &latents_tensor(std::slice::from_ref(&adaptation.latents))?)?;
    let mut csv = Csv::new(&["pass", "before", "after"]);
    for (i, p) in adaptation.passes.iter().enumerate() {
        csv.row(&[(i + 1).to_string(), num(p.before), num(p.after)]);
    }
    out.text("adapt_report.csv", csv.as_str())?;

    let echo = data.truth.frames() / 2;
    let target = pipeline::held_out_image(&data, echo);
    let init = mean_latents(&g, 64, 0)?;
    let before = pipeline::latent_fit_error(cfg, &g, &target, &init)?;
    let after = pipeline::latent_fit_error(cfg, &adaptation.generator, &target, &init)?;
    let mut held = Csv::new(&["echo", "pretrained", "adapted"]);
    held.row(&[(echo + 1).to_string(), num(before), num(after)]);
    out.text("heldout.csv", held.as_str())?;
    out.pgm("reference.pgm", size, size, &reference, 0.0, None)?;
    out.pgm("adapted_fit.pgm", size, size, &adaptation.generator.render(&adaptation.latents)?, 0.0, None)?;
    out.finish()
}

/// `recon`: one variant at one acceleration.
pub fn recon(ctx: &Context, variant: Variant) -> Result<PathBuf> {
    let cfg = &ctx.cfg;
    let af = cfg.acquisition.af;
    let data_dir = ctx.data_dir(af);
    require(&data_dir, "dataset")?;
    let data = load_dataset(&data_dir)?;
    let g = if variant.uses_generator() {
        let path = ctx.adapted_checkpoint();
        require(&path, "adapted checkpoint")?;
        Some(load_checkpoint(&path)?)
    } else {
        None
    };
    let prep = pipeline::prepare(cfg, &data)?;
    let run = pipeline::reconstruct(cfg, &prep, variant, g.as_ref(), Some(&data.truth))?;
    let mut out = Output::create(ctx.recon_dir(af, variant), "recon", cfg, ctx.threads)?;
    out.manifest.echo_times = data.echo_times.clone();
    out.manifest.warnings = run.state.warnings.clone();
    out.tensor("recon", &series_tensor(&run.series)?)?;
    let u = run.state.u.data().iter().map(|z| z * prep.factor).collect();
    out.tensor("u", &TensorFile::complex(vec![run.state.u.rows(), run.state.u.cols()], u)?)?;
    out.tensor(
        "v",
        &TensorFile::complex(vec![run.state.v.rows(), run.state.v.cols()], run.state.v.data().to_vec())?,
    )?;
    if !run.state.latents.is_empty() {
        out.tensor("latents", &latents_tensor(&run.state.latents)?)?;
    }
    out.text("history.csv", &run.state.history.to_csv())?;
    out.finish()
}

/// Reconstruction outputs of a finished run.
pub fn load_recon(dir: &Path) -> Result<ImageSeries> {
    let manifest = Manifest::read(dir)?;
    series_from(&TensorFile::read(&dir.join(&manifest.artifact("recon")?.file))?)
}

/// `report`: metrics, images and the AF sweep tables over every
/// reconstruction present under the run root.
pub fn report(ctx: &Context) -> Result<PathBuf> {
    let cfg = &ctx.cfg;
    let mut out = Output::create(ctx.root.join("report"), "report", cfg, ctx.threads)?;
    let mut metrics_csv = Csv::new(&["af", "variant", "rel_l2", "t2_error", "t2_pixels"]);
    let mut echo_csv = Csv::new(&["af", "variant", "echo", "rel_l2"]);
    let mut sweep: Vec<(f64, Vec<(Variant, Metrics)>)> = Vec::new();
    for &af in &cfg.report.af_sweep {
        let data_dir = ctx.data_dir(af);
        if !data_dir.exists() {
            continue;
        }
        let data = load_dataset(&data_dir)?;
        let (h, w) = (data.truth.height(), data.truth.width());
        let label = Context::af_label(af);
        let t2_hi = data.tissue.t2_map.iter().copied().fold(0.0, f64::max) * 1.2;
        if sweep.is_empty() {
            out.pgm("truth_t2.pgm", w, h, &data.tissue.t2_map, 0.0, Some(t2_hi))?;
            out.pgm("truth_echo1.pgm", w, h, &data.truth.magnitudes(0), 0.0, None)?;
        }
        let mut row = Vec::new();
        for variant in Variant::ALL {
            let dir = ctx.recon_dir(af, variant);
            if !dir.join("manifest.toml").exists() {
                continue;
            }
            let x = load_recon(&dir)?;
            let (m, fit) = pipeline::metrics(&x, &data.truth, &data.tissue, &data.echo_times)?;
            metrics_csv.row(&[af.to_string(), variant.to_string(), num(m.rel_l2), num(m.t2_error), m.t2_pixels.to_string()]);
            for (t, e) in m.per_echo.iter().enumerate() {
                echo_csv.row(&[af.to_string(), variant.to_string(), (t + 1).to_string(), num(*e)]);
            }
            let stem = format!("{label}_{variant}");
            let hi = data.truth.magnitudes(0).iter().copied().fold(0.0, f64::max);
            out.pgm(&format!("{stem}_echo1.pgm"), w, h, &x.magnitudes(0), 0.0, Some(hi))?;
            let err: Vec<f64> = x.frame(0).iter().zip(data.truth.frame(0)).map(|(a, b)| (a - b).norm()).collect();
            out.pgm(&format!("{stem}_error1.pgm"), w, h, &err, 0.0, None)?;
            out.pgm(&format!("{stem}_t2.pgm"), w, h, &fit.t2, 0.0, Some(t2_hi))?;
            row.push((variant, m));
        }
        if !row.is_empty() {
            sweep.push((af, row));
        }
    }
    if sweep.is_empty() {
        return Err(Error::Usage("no reconstructions found; run recon first".into()));
    }
    out.text("metrics.csv", metrics_csv.as_str())?;
    out.text("per_echo.csv", echo_csv.as_str())?;
    for (file, pick) in [
        ("af_sweep_image.csv", (|m: &Metrics| m.rel_l2) as fn(&Metrics) -> f64),
        ("af_sweep_t2.csv", |m: &Metrics| m.t2_error),
    ] {
        let mut header = vec!["af"];
        header.extend(Variant::ALL.iter().map(|v| v.name()));
        let mut csv = Csv::new(&header);
        for (af, row) in &sweep {
            let mut cells = vec![af.to_string()];
            for v in Variant::ALL {
                cells.push(row.iter().find(|(rv, _)| *rv == v).map_or(String::new(), |(_, m)| num(pick(m))));
            }
            csv.row(&cells);
        }
        out.text(file, csv.as_str())?;
    }
    out.finish()
}

/// `stylemix`: mixing grid and per-block image changes on the adapted
/// checkpoint, or the pretrained one when no adaptation has been run.
pub fn stylemix(ctx: &Context) -> Result<PathBuf> {
    let cfg = &ctx.cfg;
    let path = if ctx.adapted_checkpoint().exists() {
        ctx.adapted_checkpoint()
    } else {
        ctx.train_checkpoint()
    };
    require(&path, "generator checkpoint")?;
    let g = load_checkpoint(&path)?;
    let l = g.blocks();
    let mut out = Output::create(ctx.root.join("stylemix"), "stylemix", cfg, ctx.threads)?;
    let deltas = pipeline::style_mix_deltas(&g, cfg.stylemix.pairs, cfg.seed)?;
    let mut header = vec!["pair".to_string()];
    header.extend((1..=l).map(|b| format!("block{b}")));
    let mut csv = Csv::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    for (i, row) in deltas.iter().enumerate() {
        let mut cells = vec![(i + 1).to_string()];
        cells.extend(row.iter().map(|d| num(*d)));
        csv.row(&cells);
    }
    let mut mean = vec!["mean".to_string()];
    mean.extend((0..l).map(|b| num(deltas.iter().map(|r| r[b]).sum::<f64>() / deltas.len().max(1) as f64)));
    csv.row(&mean);
    out.text("stylemix.csv", csv.as_str())?;
    // columns: A, B, then coarse (first half of blocks), fine (rest), all
    let half = l.div_ceil(2);
    let groups = vec![(1..=half).collect::<Vec<_>>(), (half + 1..=l).collect(), (1..=l).collect()];
    let grid = pipeline::style_mix_grid(&g, cfg.stylemix.sources, &groups, cfg.seed)?;
    let (w, h, pixels) = mosaic(&grid, g.size());
    out.pgm("grid.pgm", w, h, &pixels, 0.0, Some(1.0))?;
    out.finish()
}

/// Reads the `HDT_THREADS` cap: unset means one worker.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("HDT_THREADS") {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Usage(format!("HDT_THREADS must be a positive integer, got {s:?}"))),
        },
    }
}
