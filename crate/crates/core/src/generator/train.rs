//! Reconstruction-by-inversion pretraining and style mixing.
//!
//! Every corpus image owns a persistent code `z_i`. A visit refines `z_i`
//! with a few Adam steps through the frozen network (its optimiser state
//! persists across epochs), then contributes the
//! parameter gradient of its reconstruction loss at the refined code; one
//! parameter Adam step is taken per minibatch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Generator, LatentSet, Upstream};
use crate::error::{Error, Result};
use crate::numerics::AdamState;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub inner_steps: usize,
    pub batch: usize,
    pub lr_params: f64,
    pub lr_latent: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            inner_steps: 4,
            batch: 4,
            lr_params: 2e-3,
            lr_latent: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    /// Mean per-pixel squared error over each epoch (measured after the
    /// latent refinement, before the parameter step).
    pub epoch_loss: Vec<f64>,
    /// Final per-image codes.
    pub codes: Vec<Vec<f64>>,
}

/// Loss `mean((G(map(z)) − x)²)` and its gradients in `z` and, optionally,
/// the parameters (accumulated into `gparams`).
fn code_loss(g: &Generator, z: &[f64], target: &[f64], gparams: Option<&mut [f64]>) -> Result<(f64, Vec<f64>)> {
    let mt = g.map(z)?;
    let w = LatentSet::broadcast(&mt.w, g.blocks());
    let trace = g.forward(&w)?;
    let img = trace.image.as_ref().expect("full pass");
    let n = img.len() as f64;
    let resid: Vec<f64> = img.iter().zip(target).map(|(a, b)| a - b).collect();
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / n;
    let up: Vec<f64> = resid.iter().map(|r| 2.0 * r / n).collect();
    let want = gparams.is_some();
    let grads = g.backward(&trace, Upstream::Image(&up), want)?;
    let mut gw = vec![0.0; g.d_lat()];
    for s in &grads.styles.styles {
        for (a, b) in gw.iter_mut().zip(s) {
            *a += b;
        }
    }
    let gz = match gparams {
        Some(gp) => {
            let pg = grads.params.expect("requested");
            for (a, b) in gp.iter_mut().zip(&pg) {
                *a += b;
            }
            g.map_backward(&mt, &gw, Some(gp))?
        }
        None => g.map_backward(&mt, &gw, None)?,
    };
    Ok((loss, gz))
}

pub fn train(g: &mut Generator, corpus: &[Vec<f64>], cfg: &TrainConfig) -> Result<TrainLog> {
    if corpus.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    let pixels = g.size() * g.size();
    if let Some(bad) = corpus.iter().find(|x| x.len() != pixels) {
        return Err(Error::Shape(format!(
            "corpus image has {} pixels, generator makes {pixels}",
            bad.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut codes: Vec<Vec<f64>> = corpus.iter().map(|_| g.sample_code(&mut rng)).collect();
    let mut adam = AdamState::new(g.params().len(), cfg.lr_params);
    let mut code_adam: Vec<AdamState> = corpus.iter().map(|_| AdamState::new(g.d_lat(), cfg.lr_latent)).collect();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let batch = cfg.batch.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        // cosine decay to a tenth of the base rate
        let frac = epoch as f64 / cfg.epochs.max(1) as f64;
        let decay = 0.1 + 0.45 * (1.0 + (std::f64::consts::PI * frac).cos());
        let lr = cfg.lr_params * decay;
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let mut gp = vec![0.0; g.params().len()];
            for &i in chunk {
                for _ in 0..cfg.inner_steps {
                    let (_, gz) = code_loss(g, &codes[i], &corpus[i], None)?;
                    code_adam[i].step_with_lr(&mut codes[i], &gz, cfg.lr_latent * decay)?;
                }
                let (loss, _) = code_loss(g, &codes[i], &corpus[i], Some(&mut gp))?;
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!("training loss became {loss} in epoch {epoch}")));
                }
                total += loss;
            }
            let scale = 1.0 / chunk.len() as f64;
            gp.iter_mut().for_each(|v| *v *= scale);
            let mut params = g.params().to_vec();
            adam.step_with_lr(&mut params, &gp, lr)?;
            g.set_params(&params)?;
        }
        epoch_loss.push(total / corpus.len() as f64);
    }
    Ok(TrainLog { epoch_loss, codes })
}

/// Image of `w_a` with the styles of the listed blocks (1-based) taken from
/// `w_b`.
pub fn style_mix(g: &Generator, w_a: &LatentSet, w_b: &LatentSet, blocks: &[usize]) -> Result<Vec<f64>> {
    let l = g.blocks();
    if let Some(&bad) = blocks.iter().find(|&&b| b == 0 || b > l) {
        return Err(Error::Index { index: bad, max: l });
    }
    let mut w = w_a.clone();
    for &b in blocks {
        if w_b.styles.len() != l {
            return Err(Error::Shape("source B latent block count mismatch".into()));
        }
        w.styles[b - 1] = w_b.styles[b - 1].clone();
    }
    g.render(&w)
}
