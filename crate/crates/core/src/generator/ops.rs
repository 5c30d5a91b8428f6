//! Dense kernels of the synthesis network: 3×3 cross-correlation with zero
//! padding, its two adjoints, and 2× bilinear upsampling.
//!
//! Feature maps are `[channel][row][col]`, square, side `r`.

/// Valid output range along one axis for a tap offset `d ∈ {-1, 0, 1}`.
#[inline]
fn span(r: usize, d: isize) -> (usize, usize) {
    ((-d).max(0) as usize, (r as isize - d.max(0)) as usize)
}

/// `out[o] = Σ_i w[o,i] ⋆ x[i]`, overwriting `out`.
pub fn conv3x3(x: &[f64], cin: usize, r: usize, w: &[f64], cout: usize, out: &mut [f64]) {
    let rr = r * r;
    out[..cout * rr].fill(0.0);
    for o in 0..cout {
        let op = &mut out[o * rr..(o + 1) * rr];
        for i in 0..cin {
            let xp = &x[i * rr..(i + 1) * rr];
            let wk = &w[(o * cin + i) * 9..(o * cin + i) * 9 + 9];
            for (k, &wv) in wk.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let (dy, dx) = ((k / 3) as isize - 1, (k % 3) as isize - 1);
                let (r0, r1) = span(r, dy);
                let (c0, c1) = span(r, dx);
                for row in r0..r1 {
                    let srow = (row as isize + dy) as usize;
                    let src = &xp[srow * r + (c0 as isize + dx) as usize..srow * r + (c1 as isize + dx) as usize];
                    let dst = &mut op[row * r + c0..row * r + c1];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wv * s;
                    }
                }
            }
        }
    }
}

/// Adjoint in the input: `gx[i] += Σ_o w[o,i] ⋆ᵀ g[o]`.
pub fn conv3x3_input_grad(g: &[f64], cout: usize, r: usize, w: &[f64], cin: usize, gx: &mut [f64]) {
    let rr = r * r;
    for o in 0..cout {
        let gp = &g[o * rr..(o + 1) * rr];
        for i in 0..cin {
            let xp = &mut gx[i * rr..(i + 1) * rr];
            let wk = &w[(o * cin + i) * 9..(o * cin + i) * 9 + 9];
            for (k, &wv) in wk.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let (dy, dx) = ((k / 3) as isize - 1, (k % 3) as isize - 1);
                let (r0, r1) = span(r, dy);
                let (c0, c1) = span(r, dx);
                for row in r0..r1 {
                    let srow = (row as isize + dy) as usize;
                    let dst = &mut xp[srow * r + (c0 as isize + dx) as usize..srow * r + (c1 as isize + dx) as usize];
                    let src = &gp[row * r + c0..row * r + c1];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wv * s;
                    }
                }
            }
        }
    }
}

/// Adjoint in the weights: `gw[o,i,k] += Σ_p g[o,p] x[i,p+k]`.
pub fn conv3x3_weight_grad(g: &[f64], cout: usize, r: usize, x: &[f64], cin: usize, gw: &mut [f64]) {
    let rr = r * r;
    for o in 0..cout {
        let gp = &g[o * rr..(o + 1) * rr];
        for i in 0..cin {
            let xp = &x[i * rr..(i + 1) * rr];
            for k in 0..9 {
                let (dy, dx) = ((k / 3) as isize - 1, (k % 3) as isize - 1);
                let (r0, r1) = span(r, dy);
                let (c0, c1) = span(r, dx);
                let mut acc = 0.0;
                for row in r0..r1 {
                    let srow = (row as isize + dy) as usize;
                    let src = &xp[srow * r + (c0 as isize + dx) as usize..srow * r + (c1 as isize + dx) as usize];
                    let gg = &gp[row * r + c0..row * r + c1];
                    acc += gg.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                }
                gw[(o * cin + i) * 9 + k] += acc;
            }
        }
    }
}

/// Neighbour indices for the half-pixel bilinear stencil, clamped.
#[inline]
fn nb(i: usize, n: usize) -> (usize, usize) {
    (i.saturating_sub(1), (i + 1).min(n - 1))
}

/// 2× bilinear upsampling of `ch` planes of side `r`.
pub fn upsample(x: &[f64], ch: usize, r: usize) -> Vec<f64> {
    let r2 = 2 * r;
    let mut out = vec![0.0; ch * r2 * r2];
    let mut tmp = vec![0.0; r * r2];
    for c in 0..ch {
        let xp = &x[c * r * r..(c + 1) * r * r];
        for i in 0..r {
            for j in 0..r {
                let (jm, jp) = nb(j, r);
                let v = xp[i * r + j];
                tmp[i * r2 + 2 * j] = 0.75 * v + 0.25 * xp[i * r + jm];
                tmp[i * r2 + 2 * j + 1] = 0.75 * v + 0.25 * xp[i * r + jp];
            }
        }
        let op = &mut out[c * r2 * r2..(c + 1) * r2 * r2];
        for i in 0..r {
            let (im, ip) = nb(i, r);
            for col in 0..r2 {
                let v = tmp[i * r2 + col];
                op[2 * i * r2 + col] = 0.75 * v + 0.25 * tmp[im * r2 + col];
                op[(2 * i + 1) * r2 + col] = 0.75 * v + 0.25 * tmp[ip * r2 + col];
            }
        }
    }
    out
}

/// Adjoint of [`upsample`]: `ch` planes of side `2r` to side `r`.
pub fn upsample_adjoint(g: &[f64], ch: usize, r: usize) -> Vec<f64> {
    let r2 = 2 * r;
    let mut out = vec![0.0; ch * r * r];
    let mut tmp = vec![0.0; r * r2];
    for c in 0..ch {
        tmp.fill(0.0);
        let gp = &g[c * r2 * r2..(c + 1) * r2 * r2];
        for i in 0..r {
            let (im, ip) = nb(i, r);
            for col in 0..r2 {
                let a = gp[2 * i * r2 + col];
                let b = gp[(2 * i + 1) * r2 + col];
                tmp[i * r2 + col] += 0.75 * (a + b);
                tmp[im * r2 + col] += 0.25 * a;
                tmp[ip * r2 + col] += 0.25 * b;
            }
        }
        let op = &mut out[c * r * r..(c + 1) * r * r];
        for i in 0..r {
            for j in 0..r {
                let (jm, jp) = nb(j, r);
                let a = tmp[i * r2 + 2 * j];
                let b = tmp[i * r2 + 2 * j + 1];
                op[i * r + j] += 0.75 * (a + b);
                op[i * r + jm] += 0.25 * a;
                op[i * r + jp] += 0.25 * b;
            }
        }
    }
    out
}

pub const LRELU_SLOPE: f64 = 0.2;

#[inline]
pub fn lrelu(v: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        LRELU_SLOPE * v
    }
}

#[inline]
pub fn lrelu_grad(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        LRELU_SLOPE
    }
}
