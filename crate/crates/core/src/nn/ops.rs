//! Layer primitives with hand-written backward passes.
//!
//! Activations are stored channel-major as `[channel][batch][position]`, so a
//! 1D convolution is one GEMM of the weight matrix against an im2col buffer
//! with `batch * position` columns. All spatial operations wrap around the
//! ring (circular padding).

use super::real::{gemm, Real};

pub const GN_EPS: f64 = 1e-5;

/// im2col for a width-3 circular convolution: row `ci*3 + k` holds the input
/// shifted by `k - 1`.
pub fn im2col3<T: Real>(x: &[T], cin: usize, batch: usize, len: usize) -> Vec<T> {
    let cols = batch * len;
    let mut col = vec![T::zero(); 3 * cin * cols];
    for ci in 0..cin {
        for b in 0..batch {
            let src = &x[(ci * batch + b) * len..(ci * batch + b + 1) * len];
            for k in 0..3 {
                let dst = &mut col[(ci * 3 + k) * cols + b * len..(ci * 3 + k) * cols + (b + 1) * len];
                for l in 0..len {
                    dst[l] = src[(l + len + k - 1) % len];
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col3`]: scatter-adds column gradients back onto the input.
pub fn col2im3<T: Real>(dcol: &[T], cin: usize, batch: usize, len: usize) -> Vec<T> {
    let cols = batch * len;
    let mut dx = vec![T::zero(); cin * cols];
    for ci in 0..cin {
        for b in 0..batch {
            let dst = &mut dx[(ci * batch + b) * len..(ci * batch + b + 1) * len];
            for k in 0..3 {
                let src = &dcol[(ci * 3 + k) * cols + b * len..(ci * 3 + k) * cols + (b + 1) * len];
                for l in 0..len {
                    dst[(l + len + k - 1) % len] += src[l];
                }
            }
        }
    }
    dx
}

/// Circular convolution of width `kernel` (1 or 3). Returns the output and the
/// GEMM right-hand side needed for the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn conv_forward<T: Real>(
    x: &[T],
    cin: usize,
    batch: usize,
    len: usize,
    w: &[T],
    bias: &[T],
    cout: usize,
    kernel: usize,
) -> (Vec<T>, Vec<T>) {
    let cols = batch * len;
    let rhs = if kernel == 3 {
        im2col3(x, cin, batch, len)
    } else {
        x.to_vec()
    };
    let mut y = vec![T::zero(); cout * cols];
    for (co, row) in y.chunks_exact_mut(cols).enumerate() {
        row.fill(bias[co]);
    }
    gemm(cout, kernel * cin, cols, w, false, &rhs, false, T::one(), &mut y);
    (y, rhs)
}

/// Accumulates weight/bias gradients; returns the input gradient when asked.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    dy: &[T],
    rhs: &[T],
    w: &[T],
    cin: usize,
    cout: usize,
    kernel: usize,
    batch: usize,
    len: usize,
    dw: &mut [T],
    dbias: &mut [T],
    want_dx: bool,
) -> Option<Vec<T>> {
    let cols = batch * len;
    let kc = kernel * cin;
    gemm(cout, cols, kc, dy, false, rhs, true, T::one(), dw);
    for (co, row) in dy.chunks_exact(cols).enumerate() {
        dbias[co] += row.iter().copied().sum::<T>();
    }
    if !want_dx {
        return None;
    }
    let mut drhs = vec![T::zero(); kc * cols];
    gemm(kc, cout, cols, w, true, dy, false, T::zero(), &mut drhs);
    if kernel == 3 {
        Some(col2im3(&drhs, cin, batch, len))
    } else {
        Some(drhs)
    }
}

pub struct GroupNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Group normalization per sample over `(channels in group) x positions`.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_forward<T: Real>(
    x: &[T],
    c: usize,
    batch: usize,
    len: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, GroupNormCache<T>) {
    let cg = c / groups;
    let count = T::lit((cg * len) as f64);
    let eps = T::lit(GN_EPS);
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); batch * groups];
    for b in 0..batch {
        for g in 0..groups {
            let mut mean = T::zero();
            for ci in g * cg..(g + 1) * cg {
                let off = (ci * batch + b) * len;
                mean += x[off..off + len].iter().copied().sum::<T>();
            }
            mean = mean / count;
            let mut var = T::zero();
            for ci in g * cg..(g + 1) * cg {
                let off = (ci * batch + b) * len;
                for &v in &x[off..off + len] {
                    var += (v - mean) * (v - mean);
                }
            }
            var = var / count;
            let r = T::one() / (var + eps).sqrt();
            rstd[b * groups + g] = r;
            for ci in g * cg..(g + 1) * cg {
                let off = (ci * batch + b) * len;
                for i in off..off + len {
                    let h = (x[i] - mean) * r;
                    xhat[i] = h;
                    y[i] = gamma[ci] * h + beta[ci];
                }
            }
        }
    }
    (y, GroupNormCache { xhat, rstd })
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Real>(
    dy: &[T],
    cache: &GroupNormCache<T>,
    c: usize,
    batch: usize,
    len: usize,
    groups: usize,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let cg = c / groups;
    let count = T::lit((cg * len) as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for ci in 0..c {
        let off = ci * batch * len;
        let mut sg = T::zero();
        let mut sb = T::zero();
        for i in off..off + batch * len {
            sg += dy[i] * cache.xhat[i];
            sb += dy[i];
        }
        dgamma[ci] += sg;
        dbeta[ci] += sb;
    }
    for b in 0..batch {
        for g in 0..groups {
            let r = cache.rstd[b * groups + g];
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for ci in g * cg..(g + 1) * cg {
                let off = (ci * batch + b) * len;
                for i in off..off + len {
                    let d = dy[i] * gamma[ci];
                    sum_d += d;
                    sum_dx += d * cache.xhat[i];
                }
            }
            for ci in g * cg..(g + 1) * cg {
                let off = (ci * batch + b) * len;
                for i in off..off + len {
                    let d = dy[i] * gamma[ci];
                    dx[i] = r / count * (count * d - sum_d - cache.xhat[i] * sum_dx);
                }
            }
        }
    }
    dx
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// `dy * d silu(x)/dx`, where `x` is the pre-activation.
pub fn silu_backward<T: Real>(dy: &[T], x: &[T]) -> Vec<T> {
    dy.iter()
        .zip(x)
        .map(|(&d, &v)| {
            let s = sigmoid(v);
            d * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

/// Halves the ring length by averaging neighbouring pairs.
pub fn avg_pool2<T: Real>(x: &[T], rows: usize, len: usize) -> Vec<T> {
    let half = len / 2;
    let h = T::lit(0.5);
    let mut y = vec![T::zero(); rows * half];
    for r in 0..rows {
        for j in 0..half {
            y[r * half + j] = h * (x[r * len + 2 * j] + x[r * len + 2 * j + 1]);
        }
    }
    y
}

pub fn avg_pool2_backward<T: Real>(dy: &[T], rows: usize, len: usize) -> Vec<T> {
    let half = len / 2;
    let h = T::lit(0.5);
    let mut dx = vec![T::zero(); rows * len];
    for r in 0..rows {
        for j in 0..half {
            let d = h * dy[r * half + j];
            dx[r * len + 2 * j] = d;
            dx[r * len + 2 * j + 1] = d;
        }
    }
    dx
}

/// Doubles the ring length by repeating each value.
pub fn upsample2<T: Real>(x: &[T], rows: usize, len: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * len * 2];
    for r in 0..rows {
        for j in 0..len {
            y[r * 2 * len + 2 * j] = x[r * len + j];
            y[r * 2 * len + 2 * j + 1] = x[r * len + j];
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &[T], rows: usize, len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * len];
    for r in 0..rows {
        for j in 0..len {
            dx[r * len + j] = dy[r * 2 * len + 2 * j] + dy[r * 2 * len + 2 * j + 1];
        }
    }
    dx
}

/// Sinusoidal embedding of integer timesteps, laid out `[dim][batch]`.
pub fn timestep_embedding<T: Real>(ts: &[usize], dim: usize) -> Vec<T> {
    let half = dim / 2;
    let batch = ts.len();
    let mut e = vec![T::zero(); dim * batch];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        for (b, &t) in ts.iter().enumerate() {
            let arg = t as f64 * freq;
            e[i * batch + b] = T::lit(arg.sin());
            e[(i + half) * batch + b] = T::lit(arg.cos());
        }
    }
    e
}
