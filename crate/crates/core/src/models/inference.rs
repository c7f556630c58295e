//! Graph-free evaluation for sampling.
//!
//! All points of a call share one step, so the time projection is computed
//! once. Points are processed in fixed-size chunks with reused buffers. For
//! energy models the input gradient is a hand-written backward pass. The
//! graph-built network stays the reference; the tests compare both.

use super::{DiffusionModel, Parameterisation};
use crate::{Point, Result};

const CHUNK: usize = 256;

/// `out = beta * out + a * b` (or `a * b^T` when `transpose_b`), row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    m: usize,
    k: usize,
    b: &[f64],
    n: usize,
    transpose_b: bool,
    beta: f64,
    out: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsb, csb) = if transpose_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides describe in-bounds row-major views of the slices
    // whose lengths are asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_row(out: &mut [f64], row: &[f64]) {
    for chunk in out.chunks_exact_mut(row.len()) {
        for (o, r) in chunk.iter_mut().zip(row) {
            *o += r;
        }
    }
}

fn fill_rows(out: &mut [f64], row: &[f64]) {
    for chunk in out.chunks_exact_mut(row.len()) {
        chunk.copy_from_slice(row);
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// silu applied to `pre`, written to `out`; `d_out` (if given) receives
/// silu'(pre).
fn silu_into(pre: &[f64], out: &mut [f64], d_out: Option<&mut [f64]>) {
    match d_out {
        Some(d) => {
            for ((p, o), dd) in pre.iter().zip(out.iter_mut()).zip(d.iter_mut()) {
                let s = sigmoid(*p);
                *o = p * s;
                *dd = s + p * s * (1.0 - s);
            }
        }
        None => {
            for (p, o) in pre.iter().zip(out.iter_mut()) {
                *o = p * sigmoid(*p);
            }
        }
    }
}

struct Block<'a> {
    scale: &'a [f64],
    shift: &'a [f64],
    w1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
    w3: &'a [f64],
    b3: &'a [f64],
    /// `b1 + emb(t) W_t + b_t`.
    bias1: Vec<f64>,
}

/// Per-chunk activations kept for the backward pass.
#[derive(Default)]
struct BlockCache {
    /// normalised input `z`
    z: Vec<f64>,
    /// `1/sqrt(var + eps)` per row
    rstd: Vec<f64>,
    d0: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
}

/// Reusable evaluator for one model at one step.
pub(crate) struct Evaluator<'a> {
    model: &'a DiffusionModel,
    blocks: Vec<Block<'a>>,
    w_in: &'a [f64],
    b_in: &'a [f64],
    w_out: &'a [f64],
    b_out: &'a [f64],
}

impl<'a> Evaluator<'a> {
    pub(crate) fn new(model: &'a DiffusionModel, t: usize) -> Self {
        let arch = &model.arch;
        let (e, inner) = (arch.time_dim, arch.inner);
        let mut arrays = model.params.iter().map(|(_, a)| a.data());
        let mut take = || arrays.next().expect("layout and parameter count agree");
        let w_in = take();
        let b_in = take();
        let mut raw = Vec::with_capacity(arch.blocks);
        for _ in 0..arch.blocks {
            let scale = take();
            let shift = take();
            let w1 = take();
            let b1 = take();
            let wt = take();
            let bt = if arch.time_bias { Some(take()) } else { None };
            let w2 = take();
            let b2 = take();
            let w3 = take();
            let b3 = take();
            raw.push((scale, shift, w1, b1, wt, bt, w2, b2, w3, b3));
        }
        let w_out = take();
        let b_out = take();
        let table = take();
        let emb = &table[t * e..(t + 1) * e];
        let blocks = raw
            .into_iter()
            .map(|(scale, shift, w1, b1, wt, bt, w2, b2, w3, b3)| {
                let mut temb = vec![0.0; inner];
                gemm(emb, 1, e, wt, inner, false, 0.0, &mut temb);
                let bias1 = (0..inner)
                    .map(|j| b1[j] + temb[j] + bt.map_or(0.0, |b| b[j]))
                    .collect();
                Block {
                    scale,
                    shift,
                    w1,
                    w2,
                    b2,
                    w3,
                    b3,
                    bias1,
                }
            })
            .collect();
        Self {
            model,
            blocks,
            w_in,
            b_in,
            w_out,
            b_out,
        }
    }

    /// Network output for `xs`, keeping backward caches when `caches` is
    /// given.
    fn forward_chunk(
        &self,
        xs: &[Point],
        mut caches: Option<&mut Vec<BlockCache>>,
        out: &mut Vec<Point>,
    ) {
        let arch = &self.model.arch;
        let (h_dim, inner) = (arch.hidden, arch.inner);
        let n = xs.len();
        let x: Vec<f64> = xs.iter().flat_map(|p| [p[0], p[1]]).collect();
        let mut h = vec![0.0; n * h_dim];
        fill_rows(&mut h, self.b_in);
        gemm(&x, n, 2, self.w_in, h_dim, false, 1.0, &mut h);
        let mut y = vec![0.0; n * h_dim];
        let mut a = vec![0.0; n * h_dim];
        let mut u = vec![0.0; n * inner];
        let mut v = vec![0.0; n * inner];
        let keep = caches.is_some();
        for (bi, blk) in self.blocks.iter().enumerate() {
            let mut cache = BlockCache::default();
            if keep {
                cache.z = vec![0.0; n * h_dim];
                cache.rstd = vec![0.0; n];
                cache.d0 = vec![0.0; n * h_dim];
                cache.d1 = vec![0.0; n * inner];
                cache.d2 = vec![0.0; n * inner];
            }
            // layer norm
            for r in 0..n {
                let row = &h[r * h_dim..(r + 1) * h_dim];
                let mean = row.iter().sum::<f64>() / h_dim as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h_dim as f64;
                let rstd = (var + arch.norm_eps).powf(-0.5);
                let yr = &mut y[r * h_dim..(r + 1) * h_dim];
                for j in 0..h_dim {
                    let z = (row[j] - mean) * rstd;
                    yr[j] = z * blk.scale[j] + blk.shift[j];
                    if keep {
                        cache.z[r * h_dim + j] = z;
                    }
                }
                if keep {
                    cache.rstd[r] = rstd;
                }
            }
            silu_into(&y, &mut a, keep.then_some(cache.d0.as_mut_slice()));
            fill_rows(&mut u, &blk.bias1);
            gemm(&a, n, h_dim, blk.w1, inner, false, 1.0, &mut u);
            silu_into(&u, &mut v, keep.then_some(cache.d1.as_mut_slice()));
            fill_rows(&mut u, blk.b2);
            gemm(&v, n, inner, blk.w2, inner, false, 1.0, &mut u);
            silu_into(&u, &mut v, keep.then_some(cache.d2.as_mut_slice()));
            // residual: h += v W3 + b3
            add_row(&mut h, blk.b3);
            gemm(&v, n, inner, blk.w3, h_dim, false, 1.0, &mut h);
            if let Some(c) = caches.as_deref_mut() {
                if c.len() <= bi {
                    c.push(cache);
                } else {
                    c[bi] = cache;
                }
            }
        }
        let mut o = vec![0.0; n * 2];
        fill_rows(&mut o, self.b_out);
        gemm(&h, n, h_dim, self.w_out, 2, false, 1.0, &mut o);
        out.clear();
        out.extend(o.chunks_exact(2).map(|c| [c[0], c[1]]));
    }

    /// Raw network outputs.
    pub(crate) fn net(&self, xs: &[Point]) -> Vec<Point> {
        let mut all = Vec::with_capacity(xs.len());
        let mut buf = Vec::new();
        for chunk in xs.chunks(CHUNK) {
            self.forward_chunk(chunk, None, &mut buf);
            all.extend_from_slice(&buf);
        }
        all
    }

    /// `(E, grad_x E)` with `E = |s|^2`.
    pub(crate) fn energy_and_gradient(&self, xs: &[Point]) -> (Vec<f64>, Vec<Point>) {
        let arch = &self.model.arch;
        let (h_dim, inner) = (arch.hidden, arch.inner);
        let mut energies = Vec::with_capacity(xs.len());
        let mut grads = Vec::with_capacity(xs.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut s = Vec::new();
        for chunk in xs.chunks(CHUNK) {
            let n = chunk.len();
            self.forward_chunk(chunk, Some(&mut caches), &mut s);
            energies.extend(s.iter().map(|p| p[0] * p[0] + p[1] * p[1]));
            let gs: Vec<f64> = s.iter().flat_map(|p| [2.0 * p[0], 2.0 * p[1]]).collect();
            let mut gh = vec![0.0; n * h_dim];
            gemm(&gs, n, 2, self.w_out, h_dim, true, 0.0, &mut gh);
            let mut g_in = vec![0.0; n * inner];
            let mut g_mid = vec![0.0; n * inner];
            let mut g_a = vec![0.0; n * h_dim];
            for (blk, c) in self.blocks.iter().zip(&caches).rev() {
                // through lin3, silu, lin2, silu, lin1, silu
                gemm(&gh, n, h_dim, blk.w3, inner, true, 0.0, &mut g_mid);
                for (g, d) in g_mid.iter_mut().zip(&c.d2) {
                    *g *= d;
                }
                gemm(&g_mid, n, inner, blk.w2, inner, true, 0.0, &mut g_in);
                for (g, d) in g_in.iter_mut().zip(&c.d1) {
                    *g *= d;
                }
                gemm(&g_in, n, inner, blk.w1, h_dim, true, 0.0, &mut g_a);
                // layer norm backward, accumulated into the residual stream
                for r in 0..n {
                    let ga = &mut g_a[r * h_dim..(r + 1) * h_dim];
                    let z = &c.z[r * h_dim..(r + 1) * h_dim];
                    let d0 = &c.d0[r * h_dim..(r + 1) * h_dim];
                    let mut mean_g = 0.0;
                    let mut mean_gz = 0.0;
                    for j in 0..h_dim {
                        let gz = ga[j] * d0[j] * blk.scale[j];
                        ga[j] = gz;
                        mean_g += gz;
                        mean_gz += gz * z[j];
                    }
                    mean_g /= h_dim as f64;
                    mean_gz /= h_dim as f64;
                    let rstd = c.rstd[r];
                    let ghr = &mut gh[r * h_dim..(r + 1) * h_dim];
                    for j in 0..h_dim {
                        ghr[j] += rstd * (ga[j] - mean_g - z[j] * mean_gz);
                    }
                }
            }
            let mut gx = vec![0.0; n * 2];
            gemm(&gh, n, h_dim, self.w_in, 2, true, 0.0, &mut gx);
            grads.extend(gx.chunks_exact(2).map(|c| [c[0], c[1]]));
        }
        (energies, grads)
    }
}

impl DiffusionModel {
    /// Fast batched evaluation at a shared step: `eps` and, for energy
    /// models, `E`. Agrees with the graph-built network to rounding.
    pub(crate) fn evaluate_fast(
        &self,
        xs: &[Point],
        t: usize,
        sigma: f64,
    ) -> Result<(Vec<Point>, Option<Vec<f64>>)> {
        let ev = Evaluator::new(self, t);
        Ok(match self.parameterisation {
            Parameterisation::Score => (ev.net(xs), None),
            Parameterisation::Energy => {
                let (e, g) = ev.energy_and_gradient(xs);
                (
                    g.iter().map(|p| [sigma * p[0], sigma * p[1]]).collect(),
                    Some(e),
                )
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adgraph::Graph;
    use crate::diffusion::NoiseSchedule;
    use crate::models::{ArchConfig, DiffusionModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn perturbed(p: Parameterisation, seed: u64) -> DiffusionModel {
        // random norm affine parameters and biases so every term is exercised
        let mut m = DiffusionModel::new(ArchConfig::default(), p, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for i in 0..m.params.len() {
            for v in m.params.array_mut(i).data_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
        m
    }

    fn points(n: usize) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..n)
            .map(|_| [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)])
            .collect()
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn matches_graph_for_score_models() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let m = perturbed(Parameterisation::Score, 1);
        let xs = points(600);
        for t in [1, 37, 100] {
            let mut g = Graph::new();
            let built = m.build_eps(&mut g, &xs, &vec![t; xs.len()], &s).unwrap();
            let reference = g.value(built.eps).data().to_vec();
            let (fast, energy) = m.evaluate_fast(&xs, t, s.sigma(t)).unwrap();
            assert!(energy.is_none());
            for (i, p) in fast.iter().enumerate() {
                assert!(rel_close(p[0], reference[2 * i], 1e-12));
                assert!(rel_close(p[1], reference[2 * i + 1], 1e-12));
            }
        }
    }

    #[test]
    fn matches_graph_for_energy_models() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let m = perturbed(Parameterisation::Energy, 2);
        let xs = points(300);
        for t in [1, 60] {
            let mut g = Graph::new();
            let built = m.build_eps(&mut g, &xs, &vec![t; xs.len()], &s).unwrap();
            let eps = g.value(built.eps).data().to_vec();
            let energy = g.value(built.energy.unwrap()).data().to_vec();
            let (fast, fast_e) = m.evaluate_fast(&xs, t, s.sigma(t)).unwrap();
            let fast_e = fast_e.unwrap();
            for i in 0..xs.len() {
                assert!(rel_close(fast_e[i], energy[i], 1e-12));
                assert!(
                    rel_close(fast[i][0], eps[2 * i], 1e-10),
                    "{} {}",
                    fast[i][0],
                    eps[2 * i]
                );
                assert!(rel_close(fast[i][1], eps[2 * i + 1], 1e-10));
            }
        }
    }
}
