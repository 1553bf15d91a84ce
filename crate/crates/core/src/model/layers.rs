//! Row-major dense kernels with hand-written backward passes.
//!
//! Parameters live in one flat buffer; layer descriptors hold offsets into
//! it. Every `backward` accumulates parameter gradients into a buffer of the
//! same layout and returns the gradient with respect to its input.

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn add_into(y: &mut [f64], x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

/// `y = x W + b` with `W` stored `inp × out`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn forward(&self, p: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = vec![0.0; rows * self.out];
        for r in 0..rows {
            self.forward_row(p, &x[r * self.inp..(r + 1) * self.inp], &mut y[r * self.out..(r + 1) * self.out]);
        }
        y
    }

    pub fn forward_row(&self, p: &[f64], x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(&p[self.b..self.b + self.out]);
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                let row = self.w + i * self.out;
                axpy(y, xi, &p[row..row + self.out]);
            }
        }
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], x: &[f64], dy: &[f64], rows: usize) -> Vec<f64> {
        let mut dx = vec![0.0; rows * self.inp];
        for r in 0..rows {
            let dyr = &dy[r * self.out..(r + 1) * self.out];
            let xr = &x[r * self.inp..(r + 1) * self.inp];
            add_into(&mut g[self.b..self.b + self.out], dyr);
            for i in 0..self.inp {
                let row = self.w + i * self.out;
                dx[r * self.inp + i] = dot(dyr, &p[row..row + self.out]);
                if xr[i] != 0.0 {
                    axpy(&mut g[row..row + self.out], xr[i], dyr);
                }
            }
        }
        dx
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerNorm {
    pub g: usize,
    pub b: usize,
    pub dim: usize,
}

pub(crate) struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn forward_row(&self, p: &[f64], x: &[f64], y: &mut [f64]) -> f64 {
        let d = self.dim as f64;
        let mean = x.iter().sum::<f64>() / d;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..self.dim {
            y[j] = (x[j] - mean) * rstd * p[self.g + j] + p[self.b + j];
        }
        rstd
    }

    pub fn forward(&self, p: &[f64], x: &[f64], rows: usize) -> (Vec<f64>, NormCache) {
        let d = self.dim;
        let mut y = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            rstd[r] = self.forward_row(p, xr, &mut y[r * d..(r + 1) * d]);
            let mean = xr.iter().sum::<f64>() / d as f64;
            for j in 0..d {
                xhat[r * d + j] = (xr[j] - mean) * rstd[r];
            }
        }
        (y, NormCache { xhat, rstd })
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &NormCache, dy: &[f64], rows: usize) -> Vec<f64> {
        let d = self.dim;
        let mut dx = vec![0.0; rows * d];
        let mut dxhat = vec![0.0; d];
        for r in 0..rows {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let dyr = &dy[r * d..(r + 1) * d];
            for j in 0..d {
                g[self.g + j] += dyr[j] * xh[j];
                g[self.b + j] += dyr[j];
                dxhat[j] = dyr[j] * p[self.g + j];
            }
            let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for j in 0..d {
                dx[r * d + j] = cache.rstd[r] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable softmax in place.
pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in x.iter_mut() {
        *v /= s;
    }
}

pub(crate) fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Multi-head scaled dot-product attention with output projection.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

pub(crate) struct AttnCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// heads × nq × nk
    probs: Vec<f64>,
    ctx: Vec<f64>,
    nq: usize,
    nk: usize,
}

impl Attention {
    fn dim(&self) -> usize {
        self.o.out
    }

    /// Attention of one query row against cached key/value rows `0..nk`.
    /// `out_ctx` receives the concatenated per-head context.
    pub fn attend_row(&self, q_row: &[f64], k: &[f64], v: &[f64], nk: usize, probs: &mut [f64], out_ctx: &mut [f64]) {
        let h = self.dim();
        let dh = h / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for hd in 0..self.heads {
            let off = hd * dh;
            let pr = &mut probs[hd * nk..(hd + 1) * nk];
            for j in 0..nk {
                pr[j] = dot(&q_row[off..off + dh], &k[j * h + off..j * h + off + dh]) * scale;
            }
            softmax_in_place(pr);
            let ctx = &mut out_ctx[off..off + dh];
            ctx.iter_mut().for_each(|c| *c = 0.0);
            for j in 0..nk {
                axpy(ctx, pr[j], &v[j * h + off..j * h + off + dh]);
            }
        }
    }

    pub fn forward(&self, p: &[f64], xq: &[f64], nq: usize, xkv: &[f64], nk: usize, causal: bool) -> (Vec<f64>, AttnCache) {
        let h = self.dim();
        let q = self.q.forward(p, xq, nq);
        let k = self.k.forward(p, xkv, nk);
        let v = self.v.forward(p, xkv, nk);
        let mut probs = vec![0.0; self.heads * nq * nk];
        let mut ctx = vec![0.0; nq * h];
        let mut row_probs = vec![0.0; self.heads * nk];
        for i in 0..nq {
            let visible = if causal { i + 1 } else { nk };
            let rp = &mut row_probs[..self.heads * visible];
            self.attend_row(&q[i * h..(i + 1) * h], &k, &v, visible, rp, &mut ctx[i * h..(i + 1) * h]);
            for hd in 0..self.heads {
                let dst = hd * nq * nk + i * nk;
                probs[dst..dst + visible].copy_from_slice(&rp[hd * visible..(hd + 1) * visible]);
            }
        }
        let out = self.o.forward(p, &ctx, nq);
        (out, AttnCache { q, k, v, probs, ctx, nq, nk })
    }

    /// Returns `(d xq, d xkv)`.
    pub fn backward(&self, p: &[f64], g: &mut [f64], xq: &[f64], xkv: &[f64], c: &AttnCache, dout: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h = self.dim();
        let dh = h / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (nq, nk) = (c.nq, c.nk);
        let dctx = self.o.backward(p, g, &c.ctx, dout, nq);
        let mut dq = vec![0.0; nq * h];
        let mut dk = vec![0.0; nk * h];
        let mut dv = vec![0.0; nk * h];
        let mut dp = vec![0.0; nk];
        for hd in 0..self.heads {
            let off = hd * dh;
            for i in 0..nq {
                let pr = &c.probs[hd * nq * nk + i * nk..hd * nq * nk + (i + 1) * nk];
                let dci = &dctx[i * h + off..i * h + off + dh];
                let mut s = 0.0;
                for j in 0..nk {
                    if pr[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    dp[j] = dot(dci, &c.v[j * h + off..j * h + off + dh]);
                    s += pr[j] * dp[j];
                    axpy(&mut dv[j * h + off..j * h + off + dh], pr[j], dci);
                }
                for j in 0..nk {
                    if pr[j] == 0.0 {
                        continue;
                    }
                    let ds = pr[j] * (dp[j] - s) * scale;
                    axpy(&mut dq[i * h + off..i * h + off + dh], ds, &c.k[j * h + off..j * h + off + dh]);
                    axpy(&mut dk[j * h + off..j * h + off + dh], ds, &c.q[i * h + off..i * h + off + dh]);
                }
            }
        }
        let dxq = self.q.backward(p, g, xq, &dq, nq);
        let mut dxkv = self.k.backward(p, g, xkv, &dk, nk);
        add_into(&mut dxkv, &self.v.backward(p, g, xkv, &dv, nk));
        (dxq, dxkv)
    }
}

/// Position-wise feed-forward block with GELU.
#[derive(Clone, Copy, Debug)]
pub(crate) struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

pub(crate) struct FfCache {
    pre: Vec<f64>,
    act: Vec<f64>,
}

impl FeedForward {
    pub fn forward(&self, p: &[f64], x: &[f64], rows: usize) -> (Vec<f64>, FfCache) {
        let pre = self.up.forward(p, x, rows);
        let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        let out = self.down.forward(p, &act, rows);
        (out, FfCache { pre, act })
    }

    pub fn forward_row(&self, p: &[f64], x: &[f64], out: &mut [f64]) {
        let mut pre = vec![0.0; self.up.out];
        self.up.forward_row(p, x, &mut pre);
        pre.iter_mut().for_each(|v| *v = gelu(*v));
        self.down.forward_row(p, &pre, out);
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], x: &[f64], c: &FfCache, dout: &[f64], rows: usize) -> Vec<f64> {
        let mut dact = self.down.backward(p, g, &c.act, dout, rows);
        for (d, &z) in dact.iter_mut().zip(&c.pre) {
            *d *= gelu_grad(z);
        }
        self.up.backward(p, g, x, &dact, rows)
    }
}
