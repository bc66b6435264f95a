//! Layer primitives with explicit forward and backward passes.
//!
//! Activations are row-major `[N][dim]` slices. Backward functions overwrite
//! input gradients and accumulate parameter gradients.

use rand::Rng;

use crate::real::{gemm, MatRef, Real};

pub const LN_EPS: f64 = 1e-6;

/// Parameter traversal used by checkpoints, optimizers and gradient checks.
pub trait Params<T: Real> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T]));
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param("", &mut |_, _, d| n += d.len());
        n
    }

    fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        self.for_each_param("", &mut |_, _, d| out.extend_from_slice(d));
        out
    }

    fn unflatten(&mut self, flat: &[T]) {
        let mut off = 0;
        self.for_each_param_mut("", &mut |_, _, d| {
            d.copy_from_slice(&flat[off..off + d.len()]);
            off += d.len();
        });
        assert_eq!(off, flat.len(), "flat parameter vector length");
    }

    fn zero_(&mut self) {
        self.for_each_param_mut("", &mut |_, _, d| d.fill(T::zero()));
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_param("", &mut |_, _, d| ok &= d.iter().all(|x| x.is_finite()));
        ok
    }
}

pub fn zeros_like<T: Real, M: Params<T> + Clone>(m: &M) -> M {
    let mut g = m.clone();
    g.zero_();
    g
}

/// `dst += src`, parameter by parameter.
pub fn accumulate<T: Real, M: Params<T>>(dst: &mut M, src: &M) {
    let flat = src.flatten();
    let mut off = 0;
    dst.for_each_param_mut("", &mut |_, _, d| {
        let n = d.len();
        for (a, &b) in d.iter_mut().zip(&flat[off..off + n]) {
            *a += b;
        }
        off += n;
    });
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x W + b` with `W` stored `[inp][out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub inp: usize,
    pub out: usize,
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Self {
            inp,
            out,
            w: vec![T::zero(); inp * out],
            b: vec![T::zero(); out],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut l = Self::zeros(n, n);
        for i in 0..n {
            l.w[i * n + i] = T::one();
        }
        l
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier(inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (inp + out) as f64).sqrt();
        let mut l = Self::zeros(inp, out);
        for w in &mut l.w {
            *w = T::c(rng.gen_range(-a..a));
        }
        l
    }

    pub fn forward_into(&self, x: &[T], n: usize, y: &mut [T]) {
        debug_assert_eq!(x.len(), n * self.inp);
        debug_assert_eq!(y.len(), n * self.out);
        for row in y.chunks_exact_mut(self.out) {
            row.copy_from_slice(&self.b);
        }
        gemm(
            T::one(),
            MatRef::new(x, n, self.inp, self.inp),
            MatRef::new(&self.w, self.inp, self.out, self.out),
            T::one(),
            y,
            self.out,
        );
    }

    pub fn forward(&self, x: &[T], n: usize) -> Vec<T> {
        let mut y = vec![T::zero(); n * self.out];
        self.forward_into(x, n, &mut y);
        y
    }

    /// Backward of `y = x W + b` for `n` rows.
    pub fn backward(&self, x: &[T], n: usize, dy: &[T], dx: Option<&mut [T]>, grad: Option<&mut Linear<T>>) {
        if let Some(dx) = dx {
            gemm(
                T::one(),
                MatRef::new(dy, n, self.out, self.out),
                MatRef::new(&self.w, self.inp, self.out, self.out).t(),
                T::zero(),
                dx,
                self.inp,
            );
        }
        if let Some(g) = grad {
            gemm(
                T::one(),
                MatRef::new(x, n, self.inp, self.inp).t(),
                MatRef::new(dy, n, self.out, self.out),
                T::one(),
                &mut g.w,
                self.out,
            );
            for row in dy.chunks_exact(self.out) {
                for (gb, &d) in g.b.iter_mut().zip(row) {
                    *gb += d;
                }
            }
        }
    }
}

impl<T: Real> Params<T> for Linear<T> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f(&join(prefix, "weight"), &[self.inp, self.out], &self.w);
        f(&join(prefix, "bias"), &[self.out], &self.b);
    }

    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        f(&join(prefix, "weight"), &[self.inp, self.out], &mut self.w);
        f(&join(prefix, "bias"), &[self.out], &mut self.b);
    }
}

/// Affine-free layer norm over rows of width `d`. Writes normalized rows to `out`
/// and per-row reciprocal standard deviations to `rstd`.
pub fn layer_norm<T: Real>(x: &[T], d: usize, out: &mut [T], rstd: &mut [T]) {
    let eps = T::c(LN_EPS);
    let inv_d = T::one() / T::c(d as f64);
    for ((xr, or), rs) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).zip(rstd.iter_mut()) {
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + eps).sqrt();
        *rs = r;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - mean) * r;
        }
    }
}

/// Backward of [`layer_norm`]; `normed` is the forward output.
pub fn layer_norm_backward<T: Real>(normed: &[T], rstd: &[T], dn: &[T], d: usize, dx: &mut [T]) {
    let inv_d = T::one() / T::c(d as f64);
    for (((nr, &r), dr), xr) in normed
        .chunks_exact(d)
        .zip(rstd)
        .zip(dn.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
    {
        let mean_dn = dr.iter().copied().sum::<T>() * inv_d;
        let mean_dnn = dr.iter().zip(nr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
        for ((o, &g), &nv) in xr.iter_mut().zip(dr).zip(nr) {
            *o = r * (g - mean_dn - nv * mean_dnn);
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub fn gelu<T: Real>(x: T) -> T {
    let k = T::c(GELU_K);
    let c = T::c(GELU_C);
    let half = T::c(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::c(GELU_K);
    let c = T::c(GELU_C);
    let half = T::c(0.5);
    let th = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * k * (T::one() + T::c(3.0) * c * x * x)
}

pub fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub fn silu_grad<T: Real>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

/// Sinusoidal features of the diffusion time (`sigma` scaled to `[0, 1000]`),
/// cosine half first.
pub fn sigma_features<T: Real>(sigma: T, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let t = sigma.f64() * 1000.0;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = T::c((t * freq).cos());
        out[half + i] = T::c((t * freq).sin());
    }
    out
}

/// Multi-head softmax attention over `n` tokens.
///
/// `qkv` is `[n][3d]` holding queries, keys and values side by side. Writes the
/// concatenated head outputs to `out` (`[n][d]`) and the attention
/// probabilities to `probs` (`[heads][n][n]`).
pub fn attention<T: Real>(qkv: &[T], n: usize, d: usize, heads: usize, out: &mut [T], probs: &mut [T]) {
    let dh = d / heads;
    let scale = T::one() / T::c(dh as f64).sqrt();
    let ld = 3 * d;
    for h in 0..heads {
        let p = &mut probs[h * n * n..(h + 1) * n * n];
        let q = MatRef::new(&qkv[h * dh..], n, dh, ld);
        let k = MatRef::new(&qkv[d + h * dh..], n, dh, ld);
        let v = MatRef::new(&qkv[2 * d + h * dh..], n, dh, ld);
        gemm(scale, q, k.t(), T::zero(), p, n);
        for row in p.chunks_exact_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            let inv = T::one() / s;
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
        gemm(T::one(), MatRef::new(p, n, n, n), v, T::zero(), &mut out[h * dh..], d);
    }
}

/// Backward of [`attention`]; overwrites `dqkv`.
pub fn attention_backward<T: Real>(
    qkv: &[T],
    probs: &[T],
    dout: &[T],
    n: usize,
    d: usize,
    heads: usize,
    dqkv: &mut [T],
    scratch: &mut Vec<T>,
) {
    let dh = d / heads;
    let scale = T::one() / T::c(dh as f64).sqrt();
    let ld = 3 * d;
    scratch.resize(n * n, T::zero());
    for h in 0..heads {
        let p = &probs[h * n * n..(h + 1) * n * n];
        let pm = MatRef::new(p, n, n, n);
        let q = MatRef::new(&qkv[h * dh..], n, dh, ld);
        let k = MatRef::new(&qkv[d + h * dh..], n, dh, ld);
        let v = MatRef::new(&qkv[2 * d + h * dh..], n, dh, ld);
        let dout_h = MatRef::new(&dout[h * dh..], n, dh, d);
        // dV = P^T dO
        gemm(T::one(), pm.t(), dout_h, T::zero(), &mut dqkv[2 * d + h * dh..], ld);
        // dP = dO V^T, then softmax backward in place.
        gemm(T::one(), dout_h, v.t(), T::zero(), scratch, n);
        for (ds, pr) in scratch.chunks_exact_mut(n).zip(p.chunks_exact(n)) {
            let dot = ds.iter().zip(pr).map(|(&a, &b)| a * b).sum::<T>();
            for (x, &pv) in ds.iter_mut().zip(pr) {
                *x = pv * (*x - dot);
            }
        }
        let ds = MatRef::new(&scratch[..], n, n, n);
        gemm(scale, ds, k, T::zero(), &mut dqkv[h * dh..], ld);
        gemm(scale, ds.t(), q, T::zero(), &mut dqkv[d + h * dh..], ld);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        let mut xp = x.to_vec();
        (0..x.len())
            .map(|i| {
                xp[i] = x[i] + h;
                let a = f(&xp);
                xp[i] = x[i] - h;
                let b = f(&xp);
                xp[i] = x[i];
                (a - b) / (2.0 * h)
            })
            .collect()
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() < tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let (n, d) = (3, 5);
        let x = rand_vec(n * d, 1);
        let w = rand_vec(n * d, 2);
        let loss = |x: &[f64]| {
            let mut o = vec![0.0; n * d];
            let mut r = vec![0.0; n];
            layer_norm(x, d, &mut o, &mut r);
            o.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut o = vec![0.0; n * d];
        let mut r = vec![0.0; n];
        layer_norm(&x, d, &mut o, &mut r);
        let mut dx = vec![0.0; n * d];
        layer_norm_backward(&o, &r, &w, d, &mut dx);
        assert_close(&dx, &fd(loss, &x), 1e-6);
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let (n, d, heads) = (4, 6, 2);
        let qkv = rand_vec(n * 3 * d, 3);
        let w = rand_vec(n * d, 4);
        let loss = |qkv: &[f64]| {
            let mut o = vec![0.0; n * d];
            let mut p = vec![0.0; heads * n * n];
            attention(qkv, n, d, heads, &mut o, &mut p);
            o.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut o = vec![0.0; n * d];
        let mut p = vec![0.0; heads * n * n];
        attention(&qkv, n, d, heads, &mut o, &mut p);
        let mut dqkv = vec![0.0; n * 3 * d];
        attention_backward(&qkv, &p, &w, n, d, heads, &mut dqkv, &mut Vec::new());
        assert_close(&dqkv, &fd(loss, &qkv), 1e-6);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let (n, i, o) = (3, 4, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let lin = Linear::<f64>::xavier(i, o, &mut rng);
        let x = rand_vec(n * i, 6);
        let w = rand_vec(n * o, 7);
        let mut dx = vec![0.0; n * i];
        let mut g = Linear::zeros(i, o);
        lin.backward(&x, n, &w, Some(&mut dx), Some(&mut g));
        let fx = fd(|x| lin.forward(x, n).iter().zip(&w).map(|(a, b)| a * b).sum(), &x);
        assert_close(&dx, &fx, 1e-6);
        let flat = lin.flatten();
        let fw = fd(
            |p| {
                let mut l = lin.clone();
                l.unflatten(p);
                l.forward(&x, n).iter().zip(&w).map(|(a, b)| a * b).sum()
            },
            &flat,
        );
        assert_close(&g.flatten(), &fw, 1e-6);
    }

    #[test]
    fn activation_derivatives() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let g = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((g - gelu_grad(x)).abs() < 1e-8);
            let s = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((s - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn sigma_features_endpoints() {
        let f = sigma_features::<f64>(0.0, 8);
        assert_eq!(&f[..4], &[1.0; 4]);
        assert_eq!(&f[4..], &[0.0; 4]);
    }
}
