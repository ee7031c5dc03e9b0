//! Discrete convolutions `(A ∗ f)(x_i) = Σ_j q_j f_j A(x_i - x_j)` on a
//! tensor grid, with `q_j` the trapezoid weights.
//!
//! The direct double sum defines the result. [`GridConvolver`] computes the
//! same sum through a zero-padded FFT, which is exact up to roundoff since
//! the kernel is sampled at the lattice offsets.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::kernel::{eval_a_unchecked, eval_b_unchecked};
use crate::types::{norm2, sub, GridSpec, KernelParams, Mat3, Vec3, ZERO3, ZERO_MAT3};

/// `A ∗ f` and `b ∗ f` at every grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvField {
    pub a: Vec<Mat3>,
    pub b: Vec<Vec3>,
}

impl ConvField {
    pub fn zeros(n: usize) -> Self {
        Self {
            a: vec![ZERO_MAT3; n],
            b: vec![ZERO3; n],
        }
    }

    /// `self - other`, node by node.
    pub fn difference(&self, other: &Self) -> Self {
        let a = self
            .a
            .iter()
            .zip(&other.a)
            .map(|(x, y)| {
                let mut m = ZERO_MAT3;
                for r in 0..3 {
                    for c in 0..3 {
                        m[r][c] = x[r][c] - y[r][c];
                    }
                }
                m
            })
            .collect();
        let b = self.b.iter().zip(&other.b).map(|(x, y)| sub(x, y)).collect();
        Self { a, b }
    }
}

/// Direct double sum. Cost `O(M^{2d})`.
pub fn conv_direct(spec: &GridSpec, values: &[f64], params: &KernelParams) -> ConvField {
    assert_eq!(values.len(), spec.len());
    let q = spec.quadrature_weights();
    let nodes = spec.nodes();
    let mass: Vec<f64> = q.iter().zip(values).map(|(q, f)| q * f).collect();
    let (a, b): (Vec<Mat3>, Vec<Vec3>) = nodes
        .par_iter()
        .map(|x| {
            let mut a = ZERO_MAT3;
            let mut b = ZERO3;
            for (y, m) in nodes.iter().zip(&mass) {
                if *m == 0.0 {
                    continue;
                }
                let z = sub(x, y);
                if norm2(&z) == 0.0 {
                    continue;
                }
                let ak = eval_a_unchecked(&z, params);
                let bk = eval_b_unchecked(&z, params);
                for r in 0..3 {
                    b[r] += m * bk[r];
                    for c in 0..3 {
                        a[r][c] += m * ak[r][c];
                    }
                }
            }
            (a, b)
        })
        .unzip();
    ConvField { a, b }
}

/// `A ∗ f` by direct sum.
pub fn conv_a_grid(spec: &GridSpec, values: &[f64], params: &KernelParams) -> Vec<Mat3> {
    conv_direct(spec, values, params).a
}

/// `b ∗ f` by direct sum.
pub fn conv_b_grid(spec: &GridSpec, values: &[f64], params: &KernelParams) -> Vec<Vec3> {
    conv_direct(spec, values, params).b
}

/// Axis-by-axis FFT over a `P^d` complex buffer.
struct FftNd {
    dim: usize,
    p: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl FftNd {
    fn new(dim: usize, p: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            dim,
            p,
            forward: planner.plan_fft_forward(p),
            inverse: planner.plan_fft_inverse(p),
        }
    }

    fn len(&self) -> usize {
        self.p.pow(self.dim as u32)
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let fft = if inverse { &self.inverse } else { &self.forward };
        let p = self.p;
        let total = data.len();
        let mut lines = vec![Complex64::new(0.0, 0.0); total];
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        for axis in 0..self.dim {
            let stride = p.pow((self.dim - 1 - axis) as u32);
            if stride == 1 {
                fft.process_with_scratch(data, &mut scratch);
                continue;
            }
            // Gather lines along `axis` contiguously.
            let block = stride * p;
            let mut line = 0;
            for outer in (0..total).step_by(block) {
                for inner in 0..stride {
                    let base = outer + inner;
                    let dst = &mut lines[line * p..(line + 1) * p];
                    for (k, d) in dst.iter_mut().enumerate() {
                        *d = data[base + k * stride];
                    }
                    line += 1;
                }
            }
            fft.process_with_scratch(&mut lines, &mut scratch);
            let mut line = 0;
            for outer in (0..total).step_by(block) {
                for inner in 0..stride {
                    let base = outer + inner;
                    let src = &lines[line * p..(line + 1) * p];
                    for (k, s) in src.iter().enumerate() {
                        data[base + k * stride] = *s;
                    }
                    line += 1;
                }
            }
        }
    }
}

/// Spectral evaluation of the grid convolutions for a fixed grid and
/// kernel. Kernel spectra are computed once.
pub struct GridConvolver {
    spec: GridSpec,
    params: KernelParams,
    fft: FftNd,
    quad: Vec<f64>,
    /// Real spectra of the even components `A_rc`, `r ≤ c`.
    a_spectra: Vec<((usize, usize), Vec<f64>)>,
    /// Imaginary spectra of the odd components `b_r`.
    b_spectra: Vec<Vec<f64>>,
}

impl GridConvolver {
    pub fn new(spec: GridSpec, params: KernelParams) -> Self {
        assert_eq!(spec.dim, params.dim, "grid and kernel dimensions differ");
        let m = spec.points_per_axis;
        let p = 2 * m;
        let dim = spec.dim;
        let fft = FftNd::new(dim, p);
        let h = spec.spacing();
        let len = fft.len();

        // Kernel sampled at lattice offsets in wrap-around order.
        let offsets: Vec<Vec3> = (0..len)
            .map(|flat| {
                let mut z = ZERO3;
                let mut rem = flat;
                for axis in (0..dim).rev() {
                    let k = rem % p;
                    rem /= p;
                    let o = if k < m {
                        k as f64
                    } else if k > m {
                        k as f64 - p as f64
                    } else {
                        f64::NAN
                    };
                    z[axis] = o * h;
                }
                z
            })
            .collect();
        let sample = |f: &dyn Fn(&Vec3) -> f64| -> Vec<Complex64> {
            offsets
                .iter()
                .map(|z| {
                    if z.iter().any(|x| x.is_nan()) || norm2(z) == 0.0 {
                        Complex64::new(0.0, 0.0)
                    } else {
                        Complex64::new(f(z), 0.0)
                    }
                })
                .collect()
        };

        let mut a_spectra = Vec::new();
        for r in 0..dim {
            for c in r..dim {
                let mut buf = sample(&|z| eval_a_unchecked(z, &params)[r][c]);
                fft.transform(&mut buf, false);
                a_spectra.push(((r, c), buf.iter().map(|x| x.re).collect()));
            }
        }
        let mut b_spectra = Vec::new();
        for r in 0..dim {
            let mut buf = sample(&|z| eval_b_unchecked(z, &params)[r]);
            fft.transform(&mut buf, false);
            b_spectra.push(buf.iter().map(|x| x.im).collect());
        }

        Self {
            spec,
            params,
            fft,
            quad: spec.quadrature_weights(),
            a_spectra,
            b_spectra,
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    fn pad_index(&self, flat: usize) -> usize {
        let idx = self.spec.unflatten(flat);
        let p = self.fft.p;
        let mut out = 0;
        for &i in idx.iter().take(self.spec.dim) {
            out = out * p + i;
        }
        out
    }

    /// `A ∗ f` and `b ∗ f` at every node.
    pub fn convolve(&self, values: &[f64]) -> ConvField {
        assert_eq!(values.len(), self.spec.len());
        let n = self.spec.len();
        let len = self.fft.len();
        let pad_idx: Vec<usize> = (0..n).map(|i| self.pad_index(i)).collect();

        let mut density = vec![Complex64::new(0.0, 0.0); len];
        for (i, &pi) in pad_idx.iter().enumerate() {
            density[pi] = Complex64::new(self.quad[i] * values[i], 0.0);
        }
        self.fft.transform(&mut density, false);
        let norm = 1.0 / len as f64;

        let mut out = ConvField::zeros(n);
        let mut buf = vec![Complex64::new(0.0, 0.0); len];
        for ((r, c), spectrum) in &self.a_spectra {
            for ((b, d), s) in buf.iter_mut().zip(&density).zip(spectrum) {
                *b = d * *s;
            }
            self.fft.transform(&mut buf, true);
            for (i, &pi) in pad_idx.iter().enumerate() {
                let v = buf[pi].re * norm;
                out.a[i][*r][*c] = v;
                out.a[i][*c][*r] = v;
            }
        }
        for (r, spectrum) in self.b_spectra.iter().enumerate() {
            for ((b, d), s) in buf.iter_mut().zip(&density).zip(spectrum) {
                *b = d * Complex64::new(0.0, *s);
            }
            self.fft.transform(&mut buf, true);
            for (i, &pi) in pad_idx.iter().enumerate() {
                out.b[i][r] = buf[pi].re * norm;
            }
        }
        out
    }
}
