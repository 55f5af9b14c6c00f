//! Real-input 3-D discrete Fourier transforms and low-mode truncation.
//!
//! Convention: the forward transform is unnormalized and the inverse carries
//! the `1/n^3` factor. Arrays are C-ordered `[z][y][x]`, so the half-spectrum
//! axis is x (the fastest-varying one) and has `n/2 + 1` bins.
//!
//! The inverse treats its input as the non-redundant half of a Hermitian
//! spectrum: bins `n/2+1..n` along x are filled by conjugate mirroring and
//! the real part of the full complex inverse is returned. That makes the
//! inverse a well-defined real-linear map even for spectra that were edited
//! in frequency space, which the truncated transforms below rely on for
//! exact adjoints.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::grid::Field3;

/// Non-redundant half of the 3-D spectrum of one or more real fields.
#[derive(Clone, Debug, PartialEq)]
pub struct HalfSpectrum {
    channels: usize,
    n: usize,
    coefficients: Vec<Complex64>,
}

impl HalfSpectrum {
    pub fn zeros(channels: usize, n: usize) -> Self {
        Self {
            channels,
            n,
            coefficients: vec![Complex64::new(0.0, 0.0); channels * n * n * half_len(n)],
        }
    }

    pub fn new(channels: usize, n: usize, coefficients: Vec<Complex64>) -> Result<Self> {
        let expected = channels * n * n * half_len(n);
        if n < 1 || coefficients.len() != expected {
            return Err(Error::shape(format!(
                "half spectrum for {channels} channels at edge {n} needs {expected} coefficients, got {}",
                coefficients.len()
            )));
        }
        Ok(Self {
            channels,
            n,
            coefficients,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn edge(&self) -> usize {
        self.n
    }

    /// Number of bins along the halved (x) axis.
    pub fn half_len(&self) -> usize {
        half_len(self.n)
    }

    pub fn coefficients(&self) -> &[Complex64] {
        &self.coefficients
    }

    pub fn coefficients_mut(&mut self) -> &mut [Complex64] {
        &mut self.coefficients
    }

    #[inline]
    pub fn index(&self, channel: usize, kz: usize, ky: usize, kx: usize) -> usize {
        let h = self.half_len();
        ((channel * self.n + kz) * self.n + ky) * h + kx
    }

    pub fn get(&self, channel: usize, kz: usize, ky: usize, kx: usize) -> Complex64 {
        self.coefficients[self.index(channel, kz, ky, kx)]
    }

    pub fn set(&mut self, channel: usize, kz: usize, ky: usize, kx: usize, v: Complex64) {
        let i = self.index(channel, kz, ky, kx);
        self.coefficients[i] = v;
    }

    /// Sum of `|X|^2` over the full Hermitian-expanded spectrum.
    pub fn full_energy(&self) -> f64 {
        let n = self.n;
        let h = self.half_len();
        let mut total = 0.0;
        for (i, c) in self.coefficients.iter().enumerate() {
            let kx = i % h;
            let mult = if kx == 0 || 2 * kx == n { 1.0 } else { 2.0 };
            total += mult * c.norm_sqr();
        }
        total
    }
}

#[inline]
pub fn half_len(n: usize) -> usize {
    n / 2 + 1
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Plans {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }
}

/// Forward transform of one real cube.
pub fn rfft3(field: &Field3) -> Result<HalfSpectrum> {
    rfft3_channels(field.data(), 1, field.edge())
}

/// Forward transform of `channels` stacked real cubes (channel-major).
pub fn rfft3_channels(data: &[f64], channels: usize, n: usize) -> Result<HalfSpectrum> {
    if n < 2 {
        return Err(Error::shape(format!("transform needs n >= 2, got {n}")));
    }
    let vol = n * n * n;
    if data.len() != channels * vol {
        return Err(Error::shape(format!(
            "{} values is not {channels} cubes of edge {n}",
            data.len()
        )));
    }
    let plans = Plans::new(n);
    let h = half_len(n);
    let mut out = HalfSpectrum::zeros(channels, n);
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); plans.forward.get_inplace_scratch_len()];

    for c in 0..channels {
        let src = &data[c * vol..(c + 1) * vol];
        let dst = &mut out.coefficients[c * n * n * h..(c + 1) * n * n * h];
        // x lines: real -> half
        for row in 0..n * n {
            for (l, v) in line.iter_mut().zip(&src[row * n..(row + 1) * n]) {
                *l = Complex64::new(*v, 0.0);
            }
            plans.forward.process_with_scratch(&mut line, &mut scratch);
            dst[row * h..(row + 1) * h].copy_from_slice(&line[..h]);
        }
        transform_strided_axes(dst, n, h, &*plans.forward, &mut line, &mut scratch);
    }
    Ok(out)
}

/// Complex transforms along y then z of a `[z][y][kx]` block.
fn transform_strided_axes(
    block: &mut [Complex64],
    n: usize,
    h: usize,
    fft: &dyn Fft<f64>,
    line: &mut [Complex64],
    scratch: &mut [Complex64],
) {
    for z in 0..n {
        for kx in 0..h {
            for y in 0..n {
                line[y] = block[(z * n + y) * h + kx];
            }
            fft.process_with_scratch(line, scratch);
            for y in 0..n {
                block[(z * n + y) * h + kx] = line[y];
            }
        }
    }
    for y in 0..n {
        for kx in 0..h {
            for z in 0..n {
                line[z] = block[(z * n + y) * h + kx];
            }
            fft.process_with_scratch(line, scratch);
            for z in 0..n {
                block[(z * n + y) * h + kx] = line[z];
            }
        }
    }
}

/// Inverse transform of a single-channel half spectrum.
pub fn irfft3(spectrum: &HalfSpectrum, n: usize) -> Result<Field3> {
    if spectrum.channels != 1 {
        return Err(Error::shape(format!("expected one channel, got {}", spectrum.channels)));
    }
    let data = irfft3_channels(spectrum, n)?;
    Field3::new(n, data)
}

/// Inverse transform of every channel, returned channel-major.
pub fn irfft3_channels(spectrum: &HalfSpectrum, n: usize) -> Result<Vec<f64>> {
    if spectrum.n != n {
        return Err(Error::shape(format!(
            "spectrum has edge {} but {n} was requested",
            spectrum.n
        )));
    }
    if n < 2 {
        return Err(Error::shape(format!("transform needs n >= 2, got {n}")));
    }
    let plans = Plans::new(n);
    let h = half_len(n);
    let vol = n * n * n;
    let norm = 1.0 / vol as f64;
    let mut out = vec![0.0; spectrum.channels * vol];
    let mut block = vec![Complex64::new(0.0, 0.0); n * n * h];
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); plans.inverse.get_inplace_scratch_len()];

    for c in 0..spectrum.channels {
        block.copy_from_slice(&spectrum.coefficients[c * n * n * h..(c + 1) * n * n * h]);
        transform_strided_axes(&mut block, n, h, &*plans.inverse, &mut line, &mut scratch);
        let dst = &mut out[c * vol..(c + 1) * vol];
        for row in 0..n * n {
            line[..h].copy_from_slice(&block[row * h..(row + 1) * h]);
            for k in h..n {
                line[k] = line[n - k].conj();
            }
            plans.inverse.process_with_scratch(&mut line, &mut scratch);
            for (d, l) in dst[row * n..(row + 1) * n].iter_mut().zip(&line) {
                *d = l.re * norm;
            }
        }
    }
    Ok(out)
}

/// Retained low-frequency corner of the half spectrum.
///
/// Modes `(m1, m2, m3)` apply to axes `(z, y, x)`. Along z and y both the
/// lowest non-negative and the lowest negative frequencies are kept
/// (`0..m` and `n-m..n`); along the halved x axis only `0..m3` exists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModeSet {
    n: usize,
    modes: [usize; 3],
    kz: Vec<usize>,
    ky: Vec<usize>,
}

impl ModeSet {
    pub fn new(n: usize, modes: [usize; 3]) -> Result<Self> {
        if modes.contains(&0) {
            return Err(Error::config(format!("every mode count must be >= 1, got {modes:?}")));
        }
        let required = 2 * modes.iter().copied().max().unwrap_or(1);
        if n < required {
            return Err(Error::GridTooSmall { n, modes, required });
        }
        let corner = |m: usize| (0..m).chain(n - m..n).collect::<Vec<_>>();
        Ok(Self {
            n,
            modes,
            kz: corner(modes[0]),
            ky: corner(modes[1]),
        })
    }

    pub fn edge(&self) -> usize {
        self.n
    }

    pub fn modes(&self) -> [usize; 3] {
        self.modes
    }

    pub fn kz(&self) -> &[usize] {
        &self.kz
    }

    pub fn ky(&self) -> &[usize] {
        &self.ky
    }

    pub fn kx_count(&self) -> usize {
        self.modes[2]
    }

    /// Retained coefficients per channel: `2*m1 * 2*m2 * m3`.
    pub fn len(&self) -> usize {
        retained_per_channel(self.modes)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Iterate `(slot, kz, ky, kx)` over the retained block in storage order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let m3 = self.modes[2];
        self.kz.iter().enumerate().flat_map(move |(iz, &kz)| {
            self.ky
                .iter()
                .enumerate()
                .flat_map(move |(iy, &ky)| (0..m3).map(move |kx| (((iz * self.ky.len()) + iy) * m3 + kx, kz, ky, kx)))
        })
    }
}

pub fn retained_per_channel(modes: [usize; 3]) -> usize {
    4 * modes[0] * modes[1] * modes[2]
}

/// Hermitian multiplicity of an x bin.
#[inline]
fn x_multiplicity(kx: usize, n: usize) -> f64 {
    if kx == 0 || 2 * kx == n {
        1.0
    } else {
        2.0
    }
}

/// Separable DFT restricted to a [`ModeSet`].
///
/// Computes only the retained coefficients, which is far cheaper than a
/// full transform followed by truncation when few modes are kept. The x
/// stage runs as a dense real matrix product. Results agree with
/// `rfft3`/`irfft3` restricted to the same bins.
///
/// Coefficient buffers are `[channel][iz][iy][kx]` complex values stored as
/// interleaved `(re, im)` pairs.
#[derive(Clone, Debug)]
pub struct TruncatedDft {
    modes: ModeSet,
    /// `2*m3 x n`: rows `cos` then `-sin` of `2 pi kx x / n`.
    x_basis: Vec<f64>,
    /// Transpose of `x_basis`.
    x_table: Vec<f64>,
    /// `[iy][y]` twiddles `exp(-2 pi i ky y / n)`.
    y_twiddle: Vec<Complex64>,
    /// `[iz][z]` twiddles `exp(-2 pi i kz z / n)`.
    z_twiddle: Vec<Complex64>,
}

impl TruncatedDft {
    pub fn new(modes: ModeSet) -> Self {
        let n = modes.n;
        let m3 = modes.modes[2];
        let angle = |k: usize, j: usize| 2.0 * PI * ((k * j) % n) as f64 / n as f64;
        let mut x_basis = vec![0.0; 2 * m3 * n];
        let mut x_table = vec![0.0; n * 2 * m3];
        for x in 0..n {
            for kx in 0..m3 {
                let (s, c) = angle(kx, x).sin_cos();
                x_basis[kx * n + x] = c;
                x_basis[(m3 + kx) * n + x] = -s;
                x_table[x * 2 * m3 + kx] = c;
                x_table[x * 2 * m3 + m3 + kx] = -s;
            }
        }
        let twiddles = |ks: &[usize]| {
            ks.iter()
                .flat_map(|&k| (0..n).map(move |j| Complex64::from_polar(1.0, -angle(k, j))))
                .collect::<Vec<_>>()
        };
        let y_twiddle = twiddles(&modes.ky);
        let z_twiddle = twiddles(&modes.kz);
        Self {
            modes,
            x_basis,
            x_table,
            y_twiddle,
            z_twiddle,
        }
    }

    pub fn modes(&self) -> &ModeSet {
        &self.modes
    }

    pub fn edge(&self) -> usize {
        self.modes.n
    }

    /// Length in f64 of a coefficient buffer for `channels` channels.
    pub fn coeff_len(&self, channels: usize) -> usize {
        2 * channels * self.modes.len()
    }

    /// Retained forward coefficients of channel-major real cubes.
    pub fn forward(&self, data: &[f64], channels: usize) -> Vec<f64> {
        // Constant mode counts let the inner loops unroll and vectorize.
        match self.modes.modes[2] {
            1 => self.forward_impl(data, channels, 1),
            2 => self.forward_impl(data, channels, 2),
            3 => self.forward_impl(data, channels, 3),
            4 => self.forward_impl(data, channels, 4),
            m3 => self.forward_impl(data, channels, m3),
        }
    }

    #[inline(always)]
    fn forward_impl(&self, data: &[f64], channels: usize, m3: usize) -> Vec<f64> {
        let n = self.modes.n;
        let k = 2 * m3;
        let (ny, nz) = (self.modes.ky.len(), self.modes.kz.len());
        let rows = channels * n * n;
        assert_eq!(
            data.len(),
            rows * n,
            "forward: input is not {channels} cubes of edge {n}"
        );

        // x stage: (rows x n) * (n x 2m3)
        let mut a = vec![0.0; rows * k];
        gemm(rows, n, k, 1.0, data, &self.x_table, 0.0, &mut a);

        // y stage: [c][z][y] -> [c][z][iy]
        let per = ny * k;
        let mut b = vec![0.0; channels * n * per];
        for (a_blk, b_blk) in a.chunks_exact(n * k).zip(b.chunks_exact_mut(per)) {
            for (y, row) in a_blk.chunks_exact(k).enumerate() {
                let (ar, ai) = row.split_at(m3);
                for (iy, acc) in b_blk.chunks_exact_mut(k).enumerate() {
                    let t = self.y_twiddle[iy * n + y];
                    let (br, bi) = acc.split_at_mut(m3);
                    for kx in 0..m3 {
                        br[kx] += t.re * ar[kx] - t.im * ai[kx];
                        bi[kx] += t.re * ai[kx] + t.im * ar[kx];
                    }
                }
            }
        }

        // z stage: [c][z][iy] -> interleaved [c][iz][iy][kx]
        let mut out = vec![0.0; self.coeff_len(channels)];
        let mut acc = vec![0.0; per];
        for c in 0..channels {
            let b_c = &b[c * n * per..(c + 1) * n * per];
            for iz in 0..nz {
                acc.fill(0.0);
                for (z, blk) in b_c.chunks_exact(per).enumerate() {
                    let t = self.z_twiddle[iz * n + z];
                    for (dst, src) in acc.chunks_exact_mut(k).zip(blk.chunks_exact(k)) {
                        let (sr, si) = src.split_at(m3);
                        let (dr, di) = dst.split_at_mut(m3);
                        for kx in 0..m3 {
                            dr[kx] += t.re * sr[kx] - t.im * si[kx];
                            di[kx] += t.re * si[kx] + t.im * sr[kx];
                        }
                    }
                }
                let base = (c * nz + iz) * ny * m3;
                for iy in 0..ny {
                    for kx in 0..m3 {
                        out[2 * (base + iy * m3 + kx)] = acc[iy * k + kx];
                        out[2 * (base + iy * m3 + kx) + 1] = acc[iy * k + m3 + kx];
                    }
                }
            }
        }
        out
    }

    /// Inverse transform of retained coefficients (all other bins zero).
    pub fn inverse(&self, coeffs: &[f64], channels: usize) -> Vec<f64> {
        let n = self.modes.n;
        let inv_vol = 1.0 / (n * n * n) as f64;
        let weights: Vec<f64> = (0..self.modes.modes[2])
            .map(|kx| x_multiplicity(kx, n) * inv_vol)
            .collect();
        self.synthesize(coeffs, channels, &weights)
    }

    /// Adjoint of [`forward`](Self::forward) under the real inner product
    /// `<a, b> = sum(re_a re_b + im_a im_b)`.
    pub fn forward_adjoint(&self, cotangent: &[f64], channels: usize) -> Vec<f64> {
        let weights = vec![1.0; self.modes.modes[2]];
        self.synthesize(cotangent, channels, &weights)
    }

    /// Adjoint of [`inverse`](Self::inverse).
    pub fn inverse_adjoint(&self, cotangent: &[f64], channels: usize) -> Vec<f64> {
        let n = self.modes.n;
        let m3 = self.modes.modes[2];
        let inv_vol = 1.0 / (n * n * n) as f64;
        let mut out = self.forward(cotangent, channels);
        for (slot, pair) in out.chunks_exact_mut(2).enumerate() {
            let w = x_multiplicity(slot % m3, n) * inv_vol;
            pair[0] *= w;
            pair[1] *= w;
        }
        out
    }

    /// `out[v] = sum_k weight[kx] * Re(C_k exp(+i theta_k(v)))`.
    fn synthesize(&self, coeffs: &[f64], channels: usize, weights: &[f64]) -> Vec<f64> {
        match self.modes.modes[2] {
            1 => self.synthesize_impl(coeffs, channels, weights, 1),
            2 => self.synthesize_impl(coeffs, channels, weights, 2),
            3 => self.synthesize_impl(coeffs, channels, weights, 3),
            4 => self.synthesize_impl(coeffs, channels, weights, 4),
            m3 => self.synthesize_impl(coeffs, channels, weights, m3),
        }
    }

    #[inline(always)]
    fn synthesize_impl(&self, coeffs: &[f64], channels: usize, weights: &[f64], m3: usize) -> Vec<f64> {
        let n = self.modes.n;
        let k = 2 * m3;
        let (ny, nz) = (self.modes.ky.len(), self.modes.kz.len());
        let per = ny * k;
        assert_eq!(
            coeffs.len(),
            self.coeff_len(channels),
            "synthesize: coefficient buffer length"
        );

        // z stage: interleaved [c][iz][iy][kx] -> [c][z][iy] as (re.., im..)
        let mut cq = vec![0.0; channels * n * per];
        for c in 0..channels {
            for iz in 0..nz {
                let base = 2 * (c * nz + iz) * ny * m3;
                let src = &coeffs[base..base + 2 * ny * m3];
                if src.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for z in 0..n {
                    let t = self.z_twiddle[iz * n + z];
                    let dst = &mut cq[(c * n + z) * per..(c * n + z + 1) * per];
                    for (d, s) in dst.chunks_exact_mut(k).zip(src.chunks_exact(2 * m3)) {
                        let (dr, di) = d.split_at_mut(m3);
                        for kx in 0..m3 {
                            let (r, i) = (s[2 * kx], s[2 * kx + 1]);
                            dr[kx] += t.re * r + t.im * i;
                            di[kx] += t.re * i - t.im * r;
                        }
                    }
                }
            }
        }

        // y stage: [c][z][iy] -> rows [c][z][y], scaled by the kx weights
        let rows = channels * n * n;
        let mut d = vec![0.0; rows * k];
        for (c_blk, d_blk) in cq.chunks_exact(per).zip(d.chunks_exact_mut(n * k)) {
            for (y, row) in d_blk.chunks_exact_mut(k).enumerate() {
                let (dr, di) = row.split_at_mut(m3);
                for (iy, src) in c_blk.chunks_exact(k).enumerate() {
                    let t = self.y_twiddle[iy * n + y];
                    let (cr, ci) = src.split_at(m3);
                    for kx in 0..m3 {
                        dr[kx] += t.re * cr[kx] + t.im * ci[kx];
                        di[kx] += t.re * ci[kx] - t.im * cr[kx];
                    }
                }
                for kx in 0..m3 {
                    dr[kx] *= weights[kx];
                    di[kx] *= weights[kx];
                }
            }
        }

        // x stage: (rows x 2m3) * (2m3 x n)
        let mut out = vec![0.0; rows * n];
        gemm(rows, k, n, 1.0, &d, &self.x_basis, 0.0, &mut out);
        out
    }
}

/// Row-major `c = alpha * a(m x k) * b(k x n) + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slices are bounds-checked above and strides describe dense row-major storage.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major `c = alpha * a(m x k) * b(n x k)^T + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: as in `gemm`; b is read with swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major `c = alpha * a(k x m)^T * b(k x n) + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: as in `gemm`; a is read with swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
