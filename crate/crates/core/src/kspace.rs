//! Acquisition forward model: B0 phase, centered orthonormal 2D FFT,
//! Cartesian column masks, undersampling and the zero-filled baseline.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::array_io::{ArrayData, PortableArray};
use crate::error::{KmtrError, Result};

/// Complex multi-slice cine stack with shape (S, T, H, W), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexVolume {
    shape: [usize; 4],
    data: Vec<Complex64>,
}

impl ComplexVolume {
    pub fn zeros(shape: [usize; 4]) -> Result<Self> {
        validate_dims(&shape)?;
        Ok(Self {
            shape,
            data: vec![Complex64::new(0.0, 0.0); shape.iter().product()],
        })
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<Complex64>) -> Result<Self> {
        validate_dims(&shape)?;
        if data.len() != shape.iter().product::<usize>() {
            return Err(KmtrError::shape("ComplexVolume::from_vec", &[shape.iter().product()], &[data.len()]));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(KmtrError::NonFinite("complex volume entry".into()));
        }
        Ok(Self { shape, data })
    }

    /// Real volume with an all-zero imaginary channel.
    pub fn from_real(shape: [usize; 4], real: &[f64]) -> Result<Self> {
        Self::from_vec(shape, real.iter().map(|&r| Complex64::new(r, 0.0)).collect())
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, s: usize, t: usize, h: usize, w: usize) -> usize {
        let [_, tt, hh, ww] = self.shape;
        ((s * tt + t) * hh + h) * ww + w
    }

    #[inline]
    pub fn get(&self, s: usize, t: usize, h: usize, w: usize) -> Complex64 {
        self.data[self.offset(s, t, h, w)]
    }

    fn frame_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.norm()).collect()
    }

    pub fn real_part(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.re).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, a: Complex64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&z| z * a).collect(),
        }
    }

    /// f32 export with a trailing (real, imag) axis.
    pub fn to_portable(&self) -> PortableArray {
        let mut v = Vec::with_capacity(2 * self.data.len());
        for z in &self.data {
            v.push(z.re as f32);
            v.push(z.im as f32);
        }
        let [s, t, h, w] = self.shape;
        PortableArray::new(vec![s, t, h, w, 2], ArrayData::F32(v)).expect("consistent shape")
    }

    pub fn from_portable(a: &PortableArray) -> Result<Self> {
        if a.shape.len() != 5 || a.shape[4] != 2 {
            return Err(KmtrError::Format(format!("expected (S,T,H,W,2) complex array, got {:?}", a.shape)));
        }
        let vals = a.data.to_f64();
        let data = vals.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect();
        Self::from_vec([a.shape[0], a.shape[1], a.shape[2], a.shape[3]], data)
    }
}

fn validate_dims(shape: &[usize; 4]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(KmtrError::InvalidConfig(format!("volume dims must be >= 1, got {shape:?}")));
    }
    Ok(())
}

/// Static B0 phase map per slice, shape (S, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseField {
    pub shape: [usize; 3],
    pub phi: Vec<f64>,
    pub sigma: f64,
    pub amplitude: f64,
}

impl PhaseField {
    pub fn max_abs(&self) -> f64 {
        self.phi.iter().fold(0.0f64, |m, p| m.max(p.abs()))
    }
}

fn reflect(i: isize, n: usize) -> usize {
    // scipy-style "reflect": (d c b a | a b c d | d c b a)
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - 1 - k;
    }
    k as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Smoothed white-noise phase, rescaled so that max |phi| equals `amplitude`.
pub fn simulate_phase(s: usize, h: usize, w: usize, sigma: f64, amplitude: f64, seed: u64) -> Result<PhaseField> {
    if !(sigma > 0.0) {
        return Err(KmtrError::InvalidConfig(format!("phase sigma must be > 0, got {sigma}")));
    }
    if !(amplitude >= 0.0) {
        return Err(KmtrError::InvalidConfig(format!("phase amplitude must be >= 0, got {amplitude}")));
    }
    if s == 0 || h == 0 || w == 0 {
        return Err(KmtrError::InvalidConfig("phase field dims must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let mut phi = Vec::with_capacity(s * h * w);
    for _ in 0..s {
        let noise: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
        // separable convolution: rows then columns
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * noise[y * w + reflect(x as isize + i as isize - r, w)])
                    .sum();
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp[reflect(y as isize + i as isize - r, h) * w + x])
                    .sum();
            }
        }
        let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if peak > 0.0 { amplitude / peak } else { 0.0 };
        phi.extend(out.into_iter().map(|v| v * scale));
    }
    Ok(PhaseField { shape: [s, h, w], phi, sigma, amplitude })
}

pub fn apply_phase(x: &ComplexVolume, phase: &PhaseField) -> Result<ComplexVolume> {
    let [s, t, h, w] = x.shape;
    if phase.shape != [s, h, w] {
        return Err(KmtrError::shape("apply_phase", &[s, h, w], &phase.shape));
    }
    let mut out = x.clone();
    for si in 0..s {
        let rot: Vec<Complex64> = phase.phi[si * h * w..(si + 1) * h * w]
            .iter()
            .map(|&p| Complex64::from_polar(1.0, p))
            .collect();
        for ti in 0..t {
            let o = out.offset(si, ti, 0, 0);
            for (z, r) in out.data[o..o + h * w].iter_mut().zip(&rot) {
                *z *= r;
            }
        }
    }
    Ok(out)
}

/// Circular shift along one axis: out[(i + k) mod n] = in[i].
fn roll(buf: &mut [Complex64], scratch: &mut Vec<Complex64>, k: usize) {
    let n = buf.len();
    if k % n == 0 {
        return;
    }
    scratch.clear();
    scratch.extend_from_slice(buf);
    for i in 0..n {
        buf[(i + k) % n] = scratch[i];
    }
}

struct Plans {
    row: Arc<dyn Fft<f64>>,
    col: Arc<dyn Fft<f64>>,
}

fn plans(h: usize, w: usize, inverse: bool) -> Plans {
    let mut planner = FftPlanner::new();
    if inverse {
        Plans { row: planner.plan_fft_inverse(w), col: planner.plan_fft_inverse(h) }
    } else {
        Plans { row: planner.plan_fft_forward(w), col: planner.plan_fft_forward(h) }
    }
}

fn transform_frame(frame: &mut [Complex64], h: usize, w: usize, p: &Plans) {
    let mut scratch = Vec::with_capacity(h.max(w));
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    // ifftshift
    for row in frame.chunks_exact_mut(w) {
        roll(row, &mut scratch, w - w / 2);
    }
    for x in 0..w {
        (0..h).for_each(|y| col[y] = frame[y * w + x]);
        roll(&mut col, &mut scratch, h - h / 2);
        p.col.process(&mut col);
        roll(&mut col, &mut scratch, h / 2);
        (0..h).for_each(|y| frame[y * w + x] = col[y]);
    }
    for row in frame.chunks_exact_mut(w) {
        p.row.process(row);
        // fftshift
        roll(row, &mut scratch, w / 2);
    }
    let norm = 1.0 / ((h * w) as f64).sqrt();
    frame.iter_mut().for_each(|z| *z *= norm);
}

fn transform(x: &ComplexVolume, inverse: bool) -> ComplexVolume {
    let [_, _, h, w] = x.shape;
    let p = plans(h, w, inverse);
    let mut out = x.clone();
    let fl = x.frame_len();
    for frame in out.data.chunks_exact_mut(fl) {
        transform_frame(frame, h, w, &p);
    }
    out
}

/// Centered orthonormal 2D DFT over (H, W) for every (s, t) frame; DC lands at (H/2, W/2).
pub fn fft2c(x: &ComplexVolume) -> ComplexVolume {
    transform(x, false)
}

pub fn ifft2c(y: &ComplexVolume) -> ComplexVolume {
    transform(y, true)
}

/// Binary Cartesian sampling pattern over (S, T, W), broadcast along H.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccelerationMask {
    pub shape: [usize; 3],
    pub pattern: Vec<u8>,
    pub r: f64,
    pub center_lines: usize,
}

impl AccelerationMask {
    pub fn full(s: usize, t: usize, w: usize) -> Self {
        Self { shape: [s, t, w], pattern: vec![1; s * t * w], r: 1.0, center_lines: w }
    }

    pub fn empty(s: usize, t: usize, w: usize) -> Self {
        Self { shape: [s, t, w], pattern: vec![0; s * t * w], r: f64::INFINITY, center_lines: 0 }
    }

    #[inline]
    pub fn get(&self, s: usize, t: usize, w: usize) -> bool {
        let [_, tt, ww] = self.shape;
        self.pattern[(s * tt + t) * ww + w] != 0
    }

    pub fn set(&mut self, s: usize, t: usize, w: usize, on: bool) {
        let [_, tt, ww] = self.shape;
        self.pattern[(s * tt + t) * ww + w] = on as u8;
    }

    pub fn row(&self, s: usize, t: usize) -> &[u8] {
        let [_, tt, ww] = self.shape;
        let o = (s * tt + t) * ww;
        &self.pattern[o..o + ww]
    }

    pub fn sampled_fraction(&self) -> f64 {
        self.pattern.iter().filter(|&&m| m != 0).count() as f64 / self.pattern.len() as f64
    }

    pub fn to_portable(&self) -> PortableArray {
        PortableArray::new(self.shape.to_vec(), ArrayData::U8(self.pattern.clone())).expect("consistent shape")
    }
}

/// Indices of the `n` central columns around the DC column ⌊W/2⌋.
pub fn center_columns(w: usize, n: usize) -> std::ops::Range<usize> {
    let start = (w / 2).saturating_sub(n / 2);
    start..(start + n).min(w)
}

/// Sampling budget ⌊W/R⌋.
pub fn column_budget(w: usize, r: f64) -> usize {
    (w as f64 / r).floor() as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub r: f64,
    pub center_lines: usize,
    /// Std of the variable-density Gaussian, as a fraction of W.
    pub density_sigma: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self { r: 4.0, center_lines: 4, density_sigma: 0.25 }
    }
}

/// Variable-density, frame-interleaved Cartesian mask.
///
/// Per slice, the non-center columns are ordered once by weighted sampling
/// without replacement (weight ∝ Gaussian of distance to DC). Frame t takes the
/// next `budget - center_lines` entries of that ordering, wrapping around when
/// the pool runs out, so consecutive frames see disjoint columns and any
/// ⌈pool / per_frame⌉ consecutive frames cover every column.
pub fn make_mask(s: usize, t: usize, w: usize, params: MaskParams, seed: u64) -> Result<AccelerationMask> {
    if s == 0 || t == 0 || w == 0 {
        return Err(KmtrError::InvalidConfig("mask dims must be >= 1".into()));
    }
    if !(params.r >= 1.0) {
        return Err(KmtrError::InvalidConfig(format!("acceleration factor must be >= 1, got {}", params.r)));
    }
    let budget = column_budget(w, params.r);
    if params.center_lines > budget {
        return Err(KmtrError::InvalidConfig(format!(
            "center_lines {} exceeds column budget {budget} (W={w}, R={})",
            params.center_lines, params.r
        )));
    }
    let center = center_columns(w, params.center_lines);
    let pool: Vec<usize> = (0..w).filter(|c| !center.contains(c)).collect();
    let per_frame = budget - params.center_lines;
    let dc = (w / 2) as f64;
    let sd = (params.density_sigma * w as f64).max(1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = AccelerationMask { shape: [s, t, w], pattern: vec![0; s * t * w], r: params.r, center_lines: params.center_lines };
    for si in 0..s {
        let mut remaining = pool.clone();
        let mut order = Vec::with_capacity(pool.len());
        while !remaining.is_empty() {
            let weights: Vec<f64> = remaining
                .iter()
                .map(|&c| (-((c as f64 - dc).powi(2)) / (2.0 * sd * sd)).exp().max(1e-300))
                .collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            let mut pick = remaining.len() - 1;
            for (i, wt) in weights.iter().enumerate() {
                if u < *wt {
                    pick = i;
                    break;
                }
                u -= wt;
            }
            order.push(remaining.swap_remove(pick));
        }
        for ti in 0..t {
            for c in center.clone() {
                mask.set(si, ti, c, true);
            }
            for j in 0..per_frame {
                mask.set(si, ti, order[(ti * per_frame + j) % order.len()], true);
            }
        }
    }
    Ok(mask)
}

/// X_k^u = M̃ ⊙ X_k.
pub fn undersample(xk: &ComplexVolume, mask: &AccelerationMask) -> Result<ComplexVolume> {
    let [s, t, h, w] = xk.shape;
    if mask.shape != [s, t, w] {
        return Err(KmtrError::shape("undersample", &[s, t, w], &mask.shape));
    }
    let zero = Complex64::new(0.0, 0.0);
    let mut out = xk.clone();
    for si in 0..s {
        for ti in 0..t {
            let row = mask.row(si, ti);
            for hi in 0..h {
                let o = out.offset(si, ti, hi, 0);
                for (z, &m) in out.data[o..o + w].iter_mut().zip(row) {
                    if m == 0 {
                        *z = zero;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse transform of undersampled k-space with missing entries left at zero.
pub fn zero_filled(xk_u: &ComplexVolume) -> ComplexVolume {
    ifft2c(xk_u)
}
