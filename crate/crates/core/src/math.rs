//! Numeric primitives shared by every stage of the pipeline.
//!
//! Everything is `f64`. Embeddings are plain `Vec<f64>` / `&[f64]`; the
//! [`Matrix`] type is a small row-major dense matrix that is all the model
//! needs at desk scale.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{ensure, Error, Result};

/// A d-dimensional embedding: t, v, f_i, t_s, t_sup and the noise ε all use it.
pub type EmbeddingVector = Vec<f64>;

/// Zero-norm guard in the cosine denominator.
pub const COSINE_GUARD: f64 = 1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Cosine similarity with the zero-norm guard, clamped to [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure(a.len() == b.len(), || {
        format!("cosine similarity of vectors with dimensions {} and {}", a.len(), b.len())
    })?;
    ensure(all_finite(a) && all_finite(b), || "cosine similarity of non-finite vector".into())?;
    Ok(cosine(a, b))
}

/// Unchecked cosine for hot loops; callers guarantee matching dimensions.
#[inline]
pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let denom = norm(a) * norm(b) + COSINE_GUARD;
    (dot(a, b) / denom).clamp(-1.0, 1.0)
}

/// Accumulates `upstream * ∂cos(a,b)/∂a` into `grad_a` and the same for `b`.
///
/// Differentiates the guarded formula exactly; a clamped result has zero
/// derivative.
pub(crate) fn cosine_backward(
    a: &[f64],
    b: &[f64],
    upstream: f64,
    grad_a: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
) {
    if upstream == 0.0 {
        return;
    }
    let na = norm(a);
    let nb = norm(b);
    let ab = dot(a, b);
    let denom = na * nb + COSINE_GUARD;
    let raw = ab / denom;
    if !(-1.0..=1.0).contains(&raw) {
        return;
    }
    let coef = upstream / denom;
    let shrink = upstream * ab / (denom * denom);
    if let Some(ga) = grad_a {
        let sa = if na > 0.0 { shrink * nb / na } else { 0.0 };
        for ((g, &x), &y) in ga.iter_mut().zip(a).zip(b) {
            *g += coef * y - sa * x;
        }
    }
    if let Some(gb) = grad_b {
        let sb = if nb > 0.0 { shrink * na / nb } else { 0.0 };
        for ((g, &x), &y) in gb.iter_mut().zip(b).zip(a) {
            *g += coef * y - sb * x;
        }
    }
}

/// L2-normalizes `a`; rejects vectors whose norm is at or below the guard.
pub fn normalize(a: &[f64]) -> Result<EmbeddingVector> {
    let n = norm(a);
    ensure(n > COSINE_GUARD && n.is_finite(), || {
        format!("cannot normalize vector with norm {n:e}")
    })?;
    Ok(a.iter().map(|x| x / n).collect())
}

/// Backward of `y = u / |u|`: returns dL/du given dL/dy, the output `y` and `|u|`.
pub(crate) fn normalize_backward(y: &[f64], u_norm: f64, grad_y: &[f64]) -> Vec<f64> {
    let proj = dot(y, grad_y);
    y.iter()
        .zip(grad_y)
        .map(|(yi, gi)| (gi - yi * proj) / u_norm)
        .collect()
}

/// Softmax of `scale * logits` with max-subtraction.
pub fn softmax(logits: &[f64], scale: f64) -> Result<Vec<f64>> {
    ensure(!logits.is_empty(), || "softmax of empty input".into())?;
    ensure(scale.is_finite(), || "softmax scale must be finite".into())?;
    ensure(all_finite(logits), || "softmax of non-finite logits".into())?;
    Ok(softmax_unchecked(logits.iter().map(|x| x * scale)))
}

pub(crate) fn softmax_unchecked(scaled: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let max = scaled.clone().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure(data.len() == rows * cols, || {
            format!("matrix {rows}x{cols} needs {} values, got {}", rows * cols, data.len())
        })?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Entries i.i.d. standard normal times `scale`, row-major draw order.
    pub fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut SeededRng) -> Self {
        let mut data = vec![0.0; rows * cols];
        rng.fill_gaussian(&mut data);
        data.iter_mut().for_each(|x| *x *= scale);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · y`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.row(r)) {
                *o += yr * m;
            }
        }
        out
    }

    /// `self += scale · a ⊗ b`.
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            let s = scale * ar;
            if s == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (m, &bc) in row.iter_mut().zip(b) {
                *m += s * bc;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }
}

/// Prior distribution of the reparameterization noise.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum PriorKind {
    #[default]
    StandardNormal,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PriorSpec {
    pub kind: PriorKind,
}

/// Deterministic random source addressed by `(seed, stream)`.
///
/// Backed by ChaCha8: the seed fixes the key, the stream id selects an
/// independent keystream, so parallel callers take distinct streams.
/// Gaussians use the Box-Muller transform on two uniforms in (0, 1),
/// producing the cosine branch first and the sine branch second.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    /// Stream keyed by a tuple of ids (e.g. purpose tag, query id, candidate id).
    pub fn keyed(seed: u64, key: &[u64]) -> Self {
        Self::new(seed, stream_key(key))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Current position in the keystream as `(low, high)` words.
    pub fn position(&self) -> (u64, u64) {
        let pos = self.inner.get_word_pos();
        (pos as u64, (pos >> 64) as u64)
    }

    pub fn set_position(&mut self, (low, high): (u64, u64)) {
        self.inner
            .set_word_pos(u128::from(low) | (u128::from(high) << 64));
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in the open interval (0, 1).
    pub fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` by rejection.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    pub fn gaussian_pair(&mut self) -> (f64, f64) {
        let u1 = self.uniform_open();
        let u2 = self.uniform_open();
        let r = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        (r * angle.cos(), r * angle.sin())
    }

    /// Fills `out` pairwise; an odd trailing slot consumes a full pair.
    pub fn fill_gaussian(&mut self, out: &mut [f64]) {
        let mut chunks = out.chunks_exact_mut(2);
        for pair in &mut chunks {
            let (a, b) = self.gaussian_pair();
            pair[0] = a;
            pair[1] = b;
        }
        if let [last] = chunks.into_remainder() {
            *last = self.gaussian_pair().0;
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_key(key: &[u64]) -> u64 {
    key.iter()
        .fold(0x5E_ED0F_7E57_u64, |acc, &k| mix(acc ^ mix(k)))
}

/// `d` independent standard-normal draws.
pub fn sample_gaussian(rng: &mut SeededRng, d: usize) -> Result<EmbeddingVector> {
    ensure(d >= 1, || "gaussian sample dimension must be at least 1".into())?;
    let mut out = vec![0.0; d];
    rng.fill_gaussian(&mut out);
    Ok(out)
}

pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::contract(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::OracleFailure(format!(
                "non-finite evaluation at coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let s = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn cosine_dimension_mismatch() {
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 0.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cosine_zero_vector_is_guarded() {
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&[2.5, 2.5, 2.5], 1.0).unwrap();
        for p in u {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[0.0, 2f64.ln()], 1.0).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-12);
        let p = softmax(&[1000.0, 0.0], 1.0).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-300);
        assert!(softmax(&[], 1.0).is_err());
    }

    #[test]
    fn gaussian_is_deterministic_per_stream() {
        let a = sample_gaussian(&mut SeededRng::new(7, 3), 9).unwrap();
        let b = sample_gaussian(&mut SeededRng::new(7, 3), 9).unwrap();
        assert_eq!(a, b);
        let c = sample_gaussian(&mut SeededRng::new(7, 4), 9).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn swapping_streams_swaps_outputs() {
        let a = sample_gaussian(&mut SeededRng::new(11, 1), 16).unwrap();
        let b = sample_gaussian(&mut SeededRng::new(11, 2), 16).unwrap();
        // draw in the opposite order; each stream is unaffected by the other
        let b2 = sample_gaussian(&mut SeededRng::new(11, 2), 16).unwrap();
        let a2 = sample_gaussian(&mut SeededRng::new(11, 1), 16).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn gaussian_moments() {
        let n = 100_000;
        let mut rng = SeededRng::new(2024, 0);
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n / 2 {
            let (a, b) = rng.gaussian_pair();
            sum += a + b;
            sq += a * a + b * b;
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).sqrt();
        assert!(mean.abs() <= 5.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((std - 1.0).abs() <= 0.02, "std {std}");
    }

    #[test]
    fn rng_position_round_trip() {
        let mut rng = SeededRng::new(5, 9);
        rng.next_u64();
        let pos = rng.position();
        let x = rng.next_u64();
        let mut other = SeededRng::new(5, 9);
        other.set_position(pos);
        assert_eq!(other.next_u64(), x);
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_gradient(|x| x[0] * x[0], &[3.0], DEFAULT_FD_STEP).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_gradient(|_| 4.2, &[1.0, -2.0, 0.5], DEFAULT_FD_STEP).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-8));
        assert!(matches!(
            finite_diff_gradient(|x| 1.0 / (x[0] - x[0]), &[1.0], 1e-4),
            Err(Error::OracleFailure(_))
        ));
    }

    #[test]
    fn finite_diff_quadratic_form() {
        let mut rng = SeededRng::new(99, 0);
        let b = Matrix::gaussian(4, 4, 1.0, &mut rng);
        let a = Matrix::from_fn(4, 4, |r, c| b.get(r, c) + b.get(c, r));
        let x: Vec<f64> = (0..4).map(|_| rng.gaussian_pair().0).collect();
        let g = finite_diff_gradient(|y| dot(y, &a.matvec(y)), &x, DEFAULT_FD_STEP).unwrap();
        let expected: Vec<f64> = a.matvec(&x).iter().map(|v| 2.0 * v).collect();
        for (gi, ei) in g.iter().zip(&expected) {
            assert!((gi - ei).abs() < 1e-5);
        }
    }

    #[test]
    fn cosine_backward_matches_finite_difference() {
        let mut rng = SeededRng::new(1, 1);
        let a = sample_gaussian(&mut rng, 6).unwrap();
        let b = sample_gaussian(&mut rng, 6).unwrap();
        let mut ga = vec![0.0; 6];
        let mut gb = vec![0.0; 6];
        cosine_backward(&a, &b, 1.0, Some(&mut ga), Some(&mut gb));
        let fa = finite_diff_gradient(|x| cosine(x, &b), &a, 1e-6).unwrap();
        let fb = finite_diff_gradient(|x| cosine(&a, x), &b, 1e-6).unwrap();
        for i in 0..6 {
            assert!((ga[i] - fa[i]).abs() < 1e-8);
            assert!((gb[i] - fb[i]).abs() < 1e-8);
        }
    }

    fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, len)
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in finite_vec(5), b in finite_vec(5), c in 0.01f64..100.0
        ) {
            let ab = cosine_similarity(&a, &b).unwrap();
            let ba = cosine_similarity(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
            if norm(&a) > 1e-3 && norm(&b) > 1e-3 {
                let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
                prop_assert!((cosine_similarity(&scaled, &b).unwrap() - ab).abs() <= 1e-9);
            }
        }

        #[test]
        fn softmax_is_shift_invariant_distribution(
            logits in prop::collection::vec(-50.0f64..50.0, 1..8), shift in -100.0f64..100.0
        ) {
            let p = softmax(&logits, 1.0).unwrap();
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
            let q = softmax(&shifted, 1.0).unwrap();
            for (x, y) in p.iter().zip(&q) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
