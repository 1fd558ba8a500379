//! Active rotating filters and their rotated variants.
//!
//! An ARF is a `W×W×N` filter: `N`-directional points on a `W×W` grid. A
//! clockwise rotation by θ is a coordinate rotation (bilinear resampling of
//! the grid, all `N` channels jointly) followed by an orientation spin (a
//! circular phase shift of every channel vector through the DFT). For `1×1`
//! filters and for `3×3×8` filters at multiples of `2π/N` both steps collapse
//! to permutations, which is the fast path used by the layers.
//!
//! Grid coordinates follow the filter convention: `(i, j)` with `i` growing to
//! the right and `j` growing upwards, `0 ≤ |i|, |j| ≤ (W−1)/2`. Storage is
//! image order `[row, col, n]` with `row = r − j`, `col = r + i`.

use std::f64::consts::TAU;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const SNAP: f64 = 1e-9;

/// Rotation angle reduced to `[0, 2π)`.
///
/// Angles built with [`RotationAngle::from_steps`] remember their exact
/// `k·2π/N` form so axis-aligned sines and cosines come out exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationAngle {
    radians: f64,
    steps: Option<(usize, usize)>,
}

impl RotationAngle {
    pub fn from_radians(theta: f64) -> Self {
        let mut r = theta.rem_euclid(TAU);
        if r >= TAU {
            r = 0.0;
        }
        Self { radians: r, steps: None }
    }

    /// `k·2π/n`, with `k` reduced modulo `n` before conversion.
    pub fn from_steps(k: i64, n: usize) -> Self {
        assert!(n > 0, "orientation count must be positive");
        let k = k.rem_euclid(n as i64) as usize;
        Self {
            radians: TAU * k as f64 / n as f64,
            steps: Some((k, n)),
        }
    }

    pub fn radians(&self) -> f64 {
        self.radians
    }

    /// `(k, n)` when the angle was built from whole steps.
    pub fn steps(&self) -> Option<(usize, usize)> {
        self.steps
    }

    pub fn negate(&self) -> Self {
        match self.steps {
            Some((k, n)) => Self::from_steps(-(k as i64), n),
            None => Self::from_radians(-self.radians),
        }
    }

    fn cos_sin(&self) -> (f64, f64) {
        if let Some((k, n)) = self.steps {
            if (4 * k) % n == 0 {
                return match (4 * k / n) % 4 {
                    0 => (1.0, 0.0),
                    1 => (0.0, 1.0),
                    2 => (-1.0, 0.0),
                    _ => (0.0, -1.0),
                };
            }
        }
        let snap = |x: f64| {
            let r = x.round();
            if (x - r).abs() < 1e-15 {
                r
            } else {
                x
            }
        };
        (snap(self.radians.cos()), snap(self.radians.sin()))
    }
}

/// The ring mapping that orders the eight non-centre cells of a `3×3` grid
/// clockwise starting from the top-centre cell:
///
/// ```text
/// 7 0 1
/// 6 · 2
/// 5 4 3
/// ```
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RingIndexTable;

impl RingIndexTable {
    const TABLE: [[Option<usize>; 3]; 3] = [
        [Some(7), Some(0), Some(1)],
        [Some(6), None, Some(2)],
        [Some(5), Some(4), Some(3)],
    ];

    /// Ring index of a storage cell, `None` for the centre.
    pub fn index_at(&self, row: usize, col: usize) -> Option<usize> {
        Self::TABLE[row][col]
    }

    /// Storage cell `(row, col)` of ring position `ring` (taken modulo 8).
    pub fn cell(&self, ring: usize) -> (usize, usize) {
        let ring = ring % 8;
        for (row, line) in Self::TABLE.iter().enumerate() {
            for (col, v) in line.iter().enumerate() {
                if *v == Some(ring) {
                    return (row, col);
                }
            }
        }
        unreachable!("ring table covers 0..8")
    }

    /// Signed grid coordinate `(i, j)` of ring position `ring`.
    pub fn grid(&self, ring: usize) -> (isize, isize) {
        let (row, col) = self.cell(ring);
        (col as isize - 1, 1 - row as isize)
    }
}

/// Which realisation of the rotation a layer uses for a given filter shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationPath {
    /// Ring and channel circular shifts.
    Fast,
    /// Bilinear coordinate rotation followed by the DFT orientation spin.
    Exact,
}

impl RotationPath {
    pub fn for_shape(w: usize, n: usize) -> Self {
        if fast_path_supported(w, n) {
            RotationPath::Fast
        } else {
            RotationPath::Exact
        }
    }
}

pub fn fast_path_supported(w: usize, n: usize) -> bool {
    w == 1 || (w == 3 && n == 8)
}

#[derive(Clone, PartialEq)]
pub struct Arf<T> {
    w: usize,
    n: usize,
    weights: Tensor<T>,
}

impl<T: std::fmt::Debug> std::fmt::Debug for Arf<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Arf")
            .field("w", &self.w)
            .field("n", &self.n)
            .field("weights", &self.weights)
            .finish()
    }
}

impl<T: Scalar> Arf<T> {
    pub fn new(weights: Tensor<T>) -> Result<Self> {
        let shape = weights.shape();
        if shape.len() != 3 {
            return Err(Error::shape("Arf::new", "rank", 3, shape.len()));
        }
        let (w, n) = (shape[0], shape[2]);
        if shape[1] != w {
            return Err(Error::shape("Arf::new", "grid width (axis 1)", w, shape[1]));
        }
        if w % 2 == 0 {
            return Err(Error::invalid("Arf::new", format!("spatial extent {w} must be odd")));
        }
        if n == 0 {
            return Err(Error::invalid("Arf::new", "orientation count must be at least 1"));
        }
        Ok(Self { w, n, weights })
    }

    pub fn zeros(w: usize, n: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[w, w, n]))
    }

    pub fn from_fn(w: usize, n: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        Self::new(Tensor::from_fn(&[w, w, n], |i| f(i[0], i[1], i[2])))
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn orientations(&self) -> usize {
        self.n
    }

    pub fn radius(&self) -> usize {
        (self.w - 1) / 2
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weights
    }

    pub fn into_weights(self) -> Tensor<T> {
        self.weights
    }

    /// Storage cell of signed grid coordinate `(i, j)`.
    pub fn cell_of(&self, i: isize, j: isize) -> Option<(usize, usize)> {
        let r = self.radius() as isize;
        if i.abs() > r || j.abs() > r {
            return None;
        }
        Some(((r - j) as usize, (r + i) as usize))
    }

    /// Signed grid coordinate of storage cell `(row, col)`.
    pub fn grid_of(&self, row: usize, col: usize) -> (isize, isize) {
        let r = self.radius() as isize;
        (col as isize - r, r - row as isize)
    }

    pub fn get(&self, i: isize, j: isize, n: usize) -> T {
        let (row, col) = self.cell_of(i, j).expect("grid coordinate out of range");
        self.weights.get(&[row, col, n])
    }

    pub fn set(&mut self, i: isize, j: isize, n: usize, value: T) {
        let (row, col) = self.cell_of(i, j).expect("grid coordinate out of range");
        self.weights.set(&[row, col, n], value);
    }

    fn vector(&self, cell: usize) -> &[T] {
        &self.weights.data()[cell * self.n..(cell + 1) * self.n]
    }

    fn vector_mut(&mut self, cell: usize) -> &mut [T] {
        let n = self.n;
        &mut self.weights.data_mut()[cell * n..(cell + 1) * n]
    }
}

/// Bilinear taps `(source cell, weight)` for every output cell of a `W×W`
/// grid rotated clockwise by θ.
fn coordinate_taps(w: usize, angle: RotationAngle) -> Vec<Vec<(usize, f64)>> {
    let r = ((w - 1) / 2) as isize;
    let (c, s) = angle.cos_sin();
    let snap = |x: f64| {
        let k = x.round();
        if (x - k).abs() < SNAP {
            k
        } else {
            x
        }
    };
    let mut taps = Vec::with_capacity(w * w);
    for row in 0..w {
        for col in 0..w {
            let p = (col as isize - r) as f64;
            let q = (r - row as isize) as f64;
            let sp = snap(p * c - q * s);
            let sq = snap(p * s + q * c);
            let mut cell_taps = Vec::with_capacity(4);
            if sp.abs().max(sq.abs()) <= r as f64 + SNAP {
                let u = sp.floor();
                let v = sq.floor();
                let mu = sp - u;
                let omega = sq - v;
                let (u, v) = (u as isize, v as isize);
                for (du, dv, weight) in [
                    (0, 0, (1.0 - mu) * (1.0 - omega)),
                    (0, 1, (1.0 - mu) * omega),
                    (1, 0, mu * (1.0 - omega)),
                    (1, 1, mu * omega),
                ] {
                    let (i, j) = (u + du, v + dv);
                    if weight == 0.0 || i.abs() > r || j.abs() > r {
                        continue;
                    }
                    let src = ((r - j) as usize) * w + (r + i) as usize;
                    cell_taps.push((src, weight));
                }
            }
            taps.push(cell_taps);
        }
    }
    taps
}

/// Clockwise coordinate rotation of the grid by θ with bilinear interpolation
/// of whole channel vectors. Sources outside the square grid domain give 0.
pub fn coordinate_rotate<T: Scalar>(filter: &Arf<T>, angle: RotationAngle) -> Arf<T> {
    let taps = coordinate_taps(filter.w, angle);
    let mut out = Arf::zeros(filter.w, filter.n).expect("shape already validated");
    for (dst, cell_taps) in taps.iter().enumerate() {
        for &(src, weight) in cell_taps {
            let weight = T::of(weight);
            let (from, n) = (filter.vector(src).to_vec(), filter.n);
            let to = out.vector_mut(dst);
            for k in 0..n {
                to[k] += weight * from[k];
            }
        }
    }
    out
}

/// Transpose of [`coordinate_rotate`] as a linear map on filters.
pub fn coordinate_rotate_adjoint<T: Scalar>(filter: &Arf<T>, angle: RotationAngle) -> Arf<T> {
    let taps = coordinate_taps(filter.w, angle);
    let mut out = Arf::zeros(filter.w, filter.n).expect("shape already validated");
    for (dst, cell_taps) in taps.iter().enumerate() {
        let from = filter.vector(dst).to_vec();
        for &(src, weight) in cell_taps {
            let weight = T::of(weight);
            let to = out.vector_mut(src);
            for k in 0..filter.n {
                to[k] += weight * from[k];
            }
        }
    }
    out
}

/// Frequency response of the spin for DFT bin `f` of an `n`-point vector.
///
/// Bins are read as signed frequencies (`f` or `f − n`) so the spin is a real,
/// band-limited circular shift; the Nyquist bin of an even `n` keeps only its
/// real part. At `θ = k·2π/n` this is exactly `e^{−j f θ}` for every bin.
fn spin_response(f: usize, n: usize, angle: RotationAngle) -> Complex64 {
    if let Some((k, m)) = angle.steps() {
        if m == n {
            let phase = -TAU * ((f * k) % n) as f64 / n as f64;
            return Complex64::from_polar(1.0, phase);
        }
    }
    let theta = angle.radians();
    if 2 * f == n {
        Complex64::new((n as f64 / 2.0 * theta).cos(), 0.0)
    } else {
        let signed = if 2 * f < n { f as f64 } else { f as f64 - n as f64 };
        Complex64::from_polar(1.0, -signed * theta)
    }
}

/// DFT spin of one channel vector, returning the full complex result so
/// callers can inspect the imaginary residue.
pub fn spin_vector_complex(values: &[f64], angle: RotationAngle) -> Vec<Complex64> {
    let n = values.len();
    let twiddle: Vec<Complex64> = (0..n)
        .map(|m| Complex64::from_polar(1.0, TAU * m as f64 / n as f64))
        .collect();
    let spectrum: Vec<Complex64> = (0..n)
        .map(|f| {
            let x: Complex64 = values
                .iter()
                .enumerate()
                .map(|(t, &v)| twiddle[(f * t) % n].conj() * v)
                .sum();
            x * spin_response(f, n, angle)
        })
        .collect();
    (0..n)
        .map(|t| spectrum.iter().enumerate().map(|(f, &x)| x * twiddle[(f * t) % n]).sum::<Complex64>() / n as f64)
        .collect()
}

pub fn spin_vector(values: &[f64], angle: RotationAngle) -> Vec<f64> {
    spin_vector_complex(values, angle).into_iter().map(|z| z.re).collect()
}

/// Whole number of orientation slots covered by `angle`, if any.
fn whole_slots(angle: RotationAngle, n: usize) -> Option<usize> {
    if let Some((k, m)) = angle.steps() {
        return (k * n).is_multiple_of(m).then(|| (k * n / m) % n);
    }
    let slots = angle.radians() * n as f64 / TAU;
    let r = slots.round();
    ((slots - r).abs() < 1e-12).then(|| (r as usize) % n)
}

/// Orientation spin: each grid point's channel vector is rotated by θ through
/// the DFT circular-shift property. When θ covers a whole number of slots the
/// transform reduces to that circular shift and is applied as one.
pub fn orientation_spin<T: Scalar>(filter: &Arf<T>, angle: RotationAngle) -> Arf<T> {
    let n = filter.n;
    let mut out = filter.clone();
    if let Some(shift) = whole_slots(angle, n) {
        if shift != 0 {
            for cell in 0..filter.w * filter.w {
                let v = filter.vector(cell);
                for (t, d) in out.vector_mut(cell).iter_mut().enumerate() {
                    *d = v[(t + n - shift) % n];
                }
            }
        }
        return out;
    }
    for cell in 0..filter.w * filter.w {
        let v: Vec<f64> = filter.vector(cell).iter().map(|x| x.as_f64()).collect();
        let spun = spin_vector(&v, angle);
        for (dst, s) in out.vector_mut(cell).iter_mut().zip(spun) {
            *dst = T::of(s);
        }
    }
    out
}

/// `F_θ` for arbitrary θ: coordinate rotation followed by orientation spin.
pub fn rotate_arf_exact<T: Scalar>(filter: &Arf<T>, angle: RotationAngle) -> Arf<T> {
    orientation_spin(&coordinate_rotate(filter, angle), angle)
}

/// Transpose of [`rotate_arf_exact`]. The spin is a real circulant whose
/// transpose is the spin by −θ; the bilinear resampling is transposed exactly.
pub fn rotate_arf_exact_adjoint<T: Scalar>(filter: &Arf<T>, angle: RotationAngle) -> Arf<T> {
    coordinate_rotate_adjoint(&orientation_spin(filter, angle.negate()), angle)
}

/// Permutation realisation of a rotation by `k·2π/N` for `1×1` filters and
/// `3×3×8` filters.
pub fn rotate_arf_fast<T: Scalar>(filter: &Arf<T>, k: i64) -> Result<Arf<T>> {
    let (w, n) = (filter.w, filter.n);
    if !fast_path_supported(w, n) {
        return Err(Error::UnsupportedFastPath { w, n });
    }
    let shift = k.rem_euclid(n as i64) as usize;
    let mut out = filter.clone();
    if w == 3 {
        let ring = RingIndexTable;
        let ring_shift = k.rem_euclid(8) as usize;
        for pos in 0..8 {
            let (dr, dc) = ring.cell(pos);
            let (sr, sc) = ring.cell((pos + 8 - ring_shift) % 8);
            let src = filter.vector(sr * 3 + sc).to_vec();
            out.vector_mut(dr * 3 + dc).copy_from_slice(&src);
        }
    }
    if shift != 0 {
        for cell in 0..w * w {
            let v = out.vector(cell).to_vec();
            let dst = out.vector_mut(cell);
            for (t, d) in dst.iter_mut().enumerate() {
                *d = v[(t + n - shift) % n];
            }
        }
    }
    Ok(out)
}

/// Rotation of `filter` by `k·2π/N` along `path`.
pub fn rotate_steps<T: Scalar>(filter: &Arf<T>, k: i64, path: RotationPath) -> Result<Arf<T>> {
    match path {
        RotationPath::Fast => rotate_arf_fast(filter, k),
        RotationPath::Exact => Ok(rotate_arf_exact(filter, RotationAngle::from_steps(k, filter.n))),
    }
}

/// Aligns the gradient of a `k·2π/N`-rotated copy back onto the canonical
/// filter: the transpose of [`rotate_steps`]. On the fast path this is the
/// rotation by `−k` steps.
pub fn align_gradient<T: Scalar>(grad: &Arf<T>, k: i64, path: RotationPath) -> Result<Arf<T>> {
    match path {
        RotationPath::Fast => rotate_arf_fast(grad, -k),
        RotationPath::Exact => Ok(rotate_arf_exact_adjoint(grad, RotationAngle::from_steps(k, grad.n))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_arf(w: usize, n: usize, seed: u64) -> Arf<f64> {
        let mut s = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        Arf::from_fn(w, n, |_, _, _| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 2001) as f64 / 1000.0 - 1.0
        })
        .unwrap()
    }

    fn close(a: &Arf<f64>, b: &Arf<f64>, tol: f64) -> bool {
        a.weights().max_abs_diff(b.weights()).unwrap() <= tol
    }

    #[test]
    fn ring_table_matches_layout() {
        let t = RingIndexTable;
        assert_eq!(t.grid(0), (0, 1));
        assert_eq!(t.grid(1), (1, 1));
        assert_eq!(t.grid(2), (1, 0));
        assert_eq!(t.grid(3), (1, -1));
        assert_eq!(t.grid(4), (0, -1));
        assert_eq!(t.grid(7), (-1, 1));
        assert_eq!(t.index_at(1, 1), None);
        let mut seen = [false; 8];
        for row in 0..3 {
            for col in 0..3 {
                if let Some(i) = t.index_at(row, col) {
                    assert!(!seen[i]);
                    seen[i] = true;
                    assert_eq!(t.cell(i), (row, col));
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn grid_mapping_is_bijective() {
        for w in [1usize, 3, 5, 7] {
            let f = Arf::<f64>::zeros(w, 2).unwrap();
            let r = f.radius() as isize;
            let mut hit = vec![false; w * w];
            for i in -r..=r {
                for j in -r..=r {
                    let (row, col) = f.cell_of(i, j).unwrap();
                    assert!(!hit[row * w + col]);
                    hit[row * w + col] = true;
                    assert_eq!(f.grid_of(row, col), (i, j));
                }
            }
            assert!(hit.iter().all(|&h| h));
            assert!(f.cell_of(r + 1, 0).is_none());
        }
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(Arf::<f64>::zeros(2, 4).is_err());
        assert!(Arf::<f64>::zeros(3, 0).is_err());
        assert!(Arf::new(Tensor::<f64>::zeros(&[3, 5, 2])).is_err());
    }

    #[test]
    fn angle_reduction() {
        assert_eq!(RotationAngle::from_radians(TAU).radians(), 0.0);
        assert!((RotationAngle::from_radians(-0.5).radians() - (TAU - 0.5)).abs() < 1e-15);
        let a = RotationAngle::from_steps(-3, 8);
        assert_eq!(a.steps(), Some((5, 8)));
        assert_eq!(a.radians(), TAU * 5.0 / 8.0);
        assert_eq!(RotationAngle::from_steps(8, 8).radians(), 0.0);
    }

    #[test]
    fn coordinate_rotate_identity_cases() {
        let f = random_arf(5, 3, 1);
        assert_eq!(coordinate_rotate(&f, RotationAngle::from_radians(0.0)), f);
        let one = random_arf(1, 4, 2);
        for theta in [0.3, 1.0, 2.5, 4.0] {
            assert_eq!(coordinate_rotate(&one, RotationAngle::from_radians(theta)), one);
        }
    }

    #[test]
    fn quarter_turn_moves_top_to_right_exactly() {
        let mut f = Arf::<f64>::zeros(3, 1).unwrap();
        f.set(0, 1, 0, 1.0);
        let g = coordinate_rotate(&f, RotationAngle::from_radians(std::f64::consts::FRAC_PI_2));
        let mut want = Arf::<f64>::zeros(3, 1).unwrap();
        want.set(1, 0, 0, 1.0);
        assert_eq!(g, want);
    }

    #[test]
    fn coordinate_rotate_keeps_origin() {
        let f = random_arf(5, 4, 3);
        for theta in [0.1, 0.7, 1.9, 3.3, 5.5] {
            let g = coordinate_rotate(&f, RotationAngle::from_radians(theta));
            for n in 0..4 {
                assert!((g.get(0, 0, n) - f.get(0, 0, n)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn coordinate_adjoint_is_transpose() {
        let a = random_arf(5, 3, 4);
        let b = random_arf(5, 3, 5);
        for theta in [0.2, 0.785, 2.0, 4.4] {
            let angle = RotationAngle::from_radians(theta);
            let lhs: f64 = coordinate_rotate(&a, angle)
                .weights()
                .data()
                .iter()
                .zip(b.weights().data())
                .map(|(x, y)| x * y)
                .sum();
            let rhs: f64 = a
                .weights()
                .data()
                .iter()
                .zip(coordinate_rotate_adjoint(&b, angle).weights().data())
                .map(|(x, y)| x * y)
                .sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn spin_identity_and_single_step() {
        let f = random_arf(3, 6, 6);
        assert!(close(&orientation_spin(&f, RotationAngle::from_radians(0.0)), &f, 1e-12));
        let n = 8;
        let mut v = vec![0.0; n];
        v[0] = 1.0;
        let spun = spin_vector(&v, RotationAngle::from_radians(TAU / n as f64));
        for (t, &x) in spun.iter().enumerate() {
            let want = if t == 1 { 1.0 } else { 0.0 };
            assert!((x - want).abs() < 1e-12, "{spun:?}");
        }
    }

    #[test]
    fn spin_half_turn_four_channels() {
        let v = [1.5, -2.0, 0.25, 3.0];
        let spun = spin_vector(&v, RotationAngle::from_radians(std::f64::consts::PI));
        let want = [0.25, 3.0, 1.5, -2.0];
        for (a, b) in spun.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn spin_adjoint_is_negative_angle() {
        for n in [3usize, 4, 7, 8] {
            let a: Vec<f64> = (0..n).map(|i| ((i * 7 + 1) as f64).sin()).collect();
            let b: Vec<f64> = (0..n).map(|i| ((i * 3 + 2) as f64).cos()).collect();
            for theta in [0.3, 1.1, 2.9] {
                let angle = RotationAngle::from_radians(theta);
                let lhs: f64 = spin_vector(&a, angle).iter().zip(&b).map(|(x, y)| x * y).sum();
                let rhs: f64 = a.iter().zip(spin_vector(&b, angle.negate())).map(|(x, y)| x * y).sum();
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spin_has_no_imaginary_residue() {
        for n in [1usize, 2, 5, 8, 16] {
            let v: Vec<f64> = (0..n).map(|i| (i as f64 * 1.7).sin()).collect();
            for theta in [0.0, 0.4, 1.0, 3.7] {
                let z = spin_vector_complex(&v, RotationAngle::from_radians(theta));
                assert!(z.iter().all(|c| c.im.abs() < 1e-9));
            }
        }
    }

    #[test]
    fn exact_rotation_full_turn_and_composition() {
        let f = random_arf(3, 8, 7);
        assert_eq!(rotate_arf_exact(&f, RotationAngle::from_radians(0.0)), f);
        assert!(close(&rotate_arf_exact(&f, RotationAngle::from_radians(TAU)), &f, 1e-9));
        let half = std::f64::consts::FRAC_PI_2;
        let twice = rotate_arf_exact(
            &rotate_arf_exact(&f, RotationAngle::from_radians(half)),
            RotationAngle::from_radians(half),
        );
        let once = rotate_arf_exact(&f, RotationAngle::from_radians(std::f64::consts::PI));
        assert!(close(&twice, &once, 1e-6));
    }

    #[test]
    fn fast_path_cycles_and_rejects() {
        let f = random_arf(3, 8, 8);
        assert_eq!(rotate_arf_fast(&f, 0).unwrap(), f);
        assert_eq!(rotate_arf_fast(&f, 8).unwrap(), f);
        let g = random_arf(1, 4, 9);
        assert_eq!(rotate_arf_fast(&g, 4).unwrap(), g);
        assert!(matches!(
            rotate_arf_fast(&random_arf(3, 4, 1), 1),
            Err(Error::UnsupportedFastPath { w: 3, n: 4 })
        ));
        assert!(rotate_arf_fast(&random_arf(5, 8, 1), 1).is_err());
    }

    #[test]
    fn fast_path_ring_then_channel_shift() {
        // value at ring 0, channel 0 moves to ring k, channel k
        for k in 0..8 {
            let mut f = Arf::<f64>::zeros(3, 8).unwrap();
            f.set(0, 1, 0, 1.0);
            let g = rotate_arf_fast(&f, k as i64).unwrap();
            let (i, j) = RingIndexTable.grid(k);
            assert_eq!(g.get(i, j, k), 1.0);
            assert_eq!(g.weights().sum(), 1.0);
        }
    }

    #[test]
    fn fast_matches_exact_at_quarter_turns() {
        for seed in 0..20 {
            let f = random_arf(3, 8, seed);
            for k in (0..8).step_by(2) {
                let fast = rotate_arf_fast(&f, k).unwrap();
                let exact = rotate_arf_exact(&f, RotationAngle::from_steps(k, 8));
                assert!(close(&fast, &exact, 1e-9));
            }
        }
        let f = random_arf(1, 4, 3);
        for k in 0..4 {
            let exact = rotate_arf_exact(&f, RotationAngle::from_steps(k, 4));
            assert!(close(&rotate_arf_fast(&f, k).unwrap(), &exact, 1e-12));
        }
    }

    #[test]
    fn align_gradient_inverts_fast_rotation() {
        let f = random_arf(3, 8, 11);
        for k in -3..10 {
            let back = align_gradient(&rotate_arf_fast(&f, k).unwrap(), k, RotationPath::Fast).unwrap();
            assert_eq!(back, f);
        }
    }

    #[test]
    fn exact_adjoint_is_transpose() {
        let a = random_arf(5, 8, 12);
        let b = random_arf(5, 8, 13);
        for k in 0..8 {
            let angle = RotationAngle::from_steps(k, 8);
            let lhs: f64 =
                rotate_arf_exact(&a, angle).weights().data().iter().zip(b.weights().data()).map(|(x, y)| x * y).sum();
            let rhs: f64 = a
                .weights()
                .data()
                .iter()
                .zip(rotate_arf_exact_adjoint(&b, angle).weights().data())
                .map(|(x, y)| x * y)
                .sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn rotated_copies_do_not_alias() {
        let f = random_arf(3, 8, 14);
        let mut g = rotate_arf_fast(&f, 0).unwrap();
        g.set(0, 0, 0, 99.0);
        assert_ne!(f.get(0, 0, 0), 99.0);
    }
}
