//! Rotation-invariant encodings of `1×1×N` oriented descriptors.
//!
//! ORAlign spins every feature's orientation vector so its strongest response
//! lands in slot 0; ORPooling keeps only the strongest response. Both treat
//! the argmax as a constant of the forward pass when back-propagating.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `[C, N]`: one length-`N` oriented response per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedDescriptor<T> {
    values: Tensor<T>,
}

impl<T: Scalar> OrientedDescriptor<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::shape("OrientedDescriptor", "rank", 2, values.rank()));
        }
        if values.shape()[1] == 0 {
            return Err(Error::invalid("OrientedDescriptor", "empty orientation vector"));
        }
        Ok(Self { values })
    }

    /// Collapses an oriented map `[C, N, 1, 1]` (spatial extent already 1×1).
    pub fn from_map(values: &Tensor<T>) -> Result<Self> {
        if values.rank() != 4 {
            return Err(Error::shape("OrientedDescriptor", "map rank", 4, values.rank()));
        }
        let s = values.shape();
        if s[2] != 1 || s[3] != 1 {
            return Err(Error::invalid(
                "OrientedDescriptor",
                format!("spatial extent must be 1×1, got {}×{}", s[2], s[3]),
            ));
        }
        Self::new(values.clone().reshape(&[s[0], s[1]])?)
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn features(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn orientations(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn feature(&self, i: usize) -> &[T] {
        let n = self.orientations();
        &self.values.data()[i * n..(i + 1) * n]
    }
}

/// Index of the first maximum.
pub fn dominant_orientation<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-row ORAlign over a flat `[rows, n]` buffer; returns the dominant
/// orientations.
pub fn oralign_rows<T: Scalar>(input: &[T], n: usize, out: &mut [T]) -> Vec<usize> {
    input
        .chunks(n)
        .zip(out.chunks_mut(n))
        .map(|(v, o)| {
            let d = dominant_orientation(v);
            for (t, dst) in o.iter_mut().enumerate() {
                *dst = v[(t + d) % n];
            }
            d
        })
        .collect()
}

pub fn oralign_rows_backward<T: Scalar>(upstream: &[T], n: usize, dominant: &[usize], out: &mut [T]) {
    for ((g, o), &d) in upstream.chunks(n).zip(out.chunks_mut(n)).zip(dominant) {
        for t in 0..n {
            o[(t + d) % n] = g[t];
        }
    }
}

/// Aligns each feature to its dominant orientation `D_i` (ties go to the
/// smallest index), shifting slot `D_i` to slot 0.
pub fn oralign<T: Scalar>(desc: &OrientedDescriptor<T>) -> Result<(OrientedDescriptor<T>, Vec<usize>)> {
    let n = desc.orientations();
    let mut out = vec![T::zero(); desc.values.len()];
    let dominant = oralign_rows(desc.values.data(), n, &mut out);
    Ok((OrientedDescriptor::new(Tensor::new(desc.values.shape(), out)?)?, dominant))
}

/// Inverse circular shift of the upstream gradient per feature.
pub fn oralign_backward<T: Scalar>(upstream: &OrientedDescriptor<T>, dominant: &[usize]) -> Result<OrientedDescriptor<T>> {
    if dominant.len() != upstream.features() {
        return Err(Error::shape("oralign_backward", "dominant orientations", upstream.features(), dominant.len()));
    }
    let n = upstream.orientations();
    if let Some(&d) = dominant.iter().find(|&&d| d >= n) {
        return Err(Error::invalid("oralign_backward", format!("dominant orientation {d} outside 0..{n}")));
    }
    let mut out = vec![T::zero(); upstream.values.len()];
    oralign_rows_backward(upstream.values.data(), n, dominant, &mut out);
    OrientedDescriptor::new(Tensor::new(upstream.values.shape(), out)?)
}

/// Max over orientation channels per feature; returns the `C` pooled values
/// and the winning slots.
pub fn orpooling<T: Scalar>(desc: &OrientedDescriptor<T>) -> (Tensor<T>, Vec<usize>) {
    let n = desc.orientations();
    let mut values = Vec::with_capacity(desc.features());
    let mut argmax = Vec::with_capacity(desc.features());
    for v in desc.values.data().chunks(n) {
        let d = dominant_orientation(v);
        values.push(v[d]);
        argmax.push(d);
    }
    (Tensor::new(&[desc.features()], values).expect("one value per feature"), argmax)
}

pub fn orpooling_backward<T: Scalar>(upstream: &Tensor<T>, argmax: &[usize], n: usize) -> Result<OrientedDescriptor<T>> {
    if upstream.len() != argmax.len() {
        return Err(Error::shape("orpooling_backward", "upstream length", argmax.len(), upstream.len()));
    }
    let mut out = vec![T::zero(); argmax.len() * n];
    for (i, (&g, &d)) in upstream.data().iter().zip(argmax).enumerate() {
        out[i * n + d] = g;
    }
    OrientedDescriptor::new(Tensor::new(&[argmax.len(), n], out)?)
}
