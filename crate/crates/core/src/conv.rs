//! Architectures, strided convolutions and end-to-end composition.
//!
//! A layer `(w, s)` maps an input of format `s(d - 1) + k` to an output of
//! format `d` by `out[i] = sum_j w[j] * x[i*s + j]` (multi-indices for D > 1).
//! Composing layers yields a single convolution whose filter is computed by
//! [`compose`].

use std::fmt;

use log::warn;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{flat_index, indices, EndToEndFilter, FilterTensor, Tensor};

/// Per-dimension stride of a convolution; every component is at least one.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StrideVector(Vec<usize>);

impl StrideVector {
    pub fn new(components: Vec<usize>) -> Result<Self> {
        if components.is_empty() || components.contains(&0) {
            return Err(Error::InvalidArchitecture(format!(
                "stride components must be >= 1, got {components:?}"
            )));
        }
        Ok(Self(components))
    }

    pub fn ones(dim: usize) -> Self {
        Self(vec![1; dim])
    }

    pub fn components(&self) -> &[usize] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_ones(&self) -> bool {
        self.0.iter().all(|&s| s == 1)
    }
}

impl fmt::Display for StrideVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Filter format and stride of one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub shape: Vec<usize>,
    pub stride: StrideVector,
}

impl LayerSpec {
    pub fn new(shape: Vec<usize>, stride: Vec<usize>) -> Result<Self> {
        let stride = StrideVector::new(stride)?;
        if shape.len() != stride.dim() {
            return Err(Error::InvalidArchitecture(format!(
                "filter shape {shape:?} and stride {stride} differ in dimension"
            )));
        }
        if shape.contains(&0) {
            return Err(Error::InvalidArchitecture(format!(
                "filter sizes must be positive, got {shape:?}"
            )));
        }
        Ok(Self { shape, stride })
    }

    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }
}

/// An ordered list of layers acting on D-dimensional signals.
///
/// The last stride never influences the end-to-end filter, so it is stored as
/// all-ones in the layer list. The stride the caller supplied is kept in
/// `final_stride` and only used when the network is applied to data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    layers: Vec<LayerSpec>,
    signal_dim: usize,
    final_stride: StrideVector,
}

impl Architecture {
    pub fn new(mut layers: Vec<LayerSpec>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::InvalidArchitecture("at least one layer is required".into()));
        };
        let signal_dim = first.shape.len();
        for (l, layer) in layers.iter().enumerate() {
            if layer.shape.len() != signal_dim {
                return Err(Error::InvalidArchitecture(format!(
                    "layer {l} has dimension {} but layer 0 has {signal_dim}",
                    layer.shape.len()
                )));
            }
            if layer.shape.iter().all(|&k| k == 1) {
                return Err(Error::InvalidArchitecture(format!(
                    "layer {l} has all filter sizes equal to one and can be dropped"
                )));
            }
        }
        let last = layers.last_mut().expect("non-empty");
        let final_stride = std::mem::replace(&mut last.stride, StrideVector::ones(signal_dim));
        if !final_stride.is_ones() {
            warn!(
                "last-layer stride {final_stride} does not affect the end-to-end filter; normalized to ones"
            );
        }
        Ok(Self {
            layers,
            signal_dim,
            final_stride,
        })
    }

    /// Convenience constructor for one-dimensional signals from `(k_l, s_l)` pairs.
    pub fn one_dim(layers: &[(usize, usize)]) -> Result<Self> {
        Self::new(
            layers
                .iter()
                .map(|&(k, s)| LayerSpec::new(vec![k], vec![s]))
                .collect::<Result<_>>()?,
        )
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn signal_dim(&self) -> usize {
        self.signal_dim
    }

    /// The last-layer stride as supplied at construction.
    pub fn final_stride(&self) -> &StrideVector {
        &self.final_stride
    }

    /// Strides used when applying the layers to data (the supplied last stride included).
    pub fn application_strides(&self) -> Vec<StrideVector> {
        let mut strides: Vec<_> = self.layers.iter().map(|l| l.stride.clone()).collect();
        *strides.last_mut().expect("non-empty") = self.final_stride.clone();
        strides
    }

    /// Stride of the end-to-end convolution, `s_1 * ... * s_H` per dimension.
    pub fn overall_stride(&self) -> StrideVector {
        let mut total = vec![1; self.signal_dim];
        for s in self.application_strides() {
            for (acc, c) in total.iter_mut().zip(s.components()) {
                *acc *= c;
            }
        }
        StrideVector(total)
    }

    /// Sparse exponents `t_l = s_1 * ... * s_{l-1}` per dimension.
    pub fn sparse_exponents(&self) -> Vec<Vec<usize>> {
        let mut t = vec![1; self.signal_dim];
        let mut out = Vec::with_capacity(self.depth());
        for layer in &self.layers {
            out.push(t.clone());
            for (acc, s) in t.iter_mut().zip(layer.stride.components()) {
                *acc *= s;
            }
        }
        out
    }

    pub fn end_to_end_shape(&self) -> Vec<usize> {
        end_to_end_shape(self)
    }

    pub fn end_to_end_len(&self) -> usize {
        self.end_to_end_shape().iter().product()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(LayerSpec::size).collect()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layer_sizes().iter().sum()
    }

    /// Dimension of the neuromanifold, `sum_l (|w_l| - 1) + 1`.
    pub fn neuromanifold_dim(&self) -> usize {
        self.param_count() + 1 - self.depth()
    }

    /// For 1-D signals: all strides except the last exceed one.
    pub fn strides_exceed_one(&self) -> bool {
        self.layers[..self.depth() - 1]
            .iter()
            .all(|l| l.stride.components().iter().all(|&s| s > 1))
    }

    /// For D > 1: every layer has at least two filter sizes larger than one.
    pub fn every_layer_spans_two_dims(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.shape.iter().filter(|&&k| k > 1).count() >= 2)
    }

    /// Whether the kernel is guaranteed to depend only on the end-to-end
    /// filter and the norm invariants.
    pub fn kernel_depends_only_on_function(&self) -> bool {
        if self.signal_dim == 1 {
            self.strides_exceed_one()
        } else {
            self.every_layer_spans_two_dims()
        }
    }

    /// Layers `l < big_l` live in the same sparse polynomial space: equal
    /// filter formats and equal sparse exponents in every dimension where the
    /// filter size exceeds one. Such layers can be swapped without changing
    /// the end-to-end filter.
    pub fn swap_eligible(&self, l: usize, big_l: usize) -> bool {
        if l == big_l || l >= self.depth() || big_l >= self.depth() {
            return false;
        }
        let (a, b) = (&self.layers[l], &self.layers[big_l]);
        if a.shape != b.shape {
            return false;
        }
        let t = self.sparse_exponents();
        (0..self.signal_dim).all(|m| a.shape[m] == 1 || t[l][m] == t[big_l][m])
    }

    /// Input format for the whole network given an output format `d`.
    pub fn input_shape_for_output(&self, output: &[usize]) -> Vec<usize> {
        let k = self.end_to_end_shape();
        let s = self.overall_stride();
        output
            .iter()
            .zip(&k)
            .zip(s.components())
            .map(|((&d, &k), &s)| s * (d - 1) + k)
            .collect()
    }
}

/// End-to-end filter format `k^(m) = k_1^(m) + sum_{l>=2} (k_l^(m) - 1) * prod_{i<l} s_i^(m)`.
pub fn end_to_end_shape(arch: &Architecture) -> Vec<usize> {
    let t = arch.sparse_exponents();
    (0..arch.signal_dim())
        .map(|m| {
            1 + arch
                .layers()
                .iter()
                .zip(&t)
                .map(|(layer, t_l)| (layer.shape[m] - 1) * t_l[m])
                .sum::<usize>()
        })
        .collect()
}

/// A filter tuple `(w_1, ..., w_H)` matching an architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTuple<T> {
    filters: Vec<FilterTensor<T>>,
}

impl<T: Scalar> ParamTuple<T> {
    pub fn new(arch: &Architecture, filters: Vec<FilterTensor<T>>) -> Result<Self> {
        if filters.len() != arch.depth() {
            return Err(Error::ShapeMismatch(format!(
                "architecture has {} layers but {} filters were given",
                arch.depth(),
                filters.len()
            )));
        }
        for (l, (w, spec)) in filters.iter().zip(arch.layers()).enumerate() {
            if w.shape() != spec.shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "filter {l} has shape {:?}, layer expects {:?}",
                    w.shape(),
                    spec.shape
                )));
            }
        }
        Ok(Self { filters })
    }

    /// Builds a tuple from a flat parameter vector (layers concatenated).
    pub fn from_flat(arch: &Architecture, flat: &[T]) -> Result<Self> {
        if flat.len() != arch.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                arch.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        let filters = arch
            .layers()
            .iter()
            .map(|spec| {
                let n = spec.size();
                let w = Tensor::new(spec.shape.clone(), flat[offset..offset + n].to_vec());
                offset += n;
                w
            })
            .collect::<Result<_>>()?;
        Ok(Self { filters })
    }

    /// One-dimensional convenience constructor.
    pub fn from_vecs(arch: &Architecture, filters: Vec<Vec<T>>) -> Result<Self> {
        let tensors = filters
            .into_iter()
            .zip(arch.layers())
            .map(|(data, spec)| Tensor::new(spec.shape.clone(), data))
            .collect::<Result<_>>()?;
        Self::new(arch, tensors)
    }

    pub fn filters(&self) -> &[FilterTensor<T>] {
        &self.filters
    }

    pub fn filter(&self, l: usize) -> &FilterTensor<T> {
        &self.filters[l]
    }

    pub fn depth(&self) -> usize {
        self.filters.len()
    }

    pub fn into_filters(self) -> Vec<FilterTensor<T>> {
        self.filters
    }

    pub fn flatten(&self) -> Vec<T> {
        self.filters
            .iter()
            .flat_map(|w| w.data().iter().cloned())
            .collect()
    }

    pub fn norms_sq(&self) -> Vec<T> {
        self.filters.iter().map(Tensor::norm_sq).collect()
    }

    /// Copy with layer `l` replaced; the shape must match.
    pub fn with_layer(&self, l: usize, w: FilterTensor<T>) -> Self {
        assert_eq!(w.shape(), self.filters[l].shape(), "layer shape");
        let mut filters = self.filters.clone();
        filters[l] = w;
        Self { filters }
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(&T) -> U + Copy) -> ParamTuple<U> {
        ParamTuple {
            filters: self.filters.iter().map(|w| w.map(f)).collect(),
        }
    }

    pub fn to_f64(&self) -> ParamTuple<f64> {
        self.map(|x| x.to_f64())
    }

    pub(crate) fn from_filters_unchecked(filters: Vec<FilterTensor<T>>) -> Self {
        Self { filters }
    }
}

/// Applies the strided convolution `(w, s)` to `input`.
pub fn apply_convolution<T: Scalar>(
    w: &FilterTensor<T>,
    stride: &StrideVector,
    input: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = w.dim();
    if stride.dim() != d || input.dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "filter is {d}-dimensional, stride {} and input {}",
            stride.dim(),
            input.dim()
        )));
    }
    let mut out_shape = Vec::with_capacity(d);
    for m in 0..d {
        let (n, k, s) = (input.shape()[m], w.shape()[m], stride.components()[m]);
        if n < k || (n - k) % s != 0 {
            return Err(Error::ShapeMismatch(format!(
                "input size {n} in dimension {m} is not s(d-1)+k for k={k}, s={s}"
            )));
        }
        out_shape.push((n - k) / s + 1);
    }
    let s = stride.components();
    let mut out = Vec::with_capacity(out_shape.iter().product());
    let mut pos = vec![0; d];
    for i in indices(&out_shape) {
        let mut acc = T::zero();
        for (j, wj) in indices(w.shape()).zip(w.data()) {
            for m in 0..d {
                pos[m] = i[m] * s[m] + j[m];
            }
            acc = acc + wj.clone() * input.data()[flat_index(input.shape(), &pos)].clone();
        }
        out.push(acc);
    }
    Tensor::new(out_shape, out)
}

/// Applies the layers one after another (the supplied last stride included).
pub fn apply_layers<T: Scalar>(
    arch: &Architecture,
    theta: &ParamTuple<T>,
    input: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut x = input.clone();
    for (w, s) in theta.filters().iter().zip(arch.application_strides()) {
        x = apply_convolution(w, &s, &x)?;
    }
    Ok(x)
}

/// The end-to-end filter `mu(theta)`.
pub fn compose<T: Scalar>(arch: &Architecture, theta: &ParamTuple<T>) -> Result<EndToEndFilter<T>> {
    if theta.depth() != arch.depth() {
        return Err(Error::ShapeMismatch(format!(
            "{} filters for {} layers",
            theta.depth(),
            arch.depth()
        )));
    }
    for (w, spec) in theta.filters().iter().zip(arch.layers()) {
        if w.shape() != spec.shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "filter shape {:?} vs layer shape {:?}",
                w.shape(),
                spec.shape
            )));
        }
    }
    let refs: Vec<&FilterTensor<T>> = theta.filters().iter().collect();
    Ok(compose_refs(arch, &refs))
}

/// Composition on borrowed filters; shapes are assumed to match `arch`.
///
/// Folding layer `l` into the accumulated filter `acc` (whose stride is
/// `t_l`) gives `v[m] = sum_{j * t_l + i = m} w_l[j] * acc[i]`.
pub(crate) fn compose_refs<T: Scalar>(arch: &Architecture, filters: &[&FilterTensor<T>]) -> Tensor<T> {
    let t = arch.sparse_exponents();
    let mut acc = filters[0].clone();
    for (l, w) in filters.iter().enumerate().skip(1) {
        acc = fold_layer(&acc, w, &t[l]);
    }
    acc
}

fn fold_layer<T: Scalar>(acc: &Tensor<T>, w: &Tensor<T>, t: &[usize]) -> Tensor<T> {
    let d = acc.dim();
    let shape: Vec<usize> = (0..d).map(|m| acc.shape()[m] + (w.shape()[m] - 1) * t[m]).collect();
    let mut out = Tensor::zeros(&shape);
    let acc_idx: Vec<Vec<usize>> = indices(acc.shape()).collect();
    let mut pos = vec![0; d];
    for (j, wj) in indices(w.shape()).zip(w.data()) {
        if wj.is_zero_exact() {
            continue;
        }
        for (i, ai) in acc_idx.iter().zip(acc.data()) {
            for m in 0..d {
                pos[m] = j[m] * t[m] + i[m];
            }
            let slot: &mut T = &mut out.data_mut()[flat_index(&shape, &pos)];
            *slot = slot.clone() + wj.clone() * ai.clone();
        }
    }
    out
}
