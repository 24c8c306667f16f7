//! Dense scalar and vector grids plus the discrete differential operators
//! shared by every solver.
//!
//! Data is stored flat in x-fastest order: the linear index of voxel
//! `(x, y, z)` is `x + nx * (y + ny * z)`. Gradients use forward
//! differences with a Neumann boundary (zero difference at the last index
//! of each axis); [`divergence`] is the exact negative adjoint.

use crate::error::{Error, Result};

/// Voxel counts and physical spacing (mm) of a 2D or 3D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    dims: Vec<usize>,
    spacing: Vec<f64>,
}

impl Geometry {
    pub fn new(dims: &[usize], spacing: &[f64]) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) {
            return Err(Error::InvalidGrid(format!(
                "expected 2 or 3 axes, got {}",
                dims.len()
            )));
        }
        if spacing.len() != dims.len() {
            return Err(Error::InvalidGrid(format!(
                "{} spacings for {} axes",
                spacing.len(),
                dims.len()
            )));
        }
        if dims.iter().any(|&n| n == 0) {
            return Err(Error::InvalidGrid(format!("zero-sized axis in {dims:?}")));
        }
        if spacing.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::InvalidGrid(format!(
                "non-positive spacing {spacing:?}"
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            spacing: spacing.to_vec(),
        })
    }

    /// Unit-spacing geometry.
    pub fn isotropic(dims: &[usize]) -> Result<Self> {
        Self::new(dims, &vec![1.0; dims.len()])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear-index stride of each axis.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = Vec::with_capacity(self.ndim());
        let mut s = 1;
        for &n in &self.dims {
            strides.push(s);
            s *= n;
        }
        strides
    }

    /// Axis coordinates of a linear index.
    pub fn coords(&self, mut index: usize) -> [usize; 3] {
        let mut c = [0; 3];
        for (axis, &n) in self.dims.iter().enumerate() {
            c[axis] = index % n;
            index /= n;
        }
        c
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        let mut idx = 0;
        let mut stride = 1;
        for (axis, &n) in self.dims.iter().enumerate() {
            idx += coords[axis] * stride;
            stride *= n;
        }
        idx
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Upper bound on the squared operator norm of [`forward_gradient`].
    pub fn gradient_norm_bound(&self) -> f64 {
        4.0 * self.ndim() as f64 / self.min_spacing().powi(2)
    }

    pub fn ensure_same(&self, other: &Geometry, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimensionMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

/// A scalar image on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    geom: Geometry,
    data: Vec<f64>,
}

impl Grid {
    pub fn from_vec(geom: Geometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(Error::InvalidGrid(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geom.dims()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("non-finite value".into()));
        }
        Ok(Self { geom, data })
    }

    pub fn zeros(geom: Geometry) -> Self {
        Self::filled(geom, 0.0)
    }

    pub fn filled(geom: Geometry, value: f64) -> Self {
        let data = vec![value; geom.len()];
        Self { geom, data }
    }

    /// Builds a grid by evaluating `f` at the axis coordinates of every voxel.
    pub fn from_fn(geom: Geometry, mut f: impl FnMut([usize; 3]) -> f64) -> Self {
        let data = (0..geom.len()).map(|i| f(geom.coords(i))).collect();
        Self { geom, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> &[usize] {
        self.geom.dims()
    }

    pub fn spacing(&self) -> &[f64] {
        self.geom.spacing()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Same geometry, new data. Panics if the length differs.
    pub fn with_data(&self, data: Vec<f64>) -> Grid {
        assert_eq!(data.len(), self.data.len(), "grid length changed");
        Grid {
            geom: self.geom.clone(),
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        self.geom.ensure_same(&other.geom, "zip_map")?;
        Ok(self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn sub(&self, other: &Grid) -> Result<Grid> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Grid) -> Result<Grid> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, c: f64) -> Grid {
        self.map(|v| v * c)
    }

    pub fn dot(&self, other: &Grid) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm2(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean over voxels where `select` is true. `None` when nothing is selected.
    pub fn masked_mean(&self, select: impl Fn(usize) -> bool) -> Option<f64> {
        let (sum, count) = self
            .data
            .iter()
            .enumerate()
            .filter(|(i, _)| select(*i))
            .fold((0.0, 0usize), |(s, c), (_, &v)| (s + v, c + 1));
        (count > 0).then(|| sum / count as f64)
    }
}

/// One scalar array per axis on a shared grid: gradients, dual variables
/// and displacement fields.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    geom: Geometry,
    components: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn zeros(geom: Geometry) -> Self {
        let components = vec![vec![0.0; geom.len()]; geom.ndim()];
        Self { geom, components }
    }

    pub fn from_components(geom: Geometry, components: Vec<Vec<f64>>) -> Result<Self> {
        if components.len() != geom.ndim() {
            return Err(Error::InvalidGrid(format!(
                "{} components for a {}-d grid",
                components.len(),
                geom.ndim()
            )));
        }
        for c in &components {
            if c.len() != geom.len() {
                return Err(Error::InvalidGrid(format!(
                    "component length {} does not match dims {:?}",
                    c.len(),
                    geom.dims()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidGrid("non-finite component value".into()));
            }
        }
        Ok(Self { geom, components })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> &[usize] {
        self.geom.dims()
    }

    pub fn ndim(&self) -> usize {
        self.geom.ndim()
    }

    pub fn len(&self) -> usize {
        self.geom.len()
    }

    pub fn is_empty(&self) -> bool {
        self.geom.is_empty()
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        &self.components[axis]
    }

    pub fn component_mut(&mut self, axis: usize) -> &mut [f64] {
        &mut self.components[axis]
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    pub fn into_components(self) -> Vec<Vec<f64>> {
        self.components
    }

    /// Vector at voxel `i`, padded with zeros to three entries.
    pub fn at(&self, i: usize) -> [f64; 3] {
        let mut v = [0.0; 3];
        for (axis, c) in self.components.iter().enumerate() {
            v[axis] = c[i];
        }
        v
    }

    /// Euclidean length of the vector at voxel `i`.
    pub fn magnitude(&self, i: usize) -> f64 {
        self.components
            .iter()
            .map(|c| c[i] * c[i])
            .sum::<f64>()
            .sqrt()
    }

    pub fn dot(&self, other: &VectorField) -> f64 {
        self.components
            .iter()
            .zip(&other.components)
            .map(|(a, b)| dot(a, b))
            .sum()
    }

    pub fn scale(&self, c: f64) -> VectorField {
        VectorField {
            geom: self.geom.clone(),
            components: self
                .components
                .iter()
                .map(|comp| comp.iter().map(|v| v * c).collect())
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.components
            .iter()
            .all(|c| c.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Independent partial sums let the compiler vectorise the loop.
    let mut acc = [0.0; 8];
    let chunks = a.len().min(b.len()) / 8;
    for (ca, cb) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for k in 0..8 {
            acc[k] += ca[k] * cb[k];
        }
    }
    let tail: f64 = a[chunks * 8..]
        .iter()
        .zip(&b[chunks * 8..])
        .map(|(x, y)| x * y)
        .sum();
    acc.iter().sum::<f64>() + tail
}

/// Forward differences divided by spacing, zero at the last index of each axis.
pub fn forward_gradient(u: &Grid) -> VectorField {
    let mut out = VectorField::zeros(u.geom.clone());
    forward_gradient_into(&u.geom, &u.data, &mut out.components);
    out
}

pub(crate) fn forward_gradient_into(geom: &Geometry, u: &[f64], out: &mut [Vec<f64>]) {
    let strides = geom.strides();
    for (axis, comp) in out.iter_mut().enumerate() {
        let n = geom.dims[axis];
        let stride = strides[axis];
        let inv_h = 1.0 / geom.spacing[axis];
        for (i, g) in comp.iter_mut().enumerate() {
            let c = (i / stride) % n;
            *g = if c + 1 < n {
                (u[i + stride] - u[i]) * inv_h
            } else {
                0.0
            };
        }
    }
}

/// Backward-difference divergence, the negative adjoint of [`forward_gradient`].
pub fn divergence(p: &VectorField) -> Grid {
    let mut out = Grid::zeros(p.geom.clone());
    divergence_into(&p.geom, &p.components, &mut out.data);
    out
}

pub(crate) fn divergence_into(geom: &Geometry, p: &[Vec<f64>], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let strides = geom.strides();
    for (axis, comp) in p.iter().enumerate() {
        let n = geom.dims[axis];
        let stride = strides[axis];
        let inv_h = 1.0 / geom.spacing[axis];
        for (i, d) in out.iter_mut().enumerate() {
            let c = (i / stride) % n;
            let here = if c + 1 < n { comp[i] } else { 0.0 };
            let before = if c > 0 { comp[i - stride] } else { 0.0 };
            *d += (here - before) * inv_h;
        }
    }
}

/// Isotropic total variation: sum over voxels of the gradient's Euclidean norm.
pub fn isotropic_tv(s: &Grid) -> f64 {
    let g = forward_gradient(s);
    (0..s.len()).map(|i| g.magnitude(i)).sum()
}
