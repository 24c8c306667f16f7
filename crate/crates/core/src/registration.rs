//! Dense deformable registration at phantom scale.
//!
//! Fields follow the pull-back convention: a displacement `u` defined on
//! the fixed grid says that the fixed voxel at `x` (mm) corresponds to the
//! moving image at `x + u(x)`. [`warp`] resamples accordingly.
//!
//! [`register`] is a multiresolution demons-style loop: at each level the
//! warped moving image is compared with the fixed image, a similarity
//! force is turned into an update, the update is added to the field and
//! the field is smoothed with a Gaussian.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Geometry, Grid, VectorField};
use crate::pfg;

/// Displacements in mm on the fixed grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField(VectorField);

impl DeformationField {
    pub fn zeros(geom: Geometry) -> Self {
        Self(VectorField::zeros(geom))
    }

    pub fn from_components(geom: Geometry, components: Vec<Vec<f64>>) -> Result<Self> {
        VectorField::from_components(geom, components).map(Self)
    }

    pub fn from_field(field: VectorField) -> Self {
        Self(field)
    }

    pub fn as_field(&self) -> &VectorField {
        &self.0
    }

    pub fn into_field(self) -> VectorField {
        self.0
    }

    pub fn geometry(&self) -> &Geometry {
        self.0.geometry()
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        self.0.component(axis)
    }

    pub fn component_mut(&mut self, axis: usize) -> &mut [f64] {
        self.0.component_mut(axis)
    }

    pub fn at(&self, i: usize) -> [f64; 3] {
        self.0.at(i)
    }

    pub fn magnitude(&self, i: usize) -> f64 {
        self.0.magnitude(i)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.0.ndim()
    }

    pub fn mean_magnitude(&self) -> f64 {
        (0..self.len()).map(|i| self.magnitude(i)).sum::<f64>() / self.len() as f64
    }

    pub fn negated(&self) -> Self {
        Self(self.0.scale(-1.0))
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        pfg::write_field(path, &self.0)
    }

    pub fn load(path: &Path) -> Result<Self> {
        pfg::read_field(path).map(Self)
    }
}

/// Similarity driving the registration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Ssd,
    #[default]
    Ncc,
}

impl std::str::FromStr for Similarity {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ssd" => Ok(Self::Ssd),
            "ncc" => Ok(Self::Ncc),
            other => Err(format!("unknown similarity {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegParams {
    /// Pyramid depth; coarsening stops before an axis drops below 16 voxels.
    pub levels: usize,
    pub iters_per_level: usize,
    /// Gaussian field smoothing in mm.
    pub smoothing_sigma: f64,
    pub similarity: Similarity,
    /// Scale of each demons update.
    pub step: f64,
    /// Fixed-space voxels with mask value 1 exert no similarity force.
    pub mask: Option<Grid>,
}

impl Default for RegParams {
    fn default() -> Self {
        Self {
            levels: 3,
            iters_per_level: 100,
            smoothing_sigma: 2.0,
            similarity: Similarity::Ncc,
            step: 1.0,
            mask: None,
        }
    }
}

/// Coarsest pyramid level size per axis.
const MIN_LEVEL_SIZE: usize = 16;
/// Window radius of the local correlation.
pub const NCC_RADIUS: usize = 2;
/// Denominator floor of the SSD demons update.
pub const SSD_FLOOR: f64 = 1e-5;
/// Damping of the NCC demons step. The window statistics couple
/// neighbouring voxels, and full steps oscillate on nearly aligned images.
const NCC_RELAXATION: f64 = 1.0;
/// Local variance below this fraction of the global one gets no NCC force.
const NCC_VARIANCE_FLOOR: f64 = 1e-4;

/// Linear interpolation at a position in mm, clamping to the boundary.
pub fn sample_linear(image: &Grid, pos: [f64; 3]) -> f64 {
    let geom = image.geometry();
    let dims = geom.dims();
    let spacing = geom.spacing();
    let d = dims.len();
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for axis in 0..d {
        let n = dims[axis];
        let t = (pos[axis] / spacing[axis]).clamp(0.0, (n - 1) as f64);
        let b = (t.floor() as usize).min(n.saturating_sub(2));
        base[axis] = b;
        frac[axis] = if n > 1 { t - b as f64 } else { 0.0 };
    }
    let strides = geom.strides();
    let data = image.data();
    let corners = 1usize << d;
    let mut acc = 0.0;
    for corner in 0..corners {
        let mut w = 1.0;
        let mut idx = 0;
        for axis in 0..d {
            let bit = (corner >> axis) & 1;
            if dims[axis] == 1 && bit == 1 {
                w = 0.0;
                break;
            }
            w *= if bit == 1 {
                frac[axis]
            } else {
                1.0 - frac[axis]
            };
            idx += (base[axis] + bit) * strides[axis];
        }
        if w != 0.0 {
            acc += w * data[idx];
        }
    }
    acc
}

fn position(geom: &Geometry, i: usize) -> [f64; 3] {
    let c = geom.coords(i);
    let mut p = [0.0; 3];
    for (axis, &h) in geom.spacing().iter().enumerate() {
        p[axis] = c[axis] as f64 * h;
    }
    p
}

/// `out(x) = image(x + u(x))`.
pub fn warp(image: &Grid, field: &DeformationField) -> Result<Grid> {
    image
        .geometry()
        .ensure_same(field.geometry(), "warp image vs field")?;
    let geom = image.geometry();
    let d = geom.ndim();
    let data = (0..image.len())
        .map(|i| {
            let mut p = position(geom, i);
            let u = field.at(i);
            if u.iter().all(|&v| v == 0.0) {
                return image.data()[i];
            }
            for axis in 0..d {
                p[axis] += u[axis];
            }
            sample_linear(image, p)
        })
        .collect();
    Ok(image.with_data(data))
}

/// Composition `(a ∘ b)(x) = b(x) + a(x + b(x))`: warping by the result
/// equals warping by `a` and then by `b`.
pub fn compose(a: &DeformationField, b: &DeformationField) -> Result<DeformationField> {
    a.geometry().ensure_same(b.geometry(), "compose")?;
    let geom = a.geometry().clone();
    let d = geom.ndim();
    let comps: Vec<Grid> = (0..d)
        .map(|axis| Grid::from_vec(geom.clone(), a.component(axis).to_vec()))
        .collect::<Result<_>>()?;
    let mut out = vec![vec![0.0; geom.len()]; d];
    for i in 0..geom.len() {
        let mut p = position(&geom, i);
        let bu = b.at(i);
        for axis in 0..d {
            p[axis] += bu[axis];
        }
        for axis in 0..d {
            out[axis][i] = bu[axis] + sample_linear(&comps[axis], p);
        }
    }
    DeformationField::from_components(geom, out)
}

/// Approximate inverse by fixed-point iteration of `v(y) = -u(y + v(y))`.
pub fn invert(field: &DeformationField, iterations: usize) -> Result<DeformationField> {
    let geom = field.geometry().clone();
    let d = geom.ndim();
    let comps: Vec<Grid> = (0..d)
        .map(|axis| Grid::from_vec(geom.clone(), field.component(axis).to_vec()))
        .collect::<Result<_>>()?;
    let mut inv = field.negated();
    for _ in 0..iterations {
        let mut next = vec![vec![0.0; geom.len()]; d];
        for i in 0..geom.len() {
            let mut p = position(&geom, i);
            let v = inv.at(i);
            for axis in 0..d {
                p[axis] += v[axis];
            }
            for axis in 0..d {
                next[axis][i] = -sample_linear(&comps[axis], p);
            }
        }
        inv = DeformationField::from_components(geom.clone(), next)?;
    }
    Ok(inv)
}

fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    let radius = (3.0 * sigma_vox).ceil().max(1.0) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-0.5 * x * x / (sigma_vox * sigma_vox)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable convolution along each axis with boundary clamping.
fn convolve_separable(geom: &Geometry, data: &mut [f64], kernels: &[Vec<f64>]) {
    let strides = geom.strides();
    let mut buf = vec![0.0; data.len()];
    for (axis, kernel) in kernels.iter().enumerate() {
        if kernel.len() <= 1 {
            continue;
        }
        let n = geom.dims()[axis] as isize;
        let stride = strides[axis];
        let radius = (kernel.len() / 2) as isize;
        for (i, out) in buf.iter_mut().enumerate() {
            let c = ((i / stride) % n as usize) as isize;
            let row_start = i - c as usize * stride;
            let mut acc = 0.0;
            for (t, &w) in kernel.iter().enumerate() {
                let j = (c + t as isize - radius).clamp(0, n - 1) as usize;
                acc += w * data[row_start + j * stride];
            }
            *out = acc;
        }
        data.copy_from_slice(&buf);
    }
}

/// Gaussian smoothing with `sigma_mm` along every axis.
pub fn gaussian_smooth(image: &Grid, sigma_mm: f64) -> Grid {
    let mut data = image.data().to_vec();
    smooth_in_place(image.geometry(), &mut data, sigma_mm);
    image.with_data(data)
}

fn smooth_in_place(geom: &Geometry, data: &mut [f64], sigma_mm: f64) {
    if sigma_mm <= 0.0 {
        return;
    }
    let kernels: Vec<Vec<f64>> = geom
        .spacing()
        .iter()
        .map(|&h| {
            let s = sigma_mm / h;
            if s < 0.1 {
                vec![1.0]
            } else {
                gaussian_kernel(s)
            }
        })
        .collect();
    convolve_separable(geom, data, &kernels);
}

/// Sums over a `(2r+1)^d` window truncated at the boundary.
fn box_sum(geom: &Geometry, data: &[f64], radius: usize) -> Vec<f64> {
    let strides = geom.strides();
    let mut cur = data.to_vec();
    let mut buf = vec![0.0; data.len()];
    let r = radius as isize;
    for (axis, &n) in geom.dims().iter().enumerate() {
        let n = n as isize;
        let stride = strides[axis];
        for (i, out) in buf.iter_mut().enumerate() {
            let c = ((i / stride) % n as usize) as isize;
            let row_start = i - c as usize * stride;
            let lo = (c - r).max(0);
            let hi = (c + r).min(n - 1);
            *out = (lo..=hi)
                .map(|j| cur[row_start + j as usize * stride])
                .sum();
        }
        std::mem::swap(&mut cur, &mut buf);
    }
    cur
}

/// Central-difference gradient in intensity per mm.
fn central_gradient(image: &Grid) -> Vec<Vec<f64>> {
    let geom = image.geometry();
    let strides = geom.strides();
    let data = image.data();
    geom.dims()
        .iter()
        .enumerate()
        .map(|(axis, &n)| {
            let stride = strides[axis];
            let h = geom.spacing()[axis];
            (0..data.len())
                .map(|i| {
                    let c = (i / stride) % n;
                    if n == 1 {
                        0.0
                    } else if c == 0 {
                        (data[i + stride] - data[i]) / h
                    } else if c + 1 == n {
                        (data[i] - data[i - stride]) / h
                    } else {
                        (data[i + stride] - data[i - stride]) / (2.0 * h)
                    }
                })
                .collect()
        })
        .collect()
}

/// Similarity force on the fixed grid, before step scaling.
///
/// SSD gives the demons update `(F - W)∇W / (|∇W|² + (F - W)²/h² + floor)`,
/// a displacement in mm that never exceeds `h/2`.
/// NCC follows the gradient of the local correlation coefficient over a
/// window of radius [`NCC_RADIUS`], with the same demons normalisation
/// applied to the window-standardised intensities.
/// Voxels where `mask > 0.5` get zero force.
pub fn similarity_force(
    warped: &Grid,
    fixed: &Grid,
    similarity: Similarity,
    mask: Option<&Grid>,
) -> Result<VectorField> {
    warped.geometry().ensure_same(fixed.geometry(), "force")?;
    if let Some(mask) = mask {
        fixed.geometry().ensure_same(mask.geometry(), "mask")?;
    }
    let geom = fixed.geometry().clone();
    let m = geom.len();
    let inv_h2 = geom.min_spacing().powi(-2);
    let grad = central_gradient(warped);
    let w = warped.data();
    let f = fixed.data();
    let coeff: Vec<f64> = match similarity {
        Similarity::Ssd => (0..m)
            .map(|i| {
                let diff = f[i] - w[i];
                let g2: f64 = grad.iter().map(|g| g[i] * g[i]).sum();
                diff / (g2 + diff * diff * inv_h2 + SSD_FLOOR)
            })
            .collect(),
        Similarity::Ncc => {
            let ones = vec![1.0; m];
            let count = box_sum(&geom, &ones, NCC_RADIUS);
            let sf = box_sum(&geom, f, NCC_RADIUS);
            let sw = box_sum(&geom, w, NCC_RADIUS);
            let ff: Vec<f64> = f.iter().map(|v| v * v).collect();
            let ww: Vec<f64> = w.iter().map(|v| v * v).collect();
            let fw: Vec<f64> = f.iter().zip(w).map(|(a, b)| a * b).collect();
            let sff = box_sum(&geom, &ff, NCC_RADIUS);
            let sww = box_sum(&geom, &ww, NCC_RADIUS);
            let sfw = box_sum(&geom, &fw, NCC_RADIUS);
            // Windows with almost no contrast carry no usable correlation.
            let mean_f = f.iter().sum::<f64>() / m as f64;
            let var_f = f.iter().map(|v| (v - mean_f).powi(2)).sum::<f64>() / m as f64;
            let full_window = ((2 * NCC_RADIUS + 1) as f64).powi(geom.ndim() as i32);
            (0..m)
                .map(|i| {
                    let nwin = count[i];
                    if nwin < full_window {
                        // Windows cut by the border have no stable statistics.
                        return 0.0;
                    }
                    let floor = (NCC_VARIANCE_FLOOR * var_f * nwin).max(1e-12);
                    let mf = sf[i] / nwin;
                    let mw = sw[i] / nwin;
                    let a = sfw[i] - nwin * mf * mw;
                    let b = sff[i] - nwin * mf * mf;
                    let c = sww[i] - nwin * mw * mw;
                    if b <= floor || c <= floor {
                        return 0.0;
                    }
                    // Demons step on locally normalised intensities: with
                    // f~ = fbar/sqrt(B), w~ = wbar/sqrt(C), rho = A/sqrt(BC),
                    // the correlation gradient is 2 rho (f~ - rho w~) grad w~.
                    let rho = a / (b * c).sqrt();
                    let err = rho * ((f[i] - mf) / b.sqrt() - rho * (w[i] - mw) / c.sqrt());
                    let g2: f64 = grad.iter().map(|g| g[i] * g[i]).sum::<f64>() / c;
                    err / (c.sqrt() * (g2 + err * err * inv_h2 + SSD_FLOOR))
                })
                .collect()
        }
    };
    let components = grad
        .iter()
        .map(|g| {
            (0..m)
                .map(|i| {
                    let masked = mask.is_some_and(|mk| mk.data()[i] > 0.5);
                    if masked {
                        0.0
                    } else {
                        coeff[i] * g[i]
                    }
                })
                .collect()
        })
        .collect();
    VectorField::from_components(geom, components)
}

/// Halves the resolution after smoothing with a one-voxel Gaussian.
fn downsample(image: &Grid) -> Result<Grid> {
    let geom = image.geometry();
    let smoothed = gaussian_smooth(image, geom.min_spacing());
    let dims: Vec<usize> = geom.dims().iter().map(|&n| n.div_ceil(2)).collect();
    let spacing: Vec<f64> = geom.spacing().iter().map(|&h| 2.0 * h).collect();
    let coarse = Geometry::new(&dims, &spacing)?;
    Ok(Grid::from_fn(coarse, |c| {
        let fine: Vec<usize> = (0..dims.len()).map(|a| 2 * c[a]).collect();
        smoothed.data()[geom.index(&fine)]
    }))
}

/// Coarsens a mask so that a coarse voxel is masked if any fine voxel it covers is.
fn downsample_mask(mask: &Grid) -> Result<Grid> {
    let geom = mask.geometry();
    let dims: Vec<usize> = geom.dims().iter().map(|&n| n.div_ceil(2)).collect();
    let spacing: Vec<f64> = geom.spacing().iter().map(|&h| 2.0 * h).collect();
    let coarse = Geometry::new(&dims, &spacing)?;
    let mut out = Grid::zeros(coarse.clone());
    for i in 0..mask.len() {
        if mask.data()[i] > 0.5 {
            let c = geom.coords(i);
            let cc: Vec<usize> = (0..dims.len()).map(|a| c[a] / 2).collect();
            out.data_mut()[coarse.index(&cc)] = 1.0;
        }
    }
    Ok(out)
}

/// Linear upsampling of a field onto a finer geometry (values stay in mm).
fn upsample_field(field: &DeformationField, fine: &Geometry) -> Result<DeformationField> {
    let coarse = field.geometry().clone();
    let d = coarse.ndim();
    let comps: Vec<Grid> = (0..d)
        .map(|axis| Grid::from_vec(coarse.clone(), field.component(axis).to_vec()))
        .collect::<Result<_>>()?;
    let out = (0..d)
        .map(|axis| {
            (0..fine.len())
                .map(|i| sample_linear(&comps[axis], position(fine, i)))
                .collect()
        })
        .collect();
    DeformationField::from_components(fine.clone(), out)
}

fn register_level(
    moving: &Grid,
    fixed: &Grid,
    mask: Option<&Grid>,
    params: &RegParams,
    mut field: DeformationField,
) -> Result<DeformationField> {
    let geom = fixed.geometry().clone();
    let d = geom.ndim();
    let scale = match params.similarity {
        Similarity::Ssd => params.step,
        Similarity::Ncc => params.step * NCC_RELAXATION,
    };
    for iter in 0..params.iters_per_level {
        let warped = warp(moving, &field)?;
        let force = similarity_force(&warped, fixed, params.similarity, mask)?;
        for axis in 0..d {
            let n = geom.dims()[axis];
            let h = geom.spacing()[axis];
            let stride = geom.strides()[axis];
            let top = (n - 1) as f64 * h;
            let comp = field.component_mut(axis);
            for (i, (u, &g)) in comp.iter_mut().zip(force.component(axis)).enumerate() {
                // Clamped samples do not respond to outward motion.
                let pos = ((i / stride) % n) as f64 * h + *u;
                if (pos >= top && g > 0.0) || (pos <= 0.0 && g < 0.0) {
                    continue;
                }
                *u += scale * g;
            }
            smooth_in_place(&geom, comp, params.smoothing_sigma);
        }
        if !field.is_finite() {
            return Err(Error::NonFinite(iter + 1));
        }
    }
    Ok(field)
}

/// Registers `moving` to `fixed`, returning `u` with `warp(moving, u) ≈ fixed`.
pub fn register(moving: &Grid, fixed: &Grid, params: &RegParams) -> Result<DeformationField> {
    moving
        .geometry()
        .ensure_same(fixed.geometry(), "register moving vs fixed")?;
    if moving.spacing() != fixed.spacing() {
        return Err(Error::DimensionMismatch(
            "moving and fixed spacing differ".into(),
        ));
    }
    if params.levels == 0 || !(params.smoothing_sigma >= 0.0) || !(params.step > 0.0) {
        return Err(Error::Invalid(
            "levels >= 1, smoothing_sigma >= 0 and step > 0 required".into(),
        ));
    }
    if let Some(mask) = &params.mask {
        fixed
            .geometry()
            .ensure_same(mask.geometry(), "registration mask")?;
    }

    let mut pyramid = vec![(moving.clone(), fixed.clone(), params.mask.clone())];
    for _ in 1..params.levels {
        let (m, f, k) = pyramid.last().expect("non-empty pyramid");
        if m.dims().iter().any(|&n| n < 2 * MIN_LEVEL_SIZE) {
            break;
        }
        let next_mask = k.as_ref().map(downsample_mask).transpose()?;
        pyramid.push((downsample(m)?, downsample(f)?, next_mask));
    }

    let mut field: Option<DeformationField> = None;
    for (m, f, k) in pyramid.iter().rev() {
        let init = match field {
            None => DeformationField::zeros(f.geometry().clone()),
            Some(prev) => upsample_field(&prev, f.geometry())?,
        };
        field = Some(register_level(m, f, k.as_ref(), params, init)?);
    }
    Ok(field.expect("at least one level"))
}

static EXTERNAL_COUNTER: AtomicUsize = AtomicUsize::new(0);

fn shell_quote(path: &Path) -> String {
    format!("'{}'", path.display().to_string().replace('\'', r"'\''"))
}

/// Runs an external registration command and reads the field it writes.
///
/// `template` must contain `{moving}`, `{fixed}` and `{out}`; each is
/// replaced by a shell-quoted path and the result is run with `sh -c`.
pub fn external_register(moving: &Path, fixed: &Path, template: &str) -> Result<DeformationField> {
    for key in ["{moving}", "{fixed}", "{out}"] {
        if !template.contains(key) {
            return Err(Error::Invalid(format!("command template lacks {key}")));
        }
    }
    let out = unique_temp_path("field.pfg");
    let command = template
        .replace("{moving}", &shell_quote(moving))
        .replace("{fixed}", &shell_quote(fixed))
        .replace("{out}", &shell_quote(&out));
    let status = Command::new("sh")
        .arg("-c")
        .arg(&command)
        .output()
        .map_err(|e| Error::ProcessFailure(format!("cannot spawn `{command}`: {e}")))?;
    if !status.status.success() {
        let _ = std::fs::remove_file(&out);
        return Err(Error::ProcessFailure(format!(
            "`{command}` exited with {}: {}",
            status.status,
            String::from_utf8_lossy(&status.stderr).trim()
        )));
    }
    let result = pfg::read_field(&out).map_err(|e| match e {
        Error::Io(io) => crate::error::parse_failure(&out, format!("no output field: {io}")),
        other => other,
    });
    let _ = std::fs::remove_file(&out);
    result.map(DeformationField::from_field)
}

fn unique_temp_path(name: &str) -> PathBuf {
    let n = EXTERNAL_COUNTER.fetch_add(1, Ordering::Relaxed);
    std::env::temp_dir().join(format!("quasinormal-{}-{n}-{name}", std::process::id()))
}
