//! Seeded quasi-tumor phantoms and the scoring protocol.
//!
//! A phantom is a brain-like arrangement of smooth nested ellipses with a
//! folded cortical boundary. Normal populations are drawn from the same
//! family in atlas space; a test case warps one draw with a smooth random
//! deformation plus a radial mass effect and then inserts a tumor blob.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Geometry, Grid};
use crate::registration::DeformationField;

/// Phantom generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: Vec<usize>,
    pub spacing: f64,
    /// Cap on displacement magnitude in mm.
    pub max_disp: f64,
    /// Tumor radius range as a fraction of the smallest image extent.
    pub tumor_radius: [f64; 2],
    /// Additive tumor intensity range.
    pub tumor_contrast: [f64; 2],
    /// Relative jitter of shape parameters across subjects.
    pub shape_jitter: f64,
    /// Absolute jitter of tissue intensities across subjects.
    pub intensity_jitter: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::square(48)
    }
}

impl PhantomSpec {
    /// 2D phantom of `n x n` voxels.
    pub fn square(n: usize) -> Self {
        Self {
            dims: vec![n, n],
            spacing: 1.0,
            max_disp: 3.0,
            tumor_radius: [0.09, 0.15],
            tumor_contrast: [0.4, 0.7],
            shape_jitter: 0.05,
            intensity_jitter: 0.05,
        }
    }

    /// 3D phantom of `n^3` voxels.
    pub fn cube(n: usize) -> Self {
        Self {
            dims: vec![n, n, n],
            tumor_radius: [0.15, 0.22],
            ..Self::square(n)
        }
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(&self.dims, &vec![self.spacing; self.dims.len()])
    }

    fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.dims.len()) {
            return Err(Error::SpecInvalid("phantoms are 2D or 3D".into()));
        }
        if self.dims.iter().any(|&n| n < 32) {
            return Err(Error::SpecInvalid(format!(
                "every axis needs at least 32 voxels, got {:?}",
                self.dims
            )));
        }
        let ranges_ok = |r: [f64; 2]| r[0] >= 0.0 && r[1] >= r[0] && r[1].is_finite();
        if !(self.spacing > 0.0)
            || !(self.max_disp >= 0.0)
            || !ranges_ok(self.tumor_radius)
            || self.tumor_radius[0] <= 0.0
            || !ranges_ok(self.tumor_contrast)
            || !(self.shape_jitter >= 0.0)
            || !(self.intensity_jitter >= 0.0)
        {
            return Err(Error::SpecInvalid(
                "sizes and ranges must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipse {
    /// Signed distance proxy in units of the mean radius: negative inside.
    fn level(&self, p: [f64; 3], d: usize, folds: Option<&Folds>) -> f64 {
        let mut q = 0.0;
        for a in 0..d {
            let t = (p[a] - self.center[a]) / self.radii[a];
            q += t * t;
        }
        let mut r = q.sqrt();
        if let Some(f) = folds {
            let theta = (p[1] - self.center[1]).atan2(p[0] - self.center[0]);
            r /= 1.0 + f.amplitude * (f.count * theta + f.phase).sin();
        }
        let mean_radius = self.radii[..d].iter().sum::<f64>() / d as f64;
        (r - 1.0) * mean_radius
    }
}

#[derive(Debug, Clone, Copy)]
struct Folds {
    amplitude: f64,
    count: f64,
    phase: f64,
}

/// Parameters of one phantom draw, in mm relative to the image centre.
#[derive(Debug, Clone)]
struct Anatomy {
    d: usize,
    skull: Ellipse,
    brain: Ellipse,
    folds: Folds,
    white: Ellipse,
    ventricles: [Ellipse; 2],
    nucleus: Ellipse,
    intensity: [f64; 5],
    edge: f64,
}

const BASE_INTENSITY: [f64; 5] = [0.35, 0.55, 0.8, 0.15, 0.65];

impl Anatomy {
    fn template(extent: [f64; 3], d: usize) -> Self {
        let e = |c: [f64; 3], r: [f64; 3]| Ellipse {
            center: [c[0] * extent[0], c[1] * extent[1], c[2] * extent[2]],
            radii: [r[0] * extent[0], r[1] * extent[1], r[2] * extent[2]],
        };
        Self {
            d,
            skull: e([0.0; 3], [0.9, 0.94, 0.85]),
            brain: e([0.0; 3], [0.78, 0.84, 0.74]),
            folds: Folds {
                amplitude: 0.035,
                count: 11.0,
                phase: 0.0,
            },
            white: e([0.0, 0.02, 0.0], [0.55, 0.62, 0.5]),
            ventricles: [
                e([-0.14, -0.06, 0.0], [0.08, 0.24, 0.12]),
                e([0.14, -0.06, 0.0], [0.08, 0.24, 0.12]),
            ],
            nucleus: e([0.0, 0.36, 0.0], [0.16, 0.1, 0.12]),
            intensity: BASE_INTENSITY,
            edge: 0.6,
        }
    }

    fn jittered(extent: [f64; 3], d: usize, spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut a = Self::template(extent, d);
        let sj = spec.shape_jitter;
        let scale = extent[0].min(extent[1]);
        let jit = |e: &mut Ellipse, rng: &mut ChaCha8Rng| {
            for axis in 0..3 {
                e.center[axis] += rng.random_range(-1.0..=1.0) * sj * 0.3 * scale;
                e.radii[axis] *= 1.0 + rng.random_range(-1.0..=1.0) * sj;
            }
        };
        jit(&mut a.skull, rng);
        jit(&mut a.brain, rng);
        jit(&mut a.white, rng);
        for v in a.ventricles.iter_mut() {
            jit(v, rng);
        }
        jit(&mut a.nucleus, rng);
        a.folds.amplitude *= 1.0 + rng.random_range(-1.0..=1.0) * 4.0 * sj;
        a.folds.phase = rng.random_range(-1.0..=1.0) * 8.0 * sj;
        for v in a.intensity.iter_mut() {
            *v += rng.random_range(-1.0..=1.0) * spec.intensity_jitter;
        }
        a
    }

    /// Image intensity at a position relative to the image centre.
    fn value(&self, p: [f64; 3]) -> f64 {
        let d = self.d;
        let step = |e: &Ellipse, folds: Option<&Folds>| -> f64 {
            let s = e.level(p, d, folds) / self.edge;
            1.0 / (1.0 + s.exp())
        };
        let head = step(&self.skull, None);
        let brain = step(&self.brain, Some(&self.folds));
        let white = step(&self.white, None);
        let vent = step(&self.ventricles[0], None).max(step(&self.ventricles[1], None));
        let nucleus = step(&self.nucleus, None);
        let [skull_i, gray_i, white_i, vent_i, nuc_i] = self.intensity;
        let mut v = head * skull_i;
        v += brain * (gray_i - skull_i);
        v += brain * white * (white_i - gray_i);
        v += brain * nucleus * (nuc_i - white_i);
        v += brain * vent * (vent_i - white_i);
        v
    }
}

fn centre_and_extent(geom: &Geometry) -> ([f64; 3], [f64; 3]) {
    let mut centre = [0.0; 3];
    let mut extent = [1.0; 3];
    for (axis, (&n, &h)) in geom.dims().iter().zip(geom.spacing()).enumerate() {
        centre[axis] = (n as f64 - 1.0) * h / 2.0;
        extent[axis] = n as f64 * h / 2.0;
    }
    (centre, extent)
}

fn render(geom: &Geometry, anatomy: &Anatomy, displacement: Option<&DeformationField>) -> Grid {
    let (centre, _) = centre_and_extent(geom);
    let d = geom.ndim();
    let h = geom.spacing();
    Grid::from_fn(geom.clone(), |c| {
        let i = geom.index(&c[..d]);
        let u = displacement.map_or([0.0; 3], |f| f.at(i));
        let mut p = [0.0; 3];
        for a in 0..d {
            p[a] = c[a] as f64 * h[a] + u[a] - centre[a];
        }
        anatomy.value(p)
    })
}

/// The atlas: the un-jittered template phantom.
pub fn atlas_phantom(spec: &PhantomSpec) -> Result<Grid> {
    spec.validate()?;
    let geom = spec.geometry()?;
    let (_, extent) = centre_and_extent(&geom);
    Ok(render(&geom, &Anatomy::template(extent, geom.ndim()), None))
}

/// `n` atlas-aligned normal images drawn from the phantom family.
pub fn synth_population(seed: u64, n: usize, spec: &PhantomSpec) -> Result<Vec<Grid>> {
    spec.validate()?;
    let geom = spec.geometry()?;
    let (_, extent) = centre_and_extent(&geom);
    Ok((0..n)
        .into_par_iter()
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x5eed_0000 + j as u64));
            let anatomy = Anatomy::jittered(extent, geom.ndim(), spec, &mut rng);
            render(&geom, &anatomy, None)
        })
        .collect())
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the pair
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One synthetic test case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseBundle {
    /// Tumor-free subject image in image space.
    pub normal: Grid,
    /// The same subject before deformation, in atlas space.
    pub normal_atlas: Grid,
    pub tumor_mask: Grid,
    pub tumor_image: Grid,
    /// Atlas-to-image deformation (pull-back: image voxel `x` maps to atlas `x + u(x)`).
    pub gt_field: DeformationField,
    pub seed: u64,
}

/// Generates the case for `seed`.
pub fn synth_case(seed: u64, spec: &PhantomSpec) -> Result<CaseBundle> {
    spec.validate()?;
    let geom = spec.geometry()?;
    let d = geom.ndim();
    let m = geom.len();
    let (centre, extent) = centre_and_extent(&geom);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xca5e));
    let anatomy = Anatomy::jittered(extent, d, spec, &mut rng);
    let h = geom.spacing();
    let pos = |i: usize| {
        let c = geom.coords(i);
        let mut p = [0.0; 3];
        for a in 0..d {
            p[a] = c[a] as f64 * h[a];
        }
        p
    };

    // Smooth background deformation: a few Gaussian bumps.
    let bumps = rng.random_range(2..=5);
    let min_extent = extent[..d].iter().copied().fold(f64::INFINITY, f64::min);
    let mut comps = vec![vec![0.0; m]; d];
    for _ in 0..bumps {
        let mut c = [0.0; 3];
        let mut amp = [0.0; 3];
        for a in 0..d {
            c[a] = centre[a] + rng.random_range(-0.6..0.6) * extent[a];
            amp[a] = rng.random_range(-1.0..1.0);
        }
        let width = rng.random_range(0.25..0.45) * min_extent;
        for (i, _) in (0..m).enumerate() {
            let p = pos(i);
            let r2: f64 = (0..d).map(|a| (p[a] - c[a]).powi(2)).sum();
            let g = (-r2 / (2.0 * width * width)).exp();
            for a in 0..d {
                comps[a][i] += amp[a] * g;
            }
        }
    }
    let peak = (0..m)
        .map(|i| (0..d).map(|a| comps[a][i].powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let target = 0.6 * spec.max_disp;
    if peak > 0.0 {
        for comp in comps.iter_mut() {
            comp.iter_mut().for_each(|v| *v *= target / peak);
        }
    }

    // Tumor placed inside the white matter region of the image.
    let radius = rng.random_range(spec.tumor_radius[0]..=spec.tumor_radius[1]) * 2.0 * min_extent;
    let mut tc = [0.0; 3];
    let angle = rng.random_range(0.0..2.0 * PI);
    let dist = rng.random_range(0.15..0.4);
    tc[0] = centre[0] + dist * angle.cos() * extent[0];
    tc[1] = centre[1] + dist * angle.sin() * extent[1];
    if d == 3 {
        tc[2] = centre[2] + rng.random_range(-0.2..0.2) * extent[2];
    }
    let contrast = rng.random_range(spec.tumor_contrast[0]..=spec.tumor_contrast[1]);
    let push = (0.5 * radius).min(spec.max_disp);

    // Radial mass effect: image voxels near the tumor sample the atlas closer to its centre.
    for i in 0..m {
        let p = pos(i);
        let delta: Vec<f64> = (0..d).map(|a| p[a] - tc[a]).collect();
        let dist = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        if dist == 0.0 || dist >= 2.0 * radius {
            continue;
        }
        let mag = if dist < radius {
            push * dist / radius
        } else {
            let s = (dist - radius) / radius;
            let taper = 0.5 * (1.0 + (PI * s).cos());
            push * (-(s * s) / (2.0 * 0.25)).exp() * taper
        };
        for a in 0..d {
            comps[a][i] -= mag * delta[a] / dist;
        }
    }
    for i in 0..m {
        let norm = (0..d).map(|a| comps[a][i].powi(2)).sum::<f64>().sqrt();
        if norm > spec.max_disp {
            for comp in comps.iter_mut() {
                comp[i] *= spec.max_disp / norm;
            }
        }
    }
    let gt_field = DeformationField::from_components(geom.clone(), comps)?;

    let normal_atlas = render(&geom, &anatomy, None);
    let normal = render(&geom, &anatomy, Some(&gt_field));
    let mut mask = vec![0.0; m];
    let mut tumor = normal.data().to_vec();
    for i in 0..m {
        let p = pos(i);
        let dist = (0..d).map(|a| (p[a] - tc[a]).powi(2)).sum::<f64>().sqrt();
        if dist <= radius {
            mask[i] = 1.0;
            let w = ((radius - dist) / 1.5).clamp(0.0, 1.0);
            tumor[i] += contrast * w;
        }
    }
    Ok(CaseBundle {
        normal,
        normal_atlas,
        tumor_mask: Grid::from_vec(geom.clone(), mask)?,
        tumor_image: Grid::from_vec(geom, tumor)?,
        gt_field,
        seed,
    })
}

/// Evaluation region of a voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    Tumor,
    Near,
    Far,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Tumor, Region::Near, Region::Far];

    /// Relative weight in the combined score.
    pub fn weight(self) -> f64 {
        match self {
            Region::Tumor => 4.0,
            Region::Near | Region::Far => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Tumor => "tumor",
            Region::Near => "near",
            Region::Far => "far",
        }
    }

    fn code(self) -> f64 {
        match self {
            Region::Tumor => 0.0,
            Region::Near => 1.0,
            Region::Far => 2.0,
        }
    }

    fn from_code(v: f64) -> Option<Self> {
        match v.round() as i64 {
            0 => Some(Region::Tumor),
            1 => Some(Region::Near),
            2 => Some(Region::Far),
            _ => None,
        }
    }
}

/// Default near/far split distance in mm.
pub const NEAR_MM: f64 = 10.0;

/// Exhaustive tumor/near/far labelling of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionLabels {
    geom: Geometry,
    labels: Vec<Region>,
}

impl RegionLabels {
    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn labels(&self) -> &[Region] {
        &self.labels
    }

    pub fn count(&self, region: Region) -> usize {
        self.labels.iter().filter(|&&r| r == region).count()
    }

    /// Labels as a grid of codes (0 tumor, 1 near, 2 far).
    pub fn to_grid(&self) -> Grid {
        Grid::zeros(self.geom.clone()).with_data(self.labels.iter().map(|r| r.code()).collect())
    }

    pub fn from_grid(grid: &Grid) -> Result<Self> {
        let labels = grid
            .data()
            .iter()
            .map(|&v| {
                Region::from_code(v).ok_or_else(|| Error::Invalid(format!("bad region code {v}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            geom: grid.geometry().clone(),
            labels,
        })
    }
}

/// Squared Euclidean distance (mm²) from each voxel to the nearest voxel
/// with `mask > 0.5`, by the separable lower-envelope transform.
pub fn squared_distance_transform(mask: &Grid) -> Vec<f64> {
    let geom = mask.geometry();
    let inf = f64::INFINITY;
    let mut dist: Vec<f64> = mask
        .data()
        .iter()
        .map(|&v| if v > 0.5 { 0.0 } else { inf })
        .collect();
    let strides = geom.strides();
    for (axis, &n) in geom.dims().iter().enumerate() {
        let h = geom.spacing()[axis];
        let stride = strides[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        for start in 0..dist.len() {
            if (start / stride) % n != 0 {
                continue;
            }
            for (k, v) in line.iter_mut().enumerate() {
                *v = dist[start + k * stride];
            }
            envelope_1d(&line, h, &mut out);
            for (k, &v) in out.iter().enumerate() {
                dist[start + k * stride] = v;
            }
        }
    }
    dist
}

/// `out[q] = min_p f[p] + (h (q - p))²`.
fn envelope_1d(f: &[f64], h: f64, out: &mut [f64]) {
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|&p| f[p].is_finite()).collect();
    if finite.is_empty() {
        out.iter_mut().for_each(|v| *v = f64::INFINITY);
        return;
    }
    let h2 = h * h;
    let x = |p: usize| p as f64;
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for &q in &finite {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    z.push(f64::INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = ((f[q] / h2 + x(q) * x(q)) - (f[p] / h2 + x(p) * x(p)))
                        / (2.0 * (x(q) - x(p)));
                    if s <= z[z.len() - 2] {
                        v.pop();
                        z.pop();
                        if v.is_empty() {
                            continue;
                        }
                    } else {
                        z.pop();
                        z.push(s);
                        z.push(f64::INFINITY);
                        v.push(q);
                        break;
                    }
                }
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < x(q) {
            k += 1;
        }
        let p = v[k];
        *o = h2 * (x(q) - x(p)).powi(2) + f[p];
    }
}

/// Splits the grid into tumor, near (within `near_mm`) and far voxels.
pub fn region_partition(tumor_mask: &Grid, near_mm: f64) -> Result<RegionLabels> {
    if !(near_mm > 0.0) {
        return Err(Error::Invalid(format!(
            "near_mm must be positive, got {near_mm}"
        )));
    }
    let d2 = squared_distance_transform(tumor_mask);
    let limit = near_mm * near_mm;
    let labels = tumor_mask
        .data()
        .iter()
        .zip(&d2)
        .map(|(&m, &dist)| {
            if m > 0.5 {
                Region::Tumor
            } else if dist <= limit * (1.0 + 1e-12) {
                Region::Near
            } else {
                Region::Far
            }
        })
        .collect();
    Ok(RegionLabels {
        geom: tumor_mask.geometry().clone(),
        labels,
    })
}

/// Mean registration error per region.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub case_id: String,
    pub method_id: String,
    /// Indexed like [`Region::ALL`]; `None` for a region without voxels.
    pub mean_error_mm: [Option<f64>; 3],
    /// 4:1:1 weighted mean over the regions that have voxels.
    pub weighted: f64,
}

impl ErrorReport {
    pub fn region(&self, region: Region) -> Option<f64> {
        self.mean_error_mm[region as usize]
    }
}

/// Combines per-region errors with the 4:1:1 weights, skipping missing regions.
pub fn weighted_error(errors: &[Option<f64>; 3]) -> f64 {
    let (num, den) = Region::ALL
        .iter()
        .zip(errors)
        .filter_map(|(r, e)| e.map(|e| (r.weight() * e, r.weight())))
        .fold((0.0, 0.0), |(n, d), (a, b)| (n + a, d + b));
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Mean Euclidean distance between `field` and `gt` over each region.
pub fn deformation_error(
    field: &DeformationField,
    gt: &DeformationField,
    regions: &RegionLabels,
) -> Result<ErrorReport> {
    field
        .geometry()
        .ensure_same(gt.geometry(), "field vs ground truth")?;
    field
        .geometry()
        .ensure_same(regions.geometry(), "field vs regions")?;
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    let d = field.ndim();
    for (i, &region) in regions.labels().iter().enumerate() {
        let a = field.at(i);
        let b = gt.at(i);
        let e = (0..d).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt();
        sums[region as usize] += e;
        counts[region as usize] += 1;
    }
    let mean_error_mm = [0, 1, 2].map(|r| (counts[r] > 0).then(|| sums[r] / counts[r] as f64));
    Ok(ErrorReport {
        case_id: String::new(),
        method_id: String::new(),
        weighted: weighted_error(&mean_error_mm),
        mean_error_mm,
    })
}

/// Dice overlap of two binary grids (1.0 when both are empty).
pub fn dice(a: &Grid, b: &Grid) -> Result<f64> {
    a.geometry().ensure_same(b.geometry(), "dice")?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x > 0.5, y > 0.5);
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Outcome of one cross-validation fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldReport {
    pub fold: usize,
    pub selected: f64,
    /// Mean weighted error on the training cases under `selected`.
    pub train_error: f64,
    /// Test-case reports under `selected`.
    pub test: Vec<ErrorReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    pub best_param: f64,
    pub folds: Vec<FoldReport>,
}

/// K-fold parameter selection.
///
/// Case `i` belongs to fold `i % folds`. Every (case, parameter) pair is
/// evaluated once (in parallel); each fold then picks the parameter with
/// the smallest mean weighted training error (ties to the smaller value),
/// and `best_param` is the value picked most often (ties to the smaller).
pub fn cross_validate<F>(
    cases: &[CaseBundle],
    grid: &[f64],
    folds: usize,
    evaluate: F,
) -> Result<CrossValidation>
where
    F: Fn(&CaseBundle, f64) -> Result<ErrorReport> + Sync,
{
    if folds < 2 {
        return Err(Error::Invalid("need at least 2 folds".into()));
    }
    if cases.len() < folds {
        return Err(Error::Invalid(format!(
            "{} cases cannot fill {folds} folds",
            cases.len()
        )));
    }
    if grid.is_empty() {
        return Err(Error::Invalid("empty parameter grid".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..cases.len())
        .flat_map(|c| (0..grid.len()).map(move |g| (c, g)))
        .collect();
    let results: Vec<ErrorReport> = jobs
        .par_iter()
        .map(|&(c, g)| {
            evaluate(&cases[c], grid[g])
                .map_err(|e| e.context(format!("case seed {} param {}", cases[c].seed, grid[g])))
        })
        .collect::<Result<_>>()?;
    let at = |c: usize, g: usize| &results[c * grid.len() + g];

    let mut reports = Vec::with_capacity(folds);
    for fold in 0..folds {
        let train: Vec<usize> = (0..cases.len()).filter(|c| c % folds != fold).collect();
        let test: Vec<usize> = (0..cases.len()).filter(|c| c % folds == fold).collect();
        let mut best: Option<(usize, f64)> = None;
        for g in 0..grid.len() {
            let err = train.iter().map(|&c| at(c, g).weighted).sum::<f64>() / train.len() as f64;
            let better = match best {
                None => true,
                Some((bg, be)) => err < be || (err == be && grid[g] < grid[bg]),
            };
            if better {
                best = Some((g, err));
            }
        }
        let (g, train_error) = best.expect("non-empty grid");
        reports.push(FoldReport {
            fold,
            selected: grid[g],
            train_error,
            test: test.iter().map(|&c| at(c, g).clone()).collect(),
        });
    }

    let mut best_param = reports[0].selected;
    let mut best_count = 0;
    for &value in grid {
        let count = reports.iter().filter(|r| r.selected == value).count();
        if count > best_count || (count == best_count && count > 0 && value < best_param) {
            best_param = value;
            best_count = count;
        }
    }
    Ok(CrossValidation {
        best_param,
        folds: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(dims: &[usize]) -> Geometry {
        Geometry::isotropic(dims).unwrap()
    }

    #[test]
    fn same_seed_same_case() {
        let spec = PhantomSpec::square(32);
        assert_eq!(synth_case(7, &spec).unwrap(), synth_case(7, &spec).unwrap());
        assert_ne!(
            synth_case(7, &spec).unwrap().tumor_image,
            synth_case(8, &spec).unwrap().tumor_image
        );
    }

    #[test]
    fn zero_contrast_means_no_tumor_intensity() {
        let spec = PhantomSpec {
            tumor_contrast: [0.0, 0.0],
            ..PhantomSpec::square(32)
        };
        let case = synth_case(3, &spec).unwrap();
        assert_eq!(case.tumor_image, case.normal);
        assert!(case.tumor_mask.data().iter().any(|&v| v == 1.0));
    }

    #[test]
    fn tumor_only_changes_masked_voxels() {
        let case = synth_case(4, &PhantomSpec::square(40)).unwrap();
        for i in 0..case.normal.len() {
            if case.tumor_mask.data()[i] == 0.0 {
                assert_eq!(case.tumor_image.data()[i], case.normal.data()[i]);
            }
        }
        let max = (0..case.gt_field.len())
            .map(|i| case.gt_field.magnitude(i))
            .fold(0.0, f64::max);
        assert!(max <= 3.0 + 1e-9);
    }

    #[test]
    fn ground_truth_is_consistent() {
        for seed in 0..4 {
            let case = synth_case(seed, &PhantomSpec::square(48)).unwrap();
            let warped = crate::registration::warp(&case.normal_atlas, &case.gt_field).unwrap();
            let mse = warped.sub(&case.normal).unwrap().norm2().powi(2) / warped.len() as f64;
            assert!(mse < 1e-3, "seed {seed}: mse {mse}");
            let frac = case.tumor_mask.data().iter().sum::<f64>() / case.tumor_mask.len() as f64;
            assert!(
                (0.01..=0.10).contains(&frac),
                "seed {seed}: fraction {frac}"
            );
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(
            synth_case(0, &PhantomSpec::square(16)),
            Err(Error::SpecInvalid(_))
        ));
        let bad = PhantomSpec {
            spacing: 0.0,
            ..PhantomSpec::square(32)
        };
        assert!(matches!(synth_case(0, &bad), Err(Error::SpecInvalid(_))));
    }

    #[test]
    fn empty_mask_is_all_far() {
        let labels = region_partition(&Grid::zeros(geom(&[6, 6])), 10.0).unwrap();
        assert_eq!(labels.count(Region::Far), 36);
    }

    #[test]
    fn single_voxel_neighbourhood() {
        let mut mask = Grid::zeros(geom(&[7, 7]));
        mask.data_mut()[3 + 7 * 3] = 1.0;
        let labels = region_partition(&mask, 1.5).unwrap();
        assert_eq!(labels.count(Region::Tumor), 1);
        assert_eq!(labels.count(Region::Near), 8);
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                let i = (3 + dx) as usize + 7 * (3 + dy) as usize;
                let expect = if dx == 0 && dy == 0 {
                    Region::Tumor
                } else {
                    Region::Near
                };
                assert_eq!(labels.labels()[i], expect);
            }
        }
    }

    #[test]
    fn distance_transform_handles_anisotropy() {
        let g = Geometry::new(&[5, 5], &[1.0, 2.0]).unwrap();
        let mut mask = Grid::zeros(g);
        mask.data_mut()[0] = 1.0;
        let d2 = squared_distance_transform(&mask);
        assert_eq!(d2[4], 16.0);
        assert_eq!(d2[5 * 2], 16.0);
        assert_eq!(d2[3 + 5 * 1], 9.0 + 4.0);
    }

    #[test]
    fn weighted_examples() {
        let w = weighted_error(&[Some(2.0), Some(1.0), Some(1.0)]);
        assert_eq!(w, 10.0 / 6.0);
        assert_eq!(weighted_error(&[None, None, Some(3.0)]), 3.0);
    }

    #[test]
    fn deformation_error_examples() {
        let g = geom(&[8, 8]);
        let gt = DeformationField::from_components(
            g.clone(),
            vec![(0..64).map(|i| i as f64 * 0.1).collect(), vec![0.5; 64]],
        )
        .unwrap();
        let mut mask = Grid::zeros(g.clone());
        mask.data_mut()[9] = 1.0;
        let regions = region_partition(&mask, 2.0).unwrap();
        let same = deformation_error(&gt, &gt, &regions).unwrap();
        assert_eq!(same.mean_error_mm, [Some(0.0); 3]);
        assert_eq!(same.weighted, 0.0);
        let mut shifted = gt.clone();
        shifted.component_mut(0).iter_mut().for_each(|v| *v += 1.0);
        let e = deformation_error(&shifted, &gt, &regions).unwrap();
        for r in e.mean_error_mm {
            assert!((r.unwrap() - 1.0).abs() < 1e-12);
        }
        assert!((e.weighted - 1.0).abs() < 1e-12);

        let empty = region_partition(&Grid::zeros(g), 2.0).unwrap();
        let e = deformation_error(&shifted, &gt, &empty).unwrap();
        assert_eq!(e.region(Region::Tumor), None);
        assert_eq!(e.region(Region::Near), None);
    }

    #[test]
    fn dice_examples() {
        let g = geom(&[5, 2]);
        let mk = |on: &[usize]| {
            let mut m = Grid::zeros(g.clone());
            for &i in on {
                m.data_mut()[i] = 1.0;
            }
            m
        };
        let a = mk(&[0, 1, 2]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &mk(&[5, 6])).unwrap(), 0.0);
        assert_eq!(
            dice(&mk(&[0, 1, 2, 3]), &mk(&[1, 2, 3, 4, 5, 6])).unwrap(),
            0.6
        );
        assert_eq!(dice(&mk(&[]), &mk(&[])).unwrap(), 1.0);
        assert!(dice(&a, &Grid::zeros(geom(&[2, 5]))).is_err());
    }

    fn fake_report(weighted: f64) -> ErrorReport {
        ErrorReport {
            case_id: String::new(),
            method_id: String::new(),
            mean_error_mm: [Some(weighted); 3],
            weighted,
        }
    }

    #[test]
    fn cross_validation_selection() {
        let spec = PhantomSpec::square(32);
        let cases: Vec<CaseBundle> = (0..2).map(|s| synth_case(s, &spec).unwrap()).collect();
        let one = cross_validate(&cases, &[1.5], 2, |_, _| Ok(fake_report(1.0))).unwrap();
        assert_eq!(one.best_param, 1.5);
        assert!(one.folds.iter().all(|f| f.selected == 1.5));

        let cv = cross_validate(&cases, &[2.0, 0.5], 2, |_, p| {
            Ok(fake_report(if p == 2.0 { 0.1 } else { 0.9 }))
        })
        .unwrap();
        assert_eq!(cv.best_param, 2.0);

        let tie = cross_validate(&cases, &[3.0, 1.0], 2, |_, _| Ok(fake_report(0.5))).unwrap();
        assert_eq!(tie.best_param, 1.0);

        assert!(cross_validate(&cases, &[1.0], 3, |_, _| Ok(fake_report(0.0))).is_err());
        assert!(cross_validate(&cases, &[], 2, |_, _| Ok(fake_report(0.0))).is_err());
    }

    fn random_mask(seed: u64, g: &Geometry, p: f64) -> Grid {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Grid::from_fn(g.clone(), |_| if rng.random_bool(p) { 1.0 } else { 0.0 })
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        for (seed, spacing) in [(1, [1.0, 1.0]), (2, [0.7, 1.9]), (3, [2.5, 1.0])] {
            let g = Geometry::new(&[24, 24], &spacing).unwrap();
            let mask = random_mask(seed, &g, 0.03);
            let on: Vec<[usize; 3]> = (0..g.len())
                .filter(|&i| mask.data()[i] > 0.5)
                .map(|i| g.coords(i))
                .collect();
            let d2 = squared_distance_transform(&mask);
            for i in 0..g.len() {
                let c = g.coords(i);
                let brute = on
                    .iter()
                    .map(|o| {
                        let dx = (c[0] as f64 - o[0] as f64) * spacing[0];
                        let dy = (c[1] as f64 - o[1] as f64) * spacing[1];
                        dx * dx + dy * dy
                    })
                    .fold(f64::INFINITY, f64::min);
                assert!(
                    (d2[i] - brute).abs() <= 1e-9 * brute.max(1.0),
                    "seed {seed} voxel {i}"
                );
            }
        }
    }

    #[test]
    fn tumor_volume_fraction_over_seeds() {
        let spec = PhantomSpec::square(48);
        for seed in 0..20 {
            let case = synth_case(seed, &spec).unwrap();
            let frac = case.tumor_mask.data().iter().sum::<f64>() / case.tumor_mask.len() as f64;
            assert!(
                (0.01..=0.10).contains(&frac),
                "seed {seed}: fraction {frac}"
            );
        }
    }

    #[test]
    fn cross_validation_ignores_order_within_folds() {
        let spec = PhantomSpec::square(32);
        let cases: Vec<CaseBundle> = (0..6).map(|s| synth_case(s, &spec).unwrap()).collect();
        let score = |c: &CaseBundle, p: f64| Ok(fake_report((p - 0.3 * c.seed as f64).abs()));
        let base = cross_validate(&cases, &[0.0, 0.5, 1.0, 1.5], 3, score).unwrap();
        // a shift by one full round of folds keeps every case in its fold
        let mut shifted = cases.clone();
        shifted.rotate_left(3);
        let other = cross_validate(&shifted, &[0.0, 0.5, 1.0, 1.5], 3, score).unwrap();
        assert_eq!(base.best_param, other.best_param);
        for (a, b) in base.folds.iter().zip(&other.folds) {
            assert_eq!(a.selected, b.selected);
            assert!((a.train_error - b.train_error).abs() < 1e-12);
            let mut ta: Vec<f64> = a.test.iter().map(|r| r.weighted).collect();
            let mut tb: Vec<f64> = b.test.iter().map(|r| r.weighted).collect();
            ta.sort_by(f64::total_cmp);
            tb.sort_by(f64::total_cmp);
            assert_eq!(ta, tb);
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]

        #[test]
        fn near_set_grows_with_radius(seed in proptest::prelude::any::<u64>(), r in 0.5f64..6.0, extra in 0.0f64..6.0) {
            let g = Geometry::new(&[20, 17], &[1.0, 1.3]).unwrap();
            let mask = random_mask(seed, &g, 0.02);
            let small = region_partition(&mask, r).unwrap();
            let large = region_partition(&mask, r + extra).unwrap();
            for (a, b) in small.labels().iter().zip(large.labels()) {
                proptest::prop_assert_eq!(*a == Region::Tumor, *b == Region::Tumor);
                if *a == Region::Near {
                    proptest::prop_assert_eq!(*b, Region::Near);
                }
            }
        }

        #[test]
        fn constant_offset_error_is_direct_mean(seed in proptest::prelude::any::<u64>(), cx in -3.0f64..3.0, cy in -3.0f64..3.0) {
            use rand::{Rng, SeedableRng};
            let g = geom(&[12, 10]);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut comp = || (0..g.len()).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
            let gt = DeformationField::from_components(g.clone(), vec![comp(), comp()]).unwrap();
            let field = DeformationField::from_components(g.clone(), vec![comp(), comp()]).unwrap();
            let mut moved = field.clone();
            moved.component_mut(0).iter_mut().for_each(|v| *v += cx);
            moved.component_mut(1).iter_mut().for_each(|v| *v += cy);
            let regions = region_partition(&random_mask(seed ^ 1, &g, 0.1), 2.0).unwrap();
            let e = deformation_error(&moved, &gt, &regions).unwrap();
            for region in Region::ALL {
                let idx: Vec<usize> = (0..g.len()).filter(|&i| regions.labels()[i] == region).collect();
                if idx.is_empty() {
                    proptest::prop_assert_eq!(e.region(region), None);
                    continue;
                }
                let direct = idx
                    .iter()
                    .map(|&i| {
                        let dx = field.component(0)[i] - gt.component(0)[i] + cx;
                        let dy = field.component(1)[i] - gt.component(1)[i] + cy;
                        (dx * dx + dy * dy).sqrt()
                    })
                    .sum::<f64>()
                    / idx.len() as f64;
                proptest::prop_assert!((e.region(region).unwrap() - direct).abs() <= 1e-12 * direct.max(1.0));
            }
        }
    }
}
