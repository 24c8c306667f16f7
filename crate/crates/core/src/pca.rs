//! PCA appearance model of atlas-aligned normal images.
//!
//! The basis stands in for the low-rank component: a mean image plus `k`
//! orthonormal modes. Pathological images are then explained as
//! `mean + modes * alpha` plus whatever the decomposition assigns to the
//! abnormal part.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use serde::{Deserialize, Serialize};

use crate::error::{parse_failure, Error, Result};
use crate::grid::{Geometry, Grid};
use crate::pfg;

/// Singular values below this fraction of the largest count as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Mode count used for 2D populations.
pub const PAPER_MODES_2D: usize = 150;
/// Mode count used for 3D populations.
pub const PAPER_MODES_3D: usize = 50;

const FORMAT_VERSION: u32 = 1;
const SIGN_CONVENTION: &str = "largest-abs-positive";

/// Mean image plus orthonormal modes.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    mean: Grid,
    /// `m x k`, one mode per column.
    modes: DMatrix<f64>,
    singular_values: Vec<f64>,
    source_count: usize,
}

/// Mode weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients(pub Vec<f64>);

impl Coefficients {
    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// What to do at voxels that are masked in every image during imputation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImputeFallback {
    /// Use the mean of every unmasked voxel in the population.
    #[default]
    GlobalMean,
    /// Fail with [`Error::AllMasked`].
    Error,
}

impl std::str::FromStr for ImputeFallback {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "global-mean" => Ok(Self::GlobalMean),
            "error" => Ok(Self::Error),
            other => Err(format!("unknown imputation fallback {other:?}")),
        }
    }
}

fn check_stack(images: &[Grid]) -> Result<&Geometry> {
    let first = images
        .first()
        .ok_or_else(|| Error::Invalid("empty image stack".into()))?;
    for (j, img) in images.iter().enumerate().skip(1) {
        first
            .geometry()
            .ensure_same(img.geometry(), &format!("image {j}"))?;
    }
    Ok(first.geometry())
}

/// Builds a `k`-mode basis from `images`.
///
/// Modes are the leading left singular vectors of the mean-centred data
/// matrix, computed through a thin QR factorisation followed by an SVD of
/// the small `n x n` factor so memory stays `O(m n)`.
pub fn build_basis(images: &[Grid], k: usize) -> Result<PcaBasis> {
    let geom = check_stack(images)?.clone();
    let n = images.len();
    if n < 2 {
        return Err(Error::Invalid(format!("need at least 2 images, got {n}")));
    }
    if k == 0 || k > n - 1 {
        return Err(Error::Invalid(format!(
            "mode count {k} must lie in 1..={}",
            n - 1
        )));
    }
    let m = geom.len();
    let mut mean = vec![0.0; m];
    for img in images {
        for (acc, &v) in mean.iter_mut().zip(img.data()) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);

    let centered = DMatrix::from_fn(m, n, |i, j| images[j].data()[i] - mean[i]);
    let (u, sigma) = thin_left_svd(centered)?;

    let s1 = sigma.first().copied().unwrap_or(0.0);
    let floor = RANK_TOLERANCE * s1;
    let rank = if s1 > 0.0 {
        sigma.iter().take_while(|&&s| s >= floor).count()
    } else {
        0
    };
    if k > rank {
        return Err(Error::RankDeficient {
            requested: k,
            rank,
            floor,
        });
    }

    let mut modes = u.columns(0, k).into_owned();
    for mut col in modes.column_iter_mut() {
        // Deterministic sign: the largest-magnitude entry is positive.
        let (mut best, mut best_abs) = (0.0, -1.0);
        for &v in col.iter() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = v;
            }
        }
        if best < 0.0 {
            col.neg_mut();
        }
    }

    Ok(PcaBasis {
        mean: Grid::from_vec(geom, mean)?,
        modes,
        singular_values: sigma[..k].to_vec(),
        source_count: n,
    })
}

/// Left singular vectors and singular values (descending) of `x`.
pub(crate) fn thin_left_svd(x: DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let svd = crate::svd::thin_svd(&x)?;
    Ok((svd.u, svd.sigma))
}

impl PcaBasis {
    /// Assembles a basis from parts, checking shapes and orthonormality.
    pub fn from_parts(
        mean: Grid,
        modes: DMatrix<f64>,
        singular_values: Vec<f64>,
        source_count: usize,
    ) -> Result<Self> {
        if modes.nrows() != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "modes have {} rows, mean has {} voxels",
                modes.nrows(),
                mean.len()
            )));
        }
        if singular_values.len() != modes.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} singular values for {} modes",
                singular_values.len(),
                modes.ncols()
            )));
        }
        Ok(Self {
            mean,
            modes,
            singular_values,
            source_count,
        })
    }

    /// A basis with no modes: the decomposition then reduces to plain TV denoising.
    pub fn mean_only(mean: Grid) -> Self {
        let m = mean.len();
        Self {
            mean,
            modes: DMatrix::zeros(m, 0),
            singular_values: Vec::new(),
            source_count: 0,
        }
    }

    pub fn mean(&self) -> &Grid {
        &self.mean
    }

    pub fn modes(&self) -> &DMatrix<f64> {
        &self.modes
    }

    pub fn mode(&self, l: usize) -> Grid {
        self.mean
            .with_data(self.modes.column(l).iter().copied().collect())
    }

    pub fn k(&self) -> usize {
        self.modes.ncols()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn source_count(&self) -> usize {
        self.source_count
    }

    pub fn geometry(&self) -> &Geometry {
        self.mean.geometry()
    }

    /// Bytes held by the mean and the modes.
    pub fn bytes(&self) -> usize {
        8 * (self.mean.len() + self.modes.len())
    }

    /// `B^T x` for a flat voxel vector.
    pub(crate) fn coefficients_of(&self, x: &[f64]) -> Vec<f64> {
        self.modes
            .column_iter()
            .map(|col| crate::grid::dot(col.as_slice(), x))
            .collect()
    }

    /// `B alpha` as a flat voxel vector.
    pub(crate) fn combine(&self, alpha: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.mean.len()];
        for (col, &a) in self.modes.column_iter().zip(alpha) {
            if a == 0.0 {
                continue;
            }
            for (o, &b) in out.iter_mut().zip(col.iter()) {
                *o += a * b;
            }
        }
        out
    }

    /// In-place `x <- x - B B^T x`.
    pub(crate) fn remove_span(&self, x: &mut [f64]) {
        let alpha = self.coefficients_of(x);
        for (col, &a) in self.modes.column_iter().zip(&alpha) {
            for (o, &b) in x.iter_mut().zip(col.as_slice()) {
                *o -= a * b;
            }
        }
    }

    /// Least-squares coefficients of `image - mean`.
    pub fn project(&self, image: &Grid) -> Result<Coefficients> {
        self.mean
            .geometry()
            .ensure_same(image.geometry(), "project")?;
        let centered: Vec<f64> = image
            .data()
            .iter()
            .zip(self.mean.data())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Coefficients(self.coefficients_of(&centered)))
    }

    /// `mean + B alpha`.
    pub fn reconstruct(&self, alpha: &Coefficients) -> Result<Grid> {
        if alpha.len() != self.k() {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficients for {} modes",
                alpha.len(),
                self.k()
            )));
        }
        let mut out = self.combine(alpha.as_slice());
        for (o, &m) in out.iter_mut().zip(self.mean.data()) {
            *o += m;
        }
        Ok(self.mean.with_data(out))
    }

    /// Writes `mean.pfg`, `modes.pfg` and `meta` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        pfg::write_grid(&dir.join("mean.pfg"), &self.mean)?;
        let cols: Vec<&[f64]> = (0..self.k())
            .map(|l| {
                let start = l * self.modes.nrows();
                &self.modes.as_slice()[start..start + self.modes.nrows()]
            })
            .collect();
        pfg::write(&dir.join("modes.pfg"), self.mean.geometry(), &cols)?;
        let sv: Vec<String> = self
            .singular_values
            .iter()
            .map(|s| format!("{s:e}"))
            .collect();
        let meta = format!(
            "format: {FORMAT_VERSION}\nk: {}\nn: {}\nsign: {SIGN_CONVENTION}\nsingular_values: {}\n",
            self.k(),
            self.source_count,
            sv.join(" ")
        );
        pfg::write_atomic(&dir.join("meta"), meta.as_bytes())
    }

    /// Loads a basis saved by [`PcaBasis::save`].
    ///
    /// Modes are stored in single precision, so they are re-orthonormalised
    /// with one modified Gram-Schmidt pass after reading.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta");
        let meta = fs::read_to_string(&meta_path)?;
        let mut k = None;
        let mut n = None;
        let mut sv = None;
        for line in meta.lines() {
            let Some((key, value)) = line.split_once(':') else {
                continue;
            };
            let value = value.trim();
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| parse_failure(&meta_path, format!("bad {key}: {v:?}")))
            };
            match key.trim() {
                "format" => {
                    if num(value)? as u32 != FORMAT_VERSION {
                        return Err(parse_failure(&meta_path, "unsupported format version"));
                    }
                }
                "k" => k = Some(num(value)?),
                "n" => n = Some(num(value)?),
                "sign" => {}
                "singular_values" => {
                    sv = Some(
                        value
                            .split_whitespace()
                            .map(|t| t.parse::<f64>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|e| parse_failure(&meta_path, e.to_string()))?,
                    )
                }
                other => return Err(parse_failure(&meta_path, format!("unknown key {other}"))),
            }
        }
        let (k, n, sv) = match (k, n, sv) {
            (Some(k), Some(n), Some(sv)) => (k, n, sv),
            _ => return Err(parse_failure(&meta_path, "missing k, n or singular_values")),
        };
        let mean = pfg::read_grid(&dir.join("mean.pfg"))?;
        let modes_path = dir.join("modes.pfg");
        let data = pfg::read(&modes_path)?;
        mean.geometry().ensure_same(&data.geometry, "modes")?;
        if data.channels.len() != k {
            return Err(parse_failure(
                &modes_path,
                format!("expected {k} modes, found {}", data.channels.len()),
            ));
        }
        let m = mean.len();
        let mut modes = DMatrix::from_fn(m, k, |i, j| data.channels[j][i]);
        gram_schmidt(&mut modes);
        Self::from_parts(mean, modes, sv, n)
    }
}

fn gram_schmidt(modes: &mut DMatrix<f64>) {
    for j in 0..modes.ncols() {
        for i in 0..j {
            let proj = modes.column(i).dot(&modes.column(j));
            let ci: DVector<f64> = modes.column(i).into_owned();
            modes.column_mut(j).axpy(-proj, &ci, 1.0);
        }
        let norm = modes.column(j).norm();
        if norm > 0.0 {
            modes.column_mut(j).scale_mut(1.0 / norm);
        }
    }
}

/// Rescales each image independently to the range [0, 1].
pub fn rescale_unit(images: &[Grid]) -> Vec<Grid> {
    images
        .iter()
        .map(|img| {
            let lo = img.data().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = img.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                img.map(|v| (v - lo) / (hi - lo))
            } else {
                img.map(|_| 0.0)
            }
        })
        .collect()
}

/// Replaces masked voxels by the mean over the images unmasked at that voxel.
///
/// A mask value above 0.5 marks a pathological voxel.
pub fn impute_population(
    images: &[Grid],
    masks: &[Grid],
    fallback: ImputeFallback,
) -> Result<Vec<Grid>> {
    let geom = check_stack(images)?;
    if masks.len() != images.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} masks for {} images",
            masks.len(),
            images.len()
        )));
    }
    for (j, mask) in masks.iter().enumerate() {
        geom.ensure_same(mask.geometry(), &format!("mask {j}"))?;
    }
    let masked = |j: usize, v: usize| masks[j].data()[v] > 0.5;

    let mut out: Vec<Vec<f64>> = images.iter().map(|g| g.data().to_vec()).collect();
    let mut global: Option<f64> = None;
    for v in 0..geom.len() {
        if !(0..images.len()).any(|j| masked(j, v)) {
            continue;
        }
        let (sum, count) = (0..images.len())
            .filter(|&j| !masked(j, v))
            .fold((0.0, 0usize), |(s, c), j| (s + images[j].data()[v], c + 1));
        let fill = if count > 0 {
            sum / count as f64
        } else {
            match fallback {
                ImputeFallback::Error => return Err(Error::AllMasked(v)),
                ImputeFallback::GlobalMean => *global.get_or_insert_with(|| {
                    let (s, c) = images
                        .iter()
                        .enumerate()
                        .flat_map(|(j, img)| {
                            img.data()
                                .iter()
                                .enumerate()
                                .filter(move |(u, _)| !masked(j, *u))
                                .map(|(_, &x)| x)
                        })
                        .fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
                    if c > 0 {
                        s / c as f64
                    } else {
                        0.0
                    }
                }),
            }
        };
        for (j, img) in out.iter_mut().enumerate() {
            if masked(j, v) {
                img[v] = fill;
            }
        }
    }
    out.into_iter()
        .zip(images)
        .map(|(data, img)| Ok(img.with_data(data)))
        .collect()
}
