//! Analytic Fourier terrain model fitted to scattered elevation data.
//!
//! The height field is
//!
//! ```text
//! f(x, y) = sum_n a_n cos(w1_n x + w2_n y) + b_n sin(w3_n x + w4_n y)
//! ```
//!
//! with `(x, y)` shifted by the patch center before evaluation. Frequencies
//! come from a deterministic low-discrepancy (Halton) dictionary; the weights
//! `(a_n, b_n)` are then solved by ridge-regularized linear least squares.
//! An optional gradient refinement of the frequencies is available behind
//! [`FitOptions::refine_steps`].

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dual::Scalar;
use crate::{Error, Result};

/// Scattered elevation points on a circular patch.
#[derive(Clone, Debug)]
pub struct ElevationCloud {
    /// `(x, y, z)` samples in meters.
    pub points: Vec<[f64; 3]>,
    /// Patch center `(x, y)` in meters.
    pub patch_center: [f64; 2],
    /// Patch radius in meters.
    pub patch_radius: f64,
}

impl ElevationCloud {
    pub fn new(points: Vec<[f64; 3]>, patch_center: [f64; 2], patch_radius: f64) -> Result<Self> {
        for p in &points {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("elevation point"));
            }
            let dx = p[0] - patch_center[0];
            let dy = p[1] - patch_center[1];
            if dx * dx + dy * dy > patch_radius * patch_radius * (1.0 + 1e-9) {
                return Err(Error::DegenerateCloud(format!(
                    "point ({}, {}) outside patch radius {}",
                    p[0], p[1], patch_radius
                )));
            }
        }
        if !patch_center.iter().all(|v| v.is_finite()) || !patch_radius.is_finite() {
            return Err(Error::NonFinite("patch geometry"));
        }
        Ok(Self {
            points,
            patch_center,
            patch_radius,
        })
    }

    /// Read a `x,y,z` CSV (header required). Patch center/radius are derived
    /// from the bounding circle of the data.
    pub fn from_csv_reader<R: BufRead>(reader: R, path: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Io {
                path: path.to_string(),
                source: e,
            })?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if lineno == 0 {
                if line.to_lowercase().replace(' ', "") != "x,y,z" {
                    return Err(Error::Parse {
                        path: path.to_string(),
                        message: format!("expected header 'x,y,z', got '{line}'"),
                    });
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    path: path.to_string(),
                    message: format!("line {}: expected 3 fields", lineno + 1),
                });
            }
            let mut p = [0.0; 3];
            for (i, f) in fields.iter().enumerate() {
                p[i] = f.trim().parse::<f64>().map_err(|e| Error::Parse {
                    path: path.to_string(),
                    message: format!("line {}: {e}", lineno + 1),
                })?;
            }
            points.push(p);
        }
        if points.is_empty() {
            return Err(Error::Parse {
                path: path.to_string(),
                message: "no data rows".to_string(),
            });
        }
        let cx = points.iter().map(|p| p[0]).sum::<f64>() / points.len() as f64;
        let cy = points.iter().map(|p| p[1]).sum::<f64>() / points.len() as f64;
        let radius = points
            .iter()
            .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
            .fold(0.0, f64::max)
            .max(1e-6);
        Self::new(points, [cx, cy], radius)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_csv_reader(std::io::BufReader::new(file), &path.display().to_string())
    }

    pub fn to_csv<W: Write>(&self, mut writer: W) -> std::io::Result<()> {
        writeln!(writer, "x,y,z")?;
        for p in &self.points {
            writeln!(writer, "{},{},{}", p[0], p[1], p[2])?;
        }
        Ok(())
    }
}

/// Analytic surfaces for synthetic test terrains.
#[derive(Clone, Copy, Debug)]
pub enum SynthKind {
    Flat,
    /// `z = slope * x`
    Incline { slope: f64 },
    /// `z = amplitude * sin(2 pi x / wavelength)`
    Sinusoidal { amplitude: f64, wavelength: f64 },
    /// Sum of seeded random sinusoids.
    Hills { seed: u64 },
}

/// Deterministic grid-sampled cloud of an analytic surface.
///
/// The grid spans `[-extent/2, extent/2]` in both axes; the patch circle is
/// the circumscribed circle of that square.
pub fn synth_terrain(kind: SynthKind, extent: f64, sample_spacing: f64) -> Result<ElevationCloud> {
    if extent <= 0.0 || sample_spacing <= 0.0 {
        return Err(Error::InvalidParameter(
            "extent and sample_spacing must be positive".to_string(),
        ));
    }
    let half = extent / 2.0;
    let steps = (extent / sample_spacing).round() as usize;
    let surface = hills_surface(kind);
    let mut points = Vec::with_capacity((steps + 1) * (steps + 1));
    for ix in 0..=steps {
        let x = -half + ix as f64 * sample_spacing;
        for iy in 0..=steps {
            let y = -half + iy as f64 * sample_spacing;
            points.push([x, y, surface.eval(x, y)]);
        }
    }
    ElevationCloud::new(points, [0.0, 0.0], half * std::f64::consts::SQRT_2 * (1.0 + 1e-9))
}

/// Evaluate the analytic surface behind a [`SynthKind`] directly.
pub fn synth_height(kind: SynthKind, x: f64, y: f64) -> f64 {
    hills_surface(kind).eval(x, y)
}

struct Surface {
    terms: Vec<(f64, f64, f64, f64)>, // amplitude, wx, wy, phase (sin)
    slope: f64,
}

impl Surface {
    fn eval(&self, x: f64, y: f64) -> f64 {
        let mut z = self.slope * x;
        for &(a, wx, wy, ph) in &self.terms {
            z += a * (wx * x + wy * y + ph).sin();
        }
        z
    }
}

/// Height amplitude of `Hills` terrains as a fraction of the extent.
const HILLS_RELIEF: f64 = 0.035;

fn hills_surface(kind: SynthKind) -> Surface {
    match kind {
        SynthKind::Flat => Surface {
            terms: vec![],
            slope: 0.0,
        },
        SynthKind::Incline { slope } => Surface {
            terms: vec![],
            slope,
        },
        SynthKind::Sinusoidal {
            amplitude,
            wavelength,
        } => Surface {
            terms: vec![(amplitude, 2.0 * std::f64::consts::PI / wavelength, 0.0, 0.0)],
            slope: 0.0,
        },
        SynthKind::Hills { seed } => {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let extent_scale = 14.0; // nominal patch diameter the relief is tuned for
            let mut terms = Vec::new();
            for _ in 0..6 {
                let amp = HILLS_RELIEF * extent_scale * rng.gen_range(0.4..1.0);
                let wavelength = rng.gen_range(5.0..12.0);
                let dir = rng.gen_range(0.0..std::f64::consts::PI);
                let w = 2.0 * std::f64::consts::PI / wavelength;
                let phase = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
                terms.push((amp, w * dir.cos(), w * dir.sin(), phase));
            }
            Surface { terms, slope: 0.0 }
        }
    }
}

/// Fourier-basis height field with analytic derivatives.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerrainModel {
    /// Number of frequency quadruples.
    pub n: usize,
    /// Patch center subtracted from queries before basis evaluation.
    pub center: [f64; 2],
    /// Quadruples `(w1, w2, w3, w4)` in rad/m.
    pub frequencies: Vec<[f64; 4]>,
    /// Pairs `(a, b)` in meters.
    pub weights: Vec<[f64; 2]>,
    /// Root-mean-square fit residual in meters.
    pub fit_rmse: f64,
}

impl TerrainModel {
    /// Generic height evaluation; `T = Dual<_>` propagates derivatives
    /// through the basis.
    pub fn height_generic<T: Scalar>(&self, x: T, y: T) -> T {
        let xc = x - T::from_f64(self.center[0]);
        let yc = y - T::from_f64(self.center[1]);
        let mut z = T::zero();
        for (w, ab) in self.frequencies.iter().zip(&self.weights) {
            let ca = xc * T::from_f64(w[0]) + yc * T::from_f64(w[1]);
            let sa = xc * T::from_f64(w[2]) + yc * T::from_f64(w[3]);
            z = z + T::from_f64(ab[0]) * ca.cos() + T::from_f64(ab[1]) * sa.sin();
        }
        z
    }

    /// Height `f(x, y)` in meters.
    pub fn height(&self, x: f64, y: f64) -> Result<f64> {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::NonFinite("terrain query"));
        }
        Ok(self.height_generic(x, y))
    }

    /// Exact analytic partials `(df/dx, df/dy)`.
    pub fn height_gradient(&self, x: f64, y: f64) -> Result<[f64; 2]> {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::NonFinite("terrain query"));
        }
        Ok(self.gradient_unchecked(x, y))
    }

    pub(crate) fn gradient_unchecked(&self, x: f64, y: f64) -> [f64; 2] {
        let xc = x - self.center[0];
        let yc = y - self.center[1];
        let mut gx = 0.0;
        let mut gy = 0.0;
        for (w, ab) in self.frequencies.iter().zip(&self.weights) {
            let sa = (w[0] * xc + w[1] * yc).sin();
            let cb = (w[2] * xc + w[3] * yc).cos();
            gx += -ab[0] * w[0] * sa + ab[1] * w[2] * cb;
            gy += -ab[0] * w[1] * sa + ab[1] * w[3] * cb;
        }
        [gx, gy]
    }

    /// Second partials `(fxx, fxy, fyy)`.
    pub fn height_hessian(&self, x: f64, y: f64) -> Result<[f64; 3]> {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::NonFinite("terrain query"));
        }
        let xc = x - self.center[0];
        let yc = y - self.center[1];
        let mut h = [0.0; 3];
        for (w, ab) in self.frequencies.iter().zip(&self.weights) {
            let ca = (w[0] * xc + w[1] * yc).cos();
            let sb = (w[2] * xc + w[3] * yc).sin();
            h[0] += -ab[0] * w[0] * w[0] * ca - ab[1] * w[2] * w[2] * sb;
            h[1] += -ab[0] * w[0] * w[1] * ca - ab[1] * w[2] * w[3] * sb;
            h[2] += -ab[0] * w[1] * w[1] * ca - ab[1] * w[3] * w[3] * sb;
        }
        Ok(h)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("terrain model serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Parse {
            path: "<terrain json>".to_string(),
            message: e.to_string(),
        })
    }
}

/// Fit configuration; [`FitOptions::default`] matches the CLI defaults.
#[derive(Clone, Debug)]
pub struct FitOptions {
    pub n_frequencies: usize,
    pub seed: u64,
    /// Ridge regularization on the weights.
    pub ridge: f64,
    /// Gradient refinement steps on the frequencies (0 = dictionary only).
    pub refine_steps: usize,
    /// Override for the dictionary's maximum frequency; defaults to
    /// `8 pi / patch_radius`.
    pub omega_max: Option<f64>,
    /// Fully explicit frequency dictionary, bypassing the Halton sampling.
    pub frequencies: Option<Vec<[f64; 4]>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            n_frequencies: 100,
            seed: 0,
            ridge: 1e-8,
            refine_steps: 0,
            omega_max: None,
            frequencies: None,
        }
    }
}

/// Fit the Fourier model with default options.
pub fn fit_terrain(cloud: &ElevationCloud, n_frequencies: usize, seed: u64) -> Result<TerrainModel> {
    fit_terrain_with(
        cloud,
        &FitOptions {
            n_frequencies,
            seed,
            ..FitOptions::default()
        },
    )
}

/// Fit the Fourier model: fixed frequency dictionary, ridge-regularized
/// linear least squares on the weights, optional frequency refinement.
pub fn fit_terrain_with(cloud: &ElevationCloud, opts: &FitOptions) -> Result<TerrainModel> {
    let m = cloud.points.len();
    let n = opts
        .frequencies
        .as_ref()
        .map(|f| f.len())
        .unwrap_or(opts.n_frequencies);
    if n == 0 {
        return Err(Error::InvalidParameter(
            "n_frequencies must be >= 1".to_string(),
        ));
    }
    if m < 2 * n {
        return Err(Error::DegenerateCloud(format!(
            "need at least {} points for {} frequencies, got {}",
            2 * n,
            n,
            m
        )));
    }
    check_collinear(cloud)?;

    let omega_max = opts
        .omega_max
        .unwrap_or(8.0 * std::f64::consts::PI / cloud.patch_radius);
    let mut frequencies = match &opts.frequencies {
        Some(f) => f.clone(),
        None => halton_frequencies(n, opts.seed, omega_max),
    };

    let (mut weights, mut rmse) = solve_weights(cloud, &frequencies, opts.ridge);

    if opts.refine_steps > 0 {
        refine_frequencies(
            cloud,
            &mut frequencies,
            &mut weights,
            &mut rmse,
            opts.ridge,
            opts.refine_steps,
        );
    }

    Ok(TerrainModel {
        n,
        center: cloud.patch_center,
        frequencies,
        weights,
        fit_rmse: rmse,
    })
}

fn check_collinear(cloud: &ElevationCloud) -> Result<()> {
    let m = cloud.points.len() as f64;
    let cx = cloud.points.iter().map(|p| p[0]).sum::<f64>() / m;
    let cy = cloud.points.iter().map(|p| p[1]).sum::<f64>() / m;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in &cloud.points {
        let dx = p[0] - cx;
        let dy = p[1] - cy;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    // smaller eigenvalue of the 2x2 scatter matrix
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let lambda_min = tr / 2.0 - disc;
    if lambda_min < 1e-12 {
        return Err(Error::DegenerateCloud(
            "points are collinear in (x, y)".to_string(),
        ));
    }
    Ok(())
}

fn halton(index: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    let mut i = index;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Deterministic low-discrepancy dictionary. `w1, w3` span `[0, omega_max]`;
/// `w2, w4` span `[-omega_max, omega_max]` so ridges of any orientation are
/// representable (cosine is even in its argument, so a positive `w1` loses
/// no generality while a one-signed `w2` would).
fn halton_frequencies(n: usize, seed: u64, omega_max: f64) -> Vec<[f64; 4]> {
    let offset = (seed as usize % 100_000) * 131 + 1;
    (0..n)
        .map(|i| {
            let idx = offset + i;
            [
                halton(idx, 2) * omega_max,
                (2.0 * halton(idx, 3) - 1.0) * omega_max,
                halton(idx, 5) * omega_max,
                (2.0 * halton(idx, 7) - 1.0) * omega_max,
            ]
        })
        .collect()
}

fn design_matrix(cloud: &ElevationCloud, frequencies: &[[f64; 4]]) -> DMatrix<f64> {
    let m = cloud.points.len();
    let n = frequencies.len();
    let [cx, cy] = cloud.patch_center;
    DMatrix::from_fn(m, 2 * n, |j, col| {
        let x = cloud.points[j][0] - cx;
        let y = cloud.points[j][1] - cy;
        let w = &frequencies[col / 2];
        if col % 2 == 0 {
            (w[0] * x + w[1] * y).cos()
        } else {
            (w[2] * x + w[3] * y).sin()
        }
    })
}

fn solve_weights(
    cloud: &ElevationCloud,
    frequencies: &[[f64; 4]],
    ridge: f64,
) -> (Vec<[f64; 2]>, f64) {
    let phi = design_matrix(cloud, frequencies);
    let z = DVector::from_iterator(cloud.points.len(), cloud.points.iter().map(|p| p[2]));
    let mut normal = phi.transpose() * &phi;
    for i in 0..normal.nrows() {
        normal[(i, i)] += ridge;
    }
    let rhs = phi.transpose() * &z;
    let w = normal
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .unwrap_or_else(|| {
            normal
                .svd(true, true)
                .solve(&rhs, 1e-12)
                .expect("SVD solve")
        });
    let residual = &phi * &w - &z;
    let rmse = (residual.norm_squared() / cloud.points.len() as f64).sqrt();
    let weights = (0..frequencies.len()).map(|i| [w[2 * i], w[2 * i + 1]]).collect();
    (weights, rmse)
}

/// Backtracking gradient descent on the frequencies, re-solving the weights
/// after every accepted step.
fn refine_frequencies(
    cloud: &ElevationCloud,
    frequencies: &mut Vec<[f64; 4]>,
    weights: &mut Vec<[f64; 2]>,
    rmse: &mut f64,
    ridge: f64,
    steps: usize,
) {
    let [cx, cy] = cloud.patch_center;
    let m = cloud.points.len() as f64;
    let mut lr = 1e-3;
    for _ in 0..steps {
        // gradient of sum_j r_j^2 w.r.t. each frequency, weights held fixed
        let mut grad = vec![[0.0f64; 4]; frequencies.len()];
        for p in &cloud.points {
            let x = p[0] - cx;
            let y = p[1] - cy;
            let mut pred = 0.0;
            for (w, ab) in frequencies.iter().zip(weights.iter()) {
                pred += ab[0] * (w[0] * x + w[1] * y).cos() + ab[1] * (w[2] * x + w[3] * y).sin();
            }
            let r = pred - p[2];
            for ((w, ab), g) in frequencies.iter().zip(weights.iter()).zip(grad.iter_mut()) {
                let sa = (w[0] * x + w[1] * y).sin();
                let cb = (w[2] * x + w[3] * y).cos();
                g[0] += 2.0 * r * (-ab[0] * sa * x);
                g[1] += 2.0 * r * (-ab[0] * sa * y);
                g[2] += 2.0 * r * (ab[1] * cb * x);
                g[3] += 2.0 * r * (ab[1] * cb * y);
            }
        }
        let mut accepted = false;
        for _ in 0..8 {
            let candidate: Vec<[f64; 4]> = frequencies
                .iter()
                .zip(&grad)
                .map(|(w, g)| {
                    [
                        w[0] - lr * g[0] / m,
                        w[1] - lr * g[1] / m,
                        w[2] - lr * g[2] / m,
                        w[3] - lr * g[3] / m,
                    ]
                })
                .collect();
            let (cand_weights, cand_rmse) = solve_weights(cloud, &candidate, ridge);
            if cand_rmse < *rmse {
                *frequencies = candidate;
                *weights = cand_weights;
                *rmse = cand_rmse;
                lr *= 1.5;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            break;
        }
    }
}
