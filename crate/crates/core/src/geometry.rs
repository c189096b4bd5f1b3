//! Spherical coordinates, circular statistics and viewport coverage.
//!
//! Directions use the convention `x = cos(phi) cos(theta)`,
//! `y = cos(phi) sin(theta)`, `z = sin(phi)` with longitude `theta` in
//! `[-pi, pi)` and latitude `phi` in `[-pi/2, pi/2]`.
//!
//! Viewports and fields of view are axis-aligned rectangles in
//! (longitude, latitude) offsets around a center, wrapping in longitude.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lattice spacing used for viewport area integration.
pub const COVERAGE_GRID_DEG: f64 = 0.5;

/// Wraps an angle in radians into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a - TAU * ((a + PI) / TAU).floor();
    if r >= PI {
        r -= TAU;
    }
    if r < -PI {
        r += TAU;
    }
    r
}

/// Longitude/latitude pair in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalAngle {
    pub theta: f64,
    pub phi: f64,
}

impl SphericalAngle {
    /// Builds an angle, wrapping `theta` and clamping `phi`.
    pub fn new(theta: f64, phi: f64) -> Self {
        Self {
            theta: wrap_angle(theta),
            phi: phi.clamp(-FRAC_PI_2, FRAC_PI_2),
        }
    }

    pub fn from_degrees(theta_deg: f64, phi_deg: f64) -> Self {
        Self::new(theta_deg.to_radians(), phi_deg.to_radians())
    }

    pub fn theta_deg(&self) -> f64 {
        self.theta.to_degrees()
    }

    pub fn phi_deg(&self) -> f64 {
        self.phi.to_degrees()
    }

    pub fn to_unit(self) -> UnitVec3 {
        angles_to_unit(self)
    }
}

/// A direction on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitVec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitVec3 {
    pub const X: UnitVec3 = UnitVec3 {
        x: 1.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes `(x, y, z)`; fails if the norm is below `1e-9`.
    pub fn normalized(x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (x * x + y * y + z * z).sqrt();
        if !(n >= 1e-9) {
            return Err(Error::Degenerate(format!(
                "vector norm {n:e} too small to normalize"
            )));
        }
        Ok(Self {
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    pub fn from_array(a: [f64; 3]) -> Result<Self> {
        Self::normalized(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: UnitVec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: UnitVec3) -> [f64; 3] {
        [
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        ]
    }

    pub fn neg(self) -> UnitVec3 {
        UnitVec3 {
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn to_angles(self) -> SphericalAngle {
        unit_to_angles(self)
    }

    /// Squared Euclidean distance between the two points.
    pub fn dist2(self, o: UnitVec3) -> f64 {
        let (dx, dy, dz) = (self.x - o.x, self.y - o.y, self.z - o.z);
        dx * dx + dy * dy + dz * dz
    }
}

/// Normalized arithmetic mean of directions.
pub fn mean_direction<I: IntoIterator<Item = UnitVec3>>(dirs: I) -> Result<UnitVec3> {
    let mut s = [0.0; 3];
    let mut n = 0usize;
    for d in dirs {
        s[0] += d.x;
        s[1] += d.y;
        s[2] += d.z;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("direction list"));
    }
    UnitVec3::normalized(s[0] / n as f64, s[1] / n as f64, s[2] / n as f64)
}

/// Per-second mean direction and per-axis spread of FoV centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondSummary {
    pub mu: UnitVec3,
    pub sigma: [f64; 3],
}

impl SecondSummary {
    /// `[mu_x, mu_y, mu_z, sigma_x, sigma_y, sigma_z]`, the model feature layout.
    pub fn features(&self) -> [f64; 6] {
        [
            self.mu.x,
            self.mu.y,
            self.mu.z,
            self.sigma[0],
            self.sigma[1],
            self.sigma[2],
        ]
    }

    pub fn from_features(f: &[f64]) -> Result<Self> {
        if f.len() != 6 {
            return Err(Error::Shape(format!(
                "summary needs 6 features, got {}",
                f.len()
            )));
        }
        Ok(Self {
            mu: UnitVec3::normalized(f[0], f[1], f[2])?,
            sigma: [f[3].max(0.0), f[4].max(0.0), f[5].max(0.0)],
        })
    }
}

/// Rectangular viewport or field of view, spans in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewportSpec {
    pub center: SphericalAngle,
    pub span_theta: f64,
    pub span_phi: f64,
}

impl ViewportSpec {
    pub fn new(center: SphericalAngle, span_theta: f64, span_phi: f64) -> Result<Self> {
        if !(span_theta > 0.0 && span_theta <= 360.0) || !(span_phi > 0.0 && span_phi <= 180.0) {
            return Err(Error::Config(format!(
                "viewport span ({span_theta}, {span_phi}) outside (0,360]x(0,180]"
            )));
        }
        Ok(Self {
            center,
            span_theta,
            span_phi,
        })
    }

    /// Viewport scaled by `alpha` in both spans, saturating at the full sphere.
    pub fn scaled(center: SphericalAngle, span: (f64, f64), alpha: f64) -> Result<Self> {
        Self::new(
            center,
            (span.0 * alpha).min(360.0),
            (span.1 * alpha).min(180.0),
        )
    }
}

pub fn angles_to_unit(a: SphericalAngle) -> UnitVec3 {
    let (st, ct) = a.theta.sin_cos();
    let (sp, cp) = a.phi.sin_cos();
    UnitVec3 {
        x: cp * ct,
        y: cp * st,
        z: sp,
    }
}

/// Inverse of [`angles_to_unit`]. At the poles longitude is set to 0.
pub fn unit_to_angles(v: UnitVec3) -> SphericalAngle {
    let phi = v.z.clamp(-1.0, 1.0).asin();
    let horiz = v.x.hypot(v.y);
    let theta = if horiz < 1e-15 { 0.0 } else { v.y.atan2(v.x) };
    SphericalAngle::new(theta, phi)
}

/// Weighted circular mean of longitudes, in `[-pi, pi)`.
pub fn circular_mean(thetas: &[f64], weights: Option<&[f64]>) -> Result<f64> {
    if thetas.is_empty() {
        return Err(Error::Empty("angle list"));
    }
    if let Some(w) = weights {
        if w.len() != thetas.len() {
            return Err(Error::Misaligned(format!(
                "{} angles but {} weights",
                thetas.len(),
                w.len()
            )));
        }
        if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::Degenerate(
                "weights must be finite and nonnegative".into(),
            ));
        }
    }
    let (mut s, mut c, mut total) = (0.0, 0.0, 0.0);
    for (i, &t) in thetas.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        s += w * t.sin();
        c += w * t.cos();
        total += w;
    }
    if total <= 0.0 {
        return Err(Error::Degenerate("all weights are zero".into()));
    }
    let r = s.hypot(c) / total;
    if r < 1e-12 {
        return Err(Error::UndefinedMean(r));
    }
    Ok(wrap_angle(s.atan2(c)))
}

/// Mean direction and per-axis population standard deviation of frame centers.
pub fn second_summary(frames: &[UnitVec3]) -> Result<SecondSummary> {
    if frames.is_empty() {
        return Err(Error::Empty("frame list"));
    }
    let n = frames.len() as f64;
    let mut mean = [0.0; 3];
    for f in frames {
        mean[0] += f.x;
        mean[1] += f.y;
        mean[2] += f.z;
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; 3];
    for f in frames {
        for (k, v) in f.to_array().into_iter().enumerate() {
            var[k] += (v - mean[k]).powi(2);
        }
    }
    let sigma = var.map(|v| (v / n).sqrt());
    let mu = UnitVec3::from_array(mean)
        .map_err(|_| Error::Degenerate("frame mean vector vanishes".into()))?;
    Ok(SecondSummary { mu, sigma })
}

/// Whether `dir` falls inside the viewport rectangle (boundaries inclusive).
pub fn viewport_contains(vp: &ViewportSpec, dir: SphericalAngle) -> bool {
    let dt = wrap_angle(dir.theta - vp.center.theta);
    let dp = dir.phi - vp.center.phi;
    dt.abs() <= (vp.span_theta / 2.0).to_radians() + 1e-12
        && dp.abs() <= (vp.span_phi / 2.0).to_radians() + 1e-12
}

/// Cell-midpoint offsets (radians) of a `grid_deg` lattice across `span_deg`.
fn lattice_offsets(span_deg: f64, grid_deg: f64) -> impl Iterator<Item = f64> {
    let n = (span_deg / grid_deg).round().max(1.0) as usize;
    let step = span_deg / n as f64;
    (0..n).map(move |i| (-span_deg / 2.0 + step * (i as f64 + 0.5)).to_radians())
}

/// Fraction of the `fov` rectangle's spherical area lying inside `vp`.
///
/// The fov rectangle is sampled on a `grid_deg` lattice with `cos(phi)`
/// area weights; samples past a pole are dropped. Containment separates
/// into a longitude test and a latitude test, so the lattice sum factors
/// into two one-dimensional sums.
pub fn coverage_fraction(vp: &ViewportSpec, fov: &ViewportSpec, grid_deg: f64) -> f64 {
    let half_t = (vp.span_theta / 2.0).to_radians() + 1e-12;
    let half_p = (vp.span_phi / 2.0).to_radians() + 1e-12;

    let mut cols = 0usize;
    let mut cols_in = 0usize;
    for off in lattice_offsets(fov.span_theta, grid_deg) {
        cols += 1;
        if wrap_angle(fov.center.theta + off - vp.center.theta).abs() <= half_t {
            cols_in += 1;
        }
    }

    let (mut w_all, mut w_in) = (0.0, 0.0);
    for off in lattice_offsets(fov.span_phi, grid_deg) {
        let phi = fov.center.phi + off;
        if phi.abs() > FRAC_PI_2 {
            continue;
        }
        let w = phi.cos();
        w_all += w;
        if (phi - vp.center.phi).abs() <= half_p {
            w_in += w;
        }
    }
    if w_all <= 0.0 || cols == 0 {
        return 0.0;
    }
    (w_in / w_all) * (cols_in as f64 / cols as f64)
}

/// Mean coverage of each ground-truth frame FoV by a viewport of spans
/// `alpha * fov_span` centered on the predicted direction.
pub fn hit_rate_for_second(
    pred_center: UnitVec3,
    gt_frames: &[UnitVec3],
    alpha: f64,
    fov_span: (f64, f64),
) -> Result<f64> {
    if gt_frames.is_empty() {
        return Err(Error::Empty("ground-truth frames"));
    }
    let vp = ViewportSpec::scaled(unit_to_angles(pred_center), fov_span, alpha)?;
    let mut total = 0.0;
    for f in gt_frames {
        let fov = ViewportSpec::new(unit_to_angles(*f), fov_span.0, fov_span.1)?;
        total += coverage_fraction(&vp, &fov, COVERAGE_GRID_DEG);
    }
    Ok(total / gt_frames.len() as f64)
}

/// Angle between two directions, in `[0, pi]`.
pub fn great_circle_distance(u: UnitVec3, v: UnitVec3) -> f64 {
    let c = u.cross(v);
    let s = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
    s.atan2(u.dot(v))
}
