//! Non-learned comparison predictors and the window type they consume.

use std::f64::consts::{FRAC_PI_2, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    angles_to_unit, great_circle_distance, mean_direction, second_summary, unit_to_angles,
    SecondSummary, SphericalAngle, UnitVec3,
};
use crate::neural::trajectory::{TrajectoryModel, TrajectoryVariant};

/// What a previous viewer of the same video was doing around a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtherTrajectory {
    pub user_id: String,
    /// Per-second summaries aligned with the target's past seconds.
    pub past: Vec<SecondSummary>,
    /// Per-second summaries aligned with horizons `1..=L`.
    pub future: Vec<SecondSummary>,
}

/// Target history plus other viewers' known trajectories for one prediction time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryWindow {
    /// Past seconds, oldest first, each with its frame centers.
    pub past: Vec<Vec<UnitVec3>>,
    pub others: Vec<OtherTrajectory>,
}

impl TrajectoryWindow {
    pub fn new(past: Vec<Vec<UnitVec3>>, others: Vec<OtherTrajectory>) -> Result<Self> {
        let w = Self { past, others };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.past.is_empty() || self.past.iter().any(|s| s.is_empty()) {
            return Err(Error::Empty("past seconds"));
        }
        let bad = |v: &UnitVec3| (v.dot(*v) - 1.0).abs() > 1e-6;
        if self.past.iter().flatten().any(bad) {
            return Err(Error::Degenerate("past frame is not unit norm".into()));
        }
        if let Some(o) = self.others.first() {
            let (np, nf) = (o.past.len(), o.future.len());
            if self
                .others
                .iter()
                .any(|o| o.past.len() != np || o.future.len() != nf)
            {
                return Err(Error::Misaligned(
                    "other users cover different spans".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn past_seconds(&self) -> usize {
        self.past.len()
    }

    pub fn last_frame(&self) -> UnitVec3 {
        *self
            .past
            .last()
            .and_then(|s| s.last())
            .expect("validated window has frames")
    }

    pub fn last_summary(&self) -> Result<SecondSummary> {
        second_summary(self.past.last().ok_or(Error::Empty("past seconds"))?)
    }

    /// Frames with timestamps in seconds from the window start; frame `k` of
    /// second `s` with `n` frames sits at `s + (k + 0.5) / n`.
    pub fn timed_frames(&self) -> Vec<(f64, UnitVec3)> {
        let mut out = Vec::new();
        for (s, frames) in self.past.iter().enumerate() {
            let n = frames.len() as f64;
            for (k, f) in frames.iter().enumerate() {
                out.push((s as f64 + (k as f64 + 0.5) / n, *f));
            }
        }
        out
    }

    /// Midpoint time of horizon `h` (1-based).
    pub fn horizon_time(&self, h: usize) -> f64 {
        self.past.len() as f64 + h as f64 - 0.5
    }

    fn others_at(&self, horizon_idx: usize) -> Result<Vec<UnitVec3>> {
        if self.others.is_empty() {
            return Err(Error::Empty("other users"));
        }
        self.others
            .iter()
            .map(|o| {
                o.future.get(horizon_idx).map(|s| s.mu).ok_or_else(|| {
                    Error::Misaligned(format!("other user lacks horizon {}", horizon_idx + 1))
                })
            })
            .collect()
    }
}

/// Ordinary least squares `y = a + b t`; `None` when the times do not vary.
fn ols(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = points.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let tm = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let ym = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut stt, mut sty) = (0.0, 0.0);
    for &(t, y) in points {
        stt += (t - tm) * (t - tm);
        sty += (t - tm) * (y - ym);
    }
    if stt < 1e-12 {
        return None;
    }
    let b = sty / stt;
    Some((ym - b * tm, b))
}

/// Longest suffix whose successive differences never change sign.
fn monotonic_suffix_start(series: &[f64]) -> usize {
    let mut sign = 0.0f64;
    let mut start = series.len().saturating_sub(1);
    for i in (1..series.len()).rev() {
        let d = series[i] - series[i - 1];
        let s = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        if s != 0.0 {
            if sign == 0.0 {
                sign = s;
            } else if s != sign {
                break;
            }
        }
        start = i - 1;
    }
    start
}

/// Removes `2 pi` jumps from a longitude sequence.
pub fn unwrap_angles(thetas: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(thetas.len());
    let mut offset = 0.0;
    for (i, &t) in thetas.iter().enumerate() {
        if i > 0 {
            let prev = thetas[i - 1];
            let d = t - prev;
            if d > std::f64::consts::PI {
                offset -= TAU;
            } else if d < -std::f64::consts::PI {
                offset += TAU;
            }
        }
        out.push(t + offset);
    }
    out
}

/// Space in which frame-level linear regression runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegressionSpace {
    /// Per Cartesian axis, renormalized afterwards.
    Cartesian,
    /// On unwrapped longitude and latitude.
    Angular,
}

/// Repeats the last observed frame center.
pub fn persistency(w: &TrajectoryWindow, horizons: usize) -> Vec<UnitVec3> {
    vec![w.last_frame(); horizons]
}

fn past_tail(w: &TrajectoryWindow, seconds: usize) -> Vec<(f64, UnitVec3)> {
    let start = w.past_seconds().saturating_sub(seconds) as f64;
    w.timed_frames()
        .into_iter()
        .filter(|(t, _)| *t >= start)
        .collect()
}

/// Least-squares fit of the last `min(10, T)` seconds of frames, extrapolated
/// to each future second's midpoint.
pub fn linear_regression_predict(
    w: &TrajectoryWindow,
    horizons: usize,
    space: RegressionSpace,
) -> Vec<UnitVec3> {
    let frames = past_tail(w, 10);
    match space {
        RegressionSpace::Cartesian => {
            let fits: Option<Vec<(f64, f64)>> = (0..3)
                .map(|axis| {
                    let pts: Vec<(f64, f64)> = frames
                        .iter()
                        .map(|(t, v)| (*t, v.to_array()[axis]))
                        .collect();
                    ols(&pts)
                })
                .collect();
            let Some(fits) = fits else {
                return persistency(w, horizons);
            };
            (1..=horizons)
                .map(|h| {
                    let t = w.horizon_time(h);
                    let p = [0, 1, 2].map(|a| fits[a].0 + fits[a].1 * t);
                    UnitVec3::from_array(p).unwrap_or_else(|_| w.last_frame())
                })
                .collect()
        }
        RegressionSpace::Angular => {
            let (times, thetas, phis) = angle_series(&frames);
            let th: Vec<_> = times.iter().copied().zip(thetas).collect();
            let ph: Vec<_> = times.iter().copied().zip(phis).collect();
            extrapolate_angles(w, horizons, &th, &ph)
        }
    }
}

fn angle_series(frames: &[(f64, UnitVec3)]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let times = frames.iter().map(|f| f.0).collect();
    let angles: Vec<SphericalAngle> = frames.iter().map(|f| unit_to_angles(f.1)).collect();
    let thetas = unwrap_angles(&angles.iter().map(|a| a.theta).collect::<Vec<_>>());
    let phis = angles.iter().map(|a| a.phi).collect();
    (times, thetas, phis)
}

/// Fits each angle series independently; an axis whose fit is undefined holds its last value.
fn extrapolate_angles(
    w: &TrajectoryWindow,
    horizons: usize,
    theta: &[(f64, f64)],
    phi: &[(f64, f64)],
) -> Vec<UnitVec3> {
    let last = unit_to_angles(w.last_frame());
    let th_last = theta.last().map_or(last.theta, |p| p.1);
    let ft = ols(theta);
    let fp = ols(phi);
    (1..=horizons)
        .map(|h| {
            let t = w.horizon_time(h);
            let th = ft.map_or(th_last, |(a, b)| a + b * t);
            let ph = fp.map_or(last.phi, |(a, b)| a + b * t);
            angles_to_unit(SphericalAngle::new(th, ph.clamp(-FRAC_PI_2, FRAC_PI_2)))
        })
        .collect()
}

/// Angular regression on the trailing run over which each of unwrapped
/// longitude and latitude moves in one direction.
pub fn truncated_linear_predict(w: &TrajectoryWindow, horizons: usize) -> Vec<UnitVec3> {
    let frames = w.timed_frames();
    let (times, thetas, phis) = angle_series(&frames);
    let ts = monotonic_suffix_start(&thetas);
    let ps = monotonic_suffix_start(&phis);
    let th: Vec<_> = times[ts..]
        .iter()
        .copied()
        .zip(thetas[ts..].iter().copied())
        .collect();
    let ph: Vec<_> = times[ps..]
        .iter()
        .copied()
        .zip(phis[ps..].iter().copied())
        .collect();
    extrapolate_angles(w, horizons, &th, &ph)
}

/// Normalized mean of all other users' positions at each horizon.
pub fn naive_average(w: &TrajectoryWindow, horizons: usize) -> Result<Vec<UnitVec3>> {
    (0..horizons)
        .map(|h| mean_direction(w.others_at(h)?))
        .collect()
}

/// Sequential k-nearest-neighbour average anchored on the previous prediction.
pub fn knn_predict(w: &TrajectoryWindow, horizons: usize, k: usize) -> Result<Vec<UnitVec3>> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    let mut anchor = w.last_frame();
    let mut out = Vec::with_capacity(horizons);
    for h in 0..horizons {
        let pos = w.others_at(h)?;
        let mut order: Vec<usize> = (0..pos.len()).collect();
        let dist: Vec<f64> = pos
            .iter()
            .map(|p| great_circle_distance(anchor, *p))
            .collect();
        order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
        let pred = mean_direction(order.iter().take(k).map(|&i| pos[i]))?;
        out.push(pred);
        anchor = pred;
    }
    Ok(out)
}

/// Single-LSTM baseline: the trained model's per-second summaries.
pub fn single_lstm_predict(
    model: &TrajectoryModel,
    w: &TrajectoryWindow,
    horizons: usize,
) -> Result<Vec<SecondSummary>> {
    if model.config().variant != TrajectoryVariant::SingleLstm {
        return Err(Error::Config(format!(
            "expected a single-lstm model, got {}",
            model.config().variant.name()
        )));
    }
    if !model.is_trained() {
        return Err(Error::Untrained);
    }
    if horizons != model.config().horizons {
        return Err(Error::Config(format!(
            "model predicts {} horizons, asked for {horizons}",
            model.config().horizons
        )));
    }
    model.predict_window(w)
}

/// Non-learned baselines addressable by name.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Baseline {
    Persistency,
    LinearRegression,
    TruncatedLinear,
    NaiveAverage,
    Knn { k: usize },
}

impl Baseline {
    pub const ALL: [Baseline; 5] = [
        Baseline::Persistency,
        Baseline::LinearRegression,
        Baseline::TruncatedLinear,
        Baseline::NaiveAverage,
        Baseline::Knn { k: 5 },
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Baseline::Persistency => "persistency",
            Baseline::LinearRegression => "linear-regression",
            Baseline::TruncatedLinear => "truncated-linear",
            Baseline::NaiveAverage => "naive-average",
            Baseline::Knn { .. } => "knn",
        }
    }

    pub fn from_name(name: &str) -> Option<Baseline> {
        Self::ALL.into_iter().find(|b| b.name() == name)
    }

    pub fn predict(&self, w: &TrajectoryWindow, horizons: usize) -> Result<Vec<UnitVec3>> {
        match *self {
            Baseline::Persistency => Ok(persistency(w, horizons)),
            Baseline::LinearRegression => Ok(linear_regression_predict(
                w,
                horizons,
                RegressionSpace::Angular,
            )),
            Baseline::TruncatedLinear => Ok(truncated_linear_predict(w, horizons)),
            Baseline::NaiveAverage => naive_average(w, horizons),
            Baseline::Knn { k } => knn_predict(w, horizons, k),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn deg(t: f64, p: f64) -> UnitVec3 {
        angles_to_unit(SphericalAngle::from_degrees(t, p))
    }

    fn window_from_fn(seconds: usize, f: impl Fn(f64) -> UnitVec3) -> TrajectoryWindow {
        let past = (0..seconds)
            .map(|s| {
                (0..30)
                    .map(|k| f(s as f64 + (k as f64 + 0.5) / 30.0))
                    .collect()
            })
            .collect();
        TrajectoryWindow::new(past, vec![]).unwrap()
    }

    fn summary(v: UnitVec3) -> SecondSummary {
        SecondSummary {
            mu: v,
            sigma: [0.0; 3],
        }
    }

    fn with_others(mut w: TrajectoryWindow, per_user: Vec<Vec<UnitVec3>>) -> TrajectoryWindow {
        let t = w.past_seconds();
        w.others = per_user
            .into_iter()
            .enumerate()
            .map(|(i, fut)| OtherTrajectory {
                user_id: format!("u{i}"),
                past: vec![summary(fut[0]); t],
                future: fut.into_iter().map(summary).collect(),
            })
            .collect();
        w
    }

    fn angle_err_deg(a: UnitVec3, b: UnitVec3) -> f64 {
        great_circle_distance(a, b).to_degrees()
    }

    #[test]
    fn persistency_repeats_last_frame() {
        let w = window_from_fn(10, |t| deg(3.0 * t, 0.0));
        let p = persistency(&w, 5);
        assert_eq!(p.len(), 5);
        assert!(p.iter().all(|v| *v == w.last_frame()));
        let s = window_from_fn(10, |_| UnitVec3::X);
        assert!(persistency(&s, 3).iter().all(|v| *v == UnitVec3::X));
    }

    #[test]
    fn lr_on_static_past_is_static() {
        let w = window_from_fn(10, |_| deg(20.0, 10.0));
        for space in [RegressionSpace::Cartesian, RegressionSpace::Angular] {
            for p in linear_regression_predict(&w, 10, space) {
                assert!(angle_err_deg(p, deg(20.0, 10.0)) < 1e-6);
            }
        }
    }

    #[test]
    fn lr_extrapolates_uniform_rotation() {
        // 10 deg/s along the equator; the last second's mean sits at 35 deg.
        let w = window_from_fn(10, |t| deg(-60.0 + 10.0 * t, 0.0));
        let preds = Baseline::LinearRegression.predict(&w, 10).unwrap();
        for (k, p) in preds.iter().enumerate() {
            let h = k as f64 + 1.0;
            // Closed-form OLS on an exact line reproduces the line.
            let expected = deg(35.0 + 10.0 * h, 0.0);
            assert!(
                angle_err_deg(*p, expected) < 2.0,
                "h={h}: {}",
                angle_err_deg(*p, expected)
            );
            assert!((p.dot(*p) - 1.0).abs() < 1e-12);
        }
        // The chord fit lags on a 100 degree arc but stays on the sphere.
        let cart = linear_regression_predict(&w, 10, RegressionSpace::Cartesian);
        assert!(angle_err_deg(cart[0], deg(45.0, 0.0)) > 5.0);
        assert!(cart.iter().all(|p| (p.dot(*p) - 1.0).abs() < 1e-12));
    }

    #[test]
    fn lr_falls_back_with_single_frame() {
        let w = TrajectoryWindow::new(vec![vec![deg(5.0, 5.0)]], vec![]).unwrap();
        assert_eq!(
            linear_regression_predict(&w, 2, RegressionSpace::Cartesian),
            persistency(&w, 2)
        );
    }

    #[test]
    fn monotonic_suffix_scan() {
        assert_eq!(monotonic_suffix_start(&[0.0, 1.0, 2.0, 3.0]), 0);
        assert_eq!(monotonic_suffix_start(&[0.0, 1.0, 2.0, 1.5, 1.0]), 2);
        assert_eq!(monotonic_suffix_start(&[3.0, 1.0, 1.0, 2.0, 2.0, 4.0]), 1);
        assert_eq!(monotonic_suffix_start(&[1.0, 1.0, 1.0]), 0);
        assert_eq!(monotonic_suffix_start(&[1.0]), 0);
    }

    #[test]
    fn truncated_fits_only_falling_suffix() {
        // Up at 10 deg/s for 6 s, then down at 5 deg/s.
        let f = |t: f64| {
            if t < 6.0 {
                10.0 * t
            } else {
                60.0 - 5.0 * (t - 6.0)
            }
        };
        let w = window_from_fn(10, |t| deg(f(t), 0.0));
        let p = truncated_linear_predict(&w, 2);
        // Oracle: fit of the strictly falling suffix extrapolates the 5 deg/s line.
        let expect = |h: f64| deg(60.0 - 5.0 * (10.0 + h - 0.5 - 6.0), 0.0);
        assert!(
            angle_err_deg(p[0], expect(1.0)) < 0.2,
            "{}",
            angle_err_deg(p[0], expect(1.0))
        );
        assert!(angle_err_deg(p[1], expect(2.0)) < 0.2);
        let lr = linear_regression_predict(&w, 2, RegressionSpace::Angular);
        assert!(angle_err_deg(lr[0], expect(1.0)) > 5.0);
    }

    #[test]
    fn truncated_matches_angular_lr_on_monotonic_past() {
        let w = window_from_fn(10, |t| deg(170.0 + 4.0 * t, -20.0 + 2.0 * t));
        let a = truncated_linear_predict(&w, 10);
        let b = linear_regression_predict(&w, 10, RegressionSpace::Angular);
        assert_eq!(a, b);
        let s = window_from_fn(10, |_| deg(1.0, 2.0));
        let tp = truncated_linear_predict(&s, 4);
        for (x, y) in tp.iter().zip(persistency(&s, 4)) {
            assert!(angle_err_deg(*x, y) < 1e-9);
        }
    }

    #[test]
    fn unwrap_crosses_seam() {
        let u = unwrap_angles(&[3.0, 3.1, -3.1, -3.0]);
        assert!((u[2] - (-3.1 + TAU)).abs() < 1e-12);
        assert!(u.windows(2).all(|p| p[1] > p[0]));
    }

    #[test]
    fn naive_average_examples() {
        let base = window_from_fn(2, |_| UnitVec3::X);
        let y = deg(90.0, 0.0);
        let w = with_others(base.clone(), vec![vec![y, y], vec![y, y]]);
        for p in naive_average(&w, 2).unwrap() {
            assert!(angle_err_deg(p, y) < 1e-9);
        }
        let w = with_others(base.clone(), vec![vec![UnitVec3::X], vec![y]]);
        assert!(angle_err_deg(naive_average(&w, 1).unwrap()[0], deg(45.0, 0.0)) < 1e-9);

        // Symmetric triple around v = (30, 10) degrees: v rotated +-15 deg in
        // longitude plus v itself; the vector mean lies on v by symmetry.
        let v = deg(30.0, 0.0);
        let w = with_others(
            base.clone(),
            vec![vec![deg(15.0, 0.0)], vec![v], vec![deg(45.0, 0.0)]],
        );
        assert!(angle_err_deg(naive_average(&w, 1).unwrap()[0], v) < 1e-9);

        assert!(naive_average(&base, 1).is_err());
        let w = with_others(base, vec![vec![UnitVec3::X], vec![UnitVec3::X.neg()]]);
        assert!(matches!(naive_average(&w, 1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn knn_examples() {
        let base = window_from_fn(3, |_| UnitVec3::X);
        let v = deg(50.0, 10.0);
        let w = with_others(base.clone(), vec![vec![v; 4]; 3]);
        for p in knn_predict(&w, 4, 5).unwrap() {
            assert!(angle_err_deg(p, v) < 1e-9);
        }

        // One user follows the truth; k = 1 reproduces it when the others
        // are far away at every step.
        let truth: Vec<_> = (0..5).map(|h| deg(10.0 * h as f64, 0.0)).collect();
        let far: Vec<_> = (0..5).map(|_| deg(-150.0, 40.0)).collect();
        let w = with_others(base.clone(), vec![far.clone(), truth.clone(), far]);
        let p = knn_predict(&w, 5, 1).unwrap();
        for (a, b) in p.iter().zip(&truth) {
            assert!(angle_err_deg(*a, *b) < 1e-9);
        }

        // Equidistant others with k = #others: identical to the naive average at horizon 1.
        let ring: Vec<Vec<UnitVec3>> = (0..4)
            .map(|i| vec![deg(90.0 * i as f64, 60.0), deg(20.0, 0.0)])
            .collect();
        let w = with_others(window_from_fn(2, |_| deg(0.0, 90.0)), ring);
        let a = knn_predict(&w, 1, 4).unwrap();
        let b = naive_average(&w, 1).unwrap();
        assert!(angle_err_deg(a[0], b[0]) < 1e-9);
        assert!(knn_predict(&w, 1, 0).is_err());
    }

    #[test]
    fn baseline_names_round_trip() {
        for b in Baseline::ALL {
            assert_eq!(Baseline::from_name(b.name()), Some(b));
        }
    }

    fn smooth_window() -> impl Strategy<Value = TrajectoryWindow> {
        (
            -180.0f64..180.0,
            -50.0f64..50.0,
            -20.0f64..20.0,
            -4.0f64..4.0,
        )
            .prop_map(|(t0, p0, vt, vp)| {
                window_from_fn(10, move |t| deg(t0 + vt * t, p0 + vp * t * 0.2))
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn predictions_are_unit_norm(w in smooth_window()) {
            let w = with_others(w, vec![vec![deg(10.0, 5.0); 10], vec![deg(40.0, -5.0); 10]]);
            for b in Baseline::ALL {
                for p in b.predict(&w, 10).unwrap() {
                    prop_assert!((p.dot(p) - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn constant_past_lr_equals_persistency(t in -180.0f64..180.0, p in -80.0f64..80.0) {
            let w = window_from_fn(10, |_| deg(t, p));
            let a = persistency(&w, 10);
            for space in [RegressionSpace::Cartesian, RegressionSpace::Angular] {
                let b = linear_regression_predict(&w, 10, space);
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!(x.dist2(*y) < 1e-20);
                }
            }
        }
    }
}
