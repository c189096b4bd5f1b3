//! Sliding windows over sessions and per-horizon evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::baselines::{Baseline, OtherTrajectory, TrajectoryWindow};
use crate::dataset::{by_video, SessionRecord};
use crate::error::{Error, Result};
use crate::geometry::{
    angles_to_unit, hit_rate_for_second, second_summary, SecondSummary, SphericalAngle, UnitVec3,
};
use crate::heatmap::{
    estimate_center, second_heatmap, tile_overlap_ratio, HeatGrid, HeatmapConfig,
};
use crate::neural::heatmap_model::HeatmapSample;
use crate::neural::trajectory::{TrajectoryModel, TrajectorySample};

pub const DEFAULT_ALPHAS: [f64; 2] = [1.0, 1.25];
pub const TRAJECTORY_FOV: (f64, f64) = (120.0, 120.0);
pub const HEATMAP_FOV: (f64, f64) = (120.0, 90.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub past_seconds: usize,
    pub horizons: usize,
    pub stride: usize,
    /// Keep a session's last second when it has fewer than `fps` frames.
    pub keep_partial: bool,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            past_seconds: 10,
            horizons: 10,
            stride: 1,
            keep_partial: false,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.past_seconds == 0 || self.horizons == 0 || self.stride == 0 {
            return Err(Error::Config(
                "window lengths and stride must be positive".into(),
            ));
        }
        Ok(())
    }

    fn span(&self) -> usize {
        self.past_seconds + self.horizons
    }

    fn starts(&self, len: usize) -> impl Iterator<Item = usize> {
        let last = (len + 1).checked_sub(self.span()).unwrap_or(0);
        (0..last).step_by(self.stride)
    }
}

/// Another viewer's per-second summaries; `None` where a second had no frames.
#[derive(Debug, Clone, PartialEq)]
pub struct OtherSeconds {
    pub user_id: String,
    pub summaries: Vec<Option<SecondSummary>>,
}

impl OtherSeconds {
    pub fn from_seconds(user_id: &str, seconds: &[Vec<UnitVec3>]) -> Self {
        Self {
            user_id: user_id.to_string(),
            summaries: seconds.iter().map(|s| second_summary(s).ok()).collect(),
        }
    }

    fn span(&self, from: usize, len: usize) -> Option<Vec<SecondSummary>> {
        self.summaries
            .get(from..from + len)?
            .iter()
            .copied()
            .collect()
    }
}

/// One prediction point with its ground-truth future frames.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalWindow {
    pub video_id: String,
    pub user_id: String,
    /// First past second.
    pub start: usize,
    pub window: TrajectoryWindow,
    pub future: Vec<Vec<UnitVec3>>,
}

impl EvalWindow {
    pub fn target(&self) -> Result<Vec<SecondSummary>> {
        self.future.iter().map(|f| second_summary(f)).collect()
    }

    pub fn to_sample(&self) -> Result<TrajectorySample> {
        Ok(TrajectorySample {
            window: self.window.clone(),
            target: self.target()?,
        })
    }
}

/// Windows of `T` past and `L` future seconds at every stride. Others are
/// attached when they cover the whole span. Too-short input yields nothing.
pub fn build_windows(
    target: &[Vec<UnitVec3>],
    others: &[OtherSeconds],
    cfg: &WindowConfig,
) -> Result<Vec<EvalWindow>> {
    cfg.validate()?;
    let (t, l) = (cfg.past_seconds, cfg.horizons);
    let mut out = Vec::new();
    for s in cfg.starts(target.len()) {
        if target[s..s + t + l].iter().any(Vec::is_empty) {
            continue;
        }
        let others = others
            .iter()
            .filter_map(|o| {
                let past = o.span(s, t)?;
                let future = o.span(s + t, l)?;
                Some(OtherTrajectory {
                    user_id: o.user_id.clone(),
                    past,
                    future,
                })
            })
            .collect();
        out.push(EvalWindow {
            video_id: String::new(),
            user_id: String::new(),
            start: s,
            window: TrajectoryWindow::new(target[s..s + t].to_vec(), others)?,
            future: target[s + t..s + t + l].to_vec(),
        });
    }
    Ok(out)
}

/// Windows for every session, with the other viewers of the same video as others.
pub fn session_windows(sessions: &[SessionRecord], cfg: &WindowConfig) -> Result<Vec<EvalWindow>> {
    let mut out = Vec::new();
    for (video, group) in by_video(sessions) {
        let seconds: Vec<Vec<Vec<UnitVec3>>> =
            group.iter().map(|s| s.seconds(cfg.keep_partial)).collect();
        let summaries: Vec<OtherSeconds> = group
            .iter()
            .zip(&seconds)
            .map(|(s, sec)| OtherSeconds::from_seconds(&s.user_id, sec))
            .collect();
        for (i, s) in group.iter().enumerate() {
            let others: Vec<OtherSeconds> = summaries
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, o)| o.clone())
                .collect();
            for mut w in build_windows(&seconds[i], &others, cfg)? {
                w.video_id = video.to_string();
                w.user_id = s.user_id.clone();
                out.push(w);
            }
        }
    }
    Ok(out)
}

/// Saliency per video: per second, the stacked frame maps.
pub type SaliencyMaps = BTreeMap<String, Vec<Vec<f64>>>;

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapWindow {
    pub video_id: String,
    pub user_id: String,
    pub start: usize,
    pub sample: HeatmapSample,
    pub future: Vec<Vec<SphericalAngle>>,
}

fn average(grids: &[&HeatGrid]) -> HeatGrid {
    let mut acc = HeatGrid::zeros();
    for g in grids {
        acc.add_assign(g);
    }
    if grids.is_empty() {
        acc
    } else {
        acc.scaled(1.0 / grids.len() as f64)
    }
}

/// Heatmap sequences for every session. Others' average heatmaps are filled
/// always (zeros when nobody else watched that second); saliency only when
/// `saliency` has the video.
pub fn session_heatmap_windows(
    sessions: &[SessionRecord],
    hcfg: &HeatmapConfig,
    cfg: &WindowConfig,
    saliency: Option<&SaliencyMaps>,
) -> Result<Vec<HeatmapWindow>> {
    cfg.validate()?;
    hcfg.validate()?;
    let (t, l) = (cfg.past_seconds, cfg.horizons);
    let mut out = Vec::new();
    for (video, group) in by_video(sessions) {
        let angles: Vec<Vec<Vec<SphericalAngle>>> = group
            .iter()
            .map(|s| s.seconds_angles(cfg.keep_partial))
            .collect();
        let grids: Vec<Vec<Option<HeatGrid>>> = angles
            .iter()
            .map(|secs| secs.iter().map(|f| second_heatmap(f, hcfg).ok()).collect())
            .collect();
        let sal = saliency.and_then(|m| m.get(video));
        for (i, s) in group.iter().enumerate() {
            let others_avg = |sec: usize| -> Vec<f64> {
                let present: Vec<&HeatGrid> = grids
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .filter_map(|(_, g)| g.get(sec).and_then(Option::as_ref))
                    .collect();
                average(&present).into_values()
            };
            for st in cfg.starts(angles[i].len()) {
                let own = &grids[i][st..st + t + l];
                if own.iter().any(Option::is_none) {
                    continue;
                }
                let own: Vec<Vec<f64>> = own
                    .iter()
                    .map(|g| g.as_ref().expect("checked").values().to_vec())
                    .collect();
                let saliency = match sal {
                    Some(maps) if maps.len() >= st + t + l => maps[st + t..st + t + l].to_vec(),
                    _ => Vec::new(),
                };
                out.push(HeatmapWindow {
                    video_id: video.to_string(),
                    user_id: s.user_id.clone(),
                    start: st,
                    sample: HeatmapSample {
                        past: own[..t].to_vec(),
                        target: own[t..].to_vec(),
                        others_past: (st..st + t).map(&others_avg).collect(),
                        others_future: (st + t..st + t + l).map(&others_avg).collect(),
                        saliency,
                    },
                    future: angles[i][st + t..st + t + l].to_vec(),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    /// 1-based.
    pub horizon: usize,
    pub windows: usize,
    /// One entry per report alpha.
    pub hit_rate: Vec<f64>,
    pub mse: f64,
    pub tile_overlap: Option<f64>,
    /// Windows whose predicted heatmap had no mass.
    pub skipped_centers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub alphas: Vec<f64>,
    pub horizons: Vec<HorizonMetrics>,
}

/// Mean that does not depend on input order.
fn exact_mean(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

fn alpha_label(a: f64) -> String {
    format!("hit_rate@{a}")
}

impl EvalReport {
    fn alpha_index(&self, alpha: f64) -> Option<usize> {
        self.alphas.iter().position(|a| (a - alpha).abs() < 1e-12)
    }

    /// Hit rate averaged uniformly over horizons.
    pub fn avg_hit_rate(&self, alpha: f64) -> Option<f64> {
        let i = self.alpha_index(alpha)?;
        Some(exact_mean(
            self.horizons.iter().map(|h| h.hit_rate[i]).collect(),
        ))
    }

    /// Mean hit rate over horizons `from..=to` (1-based).
    pub fn hit_rate_between(&self, alpha: f64, from: usize, to: usize) -> Option<f64> {
        let i = self.alpha_index(alpha)?;
        Some(exact_mean(
            self.horizons
                .iter()
                .filter(|h| (from..=to).contains(&h.horizon))
                .map(|h| h.hit_rate[i])
                .collect(),
        ))
    }

    pub fn avg_mse(&self) -> f64 {
        exact_mean(self.horizons.iter().map(|h| h.mse).collect())
    }

    pub fn avg_tile_overlap(&self) -> Option<f64> {
        let v: Option<Vec<f64>> = self.horizons.iter().map(|h| h.tile_overlap).collect();
        v.map(exact_mean)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["model".to_string(), "horizon".into(), "windows".into()];
        header.extend(self.alphas.iter().map(|a| alpha_label(*a)));
        header.extend([
            "mse".into(),
            "tile_overlap".into(),
            "skipped_centers".into(),
        ]);
        w.write_record(&header)?;
        for h in &self.horizons {
            let mut row = vec![
                self.model.clone(),
                h.horizon.to_string(),
                h.windows.to_string(),
            ];
            row.extend(h.hit_rate.iter().map(f64::to_string));
            row.push(h.mse.to_string());
            row.push(h.tile_overlap.map(|t| t.to_string()).unwrap_or_default());
            row.push(h.skipped_centers.to_string());
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers()?.clone();
        let alphas: Vec<f64> = header
            .iter()
            .filter_map(|h| h.strip_prefix("hit_rate@"))
            .map(|a| {
                a.parse()
                    .map_err(|_| Error::Format(format!("bad alpha column {a:?}")))
            })
            .collect::<Result<_>>()?;
        let n = alphas.len();
        if header.len() != n + 6 {
            return Err(Error::Format(format!(
                "unexpected report columns {header:?}"
            )));
        }
        let bad = |what: &str, s: &str| Error::Format(format!("bad {what} {s:?}"));
        let mut model = None;
        let mut horizons = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let get = |i: usize| rec.get(i).unwrap_or("");
            let f = |i: usize, what: &str| get(i).parse::<f64>().map_err(|_| bad(what, get(i)));
            let u = |i: usize, what: &str| get(i).parse::<usize>().map_err(|_| bad(what, get(i)));
            model.get_or_insert_with(|| get(0).to_string());
            horizons.push(HorizonMetrics {
                horizon: u(1, "horizon")?,
                windows: u(2, "windows")?,
                hit_rate: (0..n)
                    .map(|k| f(3 + k, "hit rate"))
                    .collect::<Result<_>>()?,
                mse: f(3 + n, "mse")?,
                tile_overlap: if get(4 + n).is_empty() {
                    None
                } else {
                    Some(f(4 + n, "tile overlap")?)
                },
                skipped_centers: u(5 + n, "skipped centers")?,
            });
        }
        Ok(Self {
            model: model.ok_or(Error::Empty("report rows"))?,
            alphas,
            horizons,
        })
    }

    pub fn summary_text(&self) -> String {
        let mut s = format!("model: {}\n", self.model);
        let windows = self.horizons.first().map_or(0, |h| h.windows);
        let _ = writeln!(s, "windows: {windows}");
        for a in &self.alphas {
            let _ = writeln!(
                s,
                "average hit rate (alpha={a}): {:.4}",
                self.avg_hit_rate(*a).unwrap_or(f64::NAN)
            );
        }
        let _ = writeln!(s, "mse: {:.6}", self.avg_mse());
        if let Some(t) = self.avg_tile_overlap() {
            let _ = writeln!(s, "tile overlap: {t:.4}");
        }
        let skipped: usize = self.horizons.iter().map(|h| h.skipped_centers).sum();
        if skipped > 0 {
            let _ = writeln!(s, "skipped centers: {skipped}");
        }
        s
    }
}

fn check_alignment<P, G>(preds: &[Vec<P>], gt: &[Vec<G>]) -> Result<usize> {
    if preds.len() != gt.len() {
        return Err(Error::Misaligned(format!(
            "{} predictions for {} windows",
            preds.len(),
            gt.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Empty("windows"));
    }
    let l = gt[0].len();
    if l == 0 {
        return Err(Error::Empty("horizons"));
    }
    for (p, g) in preds.iter().zip(gt) {
        if p.len() != l || g.len() != l {
            return Err(Error::Misaligned(format!(
                "window covers {} predicted and {} true horizons, expected {l}",
                p.len(),
                g.len()
            )));
        }
    }
    Ok(l)
}

/// Per-horizon hit rates and squared distance to the true per-second mean.
pub fn evaluate_trajectory(
    model: &str,
    preds: &[Vec<UnitVec3>],
    gt: &[Vec<Vec<UnitVec3>>],
    alphas: &[f64],
    fov_span: (f64, f64),
) -> Result<EvalReport> {
    let l = check_alignment(preds, gt)?;
    let mut horizons = Vec::with_capacity(l);
    for h in 0..l {
        let mut hits = vec![Vec::with_capacity(preds.len()); alphas.len()];
        let mut sq = Vec::with_capacity(preds.len());
        for (p, g) in preds.iter().zip(gt) {
            let frames = &g[h];
            for (k, a) in alphas.iter().enumerate() {
                hits[k].push(hit_rate_for_second(p[h], frames, *a, fov_span)?);
            }
            sq.push(p[h].dist2(second_summary(frames)?.mu));
        }
        horizons.push(HorizonMetrics {
            horizon: h + 1,
            windows: preds.len(),
            hit_rate: hits.into_iter().map(exact_mean).collect(),
            mse: exact_mean(sq),
            tile_overlap: None,
            skipped_centers: 0,
        });
    }
    Ok(EvalReport {
        model: model.to_string(),
        alphas: alphas.to_vec(),
        horizons,
    })
}

/// Tile overlap against the true second heatmaps, plus hit rate and MSE of
/// the centers estimated from the predicted grids. Grids with no mass are
/// left out of the center metrics and counted.
pub fn evaluate_heatmap(
    model: &str,
    preds: &[Vec<HeatGrid>],
    gt: &[Vec<Vec<SphericalAngle>>],
    hcfg: &HeatmapConfig,
    alphas: &[f64],
    fov_span: (f64, f64),
) -> Result<EvalReport> {
    let l = check_alignment(preds, gt)?;
    let mut horizons = Vec::with_capacity(l);
    for h in 0..l {
        let mut hits = vec![Vec::new(); alphas.len()];
        let mut sq = Vec::new();
        let mut overlap = Vec::with_capacity(preds.len());
        let mut skipped = 0;
        for (p, g) in preds.iter().zip(gt) {
            let frames = &g[h];
            let truth = second_heatmap(frames, hcfg)?;
            overlap.push(tile_overlap_ratio(&p[h], &truth)?);
            let center = match estimate_center(&p[h]) {
                Ok(c) => angles_to_unit(c),
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            };
            let units: Vec<UnitVec3> = frames.iter().map(|a| angles_to_unit(*a)).collect();
            for (k, a) in alphas.iter().enumerate() {
                hits[k].push(hit_rate_for_second(center, &units, *a, fov_span)?);
            }
            sq.push(center.dist2(second_summary(&units)?.mu));
        }
        horizons.push(HorizonMetrics {
            horizon: h + 1,
            windows: preds.len(),
            hit_rate: hits.into_iter().map(exact_mean).collect(),
            mse: exact_mean(sq),
            tile_overlap: Some(exact_mean(overlap)),
            skipped_centers: skipped,
        });
    }
    Ok(EvalReport {
        model: model.to_string(),
        alphas: alphas.to_vec(),
        horizons,
    })
}

pub fn baseline_predictions(
    b: Baseline,
    windows: &[EvalWindow],
    horizons: usize,
) -> Result<Vec<Vec<UnitVec3>>> {
    windows
        .iter()
        .map(|w| b.predict(&w.window, horizons))
        .collect()
}

/// Predicted means of a trajectory model, batched.
pub fn model_predictions(
    model: &TrajectoryModel,
    windows: &[EvalWindow],
) -> Result<Vec<Vec<UnitVec3>>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(64) {
        let refs: Vec<&TrajectoryWindow> = chunk.iter().map(|w| &w.window).collect();
        for summaries in model.predict(&refs)? {
            out.push(summaries.into_iter().map(|s| s.mu).collect());
        }
    }
    Ok(out)
}

pub fn ground_truth(windows: &[EvalWindow]) -> Vec<Vec<Vec<UnitVec3>>> {
    windows.iter().map(|w| w.future.clone()).collect()
}

/// Models ranked by average hit rate at alpha 1.25 (the largest alpha when
/// 1.25 is absent), ties kept in input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub alphas: Vec<f64>,
    pub rows: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub avg_hit_rate: Vec<f64>,
    pub mse: f64,
}

pub fn compare_models(reports: &[EvalReport]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::Config(
            "comparison needs at least two reports".into(),
        ));
    }
    let alphas = reports[0].alphas.clone();
    if reports.iter().any(|r| r.alphas != alphas) {
        return Err(Error::Misaligned("reports use different alphas".into()));
    }
    let key = alphas
        .iter()
        .position(|a| (a - 1.25).abs() < 1e-12)
        .or_else(|| (!alphas.is_empty()).then(|| alphas.len() - 1))
        .ok_or(Error::Empty("alphas"))?;
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| ComparisonRow {
            model: r.model.clone(),
            avg_hit_rate: alphas
                .iter()
                .map(|a| r.avg_hit_rate(*a).unwrap_or(f64::NAN))
                .collect(),
            mse: r.avg_mse(),
        })
        .collect();
    let score = |r: &ComparisonRow| {
        let v = r.avg_hit_rate[key];
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    };
    rows.sort_by(|a, b| score(b).total_cmp(&score(a)));
    Ok(Comparison { alphas, rows })
}

impl Comparison {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["rank".to_string(), "model".into()];
        header.extend(
            self.alphas
                .iter()
                .map(|a| format!("avg_{}", alpha_label(*a))),
        );
        header.push("mse".into());
        w.write_record(&header)?;
        for (i, r) in self.rows.iter().enumerate() {
            let mut row = vec![(i + 1).to_string(), r.model.clone()];
            row.extend(r.avg_hit_rate.iter().map(f64::to_string));
            row.push(r.mse.to_string());
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.model.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut s = format!("{:<4} {:<width$}", "rank", "model");
        for a in &self.alphas {
            let _ = write!(s, " {:>14}", format!("hit(a={a})"));
        }
        let _ = writeln!(s, " {:>10}", "mse");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = write!(s, "{:<4} {:<width$}", i + 1, r.model);
            for v in &r.avg_hit_rate {
                let _ = write!(s, " {v:>14.4}");
            }
            let _ = writeln!(s, " {:>10.6}", r.mse);
        }
        s
    }
}
