//! Canonical session records and raw-format adapters.
//!
//! The canonical file is newline-delimited JSON, one [`SessionRecord`] per
//! line, sorted by `(video_id, user_id)`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angles_to_unit, SphericalAngle, UnitVec3};

/// One viewer watching one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub video_id: String,
    pub user_id: String,
    pub fps: u32,
    /// `(frame_index, theta_deg, phi_deg)`, indices strictly increasing.
    pub frames: Vec<(u64, f64, f64)>,
}

fn check_angles(theta: f64, phi: f64) -> std::result::Result<(), String> {
    if !theta.is_finite() || !(-180.0..=180.0).contains(&theta) {
        return Err(format!("theta {theta} outside [-180, 180]"));
    }
    if !phi.is_finite() || !(-90.0..=90.0).contains(&phi) {
        return Err(format!("phi {phi} outside [-90, 90]"));
    }
    Ok(())
}

impl SessionRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::Format(format!("{}/{}: {msg}", self.video_id, self.user_id));
        if self.fps == 0 {
            return Err(bad("fps must be positive".into()));
        }
        if self.frames.is_empty() {
            return Err(bad("no frames".into()));
        }
        for pair in self.frames.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(bad(format!("frame index {} does not increase", pair[1].0)));
            }
        }
        for &(_, t, p) in &self.frames {
            check_angles(t, p).map_err(bad)?;
        }
        Ok(())
    }

    /// Frames grouped by second (`frame_index / fps`). Seconds with no frames
    /// are empty; a final second with fewer than `fps` frames is dropped
    /// unless `keep_partial`.
    pub fn seconds_angles(&self, keep_partial: bool) -> Vec<Vec<SphericalAngle>> {
        let fps = self.fps as u64;
        let Some(last) = self.frames.last() else {
            return Vec::new();
        };
        let mut out = vec![Vec::new(); (last.0 / fps) as usize + 1];
        for &(i, t, p) in &self.frames {
            out[(i / fps) as usize].push(SphericalAngle::from_degrees(t, p));
        }
        if !keep_partial && out.last().is_some_and(|s| s.len() < self.fps as usize) {
            out.pop();
        }
        out
    }

    pub fn seconds(&self, keep_partial: bool) -> Vec<Vec<UnitVec3>> {
        self.seconds_angles(keep_partial)
            .into_iter()
            .map(|s| s.into_iter().map(angles_to_unit).collect())
            .collect()
    }
}

/// A rejected input row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowDiagnostic {
    pub path: PathBuf,
    pub line: usize,
    pub msg: String,
}

impl fmt::Display for RowDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.path.display(), self.line, self.msg)
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub sessions: Vec<SessionRecord>,
    pub rejected: Vec<RowDiagnostic>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Adapter {
    /// `video_id,user_id,frame_index,theta_deg,phi_deg[,fps]`
    ToyCsv,
    /// Canonical NDJSON, re-validated.
    Canonical,
    /// Head-orientation quaternions: `video_id,user_id,playback_time,qx,qy,qz,qw`.
    Tsinghua,
    /// Normalized equirectangular coordinates: `video_id,user_id,frame_index,lon,lat`.
    Shanghai,
}

impl Adapter {
    pub const ALL: [Adapter; 4] = [
        Adapter::ToyCsv,
        Adapter::Canonical,
        Adapter::Tsinghua,
        Adapter::Shanghai,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Adapter::ToyCsv => "toy-csv",
            Adapter::Canonical => "canonical",
            Adapter::Tsinghua => "tsinghua",
            Adapter::Shanghai => "shanghai",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

pub const DEFAULT_FPS: u32 = 30;

/// Viewing direction for a head-orientation quaternion.
///
/// The headset frame is y-up with z forward and x to the right; the forward
/// axis is rotated by the quaternion and mapped to x forward, y left, z up.
pub fn quaternion_to_angles(qx: f64, qy: f64, qz: f64, qw: f64) -> Result<SphericalAngle> {
    let n = (qx * qx + qy * qy + qz * qz + qw * qw).sqrt();
    if !(n > 1e-9) || !n.is_finite() {
        return Err(Error::Degenerate("zero quaternion".into()));
    }
    let (x, y, z, w) = (qx / n, qy / n, qz / n, qw / n);
    // Third column of the rotation matrix: the image of (0, 0, 1).
    let fx = 2.0 * (x * z + w * y);
    let fy = 2.0 * (y * z - w * x);
    let fz = 1.0 - 2.0 * (x * x + y * y);
    let v = UnitVec3::normalized(fz, -fx, fy)?;
    Ok(v.to_angles())
}

struct Row {
    video: String,
    user: String,
    fps: u32,
    frame: u64,
    theta: f64,
    phi: f64,
}

fn field<'a>(
    rec: &'a csv::StringRecord,
    idx: &BTreeMap<String, usize>,
    name: &str,
) -> std::result::Result<&'a str, String> {
    let i = idx
        .get(name)
        .ok_or_else(|| format!("missing column {name}"))?;
    rec.get(*i)
        .map(str::trim)
        .ok_or_else(|| format!("missing value for {name}"))
}

fn num<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    idx: &BTreeMap<String, usize>,
    name: &str,
) -> std::result::Result<T, String> {
    let s = field(rec, idx, name)?;
    s.parse().map_err(|_| format!("bad {name} {s:?}"))
}

fn parse_row(
    adapter: Adapter,
    rec: &csv::StringRecord,
    idx: &BTreeMap<String, usize>,
) -> std::result::Result<Row, String> {
    let video = field(rec, idx, "video_id")?.to_string();
    let user = field(rec, idx, "user_id")?.to_string();
    let fps = if idx.contains_key("fps") {
        num(rec, idx, "fps")?
    } else {
        DEFAULT_FPS
    };
    if fps == 0 {
        return Err("fps must be positive".into());
    }
    let (frame, theta, phi) = match adapter {
        Adapter::ToyCsv => (
            num(rec, idx, "frame_index")?,
            num(rec, idx, "theta_deg")?,
            num(rec, idx, "phi_deg")?,
        ),
        Adapter::Shanghai => {
            let lon: f64 = num(rec, idx, "lon")?;
            let lat: f64 = num(rec, idx, "lat")?;
            if !(0.0..=1.0).contains(&lon) || !(0.0..=1.0).contains(&lat) {
                return Err(format!("lon/lat ({lon}, {lat}) outside [0, 1]"));
            }
            (
                num(rec, idx, "frame_index")?,
                lon * 360.0 - 180.0,
                90.0 - lat * 180.0,
            )
        }
        Adapter::Tsinghua => {
            let t: f64 = num(rec, idx, "playback_time")?;
            if !(t >= 0.0) {
                return Err(format!("playback time {t} is negative"));
            }
            let a = quaternion_to_angles(
                num(rec, idx, "qx")?,
                num(rec, idx, "qy")?,
                num(rec, idx, "qz")?,
                num(rec, idx, "qw")?,
            )
            .map_err(|e| e.to_string())?;
            ((t * fps as f64).floor() as u64, a.theta_deg(), a.phi_deg())
        }
        Adapter::Canonical => unreachable!("canonical input is not csv"),
    };
    check_angles(theta, phi)?;
    Ok(Row {
        video,
        user,
        fps,
        frame,
        theta,
        phi,
    })
}

fn csv_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

fn ingest_csv(path: &Path, adapter: Adapter) -> Result<IngestReport> {
    let mut rejected = Vec::new();
    let mut groups: BTreeMap<(String, String), (u32, Vec<(u64, f64, f64, usize)>)> =
        BTreeMap::new();
    for file in csv_files(path)? {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(&file)?;
        let idx: BTreeMap<String, usize> = rdr
            .headers()?
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_string(), i))
            .collect();
        for (n, rec) in rdr.records().enumerate() {
            // Header is line 1.
            let line = n + 2;
            let parsed = rec
                .map_err(|e| e.to_string())
                .and_then(|r| parse_row(adapter, &r, &idx));
            match parsed {
                Ok(row) => {
                    let entry = groups
                        .entry((row.video, row.user))
                        .or_insert((row.fps, Vec::new()));
                    if entry.0 != row.fps {
                        rejected.push(RowDiagnostic {
                            path: file.clone(),
                            line,
                            msg: format!("fps {} differs from session fps {}", row.fps, entry.0),
                        });
                        continue;
                    }
                    entry.1.push((row.frame, row.theta, row.phi, line));
                }
                Err(msg) => rejected.push(RowDiagnostic {
                    path: file.clone(),
                    line,
                    msg,
                }),
            }
        }
    }
    let mut sessions = Vec::with_capacity(groups.len());
    for ((video_id, user_id), (fps, mut rows)) in groups {
        rows.sort_by_key(|r| (r.0, r.3));
        let mut frames: Vec<(u64, f64, f64)> = Vec::with_capacity(rows.len());
        for (i, t, p, line) in rows {
            if frames.last().is_some_and(|f| f.0 == i) {
                rejected.push(RowDiagnostic {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("duplicate frame {i} for {video_id}/{user_id}"),
                });
                continue;
            }
            frames.push((i, t, p));
        }
        sessions.push(SessionRecord {
            video_id,
            user_id,
            fps,
            frames,
        });
    }
    Ok(IngestReport { sessions, rejected })
}

/// Reads raw input through `adapter`. Bad rows are reported and skipped.
pub fn ingest(path: &Path, adapter: Adapter) -> Result<IngestReport> {
    let mut report = match adapter {
        Adapter::Canonical => IngestReport {
            sessions: read_sessions(path)?,
            rejected: Vec::new(),
        },
        _ => ingest_csv(path, adapter)?,
    };
    sort_sessions(&mut report.sessions);
    Ok(report)
}

pub fn sort_sessions(sessions: &mut [SessionRecord]) {
    sessions.sort_by(|a, b| (&a.video_id, &a.user_id).cmp(&(&b.video_id, &b.user_id)));
}

pub fn sessions_to_ndjson(sessions: &[SessionRecord]) -> Result<String> {
    let mut out = String::new();
    for s in sessions {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_sessions(path: &Path, sessions: &[SessionRecord]) -> Result<()> {
    crate::neural::persist::atomic_write(path, sessions_to_ndjson(sessions)?.as_bytes())
}

pub fn read_sessions(path: &Path) -> Result<Vec<SessionRecord>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let rec: SessionRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        rec.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

/// Sessions grouped by video, in id order.
pub fn by_video(sessions: &[SessionRecord]) -> BTreeMap<&str, Vec<&SessionRecord>> {
    let mut map: BTreeMap<&str, Vec<&SessionRecord>> = BTreeMap::new();
    for s in sessions {
        map.entry(s.video_id.as_str()).or_default().push(s);
    }
    map
}
