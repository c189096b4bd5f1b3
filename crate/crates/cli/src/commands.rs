use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use fovcast_core::baselines::Baseline;
use fovcast_core::dataset::{ingest, read_sessions, write_sessions, Adapter, SessionRecord};
use fovcast_core::eval::{
    baseline_predictions, compare_models, evaluate_heatmap, evaluate_trajectory, ground_truth,
    model_predictions, session_heatmap_windows, session_windows, EvalReport, HeatmapWindow,
    SaliencyMaps, HEATMAP_FOV, TRAJECTORY_FOV,
};
use fovcast_core::geometry::unit_to_angles;
use fovcast_core::heatmap::{read_grids, second_heatmap, write_grids, HeatGrid};
use fovcast_core::neural::persist::{atomic_write, read_manifest, HEATMAP_MODEL};
use fovcast_core::neural::train::{train, TrainReport};
use fovcast_core::neural::{HeatmapModel, HeatmapSample, TrajectoryModel, TrajectorySample};
use fovcast_core::synth::{static_cohort, synth_cohort, CohortConfig};
use fovcast_core::Error;

use crate::config::{Family, Overrides, RunConfig};
use crate::Command;

pub fn run(cmd: Command, o: &Overrides) -> Result<()> {
    let cfg = o.resolve()?;
    match cmd {
        Command::Ingest {
            input,
            adapter,
            out,
        } => cmd_ingest(&cfg, &input, &adapter, &out),
        Command::Synth {
            videos,
            users,
            seconds,
            still,
            out,
        } => cmd_synth(&cfg, videos, users, seconds, still, &out),
        Command::GenHeatmaps { sessions, out } => cmd_gen_heatmaps(&cfg, &sessions, &out),
        Command::Train { sessions, out } => cmd_train(cfg, &sessions, &out),
        Command::Predict {
            weights,
            sessions,
            out,
        } => cmd_predict(cfg, &weights, &sessions, &out),
        Command::Eval {
            sessions,
            baseline,
            k,
            weights,
            name,
            out,
        } => cmd_eval(
            cfg,
            &sessions,
            baseline.as_deref(),
            k,
            weights.as_deref(),
            name,
            &out,
        ),
        Command::Compare { reports, out } => cmd_compare(&cfg, &reports, &out),
    }
}

fn prepare(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cfg.write_to(out)
}

fn load_sessions(cfg: &mut RunConfig, path: &Path) -> Result<Vec<SessionRecord>> {
    cfg.paths.sessions = Some(path.to_path_buf());
    let sessions =
        read_sessions(path).with_context(|| format!("reading sessions {}", path.display()))?;
    if sessions.is_empty() {
        return Err(Error::Empty("session file").into());
    }
    Ok(sessions)
}

fn cmd_ingest(cfg: &RunConfig, input: &Path, adapter: &str, out: &Path) -> Result<()> {
    let adapter = Adapter::from_name(adapter).ok_or_else(|| {
        let names: Vec<_> = Adapter::ALL.iter().map(|a| a.name()).collect();
        Error::Config(format!(
            "unknown adapter {adapter:?}; expected one of {}",
            names.join(", ")
        ))
    })?;
    let report = ingest(input, adapter)?;
    prepare(cfg, out)?;
    write_sessions(&out.join("sessions.ndjson"), &report.sessions)?;
    let mut rejected = String::new();
    for d in &report.rejected {
        eprintln!("rejected {d}");
        writeln!(rejected, "{d}")?;
    }
    atomic_write(&out.join("rejected.txt"), rejected.as_bytes())?;
    println!(
        "{} sessions, {} rows rejected",
        report.sessions.len(),
        report.rejected.len()
    );
    Ok(())
}

fn cmd_synth(
    cfg: &RunConfig,
    videos: usize,
    users: usize,
    seconds: usize,
    still: bool,
    out: &Path,
) -> Result<()> {
    let seed = cfg.train.seed;
    let sessions = if still {
        static_cohort(videos, users, seconds, seed)?
    } else {
        synth_cohort(&CohortConfig {
            videos,
            users,
            seconds,
            seed,
            ..CohortConfig::default()
        })?
    };
    prepare(cfg, out)?;
    write_sessions(&out.join("sessions.ndjson"), &sessions)?;
    println!("{} sessions", sessions.len());
    Ok(())
}

fn cmd_gen_heatmaps(cfg: &RunConfig, sessions_path: &Path, out: &Path) -> Result<()> {
    let mut cfg = cfg.clone();
    let sessions = load_sessions(&mut cfg, sessions_path)?;
    prepare(&cfg, out)?;
    let mut index = String::from("video_id,user_id,file,seconds\n");
    for s in &sessions {
        let grids = s
            .seconds_angles(cfg.window.keep_partial)
            .iter()
            .map(|f| second_heatmap(f, &cfg.heatmap))
            .collect::<fovcast_core::Result<Vec<_>>>()
            .with_context(|| format!("{}/{}", s.video_id, s.user_id))?;
        let file = format!("{}__{}.bin", s.video_id, s.user_id);
        let mut buf = Vec::new();
        write_grids(&mut buf, &grids)?;
        atomic_write(&out.join(&file), &buf)?;
        writeln!(index, "{},{},{file},{}", s.video_id, s.user_id, grids.len())?;
    }
    atomic_write(&out.join("index.csv"), index.as_bytes())?;
    println!("{} sessions written", sessions.len());
    Ok(())
}

/// Saliency grids per video, grouped into seconds of `frames` maps each.
fn load_saliency(dir: &Path, frames: usize) -> Result<SaliencyMaps> {
    let mut maps = SaliencyMaps::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("bin") {
            continue;
        }
        let Some(video) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let grids =
            read_grids(&mut fs::File::open(&path)?).with_context(|| path.display().to_string())?;
        if grids.len() % frames != 0 {
            return Err(Error::Format(format!(
                "{}: {} grids is not a whole number of {frames}-frame seconds",
                path.display(),
                grids.len()
            ))
            .into());
        }
        let seconds = grids
            .chunks(frames)
            .map(|sec| {
                sec.iter()
                    .flat_map(|g| g.values().iter().copied())
                    .collect()
            })
            .collect();
        maps.insert(video.to_string(), seconds);
    }
    Ok(maps)
}

fn heatmap_windows(cfg: &RunConfig, sessions: &[SessionRecord]) -> Result<Vec<HeatmapWindow>> {
    let saliency = match &cfg.paths.saliency {
        Some(dir) => Some(load_saliency(dir, cfg.heatmap_model.saliency_frames)?),
        None => None,
    };
    Ok(session_heatmap_windows(
        sessions,
        &cfg.heatmap,
        &cfg.window,
        saliency.as_ref(),
    )?)
}

fn is_test(cfg: &RunConfig, video: &str) -> bool {
    cfg.test_videos.iter().any(|v| v == video)
}

fn write_curve(out: &Path, report: &TrainReport) -> Result<()> {
    let mut csv = String::from("epoch,train_loss,val_loss,clipped_steps\n");
    for e in &report.epochs {
        let val = e.val_loss.map(|v| format!("{v:e}")).unwrap_or_default();
        writeln!(
            csv,
            "{},{:e},{val},{}",
            e.epoch, e.train_loss, e.clipped_steps
        )?;
    }
    atomic_write(&out.join("loss_curve.csv"), csv.as_bytes())?;
    atomic_write(
        &out.join("train_report.json"),
        serde_json::to_string_pretty(report)?.as_bytes(),
    )?;
    Ok(())
}

fn cmd_train(mut cfg: RunConfig, sessions_path: &Path, out: &Path) -> Result<()> {
    let sessions = load_sessions(&mut cfg, sessions_path)?;
    prepare(&cfg, out)?;
    let report = match cfg.family {
        Family::Trajectory => {
            let samples: Vec<TrajectorySample> = session_windows(&sessions, &cfg.window)?
                .iter()
                .filter(|w| !is_test(&cfg, &w.video_id))
                .map(|w| w.to_sample())
                .collect::<fovcast_core::Result<_>>()?;
            let mut model = TrajectoryModel::new(cfg.trajectory.clone())?;
            let report = train(&mut model, &samples, &[], &cfg.train)?;
            model.save(out)?;
            report
        }
        Family::Heatmap => {
            let samples: Vec<HeatmapSample> = heatmap_windows(&cfg, &sessions)?
                .into_iter()
                .filter(|w| !is_test(&cfg, &w.video_id))
                .map(|w| w.sample)
                .collect();
            let mut model = HeatmapModel::new(cfg.heatmap_model.clone())?;
            let report = train(&mut model, &samples, &[], &cfg.train)?;
            model.save(out)?;
            report
        }
    };
    write_curve(out, &report)?;
    println!(
        "{} epochs, best epoch {} with loss {:.6e}",
        report.epochs.len(),
        report.best_epoch,
        report.best_loss
    );
    Ok(())
}

enum Loaded {
    Trajectory(TrajectoryModel),
    Heatmap(HeatmapModel),
}

/// Loads weights and makes the window lengths agree with the model.
fn load_model(cfg: &mut RunConfig, dir: &Path) -> Result<Loaded> {
    cfg.paths.weights = Some(dir.to_path_buf());
    let manifest =
        read_manifest(dir).with_context(|| format!("reading weights {}", dir.display()))?;
    if manifest.model_type == HEATMAP_MODEL {
        let m = HeatmapModel::load(dir)?;
        cfg.family = Family::Heatmap;
        cfg.heatmap_model = m.config().clone();
        cfg.window.past_seconds = m.config().past_seconds;
        cfg.window.horizons = m.config().horizons;
        Ok(Loaded::Heatmap(m))
    } else {
        let m = TrajectoryModel::load(dir)?;
        if !m.is_trained() {
            return Err(Error::Untrained.into());
        }
        cfg.family = Family::Trajectory;
        cfg.trajectory = m.config().clone();
        cfg.window.past_seconds = m.config().past_seconds;
        cfg.window.horizons = m.config().horizons;
        Ok(Loaded::Trajectory(m))
    }
}

fn heatmap_predictions(
    model: &HeatmapModel,
    windows: &[HeatmapWindow],
) -> Result<Vec<Vec<HeatGrid>>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(16) {
        let refs: Vec<&HeatmapSample> = chunk.iter().map(|w| &w.sample).collect();
        for per_window in model.predict(&refs)? {
            out.push(
                per_window
                    .into_iter()
                    .map(HeatGrid::from_values_clamped)
                    .collect::<fovcast_core::Result<_>>()?,
            );
        }
    }
    Ok(out)
}

fn cmd_predict(mut cfg: RunConfig, weights: &Path, sessions_path: &Path, out: &Path) -> Result<()> {
    let model = load_model(&mut cfg, weights)?;
    let sessions = load_sessions(&mut cfg, sessions_path)?;
    prepare(&cfg, out)?;
    match model {
        Loaded::Trajectory(m) => {
            let windows = session_windows(&sessions, &cfg.window)?;
            let refs: Vec<_> = windows.iter().map(|w| &w.window).collect();
            let mut csv = String::from(
                "video_id,user_id,start,horizon,theta_deg,phi_deg,sigma_x,sigma_y,sigma_z\n",
            );
            for chunk in windows.chunks(64).zip(refs.chunks(64)) {
                for (w, pred) in chunk.0.iter().zip(m.predict(chunk.1)?) {
                    for (h, s) in pred.iter().enumerate() {
                        let a = unit_to_angles(s.mu);
                        writeln!(
                            csv,
                            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                            w.video_id,
                            w.user_id,
                            w.start,
                            h + 1,
                            a.theta_deg(),
                            a.phi_deg(),
                            s.sigma[0],
                            s.sigma[1],
                            s.sigma[2]
                        )?;
                    }
                }
            }
            atomic_write(&out.join("predictions.csv"), csv.as_bytes())?;
            println!("{} windows predicted", windows.len());
        }
        Loaded::Heatmap(m) => {
            let windows = heatmap_windows(&cfg, &sessions)?;
            let preds = heatmap_predictions(&m, &windows)?;
            let mut index = String::from("video_id,user_id,start,horizon,record\n");
            let mut flat = Vec::new();
            for (w, grids) in windows.iter().zip(preds) {
                for (h, g) in grids.into_iter().enumerate() {
                    writeln!(
                        index,
                        "{},{},{},{},{}",
                        w.video_id,
                        w.user_id,
                        w.start,
                        h + 1,
                        flat.len()
                    )?;
                    flat.push(g);
                }
            }
            let mut buf = Vec::new();
            write_grids(&mut buf, &flat)?;
            atomic_write(&out.join("predictions.bin"), &buf)?;
            atomic_write(&out.join("predictions.csv"), index.as_bytes())?;
            println!("{} windows predicted", windows.len());
        }
    }
    Ok(())
}

fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    atomic_write(&out.join("report.csv"), report.to_csv()?.as_bytes())?;
    let summary = report.summary_text();
    atomic_write(&out.join("summary.txt"), summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}

fn cmd_eval(
    mut cfg: RunConfig,
    sessions_path: &Path,
    baseline: Option<&str>,
    k: Option<usize>,
    weights: Option<&Path>,
    name: Option<String>,
    out: &Path,
) -> Result<()> {
    let model = weights.map(|w| load_model(&mut cfg, w)).transpose()?;
    let sessions = load_sessions(&mut cfg, sessions_path)?;
    let keep = |video: &str| cfg.test_videos.is_empty() || is_test(&cfg, video);

    let report = match model {
        None => {
            let name = baseline.unwrap_or_default();
            let mut b = Baseline::from_name(name).ok_or_else(|| {
                let names: Vec<_> = Baseline::ALL.iter().map(|b| b.name()).collect();
                Error::Config(format!(
                    "unknown baseline {name:?}; expected one of {}",
                    names.join(", ")
                ))
            })?;
            if let (Baseline::Knn { k: slot }, Some(k)) = (&mut b, k) {
                *slot = k;
            }
            let windows: Vec<_> = session_windows(&sessions, &cfg.window)?
                .into_iter()
                .filter(|w| keep(&w.video_id))
                .collect();
            let preds = baseline_predictions(b, &windows, cfg.window.horizons)?;
            let label = name.to_string();
            evaluate_trajectory(
                &label,
                &preds,
                &ground_truth(&windows),
                &cfg.alphas,
                TRAJECTORY_FOV,
            )?
        }
        Some(Loaded::Trajectory(m)) => {
            let windows: Vec<_> = session_windows(&sessions, &cfg.window)?
                .into_iter()
                .filter(|w| keep(&w.video_id))
                .collect();
            let preds = model_predictions(&m, &windows)?;
            let label = name.unwrap_or_else(|| m.config().variant.name().to_string());
            evaluate_trajectory(
                &label,
                &preds,
                &ground_truth(&windows),
                &cfg.alphas,
                TRAJECTORY_FOV,
            )?
        }
        Some(Loaded::Heatmap(m)) => {
            let windows: Vec<_> = heatmap_windows(&cfg, &sessions)?
                .into_iter()
                .filter(|w| keep(&w.video_id))
                .collect();
            let preds = heatmap_predictions(&m, &windows)?;
            let gt: Vec<_> = windows.iter().map(|w| w.future.clone()).collect();
            let label = name.unwrap_or_else(|| format!("heatmap-{}", m.config().fusion.name()));
            evaluate_heatmap(&label, &preds, &gt, &cfg.heatmap, &cfg.alphas, HEATMAP_FOV)?
        }
    };
    if report.horizons.iter().all(|h| h.windows == 0) || report.horizons.is_empty() {
        return Err(Error::Empty("evaluation windows").into());
    }
    prepare(&cfg, out)?;
    write_report(out, &report)
}

fn cmd_compare(cfg: &RunConfig, paths: &[std::path::PathBuf], out: &Path) -> Result<()> {
    let reports = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            EvalReport::from_csv(&text).with_context(|| p.display().to_string())
        })
        .collect::<Result<Vec<_>>>()?;
    let cmp = compare_models(&reports)?;
    prepare(cfg, out)?;
    atomic_write(&out.join("comparison.csv"), cmp.to_csv()?.as_bytes())?;
    let text = cmp.to_text();
    atomic_write(&out.join("comparison.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}
