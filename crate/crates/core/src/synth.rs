//! Synthetic viewing sessions.
//!
//! Every video has a hidden attractor that moves at a constant angular
//! velocity and picks a new velocity at random seconds. Each viewer follows
//! the attractor with a fixed personal offset and per-frame jitter, so other
//! viewers' positions at a future second reveal turns the target's own past
//! cannot.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::SessionRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub videos: usize,
    pub users: usize,
    pub seconds: usize,
    pub fps: u32,
    /// Largest longitude speed, degrees per second.
    pub speed_deg: f64,
    /// Chance per second of a new velocity.
    pub turn_prob: f64,
    /// Standard deviation of each viewer's fixed offset, degrees.
    pub offset_deg: f64,
    /// Standard deviation of per-frame noise, degrees.
    pub jitter_deg: f64,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            videos: 4,
            users: 8,
            seconds: 40,
            fps: 30,
            speed_deg: 25.0,
            turn_prob: 0.2,
            offset_deg: 3.0,
            jitter_deg: 1.0,
            seed: 0,
        }
    }
}

const PHI_LIMIT: f64 = 60.0;

fn wrap_deg(t: f64) -> f64 {
    (t + 180.0).rem_euclid(360.0) - 180.0
}

/// Attractor positions for every frame, in degrees.
fn attractor(cfg: &CohortConfig, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut theta = rng.random_range(-180.0..180.0);
    let mut phi = rng.random_range(-30.0..30.0);
    let pick = |rng: &mut ChaCha8Rng| {
        if cfg.speed_deg > 0.0 {
            (
                rng.random_range(-cfg.speed_deg..=cfg.speed_deg),
                rng.random_range(-cfg.speed_deg..=cfg.speed_deg) / 3.0,
            )
        } else {
            (0.0, 0.0)
        }
    };
    let mut vel = pick(rng);
    let n = cfg.fps as usize;
    let mut out = Vec::with_capacity(cfg.seconds * n);
    for s in 0..cfg.seconds {
        if s > 0 && rng.random_bool(cfg.turn_prob) {
            vel = pick(rng);
        }
        for _ in 0..n {
            out.push((theta, phi));
            theta = wrap_deg(theta + vel.0 / n as f64);
            phi += vel.1 / n as f64;
            if phi.abs() > PHI_LIMIT {
                phi = phi.signum() * (2.0 * PHI_LIMIT - phi.abs());
                vel.1 = -vel.1;
            }
        }
    }
    out
}

pub fn synth_cohort(cfg: &CohortConfig) -> Result<Vec<SessionRecord>> {
    if cfg.videos == 0 || cfg.users == 0 || cfg.seconds == 0 || cfg.fps == 0 {
        return Err(Error::Config("cohort sizes must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.turn_prob) || !(cfg.speed_deg >= 0.0) {
        return Err(Error::Config(
            "turn_prob must lie in [0, 1] and speed be non-negative".into(),
        ));
    }
    let offset = Normal::new(0.0, cfg.offset_deg).map_err(|e| Error::Config(e.to_string()))?;
    let jitter = Normal::new(0.0, cfg.jitter_deg).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.videos * cfg.users);
    for v in 0..cfg.videos {
        let path = attractor(cfg, &mut rng);
        for u in 0..cfg.users {
            let (dt, dp) = (offset.sample(&mut rng), offset.sample(&mut rng));
            let frames = path
                .iter()
                .enumerate()
                .map(|(i, (t, p))| {
                    let t = wrap_deg(t + dt + jitter.sample(&mut rng));
                    let p = (p + dp + jitter.sample(&mut rng)).clamp(-90.0, 90.0);
                    (i as u64, t, p)
                })
                .collect();
            out.push(SessionRecord {
                video_id: format!("video{v:02}"),
                user_id: format!("user{u:02}"),
                fps: cfg.fps,
                frames,
            });
        }
    }
    Ok(out)
}

/// Sessions that never move: every frame of a user at one random direction.
pub fn static_cohort(
    videos: usize,
    users: usize,
    seconds: usize,
    seed: u64,
) -> Result<Vec<SessionRecord>> {
    synth_cohort(&CohortConfig {
        videos,
        users,
        seconds,
        speed_deg: 0.0,
        turn_prob: 0.0,
        offset_deg: 20.0,
        jitter_deg: 0.0,
        seed,
        ..CohortConfig::default()
    })
}
