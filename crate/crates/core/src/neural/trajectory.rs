//! Trajectory models over per-second (mu, sigma) summaries.
//!
//! An encoder LSTM reads each past second as 30 frame directions flattened
//! to 90 inputs. A decoder LSTM starts from the encoder state, takes the last
//! past second's summary as its first input and then its own previous
//! prediction. A dense head maps each decoder state to a temporary
//! prediction, which the cross-user variants refine with other viewers'
//! positions at the same second.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{summary_head, Linear, LstmCell};
use super::params::{Bound, ParamStore};
use super::tensor::{Graph, Tensor, Var};
use super::train::Trainable;
use crate::baselines::TrajectoryWindow;
use crate::error::{Error, Result};
use crate::geometry::{second_summary, SecondSummary, UnitVec3};

/// Score added to absent experts before the softmax.
const ABSENT_SCORE: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryVariant {
    /// Target user only.
    Seq2Seq,
    /// Dense mixing of the temporary prediction with others' summaries.
    MlpMixing,
    /// Attention over experts keyed by embedded locations.
    AmeLocation,
    /// Attention over experts keyed by embedded LSTM hidden states.
    AmeHidden,
    /// One LSTM over the past, unrolled into the future.
    SingleLstm,
}

impl TrajectoryVariant {
    pub const ALL: [TrajectoryVariant; 5] = [
        TrajectoryVariant::Seq2Seq,
        TrajectoryVariant::MlpMixing,
        TrajectoryVariant::AmeLocation,
        TrajectoryVariant::AmeHidden,
        TrajectoryVariant::SingleLstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrajectoryVariant::Seq2Seq => "seq2seq",
            TrajectoryVariant::MlpMixing => "mlp-mixing",
            TrajectoryVariant::AmeLocation => "ame-location",
            TrajectoryVariant::AmeHidden => "ame-hidden",
            TrajectoryVariant::SingleLstm => "single-lstm",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn uses_others(self) -> bool {
        matches!(
            self,
            TrajectoryVariant::MlpMixing
                | TrajectoryVariant::AmeLocation
                | TrajectoryVariant::AmeHidden
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConfig {
    pub variant: TrajectoryVariant,
    pub hidden: usize,
    pub past_seconds: usize,
    pub horizons: usize,
    pub frames_per_second: usize,
    /// Fixed roster size; extra users are dropped, missing ones masked.
    pub n_others: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            variant: TrajectoryVariant::Seq2Seq,
            hidden: 32,
            past_seconds: 10,
            horizons: 10,
            frames_per_second: 30,
            n_others: 8,
            embed_dim: 16,
            seed: 0,
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0
            || self.past_seconds == 0
            || self.horizons == 0
            || self.frames_per_second == 0
            || self.embed_dim == 0
        {
            return Err(Error::Config(
                "trajectory model sizes must be positive".into(),
            ));
        }
        if self.variant.uses_others() && self.n_others == 0 {
            return Err(Error::Config(
                "cross-user variants need n_others > 0".into(),
            ));
        }
        Ok(())
    }
}

/// A window with its ground-truth future summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub window: TrajectoryWindow,
    pub target: Vec<SecondSummary>,
}

/// Picks `n` frames spread evenly over `frames` (nearest sample).
pub fn resample_frames(frames: &[UnitVec3], n: usize) -> Vec<UnitVec3> {
    let len = frames.len();
    (0..n)
        .map(|k| frames[(((k as f64 + 0.5) * len as f64 / n as f64) as usize).min(len - 1)])
        .collect()
}

/// Model inputs for a batch of windows, laid out per time step.
#[derive(Debug, Clone)]
pub struct TrajectoryBatch {
    pub size: usize,
    /// `T` tensors of `(B, 3 * fps)` frame coordinates.
    pub past_frames: Vec<Tensor>,
    /// `T` tensors of `(B, 6)` per-second summaries.
    pub past_summaries: Vec<Tensor>,
    /// `T` tensors of `(B * N, 6)`.
    pub others_past: Vec<Tensor>,
    /// `L` tensors of `(B, N, 6)`.
    pub others_future: Vec<Tensor>,
    /// `(B, N)`, 1 where the roster slot holds a user.
    pub others_mask: Tensor,
    /// `(B, L, 6)` when ground truth is known.
    pub target: Option<Tensor>,
}

impl TrajectoryBatch {
    pub fn new(
        cfg: &TrajectoryConfig,
        windows: &[&TrajectoryWindow],
        targets: Option<&[&[SecondSummary]]>,
    ) -> Result<Self> {
        let b = windows.len();
        if b == 0 {
            return Err(Error::Empty("batch"));
        }
        let (t_len, l_len, fps) = (cfg.past_seconds, cfg.horizons, cfg.frames_per_second);
        let n = cfg.n_others.max(1);
        let mut past_frames = vec![Vec::with_capacity(b * 3 * fps); t_len];
        let mut past_summaries = vec![Vec::with_capacity(b * 6); t_len];
        let mut others_past = vec![vec![0.0; b * n * 6]; t_len];
        let mut others_future = vec![vec![0.0; b * n * 6]; l_len];
        let mut mask = vec![0.0; b * n];
        for (i, w) in windows.iter().enumerate() {
            w.validate()?;
            if w.past.len() != t_len {
                return Err(Error::Misaligned(format!(
                    "window has {} past seconds, model expects {t_len}",
                    w.past.len()
                )));
            }
            for (s, frames) in w.past.iter().enumerate() {
                for f in resample_frames(frames, fps) {
                    past_frames[s].extend_from_slice(&f.to_array());
                }
                past_summaries[s].extend_from_slice(&second_summary(frames)?.features());
            }
            if !cfg.variant.uses_others() {
                continue;
            }
            for (j, o) in w.others.iter().take(cfg.n_others).enumerate() {
                if o.future.len() < l_len || o.past.len() != t_len {
                    return Err(Error::Misaligned(format!(
                        "other user {} covers {}+{} seconds, need {t_len}+{l_len}",
                        o.user_id,
                        o.past.len(),
                        o.future.len()
                    )));
                }
                mask[i * n + j] = 1.0;
                let slot = (i * n + j) * 6;
                for (s, summ) in o.past.iter().enumerate() {
                    others_past[s][slot..slot + 6].copy_from_slice(&summ.features());
                }
                for (h, summ) in o.future.iter().take(l_len).enumerate() {
                    others_future[h][slot..slot + 6].copy_from_slice(&summ.features());
                }
            }
        }
        let target = match targets {
            None => None,
            Some(ts) => {
                if ts.len() != b {
                    return Err(Error::Misaligned(
                        "targets and windows differ in count".into(),
                    ));
                }
                let mut data = Vec::with_capacity(b * l_len * 6);
                for t in ts {
                    if t.len() < l_len {
                        return Err(Error::Misaligned(format!(
                            "target covers {} horizons, need {l_len}",
                            t.len()
                        )));
                    }
                    t.iter()
                        .take(l_len)
                        .for_each(|s| data.extend_from_slice(&s.features()));
                }
                Some(Tensor::new(&[b, l_len, 6], data)?)
            }
        };
        Ok(Self {
            size: b,
            past_frames: past_frames
                .into_iter()
                .map(|d| Tensor::new(&[b, 3 * fps], d))
                .collect::<Result<_>>()?,
            past_summaries: past_summaries
                .into_iter()
                .map(|d| Tensor::new(&[b, 6], d))
                .collect::<Result<_>>()?,
            others_past: others_past
                .into_iter()
                .map(|d| Tensor::new(&[b * n, 6], d))
                .collect::<Result<_>>()?,
            others_future: others_future
                .into_iter()
                .map(|d| Tensor::new(&[b, n, 6], d))
                .collect::<Result<_>>()?,
            others_mask: Tensor::new(&[b, n], mask)?,
            target,
        })
    }

    /// `(B, N + 1)` additive scores: 0 for the temporary prediction and present users.
    pub fn expert_bias(&self) -> Tensor {
        let s = self.others_mask.shape();
        let (b, n) = (s[0], s[1]);
        let mut data = Vec::with_capacity(b * (n + 1));
        for row in self.others_mask.data().chunks_exact(n) {
            data.push(0.0);
            data.extend(
                row.iter()
                    .map(|m| if *m > 0.0 { 0.0 } else { ABSENT_SCORE }),
            );
        }
        Tensor::new(&[b, n + 1], data).expect("expert bias shape")
    }
}

/// Concatenates the temporary prediction with the roster's summaries and
/// presence flags, then applies one dense projection and the summary head.
pub fn mlp_mixing(
    g: &mut Graph,
    p: &Bound,
    layer: &Linear,
    temp: Var,
    others: Var,
    mask: Var,
) -> Var {
    let s = g.shape(others).to_vec();
    let flat = g.reshape(others, &[s[0], s[1] * s[2]]);
    let x = g.concat(&[temp, flat, mask], 1);
    let raw = layer.forward(g, p, x);
    summary_head(g, raw)
}

/// Softmax-weighted sum of expert locations; returns `(output, weights)`.
fn mix_experts(g: &mut Graph, query: Var, keys: Var, bias: Var, experts: Var) -> (Var, Var) {
    let scores = g.batched_dot(query, keys);
    let scores = g.add(scores, bias);
    let alpha = g.softmax_last(scores);
    let mixed = g.weighted_sum(alpha, experts);
    let mu = g.slice(mixed, 1, 0, 3);
    let mu = g.normalize_last(mu);
    let sigma = g.slice(mixed, 1, 3, 3);
    let sigma = g.relu(sigma);
    (g.concat(&[mu, sigma], 1), alpha)
}

fn stack_experts(g: &mut Graph, temp: Var, others: Var) -> Var {
    let b = g.shape(temp)[0];
    let t3 = g.reshape(temp, &[b, 1, 6]);
    g.concat(&[t3, others], 1)
}

/// Attention over `{temp} ∪ others` keyed by a shared embedding of each location.
///
/// `bias` is `(B, N + 1)` with column 0 for the temporary prediction.
pub fn ame_location(
    g: &mut Graph,
    p: &Bound,
    embed: &Linear,
    temp: Var,
    others: Var,
    bias: Var,
) -> (Var, Var) {
    let experts = stack_experts(g, temp, others);
    let s = g.shape(experts).to_vec();
    let flat = g.reshape(experts, &[s[0] * s[1], 6]);
    let keys = embed.forward(g, p, flat);
    let keys = g.reshape(keys, &[s[0], s[1], embed.output]);
    let query = embed.forward(g, p, temp);
    mix_experts(g, query, keys, bias, experts)
}

/// Attention keyed by embedded hidden states: others' from a shared LSTM,
/// the target's from its decoder. The temporary prediction is keyed by the
/// target's own embedding.
#[allow(clippy::too_many_arguments)]
pub fn ame_hidden(
    g: &mut Graph,
    p: &Bound,
    embed: &Linear,
    temp: Var,
    others_loc: Var,
    others_hidden: Var,
    target_hidden: Var,
    bias: Var,
) -> (Var, Var) {
    let experts = stack_experts(g, temp, others_loc);
    let query = embed.forward(g, p, target_hidden);
    let s = g.shape(others_hidden).to_vec();
    let flat = g.reshape(others_hidden, &[s[0] * s[1], s[2]]);
    let keys = embed.forward(g, p, flat);
    let keys = g.reshape(keys, &[s[0], s[1], embed.output]);
    let q3 = g.reshape(query, &[s[0], 1, embed.output]);
    let keys = g.concat(&[q3, keys], 1);
    mix_experts(g, query, keys, bias, experts)
}

/// Graph outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct TrajectoryForward {
    /// `L` predictions of shape `(B, 6)`.
    pub preds: Vec<Var>,
    /// Expert weights per horizon for the attention variants.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryModel {
    cfg: TrajectoryConfig,
    params: ParamStore,
    encoder: LstmCell,
    decoder: Option<LstmCell>,
    head: Linear,
    mixing: Option<Linear>,
    embed: Option<Linear>,
    shared: Option<LstmCell>,
    trained: bool,
}

impl TrajectoryModel {
    pub fn new(cfg: TrajectoryConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let h = cfg.hidden;
        let single = cfg.variant == TrajectoryVariant::SingleLstm;
        let enc_in = if single { 6 } else { 3 * cfg.frames_per_second };
        let encoder = LstmCell::new(&mut params, "encoder", enc_in, h, &mut rng);
        let decoder = (!single).then(|| LstmCell::new(&mut params, "decoder", 6, h, &mut rng));
        let head = Linear::new(&mut params, "head", h, 6, &mut rng);
        let mut mixing = None;
        let mut embed = None;
        let mut shared = None;
        match cfg.variant {
            TrajectoryVariant::MlpMixing => {
                let layer = Linear::new(&mut params, "mixing", 6 + 7 * cfg.n_others, 6, &mut rng);
                set_pass_through(&mut params, &layer);
                mixing = Some(layer);
            }
            TrajectoryVariant::AmeLocation => {
                embed = Some(Linear::new(
                    &mut params,
                    "embed",
                    6,
                    cfg.embed_dim,
                    &mut rng,
                ));
            }
            TrajectoryVariant::AmeHidden => {
                shared = Some(LstmCell::new(&mut params, "others_lstm", 6, h, &mut rng));
                embed = Some(Linear::new(
                    &mut params,
                    "embed",
                    h,
                    cfg.embed_dim,
                    &mut rng,
                ));
            }
            TrajectoryVariant::Seq2Seq | TrajectoryVariant::SingleLstm => {}
        }
        Ok(Self {
            cfg,
            params,
            encoder,
            decoder,
            head,
            mixing,
            embed,
            shared,
            trained: false,
        })
    }

    pub fn config(&self) -> &TrajectoryConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn set_trained(&mut self, trained: bool) {
        self.trained = trained;
    }

    pub fn encoder(&self) -> &LstmCell {
        &self.encoder
    }

    pub fn mixing_layer(&self) -> Option<&Linear> {
        self.mixing.as_ref()
    }

    pub fn embedding(&self) -> Option<&Linear> {
        self.embed.as_ref()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &TrajectoryBatch,
    ) -> Result<TrajectoryForward> {
        let b = batch.size;
        if self.cfg.variant == TrajectoryVariant::SingleLstm {
            return self.forward_single(g, p, batch);
        }
        let decoder = self.decoder.as_ref().expect("seq2seq has a decoder");
        let (mut h, mut c) = self.encoder.zero_state(g, b);
        for x in &batch.past_frames {
            let x = g.constant(x.clone());
            (h, c) = self.encoder.step(g, p, x, h, c)?;
        }
        let mut input = g.constant(
            batch
                .past_summaries
                .last()
                .ok_or(Error::Empty("past"))?
                .clone(),
        );

        let needs_others = self.cfg.variant.uses_others();
        let mask = needs_others.then(|| g.constant(batch.others_mask.clone()));
        let bias = needs_others.then(|| g.constant(batch.expert_bias()));
        let n = batch.others_mask.shape()[1];

        let mut shared_state = None;
        if let Some(shared) = &self.shared {
            let (mut hs, mut cs) = shared.zero_state(g, b * n);
            for x in &batch.others_past {
                let x = g.constant(x.clone());
                (hs, cs) = shared.step(g, p, x, hs, cs)?;
            }
            shared_state = Some((hs, cs));
        }

        let mut preds = Vec::with_capacity(self.cfg.horizons);
        let mut attention = Vec::new();
        for step in 0..self.cfg.horizons {
            (h, c) = decoder.step(g, p, input, h, c)?;
            let raw = self.head.forward(g, p, h);
            let temp = summary_head(g, raw);
            let out = match self.cfg.variant {
                TrajectoryVariant::Seq2Seq => temp,
                TrajectoryVariant::MlpMixing => {
                    let others = g.constant(batch.others_future[step].clone());
                    let layer = self.mixing.as_ref().expect("mixing layer");
                    mlp_mixing(g, p, layer, temp, others, mask.expect("mask"))
                }
                TrajectoryVariant::AmeLocation => {
                    let others = g.constant(batch.others_future[step].clone());
                    let embed = self.embed.as_ref().expect("embedding");
                    let (out, alpha) = ame_location(g, p, embed, temp, others, bias.expect("bias"));
                    attention.push(alpha);
                    out
                }
                TrajectoryVariant::AmeHidden => {
                    let loc = g.constant(batch.others_future[step].clone());
                    let flat = batch.others_future[step].clone().reshape(&[b * n, 6])?;
                    let x = g.constant(flat);
                    let shared = self.shared.as_ref().expect("shared lstm");
                    let (hs, cs) = shared_state.expect("shared state");
                    let (hs, cs) = shared.step(g, p, x, hs, cs)?;
                    shared_state = Some((hs, cs));
                    let hid = g.reshape(hs, &[b, n, self.cfg.hidden]);
                    let embed = self.embed.as_ref().expect("embedding");
                    let (out, alpha) =
                        ame_hidden(g, p, embed, temp, loc, hid, h, bias.expect("bias"));
                    attention.push(alpha);
                    out
                }
                TrajectoryVariant::SingleLstm => unreachable!(),
            };
            preds.push(out);
            input = out;
        }
        g.check()?;
        Ok(TrajectoryForward { preds, attention })
    }

    fn forward_single(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &TrajectoryBatch,
    ) -> Result<TrajectoryForward> {
        let (mut h, mut c) = self.encoder.zero_state(g, batch.size);
        for x in &batch.past_summaries {
            let x = g.constant(x.clone());
            (h, c) = self.encoder.step(g, p, x, h, c)?;
        }
        let mut preds = Vec::with_capacity(self.cfg.horizons);
        for step in 0..self.cfg.horizons {
            let raw = self.head.forward(g, p, h);
            let y = summary_head(g, raw);
            preds.push(y);
            if step + 1 < self.cfg.horizons {
                (h, c) = self.encoder.step(g, p, y, h, c)?;
            }
        }
        g.check()?;
        Ok(TrajectoryForward {
            preds,
            attention: Vec::new(),
        })
    }

    /// Stacks per-horizon predictions into `(B, L, 6)`.
    pub fn stack_preds(g: &mut Graph, preds: &[Var]) -> Var {
        let b = g.shape(preds[0])[0];
        let parts: Vec<Var> = preds.iter().map(|p| g.reshape(*p, &[b, 1, 6])).collect();
        g.concat(&parts, 1)
    }

    pub fn loss(&self, g: &mut Graph, p: &Bound, batch: &TrajectoryBatch) -> Result<Var> {
        let target = batch.target.clone().ok_or(Error::Empty("batch target"))?;
        let fwd = self.forward(g, p, batch)?;
        let pred = Self::stack_preds(g, &fwd.preds);
        let target = g.constant(target);
        let loss = g.mse(pred, target);
        g.check()?;
        Ok(loss)
    }

    /// Inference on frozen parameters.
    pub fn predict(&self, windows: &[&TrajectoryWindow]) -> Result<Vec<Vec<SecondSummary>>> {
        let batch = TrajectoryBatch::new(&self.cfg, windows, None)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let fwd = self.forward(&mut g, &p, &batch)?;
        let mut out = vec![Vec::with_capacity(self.cfg.horizons); windows.len()];
        for pred in fwd.preds {
            for (i, row) in g.value(pred).data().chunks_exact(6).enumerate() {
                out[i].push(SecondSummary::from_features(row)?);
            }
        }
        Ok(out)
    }

    pub fn predict_window(&self, w: &TrajectoryWindow) -> Result<Vec<SecondSummary>> {
        Ok(self.predict(&[w])?.remove(0))
    }
}

/// Mixing weights that copy the temporary prediction and ignore others.
fn set_pass_through(params: &mut ParamStore, layer: &Linear) {
    let w = params.get_mut(layer.w);
    w.data_mut().fill(0.0);
    for i in 0..6 {
        w.data_mut()[i * 6 + i] = 1.0;
    }
    params.get_mut(layer.b).data_mut().fill(0.0);
}

impl Trainable for TrajectoryModel {
    type Sample = TrajectorySample;

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn batch_loss(&self, g: &mut Graph, p: &Bound, samples: &[&TrajectorySample]) -> Result<Var> {
        let windows: Vec<&TrajectoryWindow> = samples.iter().map(|s| &s.window).collect();
        let targets: Vec<&[SecondSummary]> = samples.iter().map(|s| s.target.as_slice()).collect();
        let batch = TrajectoryBatch::new(&self.cfg, &windows, Some(&targets))?;
        self.loss(g, p, &batch)
    }

    fn mark_trained(&mut self) {
        self.trained = true;
    }
}
