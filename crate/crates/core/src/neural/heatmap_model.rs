//! ConvLSTM sequence-to-sequence heatmap predictor.
//!
//! Three stacked ConvLSTM layers encode the past heatmaps. A second stack,
//! started from the encoder state, is unrolled over the horizons with its own
//! previous output as input. At every horizon a small FCN reads the hidden
//! maps of all decoder layers, optionally joined by fusion features, and
//! emits one non-negative heatmap.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, ConvLstmCell};
use super::params::{Bound, ParamStore};
use super::tensor::{Graph, Tensor, Var};
use super::train::Trainable;
use crate::error::{Error, Result};
use crate::heatmap::{COLS, ROWS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    None,
    /// Others' average heatmaps through their own ConvLSTM.
    OthersBranch,
    /// Others' average heatmap at the predicted second, as a raw channel.
    OthersDirect,
    Saliency,
    /// Others branch plus saliency features.
    OthersSaliency,
}

impl Fusion {
    pub const ALL: [Fusion; 5] = [
        Fusion::None,
        Fusion::OthersBranch,
        Fusion::OthersDirect,
        Fusion::Saliency,
        Fusion::OthersSaliency,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Fusion::None => "none",
            Fusion::OthersBranch => "others-branch",
            Fusion::OthersDirect => "others-direct",
            Fusion::Saliency => "saliency",
            Fusion::OthersSaliency => "others-saliency",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }

    pub fn uses_others(self) -> bool {
        !matches!(self, Fusion::None | Fusion::Saliency)
    }

    pub fn uses_saliency(self) -> bool {
        matches!(self, Fusion::Saliency | Fusion::OthersSaliency)
    }

    fn uses_branch(self) -> bool {
        matches!(self, Fusion::OthersBranch | Fusion::OthersSaliency)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatmapModelConfig {
    pub fusion: Fusion,
    /// Hidden channels per stacked layer.
    pub channels: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
    pub past_seconds: usize,
    pub horizons: usize,
    pub kernel: usize,
    pub others_channels: usize,
    pub saliency_frames: usize,
    pub saliency_channels: usize,
    pub head_channels: usize,
    /// Raw heatmaps are divided by this before entering the network.
    pub scale: f64,
    pub seed: u64,
}

impl Default for HeatmapModelConfig {
    fn default() -> Self {
        Self {
            fusion: Fusion::None,
            channels: vec![128, 64, 32],
            rows: ROWS,
            cols: COLS,
            past_seconds: 10,
            horizons: 10,
            kernel: 3,
            others_channels: 32,
            saliency_frames: 30,
            saliency_channels: 8,
            head_channels: 32,
            scale: 108.0 * 30.0,
            seed: 0,
        }
    }
}

impl HeatmapModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(
                "convlstm channels must be nonempty and positive".into(),
            ));
        }
        if self.rows == 0 || self.cols == 0 || self.past_seconds == 0 || self.horizons == 0 {
            return Err(Error::Config("heatmap model sizes must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("kernel size must be odd".into()));
        }
        if self.others_channels == 0
            || self.saliency_frames == 0
            || self.saliency_channels == 0
            || self.head_channels == 0
        {
            return Err(Error::Config(
                "fusion and head widths must be positive".into(),
            ));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Config("heatmap scale must be positive".into()));
        }
        Ok(())
    }

    fn plane(&self) -> usize {
        self.rows * self.cols
    }
}

/// One training or inference sequence. Grids are raw row-major `rows * cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSample {
    pub past: Vec<Vec<f64>>,
    /// Ground truth per horizon; may be empty for inference.
    pub target: Vec<Vec<f64>>,
    /// Others' average heatmaps over the past seconds.
    pub others_past: Vec<Vec<f64>>,
    /// Others' average heatmaps per horizon.
    pub others_future: Vec<Vec<f64>>,
    /// Per horizon, `saliency_frames` stacked maps.
    pub saliency: Vec<Vec<f64>>,
}

impl HeatmapSample {
    pub fn new(past: Vec<Vec<f64>>) -> Self {
        Self {
            past,
            target: Vec::new(),
            others_past: Vec::new(),
            others_future: Vec::new(),
            saliency: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeatmapBatch {
    pub size: usize,
    pub past: Vec<Tensor>,
    pub others_past: Vec<Tensor>,
    pub others_future: Vec<Tensor>,
    pub saliency: Vec<Tensor>,
    /// `(B, L, H, W)` when targets are known.
    pub target: Option<Tensor>,
}

fn stack_steps(
    samples: &[&HeatmapSample],
    pick: impl Fn(&HeatmapSample) -> &Vec<Vec<f64>>,
    steps: usize,
    per_step: usize,
    shape: &[usize],
    scale: f64,
    what: &str,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(steps);
    for s in 0..steps {
        let mut data = Vec::with_capacity(samples.len() * per_step);
        for sample in samples {
            let seq = pick(sample);
            if seq.len() != steps {
                return Err(Error::Misaligned(format!(
                    "{what}: {} steps, need {steps}",
                    seq.len()
                )));
            }
            if seq[s].len() != per_step {
                return Err(Error::Shape(format!(
                    "{what}: {} values, need {per_step}",
                    seq[s].len()
                )));
            }
            data.extend(seq[s].iter().map(|v| v / scale));
        }
        out.push(Tensor::new(shape, data)?);
    }
    Ok(out)
}

impl HeatmapBatch {
    pub fn new(
        cfg: &HeatmapModelConfig,
        samples: &[&HeatmapSample],
        with_target: bool,
    ) -> Result<Self> {
        let b = samples.len();
        if b == 0 {
            return Err(Error::Empty("batch"));
        }
        let (h, w, p) = (cfg.rows, cfg.cols, cfg.plane());
        let one = [b, 1, h, w];
        let past = stack_steps(
            samples,
            |s| &s.past,
            cfg.past_seconds,
            p,
            &one,
            cfg.scale,
            "past",
        )?;
        let (mut others_past, mut others_future, mut saliency) =
            (Vec::new(), Vec::new(), Vec::new());
        if cfg.fusion.uses_others() {
            if samples.iter().any(|s| s.others_future.is_empty()) {
                return Err(Error::MissingFusion("others' heatmaps"));
            }
            others_future = stack_steps(
                samples,
                |s| &s.others_future,
                cfg.horizons,
                p,
                &one,
                cfg.scale,
                "others future",
            )?;
            if cfg.fusion.uses_branch() {
                if samples.iter().any(|s| s.others_past.is_empty()) {
                    return Err(Error::MissingFusion("others' past heatmaps"));
                }
                others_past = stack_steps(
                    samples,
                    |s| &s.others_past,
                    cfg.past_seconds,
                    p,
                    &one,
                    cfg.scale,
                    "others past",
                )?;
            }
        }
        if cfg.fusion.uses_saliency() {
            if samples.iter().any(|s| s.saliency.is_empty()) {
                return Err(Error::MissingFusion("saliency maps"));
            }
            let n = cfg.saliency_frames;
            saliency = stack_steps(
                samples,
                |s| &s.saliency,
                cfg.horizons,
                n * p,
                &[b, n, h, w],
                1.0,
                "saliency",
            )?;
        }
        let target = if with_target {
            let steps = stack_steps(
                samples,
                |s| &s.target,
                cfg.horizons,
                p,
                &one,
                cfg.scale,
                "target",
            )?;
            let mut data = Vec::with_capacity(b * cfg.horizons * p);
            for i in 0..b {
                for t in &steps {
                    data.extend_from_slice(&t.data()[i * p..(i + 1) * p]);
                }
            }
            Some(Tensor::new(&[b, cfg.horizons, h, w], data)?)
        } else {
            None
        };
        Ok(Self {
            size: b,
            past,
            others_past,
            others_future,
            saliency,
            target,
        })
    }
}

/// Stacked ConvLSTM layers; layer `k` reads layer `k - 1`'s hidden map.
#[derive(Debug, Clone)]
pub struct ConvLstmStack {
    pub cells: Vec<ConvLstmCell>,
}

impl ConvLstmStack {
    pub fn new<R: rand::Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        channels: &[usize],
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let mut cells = Vec::with_capacity(channels.len());
        let mut prev = input;
        for (k, &c) in channels.iter().enumerate() {
            cells.push(ConvLstmCell::new(
                store,
                &format!("{name}.{k}"),
                prev,
                c,
                kernel,
                rng,
            ));
            prev = c;
        }
        Self { cells }
    }

    pub fn zero_state(
        &self,
        g: &mut Graph,
        batch: usize,
        rows: usize,
        cols: usize,
    ) -> Vec<(Var, Var)> {
        self.cells
            .iter()
            .map(|c| c.zero_state(g, batch, rows, cols))
            .collect()
    }

    pub fn step(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        state: &[(Var, Var)],
    ) -> Result<Vec<(Var, Var)>> {
        if state.len() != self.cells.len() {
            return Err(Error::Shape(format!(
                "{} states for {} layers",
                state.len(),
                self.cells.len()
            )));
        }
        let mut input = x;
        let mut next = Vec::with_capacity(state.len());
        for (cell, &(h, c)) in self.cells.iter().zip(state) {
            let (h2, c2) = cell.step(g, p, input, h, c)?;
            next.push((h2, c2));
            input = h2;
        }
        Ok(next)
    }
}

/// Two same-size convolutions over a second's stacked saliency maps.
#[derive(Debug, Clone)]
pub struct SaliencyFcn {
    pub first: Conv2d,
    pub second: Conv2d,
}

impl SaliencyFcn {
    pub fn new<R: rand::Rng>(
        store: &mut ParamStore,
        frames: usize,
        channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            first: Conv2d::new(store, "saliency.0", frames, channels, kernel, rng),
            second: Conv2d::new(store, "saliency.1", channels, channels, kernel, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, sal: Var) -> Var {
        let y = self.first.forward(g, p, sal);
        let y = g.relu(y);
        self.second.forward(g, p, y)
    }
}

#[derive(Debug, Clone)]
pub struct HeatmapModel {
    cfg: HeatmapModelConfig,
    params: ParamStore,
    encoder: ConvLstmStack,
    decoder: ConvLstmStack,
    branch: Option<ConvLstmCell>,
    saliency: Option<SaliencyFcn>,
    head: (Conv2d, Conv2d),
    trained: bool,
}

impl HeatmapModel {
    pub fn new(cfg: HeatmapModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let k = cfg.kernel;
        let encoder = ConvLstmStack::new(&mut params, "encoder", 1, &cfg.channels, k, &mut rng);
        let decoder = ConvLstmStack::new(&mut params, "decoder", 1, &cfg.channels, k, &mut rng);
        let mut head_in: usize = cfg.channels.iter().sum();
        let branch = cfg.fusion.uses_branch().then(|| {
            head_in += cfg.others_channels;
            ConvLstmCell::new(&mut params, "others", 1, cfg.others_channels, k, &mut rng)
        });
        if cfg.fusion == Fusion::OthersDirect {
            head_in += 1;
        }
        let saliency = cfg.fusion.uses_saliency().then(|| {
            head_in += cfg.saliency_channels;
            SaliencyFcn::new(
                &mut params,
                cfg.saliency_frames,
                cfg.saliency_channels,
                k,
                &mut rng,
            )
        });
        let h0 = Conv2d::new(
            &mut params,
            "head.0",
            head_in,
            cfg.head_channels,
            k,
            &mut rng,
        );
        let h1 = Conv2d::new(&mut params, "head.1", cfg.head_channels, 1, k, &mut rng);
        // Start near the scale of a normalized second-level heatmap.
        params.get_mut(h1.b).data_mut().fill(-5.0);
        Ok(Self {
            cfg,
            params,
            encoder,
            decoder,
            branch,
            saliency,
            head: (h0, h1),
            trained: false,
        })
    }

    pub fn config(&self) -> &HeatmapModelConfig {
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

    pub fn encoder(&self) -> &ConvLstmStack {
        &self.encoder
    }

    pub fn saliency_fcn(&self) -> Option<&SaliencyFcn> {
        self.saliency.as_ref()
    }

    /// `L` normalized predictions of shape `(B, 1, H, W)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &HeatmapBatch) -> Result<Vec<Var>> {
        let (b, rows, cols) = (batch.size, self.cfg.rows, self.cfg.cols);
        let mut state = self.encoder.zero_state(g, b, rows, cols);
        for x in &batch.past {
            let x = g.constant(x.clone());
            state = self.encoder.step(g, p, x, &state)?;
        }
        let mut branch_state = None;
        if let Some(cell) = &self.branch {
            let (mut d, mut c) = cell.zero_state(g, b, rows, cols);
            for x in &batch.others_past {
                let x = g.constant(x.clone());
                (d, c) = cell.step(g, p, x, d, c)?;
            }
            branch_state = Some((d, c));
        }

        let mut input = g.constant(batch.past.last().ok_or(Error::Empty("past"))?.clone());
        let mut preds = Vec::with_capacity(self.cfg.horizons);
        for step in 0..self.cfg.horizons {
            state = self.decoder.step(g, p, input, &state)?;
            let mut feats: Vec<Var> = state.iter().map(|(h, _)| *h).collect();
            if let (Some(cell), Some((d, c))) = (&self.branch, branch_state) {
                let x = g.constant(batch.others_future[step].clone());
                let (d, c) = cell.step(g, p, x, d, c)?;
                branch_state = Some((d, c));
                feats.push(d);
            }
            if self.cfg.fusion == Fusion::OthersDirect {
                feats.push(g.constant(batch.others_future[step].clone()));
            }
            if let Some(fcn) = &self.saliency {
                let s = g.constant(batch.saliency[step].clone());
                feats.push(fcn.forward(g, p, s));
            }
            let x = g.concat(&feats, 1);
            let y = self.head.0.forward(g, p, x);
            let y = g.relu(y);
            let y = self.head.1.forward(g, p, y);
            let y = g.softplus(y);
            preds.push(y);
            input = y;
        }
        g.check()?;
        Ok(preds)
    }

    pub fn loss(&self, g: &mut Graph, p: &Bound, batch: &HeatmapBatch) -> Result<Var> {
        let target = batch.target.clone().ok_or(Error::Empty("batch target"))?;
        let preds = self.forward(g, p, batch)?;
        let pred = g.concat(&preds, 1);
        let target = g.constant(target);
        let loss = g.mse(pred, target);
        g.check()?;
        Ok(loss)
    }

    /// Raw-scale predictions, `L` grids per sample.
    pub fn predict(&self, samples: &[&HeatmapSample]) -> Result<Vec<Vec<Vec<f64>>>> {
        let batch = HeatmapBatch::new(&self.cfg, samples, false)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let preds = self.forward(&mut g, &p, &batch)?;
        let plane = self.cfg.plane();
        let mut out = vec![Vec::with_capacity(self.cfg.horizons); samples.len()];
        for pred in preds {
            for (i, grid) in g.value(pred).data().chunks_exact(plane).enumerate() {
                out[i].push(grid.iter().map(|v| v * self.cfg.scale).collect());
            }
        }
        Ok(out)
    }
}

impl Trainable for HeatmapModel {
    type Sample = HeatmapSample;

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn batch_loss(&self, g: &mut Graph, p: &Bound, samples: &[&HeatmapSample]) -> Result<Var> {
        let batch = HeatmapBatch::new(&self.cfg, samples, true)?;
        self.loss(g, p, &batch)
    }

    fn mark_trained(&mut self) {
        self.trained = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(fusion: Fusion) -> HeatmapModelConfig {
        HeatmapModelConfig {
            fusion,
            channels: vec![4, 3, 2],
            rows: 6,
            cols: 12,
            past_seconds: 3,
            horizons: 2,
            others_channels: 2,
            saliency_frames: 3,
            saliency_channels: 2,
            head_channels: 3,
            scale: 1.0,
            ..HeatmapModelConfig::default()
        }
    }

    fn sample(cfg: &HeatmapModelConfig, seed: u64) -> HeatmapSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = cfg.plane();
        let grid = |rng: &mut ChaCha8Rng| {
            Tensor::uniform(&[p], 0.5, rng)
                .into_data()
                .iter()
                .map(|v| v + 0.5)
                .collect()
        };
        HeatmapSample {
            past: (0..cfg.past_seconds).map(|_| grid(&mut rng)).collect(),
            target: (0..cfg.horizons).map(|_| grid(&mut rng)).collect(),
            others_past: (0..cfg.past_seconds).map(|_| grid(&mut rng)).collect(),
            others_future: (0..cfg.horizons).map(|_| grid(&mut rng)).collect(),
            saliency: (0..cfg.horizons)
                .map(|_| {
                    (0..cfg.saliency_frames)
                        .flat_map(|_| grid(&mut rng))
                        .collect::<Vec<f64>>()
                })
                .collect(),
        }
    }

    #[test]
    fn default_hidden_shapes() {
        let cfg = HeatmapModelConfig::default();
        let m = HeatmapModel::new(cfg).unwrap();
        let mut g = Graph::new();
        let p = m.params().bind_frozen(&mut g);
        let state = m.encoder().zero_state(&mut g, 1, ROWS, COLS);
        let x = g.constant(Tensor::zeros(&[1, 1, ROWS, COLS]));
        let next = m.encoder().step(&mut g, &p, x, &state).unwrap();
        let shapes: Vec<Vec<usize>> = next.iter().map(|(h, _)| g.shape(*h).to_vec()).collect();
        assert_eq!(
            shapes,
            [
                vec![1, 128, 18, 36],
                vec![1, 64, 18, 36],
                vec![1, 32, 18, 36]
            ]
        );
    }

    #[test]
    fn zero_input_and_state_give_zero_hidden() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stack = ConvLstmStack::new(&mut store, "s", 1, &[4, 3, 2], 3, &mut rng);
        for v in store.values_mut() {
            v.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let state = stack.zero_state(&mut g, 2, 6, 12);
        let x = g.constant(Tensor::zeros(&[2, 1, 6, 12]));
        for (h, _) in stack.step(&mut g, &p, x, &state).unwrap() {
            assert!(g.value(h).data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn every_fusion_outputs_nonnegative_grids() {
        for f in Fusion::ALL {
            let cfg = small(f);
            let m = HeatmapModel::new(cfg.clone()).unwrap();
            let s = sample(&cfg, 4);
            let out = m.predict(&[&s, &s]).unwrap();
            assert_eq!(out.len(), 2);
            assert_eq!(out[0].len(), 2);
            assert!(
                out[0]
                    .iter()
                    .all(|g| g.len() == 72 && g.iter().all(|v| *v >= 0.0)),
                "{f:?}"
            );
            assert_eq!(out[0], out[1]);
        }
    }

    #[test]
    fn missing_fusion_inputs_rejected() {
        for f in [Fusion::OthersBranch, Fusion::OthersDirect, Fusion::Saliency] {
            let cfg = small(f);
            let m = HeatmapModel::new(cfg.clone()).unwrap();
            let mut s = sample(&cfg, 2);
            s.others_past.clear();
            s.others_future.clear();
            s.saliency.clear();
            assert!(
                matches!(m.predict(&[&s]), Err(Error::MissingFusion(_))),
                "{f:?}"
            );
        }
    }

    #[test]
    fn zero_saliency_gives_bias_only_features() {
        let cfg = small(Fusion::Saliency);
        let m = HeatmapModel::new(cfg.clone()).unwrap();
        let fcn = m.saliency_fcn().unwrap();
        let mut g = Graph::new();
        let p = m.params().bind_frozen(&mut g);
        let zero = g.constant(Tensor::zeros(&[1, 3, 6, 12]));
        let out = fcn.forward(&mut g, &p, zero);
        assert_eq!(g.shape(out), [1, 2, 6, 12]);
        // Oracle: a constant map convolved circularly in longitude sees
        // fewer taps only in the first and last rows.
        let b1: Vec<f64> = m
            .params()
            .get(fcn.first.b)
            .data()
            .iter()
            .map(|v| v.max(0.0))
            .collect();
        let k = m.params().get(fcn.second.k);
        let b2 = m.params().get(fcn.second.b).data();
        let out = g.value(out).data();
        for o in 0..2 {
            for r in 0..6 {
                let mut want = b2[o];
                for (c, bc) in b1.iter().enumerate() {
                    for dr in 0..3 {
                        let rr = r as isize + dr as isize - 1;
                        if !(0..6).contains(&rr) {
                            continue;
                        }
                        for dc in 0..3 {
                            want += k.data()[((o * 2 + c) * 3 + dr) * 3 + dc] * bc;
                        }
                    }
                }
                for col in 0..12 {
                    assert!((out[(o * 6 + r) * 12 + col] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn horizon_output_ignores_later_fusion_inputs() {
        for f in [
            Fusion::OthersBranch,
            Fusion::OthersDirect,
            Fusion::OthersSaliency,
        ] {
            let cfg = small(f);
            let m = HeatmapModel::new(cfg.clone()).unwrap();
            let s = sample(&cfg, 9);
            let mut t = s.clone();
            t.others_future[1].iter_mut().for_each(|v| *v += 3.0);
            t.saliency[1].iter_mut().for_each(|v| *v -= 1.0);
            let a = m.predict(&[&s]).unwrap();
            let b = m.predict(&[&t]).unwrap();
            assert_eq!(a[0][0], b[0][0], "{f:?}");
            assert_ne!(a[0][1], b[0][1], "{f:?}");
        }
    }

    #[test]
    fn fusion_names_round_trip() {
        for f in Fusion::ALL {
            assert_eq!(Fusion::from_name(f.name()), Some(f));
        }
    }
}
