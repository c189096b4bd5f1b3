//! Random instances for every differentiable primitive and layer.

use fovcast_core::neural::heatmap_model::{ConvLstmStack, SaliencyFcn};
use fovcast_core::neural::layers::{summary_head, Conv2d, Linear, LstmCell};
use fovcast_core::neural::trajectory::{ame_hidden, ame_location, mlp_mixing};
use fovcast_core::neural::{Bound, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{off_zero, rand_tensor, Program};

pub type Instance = (Vec<Tensor>, Box<Program<'static>>);
pub type Maker = fn(&mut ChaCha8Rng) -> Instance;

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=4)
}

/// Leaves are the store's values followed by `inputs`.
fn with_params(store: &ParamStore, inputs: Vec<Tensor>) -> Vec<Tensor> {
    let mut leaves = store.values().to_vec();
    leaves.extend(inputs);
    leaves
}

fn split(vars: &[Var], n: usize) -> (Bound, &[Var]) {
    (Bound::from_vars(vars[..n].to_vec()), &vars[n..])
}

fn unary(rng: &mut ChaCha8Rng, op: fn(&mut Graph, Var) -> Var) -> Instance {
    let shape = [dim(rng), dim(rng) + 1];
    (
        vec![rand_tensor(rng, &shape)],
        Box::new(move |g, v| op(g, v[0])),
    )
}

fn binary(rng: &mut ChaCha8Rng, op: fn(&mut Graph, Var, Var) -> Var) -> Instance {
    let shape = [dim(rng), dim(rng), 2];
    (
        vec![rand_tensor(rng, &shape), rand_tensor(rng, &shape)],
        Box::new(move |g, v| op(g, v[0], v[1])),
    )
}

fn matmul(rng: &mut ChaCha8Rng) -> Instance {
    let (m, k, n) = (dim(rng), dim(rng), dim(rng));
    (
        vec![rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k, n])],
        Box::new(|g, v| g.matmul(v[0], v[1])),
    )
}

fn add_last(rng: &mut ChaCha8Rng) -> Instance {
    let (m, n) = (dim(rng), dim(rng));
    (
        vec![rand_tensor(rng, &[m, 2, n]), rand_tensor(rng, &[n])],
        Box::new(|g, v| g.add_last(v[0], v[1])),
    )
}

fn channel_bias(rng: &mut ChaCha8Rng) -> Instance {
    let (n, c) = (dim(rng), dim(rng));
    (
        vec![rand_tensor(rng, &[n, c, 2, 3]), rand_tensor(rng, &[c])],
        Box::new(|g, v| g.channel_bias(v[0], v[1])),
    )
}

fn scale(rng: &mut ChaCha8Rng) -> Instance {
    let k: f64 = rng.random_range(-3.0..3.0);
    let shape = [dim(rng), 3];
    (
        vec![rand_tensor(rng, &shape)],
        Box::new(move |g, v| g.scale(v[0], k)),
    )
}

fn relu(rng: &mut ChaCha8Rng) -> Instance {
    let shape = [dim(rng), 5];
    (vec![off_zero(rng, &shape)], Box::new(|g, v| g.relu(v[0])))
}

fn concat(rng: &mut ChaCha8Rng) -> Instance {
    let axis = rng.random_range(0..3);
    let mut shapes = vec![[dim(rng), dim(rng), dim(rng)]; 3];
    for s in shapes.iter_mut().skip(1) {
        s[axis] = dim(rng);
    }
    let leaves = shapes.iter().map(|s| rand_tensor(rng, s)).collect();
    (leaves, Box::new(move |g, v| g.concat(v, axis)))
}

fn slice(rng: &mut ChaCha8Rng) -> Instance {
    let axis = rng.random_range(0..3);
    let shape = [dim(rng) + 1, dim(rng) + 1, dim(rng) + 1];
    let len = rng.random_range(1..=shape[axis]);
    let start = rng.random_range(0..=shape[axis] - len);
    (
        vec![rand_tensor(rng, &shape)],
        Box::new(move |g, v| g.slice(v[0], axis, start, len)),
    )
}

fn reshape(rng: &mut ChaCha8Rng) -> Instance {
    let (a, b) = (dim(rng), dim(rng));
    (
        vec![rand_tensor(rng, &[a, b, 2])],
        Box::new(move |g, v| {
            let r = g.reshape(v[0], &[2 * b, a]);
            // Shape-dependent follow-up so the reshape's layout matters.
            let w =
                g.constant(Tensor::new(&[a, 1], (0..a).map(|i| i as f64 + 1.0).collect()).unwrap());
            g.matmul(r, w)
        }),
    )
}

fn normalize_last(rng: &mut ChaCha8Rng) -> Instance {
    let shape = [dim(rng), 3];
    (
        vec![off_zero(rng, &shape)],
        Box::new(|g, v| g.normalize_last(v[0])),
    )
}

fn softmax_last(rng: &mut ChaCha8Rng) -> Instance {
    let shape = [dim(rng), dim(rng) + 1];
    let t = Tensor::uniform(&shape, 3.0, rng);
    (vec![t], Box::new(|g, v| g.softmax_last(v[0])))
}

fn batched_dot(rng: &mut ChaCha8Rng) -> Instance {
    let (b, n, d) = (dim(rng), dim(rng), dim(rng));
    (
        vec![rand_tensor(rng, &[b, d]), rand_tensor(rng, &[b, n, d])],
        Box::new(|g, v| g.batched_dot(v[0], v[1])),
    )
}

fn weighted_sum(rng: &mut ChaCha8Rng) -> Instance {
    let (b, n, f) = (dim(rng), dim(rng), dim(rng));
    (
        vec![rand_tensor(rng, &[b, n]), rand_tensor(rng, &[b, n, f])],
        Box::new(|g, v| g.weighted_sum(v[0], v[1])),
    )
}

fn conv2d(rng: &mut ChaCha8Rng) -> Instance {
    let (n, c, o) = (dim(rng).min(2), dim(rng), dim(rng));
    let (h, w) = (rng.random_range(1..=4), rng.random_range(2..=5));
    let (kh, kw) = if rng.random_bool(0.5) { (3, 3) } else { (1, 3) };
    (
        vec![
            rand_tensor(rng, &[n, c, h, w]),
            rand_tensor(rng, &[o, c, kh, kw]),
        ],
        Box::new(|g, v| g.conv2d(v[0], v[1])),
    )
}

fn reduce(rng: &mut ChaCha8Rng, mean: bool) -> Instance {
    let shape = [dim(rng), 3];
    (
        vec![rand_tensor(rng, &shape)],
        Box::new(move |g, v| if mean { g.mean(v[0]) } else { g.sum(v[0]) }),
    )
}

fn mse(rng: &mut ChaCha8Rng) -> Instance {
    let shape = [dim(rng), 4];
    (
        vec![rand_tensor(rng, &shape), rand_tensor(rng, &shape)],
        Box::new(|g, v| g.mse(v[0], v[1])),
    )
}

fn linear(rng: &mut ChaCha8Rng) -> Instance {
    let mut store = ParamStore::new();
    let (i, o, b) = (dim(rng), dim(rng), dim(rng));
    let layer = Linear::new(&mut store, "l", i, o, rng);
    store
        .get_mut(layer.b)
        .data_mut()
        .copy_from_slice(rand_tensor(rng, &[o]).data());
    let n = store.len();
    let leaves = with_params(&store, vec![rand_tensor(rng, &[b, i])]);
    (
        leaves,
        Box::new(move |g, v| {
            let (p, x) = split(v, n);
            layer.forward(g, &p, x[0])
        }),
    )
}

fn lstm_step(rng: &mut ChaCha8Rng) -> Instance {
    let mut store = ParamStore::new();
    let (i, h, b) = (4, dim(rng), dim(rng));
    let cell = LstmCell::new(&mut store, "lstm", i, h, rng);
    let n = store.len();
    let leaves = with_params(
        &store,
        vec![
            rand_tensor(rng, &[b, i]),
            rand_tensor(rng, &[b, h]),
            rand_tensor(rng, &[b, h]),
        ],
    );
    (
        leaves,
        Box::new(move |g, v| {
            let (p, x) = split(v, n);
            let (h2, c2) = cell.step(g, &p, x[0], x[1], x[2]).unwrap();
            g.concat(&[h2, c2], 1)
        }),
    )
}

fn conv_layer(rng: &mut ChaCha8Rng) -> Instance {
    let mut store = ParamStore::new();
    let (c, o) = (dim(rng), dim(rng));
    let layer = Conv2d::new(&mut store, "conv", c, o, 3, rng);
    store
        .get_mut(layer.b)
        .data_mut()
        .copy_from_slice(rand_tensor(rng, &[o]).data());
    let n = store.len();
    let leaves = with_params(&store, vec![rand_tensor(rng, &[1, c, 3, 4])]);
    (
        leaves,
        Box::new(move |g, v| {
            let (p, x) = split(v, n);
            layer.forward(g, &p, x[0])
        }),
    )
}

/// Reduced config: channels (4, 3, 2) on a 6x12 grid, one step from a random state.
fn convlstm_step(rng: &mut ChaCha8Rng) -> Instance {
    let mut store = ParamStore::new();
    let channels = [4, 3, 2];
    let stack = ConvLstmStack::new(&mut store, "enc", 1, &channels, 3, rng);
    let n = store.len();
    let mut inputs = vec![rand_tensor(rng, &[1, 1, 6, 12])];
    for c in channels {
        inputs.push(rand_tensor(rng, &[1, c, 6, 12]));
        inputs.push(rand_tensor(rng, &[1, c, 6, 12]));
    }
    let leaves = with_params(&store, inputs);
    (
        leaves,
        Box::new(move |g, v| {
            let (p, x) = split(v, n);
            let state: Vec<(Var, Var)> = x[1..].chunks(2).map(|s| (s[0], s[1])).collect();
            let next = stack.step(g, &p, x[0], &state).unwrap();
            let parts: Vec<Var> = next.iter().flat_map(|(h, c)| [*h, *c]).collect();
            g.concat(&parts, 1)
        }),
    )
}

fn head(rng: &mut ChaCha8Rng) -> Instance {
    let b = dim(rng);
    (
        vec![off_zero(rng, &[b, 6])],
        Box::new(|g, v| summary_head(g, v[0])),
    )
}

fn summary_batch(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, shape);
    for row in t.data_mut().chunks_exact_mut(6) {
        let n = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2])
            .sqrt()
            .max(0.3);
        row[..3].iter_mut().for_each(|x| *x /= n);
        row[3..].iter_mut().for_each(|x| *x = 0.05 + x.abs() * 0.2);
    }
    t
}

fn mixing(rng: &mut ChaCha8Rng) -> Instance {
    let mut store = ParamStore::new();
    let (b, others) = (dim(rng), dim(rng));
    let layer = Linear::new(&mut store, "mix", 6 + 7 * others, 6, rng);
    let n = store.len();
    let mask: Vec<f64> = (0..b * others)
        .map(|_| rng.random_range(0..2) as f64)
        .collect();
    let leaves = with_params(
        &store,
        vec![
            summary_batch(rng, &[b, 6]),
            summary_batch(rng, &[b, others, 6]),
            Tensor::new(&[b, others], mask).unwrap(),
        ],
    );
    (
        leaves,
        Box::new(move |g, v| {
            let (p, x) = split(v, n);
            mlp_mixing(g, &p, &layer, x[0], x[1], x[2])
        }),
    )
}

fn expert_bias(rng: &mut ChaCha8Rng, b: usize, others: usize) -> Tensor {
    let mut data = Vec::with_capacity(b * (others + 1));
    for _ in 0..b {
        data.push(0.0);
        for _ in 0..others {
            data.push(if rng.random_bool(0.75) { 0.0 } else { -1e9 });
        }
    }
    Tensor::new(&[b, others + 1], data).unwrap()
}

fn ame_loc(rng: &mut ChaCha8Rng) -> Instance {
    let mut store = ParamStore::new();
    let (b, others) = (dim(rng), dim(rng));
    let embed = Linear::new(&mut store, "embed", 6, 4, rng);
    let n = store.len();
    let bias = expert_bias(rng, b, others);
    let leaves = with_params(
        &store,
        vec![
            summary_batch(rng, &[b, 6]),
            summary_batch(rng, &[b, others, 6]),
        ],
    );
    (
        leaves,
        Box::new(move |g, v| {
            let (p, x) = split(v, n);
            let bias = g.constant(bias.clone());
            let (out, alpha) = ame_location(g, &p, &embed, x[0], x[1], bias);
            g.concat(&[out, alpha], 1)
        }),
    )
}

fn ame_hid(rng: &mut ChaCha8Rng) -> Instance {
    let mut store = ParamStore::new();
    let (b, others, h) = (dim(rng), dim(rng), 3);
    let shared = LstmCell::new(&mut store, "shared", 6, h, rng);
    let embed = Linear::new(&mut store, "embed", h, 4, rng);
    let n = store.len();
    let bias = expert_bias(rng, b, others);
    let leaves = with_params(
        &store,
        vec![
            summary_batch(rng, &[b, 6]),
            summary_batch(rng, &[b, others, 6]),
            rand_tensor(rng, &[b * others, 6]),
            rand_tensor(rng, &[b, h]),
        ],
    );
    (
        leaves,
        Box::new(move |g, v| {
            let (p, x) = split(v, n);
            let (h0, c0) = shared.zero_state(g, b * others);
            let (hs, _) = shared.step(g, &p, x[2], h0, c0).unwrap();
            let hid = g.reshape(hs, &[b, others, h]);
            let bias = g.constant(bias.clone());
            let (out, alpha) = ame_hidden(g, &p, &embed, x[0], x[1], hid, x[3], bias);
            g.concat(&[out, alpha], 1)
        }),
    )
}

fn saliency(rng: &mut ChaCha8Rng) -> Instance {
    let mut store = ParamStore::new();
    let fcn = SaliencyFcn::new(&mut store, 3, 2, 3, rng);
    for id in [fcn.first.b, fcn.second.b] {
        let t = store.get_mut(id);
        let vals = off_zero(rng, t.shape());
        t.data_mut().copy_from_slice(vals.data());
    }
    let n = store.len();
    let leaves = with_params(&store, vec![rand_tensor(rng, &[1, 3, 6, 12])]);
    (
        leaves,
        Box::new(move |g, v| {
            let (p, x) = split(v, n);
            fcn.forward(g, &p, x[0])
        }),
    )
}

pub fn primitives() -> Vec<(&'static str, Maker)> {
    vec![
        ("matmul", matmul),
        ("add_last", add_last),
        ("channel_bias", channel_bias),
        ("add", |r| binary(r, Graph::add)),
        ("sub", |r| binary(r, Graph::sub)),
        ("mul", |r| binary(r, Graph::mul)),
        ("scale", scale),
        ("sigmoid", |r| unary(r, Graph::sigmoid)),
        ("tanh", |r| unary(r, Graph::tanh)),
        ("softplus", |r| unary(r, Graph::softplus)),
        ("square", |r| unary(r, Graph::square)),
        ("relu", relu),
        ("concat", concat),
        ("slice", slice),
        ("reshape", reshape),
        ("normalize_last", normalize_last),
        ("softmax_last", softmax_last),
        ("batched_dot", batched_dot),
        ("weighted_sum", weighted_sum),
        ("conv2d", conv2d),
        ("mean", |r| reduce(r, true)),
        ("sum", |r| reduce(r, false)),
        ("mse", mse),
    ]
}

pub fn layers() -> Vec<(&'static str, Maker)> {
    vec![
        ("linear", linear),
        ("conv2d_layer", conv_layer),
        ("lstm_step", lstm_step),
        ("convlstm_step", convlstm_step),
        ("summary_head", head),
        ("mlp_mixing", mixing),
        ("ame_location", ame_loc),
        ("ame_hidden", ame_hid),
        ("saliency_fcn", saliency),
    ]
}
