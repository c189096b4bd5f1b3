//! Dense, recurrent and convolutional building blocks.

use rand::Rng;

use super::params::{Bound, ParamId, ParamStore};
use super::tensor::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Fully connected layer `x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            Tensor::uniform(&[input, output], bound, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[output]));
        Self {
            w,
            b,
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p.var(self.w));
        g.add_last(y, p.var(self.b))
    }
}

/// Single LSTM cell with gates ordered (input, forget, cell, output).
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let wx = store.add(
            format!("{name}.wx"),
            Tensor::uniform(&[input, 4 * hidden], bound, rng),
        );
        let wh = store.add(
            format!("{name}.wh"),
            Tensor::uniform(&[hidden, 4 * hidden], bound, rng),
        );
        let mut b = Tensor::zeros(&[4 * hidden]);
        // Forget gate starts open.
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        let b = store.add(format!("{name}.b"), b);
        Self {
            wx,
            wh,
            b,
            input,
            hidden,
        }
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> (Var, Var) {
        let h = g.constant(Tensor::zeros(&[batch, self.hidden]));
        let c = g.constant(Tensor::zeros(&[batch, self.hidden]));
        (h, c)
    }

    pub fn step(&self, g: &mut Graph, p: &Bound, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let (sx, sh, sc) = (g.shape(x), g.shape(h), g.shape(c));
        if sx.len() != 2 || sx[1] != self.input || sh != [sx[0], self.hidden] || sc != sh {
            return Err(Error::Shape(format!(
                "lstm step: x {sx:?}, h {sh:?}, c {sc:?} for input {} hidden {}",
                self.input, self.hidden
            )));
        }
        let zx = g.matmul(x, p.var(self.wx));
        let zh = g.matmul(h, p.var(self.wh));
        let z = g.add(zx, zh);
        let z = g.add_last(z, p.var(self.b));
        let n = self.hidden;
        let i = g.slice(z, 1, 0, n);
        let f = g.slice(z, 1, n, n);
        let cc = g.slice(z, 1, 2 * n, n);
        let o = g.slice(z, 1, 3 * n, n);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cc = g.tanh(cc);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c);
        let write = g.mul(i, cc);
        let c2 = g.add(keep, write);
        let tc = g.tanh(c2);
        let h2 = g.mul(o, tc);
        Ok((h2, c2))
    }
}

/// Same-size 2-D convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub k: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        ksize: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((input * ksize * ksize) as f64).sqrt();
        let k = store.add(
            format!("{name}.k"),
            Tensor::uniform(&[output, input, ksize, ksize], bound, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[output]));
        Self {
            k,
            b,
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.conv2d(x, p.var(self.k));
        g.channel_bias(y, p.var(self.b))
    }
}

/// Convolutional LSTM cell; gates come from one convolution over `[x, h]`.
#[derive(Debug, Clone)]
pub struct ConvLstmCell {
    pub conv: Conv2d,
    pub input: usize,
    pub hidden: usize,
}

impl ConvLstmCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        ksize: usize,
        rng: &mut R,
    ) -> Self {
        let conv = Conv2d::new(store, name, input + hidden, 4 * hidden, ksize, rng);
        store.get_mut(conv.b).data_mut()[hidden..2 * hidden].fill(1.0);
        Self {
            conv,
            input,
            hidden,
        }
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize, rows: usize, cols: usize) -> (Var, Var) {
        let shape = [batch, self.hidden, rows, cols];
        (
            g.constant(Tensor::zeros(&shape)),
            g.constant(Tensor::zeros(&shape)),
        )
    }

    pub fn step(&self, g: &mut Graph, p: &Bound, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let (sx, sh, sc) = (g.shape(x), g.shape(h), g.shape(c));
        if sx.len() != 4
            || sx[1] != self.input
            || sh != [sx[0], self.hidden, sx[2], sx[3]]
            || sc != sh
        {
            return Err(Error::Shape(format!(
                "convlstm step: x {sx:?}, h {sh:?}, c {sc:?} for input {} hidden {}",
                self.input, self.hidden
            )));
        }
        let xh = g.concat(&[x, h], 1);
        let z = self.conv.forward(g, p, xh);
        let n = self.hidden;
        let i = g.slice(z, 1, 0, n);
        let f = g.slice(z, 1, n, n);
        let cc = g.slice(z, 1, 2 * n, n);
        let o = g.slice(z, 1, 3 * n, n);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cc = g.tanh(cc);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c);
        let write = g.mul(i, cc);
        let c2 = g.add(keep, write);
        let tc = g.tanh(c2);
        let h2 = g.mul(o, tc);
        Ok((h2, c2))
    }
}

/// Maps raw `(B, 6)` outputs to `[unit mu, softplus sigma]`.
pub fn summary_head(g: &mut Graph, raw: Var) -> Var {
    let mu = g.slice(raw, 1, 0, 3);
    let mu = g.normalize_last(mu);
    let sigma = g.slice(raw, 1, 3, 3);
    let sigma = g.softplus(sigma);
    g.concat(&[mu, sigma], 1)
}
