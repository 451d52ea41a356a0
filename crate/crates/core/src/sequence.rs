//! Recurrent and temporal-convolutional sequence models over `(batch, time, features)`.
//!
//! The LSTM follows the gate equations literally: the candidate cell
//! `c̃ = W_c x + U_c h + b_c` has **no** `tanh`, and `h_t = o ⊙ c_t` likewise
//! applies no squashing to the cell. This differs from the textbook LSTM.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::layers::{dropout, truncated_normal, Mode};
use crate::tensor::Tensor;

const GATES: [&str; 4] = ["i", "f", "o", "c"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReturnMode {
    /// Hidden state at every step, `(batch, time, hidden)`.
    All,
    /// Hidden state after the last step, `(batch, hidden)`.
    Last,
}

/// The twelve tensors of one LSTM cell (input weights `W`, recurrent weights
/// `U` and biases `b` for the input, forget and output gates and the cell).
#[derive(Clone, Debug)]
pub struct LstmCellParams {
    pub w: [Tensor; 4],
    pub u: [Tensor; 4],
    pub b: [Tensor; 4],
    pub hidden: usize,
}

impl LstmCellParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmCellParams {
            w: std::array::from_fn(|_| Tensor::zeros([input, hidden])),
            u: std::array::from_fn(|_| Tensor::zeros([hidden, hidden])),
            b: std::array::from_fn(|_| Tensor::zeros([hidden])),
            hidden,
        }
    }

    /// One step on a single example, returning `(h_t, c_t)`.
    pub fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let vars = CellVars {
            w: std::array::from_fn(|k| g.constant(self.w[k].clone())),
            u: std::array::from_fn(|k| g.constant(self.u[k].clone())),
            b: std::array::from_fn(|k| g.constant(self.b[k].clone())),
        };
        let x = g.constant(Tensor::new([1, x.len()], x.to_vec())?);
        let h = g.constant(Tensor::new([1, h_prev.len()], h_prev.to_vec())?);
        let c = g.constant(Tensor::new([1, c_prev.len()], c_prev.to_vec())?);
        let (h, c) = cell_step(&mut g, &vars, x, h, c)?;
        Ok((g.value(h).data().to_vec(), g.value(c).data().to_vec()))
    }
}

/// Cell parameters bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub w: [Var; 4],
    pub u: [Var; 4],
    pub b: [Var; 4],
}

/// `i, f, o = σ(Wx + Uh + b)`, `c̃ = W_c x + U_c h + b_c`,
/// `c_t = f ⊙ c_prev + i ⊙ c̃`, `h_t = o ⊙ c_t`.
pub fn cell_step(
    g: &mut Graph,
    p: &CellVars,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let mut pre = [x; 4];
    for k in 0..4 {
        let wx = g.matmul(x, p.w[k])?;
        let uh = g.matmul(h_prev, p.u[k])?;
        let s = g.add(wx, uh)?;
        pre[k] = g.add(s, p.b[k])?;
    }
    let i = g.sigmoid(pre[0]);
    let f = g.sigmoid(pre[1]);
    let o = g.sigmoid(pre[2]);
    let cand = pre[3];
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let h = g.mul(o, c)?;
    Ok((h, c))
}

/// A unidirectional LSTM layer unrolled from a zero initial state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Lstm {
    pub name: String,
    pub hidden: usize,
    pub return_mode: ReturnMode,
}

impl Lstm {
    fn key(&self, kind: &str, gate: &str) -> String {
        format!("{}.{kind}_{gate}", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, input: usize, rng: &mut impl Rng) -> Result<()> {
        for gate in GATES {
            store.insert(
                self.key("W", gate),
                truncated_normal(&[input, self.hidden], input, 1.0, rng),
                true,
            )?;
        }
        for gate in GATES {
            store.insert(
                self.key("U", gate),
                truncated_normal(&[self.hidden, self.hidden], self.hidden, 1.0, rng),
                true,
            )?;
        }
        for gate in GATES {
            // Forget-gate bias starts at 1 (common framework default).
            let init = if gate == "f" { 1.0 } else { 0.0 };
            store.insert(self.key("b", gate), Tensor::full([self.hidden], init), true)?;
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<CellVars> {
        let mut vars = CellVars {
            w: [Var(0); 4],
            u: [Var(0); 4],
            b: [Var(0); 4],
        };
        for (k, gate) in GATES.iter().enumerate() {
            vars.w[k] = g.param(store, &self.key("W", gate))?;
            vars.u[k] = g.param(store, &self.key("U", gate))?;
            vars.b[k] = g.param(store, &self.key("b", gate))?;
        }
        Ok(vars)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seq: Var) -> Result<Var> {
        let (batch, time, feat) = match *g.shape(seq) {
            [b, t, f] => (b, t, f),
            ref s => {
                return Err(Error::shape(
                    "lstm",
                    format!("expected (batch, time, features), got {s:?}"),
                ))
            }
        };
        if time == 0 {
            return Err(Error::invalid("lstm on an empty sequence"));
        }
        let vars = self.bind(g, store)?;
        let mut h = g.constant(Tensor::zeros([batch, self.hidden]));
        let mut c = g.constant(Tensor::zeros([batch, self.hidden]));
        let mut outputs = Vec::with_capacity(time);
        for t in 0..time {
            let xt = g.slice(seq, 1, t, 1)?;
            let xt = g.reshape(xt, &[batch, feat])?;
            (h, c) = cell_step(g, &vars, xt, h, c)?;
            if self.return_mode == ReturnMode::All {
                outputs.push(g.reshape(h, &[batch, 1, self.hidden])?);
            }
        }
        match self.return_mode {
            ReturnMode::Last => Ok(h),
            ReturnMode::All => g.concat(&outputs, 1),
        }
    }
}

/// How the TCN reads the flattened feature vector it receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TcnInput {
    /// Re-fold the vector into `(time, channels)`; the feature map's width
    /// axis becomes time.
    Sequence { time: usize, channels: usize },
    /// Treat the vector itself as a one-channel sequence.
    Flattened,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcnConfig {
    pub filters: usize,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    pub dropout_p: f64,
}

impl Default for TcnConfig {
    fn default() -> Self {
        TcnConfig {
            filters: 6,
            kernel_size: 2,
            dilations: vec![1, 2],
            dropout_p: 0.5,
        }
    }
}

impl TcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filters == 0 || self.kernel_size == 0 || self.dilations.is_empty() {
            return Err(Error::invalid(
                "TCN needs filters, kernel size and at least one block",
            ));
        }
        let powers = self.dilations.iter().all(|d| d.is_power_of_two());
        let increasing = self.dilations.windows(2).all(|w| w[0] < w[1]);
        if !powers || !increasing {
            return Err(Error::invalid(format!(
                "TCN dilations must be strictly increasing powers of two, got {:?}",
                self.dilations
            )));
        }
        Ok(())
    }

    /// Steps of history visible to the final output: `1 + Σ 2·(k−1)·d`.
    pub fn receptive_field(&self) -> usize {
        1 + self
            .dilations
            .iter()
            .map(|d| 2 * (self.kernel_size - 1) * d)
            .sum::<usize>()
    }
}

/// Residual stack of dilated causal convolutions.
///
/// Each block is `conv → ELU → dropout → conv → ELU → dropout`, added to the
/// block input (through a 1×1 projection when the channel count changes).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Tcn {
    pub name: String,
    pub config: TcnConfig,
}

impl Tcn {
    fn key(&self, block: usize, part: &str) -> String {
        format!("{}.block{block}.{part}", self.name)
    }

    pub fn init(
        &self,
        store: &mut ParamStore,
        in_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        self.config.validate()?;
        let (k, f) = (self.config.kernel_size, self.config.filters);
        let mut cin = in_channels;
        for b in 0..self.config.dilations.len() {
            store.insert(
                self.key(b, "conv1.kernel"),
                truncated_normal(&[k, cin, f], k * cin, 1.0, rng),
                true,
            )?;
            store.insert(self.key(b, "conv1.bias"), Tensor::zeros([f]), true)?;
            store.insert(
                self.key(b, "conv2.kernel"),
                truncated_normal(&[k, f, f], k * f, 1.0, rng),
                true,
            )?;
            store.insert(self.key(b, "conv2.bias"), Tensor::zeros([f]), true)?;
            if cin != f {
                store.insert(
                    self.key(b, "residual.kernel"),
                    truncated_normal(&[1, cin, f], cin, 1.0, rng),
                    true,
                )?;
                store.insert(self.key(b, "residual.bias"), Tensor::zeros([f]), true)?;
            }
            cin = f;
        }
        Ok(())
    }

    /// Run the residual stack on `(batch, time, channels)`, returning the
    /// per-block outputs (each `(batch, time, filters)`).
    pub fn blocks(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seq: Var,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Vec<Var>> {
        let time = match *g.shape(seq) {
            [_, t, _] => t,
            ref s => {
                return Err(Error::shape(
                    "tcn",
                    format!("expected (batch, time, channels), got {s:?}"),
                ))
            }
        };
        let rf = self.config.receptive_field();
        if rf < time {
            return Err(Error::invalid(format!(
                "TCN receptive field {rf} does not cover {time} time steps (need at least {time}; add dilations)"
            )));
        }
        let mut x = seq;
        let mut outs = Vec::with_capacity(self.config.dilations.len());
        for (b, &d) in self.config.dilations.iter().enumerate() {
            let mut h = x;
            for conv in ["conv1", "conv2"] {
                let k = g.param(store, &self.key(b, &format!("{conv}.kernel")))?;
                let bias = g.param(store, &self.key(b, &format!("{conv}.bias")))?;
                h = g.causal_conv1d(h, k, bias, d)?;
                h = g.elu(h, 1.0);
                h = dropout(g, h, self.config.dropout_p, mode, rng)?;
            }
            let residual = if store.contains(&self.key(b, "residual.kernel")) {
                let k = g.param(store, &self.key(b, "residual.kernel"))?;
                let bias = g.param(store, &self.key(b, "residual.bias"))?;
                g.causal_conv1d(x, k, bias, 1)?
            } else {
                x
            };
            x = g.add(h, residual)?;
            outs.push(x);
        }
        Ok(outs)
    }

    /// Full output sequence `(batch, time, filters)` or, with
    /// [`ReturnMode::Last`], the features at the last step `(batch, filters)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seq: Var,
        mode: Mode,
        ret: ReturnMode,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let out = *self
            .blocks(g, store, seq, mode, rng)?
            .last()
            .expect("at least one block");
        match ret {
            ReturnMode::All => Ok(out),
            ReturnMode::Last => {
                let s = g.shape(out).to_vec();
                let last = g.slice(out, 1, s[1] - 1, 1)?;
                g.reshape(last, &[s[0], s[2]])
            }
        }
    }
}
