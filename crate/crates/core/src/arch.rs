//! The six network topologies and their shared forward pass.
//!
//! Every topology is a feature trunk followed by a head. Trunks:
//!
//! * LeNet: two 5×5 conv + 2×2 average-pool stages, flatten (432),
//!   dense 120 (`l4`).
//! * EEG-TCNet: temporal conv (1,20) → depthwise spatial conv (16,1) →
//!   separable conv (1,6), with batch norm, ELU, pooling and dropout, then a
//!   TCN over the resulting `(time 6, maps 8)` feature map.
//! * EEG-TCNet-LSTM adds two 30-unit LSTM layers after the TCN.
//!
//! Heads without a fuzzy block map the trunk straight to two logits (LeNet
//! keeps its dense 84 layer `l5`). Fuzzy heads branch the trunk output into
//! the fuzzy block and a dense branch, concatenate both, and map that to two
//! logits. The final layer is called `out.dense` in every topology.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, Padding, ParamStore, Var};
use crate::error::{Error, Result};
use crate::fnb::FuzzyBlock;
use crate::layers::{
    dropout, Activation, BatchNorm, Conv2d, Dense, DepthwiseConv2d, Mode, SeparableConv2d,
};
use crate::sequence::{Lstm, ReturnMode, Tcn, TcnConfig, TcnInput};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Topology {
    LeNet,
    LeNetFnb,
    EegTcnet,
    EegTcnetFnb,
    EegTcnetLstm,
    EegTcfnet,
}

impl Topology {
    pub const ALL: [Topology; 6] = [
        Topology::LeNet,
        Topology::LeNetFnb,
        Topology::EegTcnet,
        Topology::EegTcnetFnb,
        Topology::EegTcnetLstm,
        Topology::EegTcfnet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Topology::LeNet => "lenet",
            Topology::LeNetFnb => "lenet-fnb",
            Topology::EegTcnet => "eeg-tcnet",
            Topology::EegTcnetFnb => "eeg-tcnet-fnb",
            Topology::EegTcnetLstm => "eeg-tcnet-lstm",
            Topology::EegTcfnet => "eeg-tcfnet",
        }
    }

    pub fn has_fnb(self) -> bool {
        matches!(
            self,
            Topology::LeNetFnb | Topology::EegTcnetFnb | Topology::EegTcfnet
        )
    }

    /// The same topology without the fuzzy block.
    pub fn base(self) -> Topology {
        match self {
            Topology::LeNetFnb => Topology::LeNet,
            Topology::EegTcnetFnb => Topology::EegTcnet,
            Topology::EegTcfnet => Topology::EegTcnetLstm,
            t => t,
        }
    }

    fn lenet(self) -> bool {
        matches!(self, Topology::LeNet | Topology::LeNetFnb)
    }

    fn lstm(self) -> bool {
        matches!(self, Topology::EegTcnetLstm | Topology::EegTcfnet)
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        if key == "eeg-tcnet-lstm-fnb" {
            return Ok(Topology::EegTcfnet);
        }
        Topology::ALL
            .into_iter()
            .find(|t| t.name() == key)
            .ok_or_else(|| Error::UnknownTopology {
                name: s.to_string(),
                valid: Topology::ALL.map(Topology::name).join(", "),
            })
    }
}

impl TryFrom<String> for Topology {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Topology> for String {
    fn from(t: Topology) -> String {
        t.name().to_string()
    }
}

/// Everything needed to rebuild a model's structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub topology: Topology,
    pub channels: usize,
    pub samples: usize,
    /// Rule count `K` of the fuzzy block.
    pub fnb_rules: usize,
    /// Width of the dense branch merged with the fuzzy block (EEG-TCNet heads).
    pub fc_width: usize,
    pub fnb_detach: bool,
    /// Dropout after the two EEG-TCNet pooling stages.
    pub conv_dropout: f64,
    pub tcn: TcnConfig,
    pub tcn_input: TcnInput,
    pub lstm_hidden: usize,
}

impl ModelConfig {
    pub fn new(topology: Topology) -> Self {
        ModelConfig {
            topology,
            channels: 16,
            samples: 120,
            fnb_rules: 4,
            fc_width: 16,
            fnb_detach: false,
            conv_dropout: 0.25,
            tcn: TcnConfig::default(),
            tcn_input: TcnInput::Sequence {
                time: 6,
                channels: 8,
            },
            lstm_hidden: 30,
        }
    }

    /// Read the flattened feature vector as one long one-channel sequence;
    /// the TCN gets enough dilations to cover it.
    pub fn with_flattened_tcn(mut self) -> Self {
        self.tcn_input = TcnInput::Flattened;
        self.tcn.dilations = vec![1, 2, 4, 8, 16];
        self
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.samples == 0 {
            return Err(Error::invalid(
                "input must have at least one channel and one sample",
            ));
        }
        if self.topology.has_fnb() && self.fnb_rules == 0 {
            return Err(Error::invalid("fuzzy block needs at least one rule"));
        }
        if !self.topology.lenet() {
            self.tcn.validate()?;
        }
        Ok(())
    }
}

/// Layer-by-layer output shapes, excluding the batch axis.
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

/// Graph handles produced by one forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    pub probs: Var,
    /// Input of the fuzzy block, collected into its activation buffer during training.
    pub fnb_input: Option<Var>,
    /// Batch statistics to fold into the running averages (train mode only).
    pub bn_stats: Vec<(String, BatchStats)>,
    pub trace: ShapeTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

const BN: [&str; 3] = ["l1.bn", "l2.bn", "l3.bn"];

struct Builder<'a, R> {
    g: &'a mut Graph,
    store: &'a ParamStore,
    mode: Mode,
    rng: &'a mut R,
    bn_stats: Vec<(String, BatchStats)>,
    trace: ShapeTrace,
}

impl<R: Rng> Builder<'_, R> {
    fn record(&mut self, label: &str, v: Var) {
        self.trace
            .push((label.to_string(), self.g.shape(v)[1..].to_vec()));
    }

    fn bn(&mut self, name: &str, x: Var) -> Result<Var> {
        let (y, stats) = BatchNorm::new(name).forward(self.g, self.store, x, self.mode)?;
        if let Some(s) = stats {
            self.bn_stats.push((name.to_string(), s));
        }
        Ok(y)
    }
}

impl Model {
    /// Build a model with freshly initialized parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let c = &config;
        let trunk_out = if c.topology.lenet() {
            let (h, w) = lenet_flat(c.channels, c.samples)?;
            lenet_conv1().init(&mut s, 1, Activation::Relu, &mut rng)?;
            lenet_conv2().init(&mut s, 6, Activation::Relu, &mut rng)?;
            l4().init(&mut s, h * w * 16, &mut rng)?;
            120
        } else {
            let time = eegnet_time(c.samples)?;
            l1().init(&mut s, 1, Activation::Linear, &mut rng)?;
            BatchNorm::new(BN[0]).init(&mut s, 8)?;
            l2(c.channels).init(&mut s, 8, &mut rng)?;
            BatchNorm::new(BN[1]).init(&mut s, 16)?;
            l3().init(&mut s, 16, &mut rng)?;
            BatchNorm::new(BN[2]).init(&mut s, 8)?;
            let cin = match c.tcn_input {
                TcnInput::Sequence { time: t, channels } => {
                    if t * channels != time * 8 {
                        return Err(Error::shape(
                            "tcn",
                            format!("sequence view {t}×{channels} does not match the {} flattened features", time * 8),
                        ));
                    }
                    channels
                }
                TcnInput::Flattened => 1,
            };
            tcn(c).init(&mut s, cin, &mut rng)?;
            if c.topology.lstm() {
                lstm(c, 1, ReturnMode::All).init(&mut s, c.tcn.filters, &mut rng)?;
                lstm(c, 2, ReturnMode::Last).init(&mut s, c.lstm_hidden, &mut rng)?;
                c.lstm_hidden
            } else {
                c.tcn.filters
            }
        };
        let head_in = if c.topology.has_fnb() {
            fnb(c, trunk_out).init(&mut s)?;
            let branch = if c.topology.lenet() {
                l5().init(&mut s, 120, &mut rng)?;
                84
            } else {
                fc(c).init(&mut s, trunk_out, &mut rng)?;
                c.fc_width
            };
            branch + c.fnb_rules
        } else if c.topology.lenet() {
            l5().init(&mut s, 120, &mut rng)?;
            84
        } else {
            trunk_out
        };
        out().init(&mut s, head_in, &mut rng)?;
        Ok(Model { config, params: s })
    }

    pub fn topology(&self) -> Topology {
        self.config.topology
    }

    /// Input shape of one epoch, `(channels, samples, 1)`.
    pub fn input_shape(&self) -> [usize; 3] {
        [self.config.channels, self.config.samples, 1]
    }

    pub fn count_parameters(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn fnb(&self) -> Option<FuzzyBlock> {
        self.config
            .topology
            .has_fnb()
            .then(|| fnb(&self.config, self.fnb_dim()))
    }

    fn fnb_dim(&self) -> usize {
        match self.config.topology {
            Topology::LeNet | Topology::LeNetFnb => 120,
            Topology::EegTcnet | Topology::EegTcnetFnb => self.config.tcn.filters,
            _ => self.config.lstm_hidden,
        }
    }

    /// Forward pass over `x` of shape `(batch, channels, samples, 1)`.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        let want = self.input_shape();
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::shape(
                "model input",
                format!(
                    "expected (batch, {}, {}, {}), got {:?}",
                    want[0], want[1], want[2], shape
                ),
            ));
        }
        let c = &self.config;
        let mut b = Builder {
            g,
            store: &self.params,
            mode,
            rng,
            bn_stats: Vec::new(),
            trace: Vec::new(),
        };
        b.record("input", x);

        let trunk = if c.topology.lenet() {
            let h = lenet_conv1().forward(b.g, b.store, x)?;
            let h = b.g.relu(h);
            b.record("l1.conv", h);
            let h = b.g.avg_pool2d(h, (2, 2))?;
            b.record("l1.pool", h);
            let h = lenet_conv2().forward(b.g, b.store, h)?;
            let h = b.g.relu(h);
            b.record("l2.conv", h);
            let h = b.g.avg_pool2d(h, (2, 2))?;
            b.record("l2.pool", h);
            let h = b.g.flatten(h)?;
            b.record("l3.flatten", h);
            let h = l4().forward(b.g, b.store, h)?;
            b.record("l4.dense", h);
            h
        } else {
            let h = l1().forward(b.g, b.store, x)?;
            let h = b.bn(BN[0], h)?;
            b.record("l1.conv", h);
            let h = l2(c.channels).forward(b.g, b.store, h)?;
            let h = b.bn(BN[1], h)?;
            let h = b.g.elu(h, 1.0);
            b.record("l2.depthwise", h);
            let h = b.g.avg_pool2d(h, (1, 4))?;
            let h = dropout(b.g, h, c.conv_dropout, mode, b.rng)?;
            b.record("l2.pool", h);
            let h = l3().forward(b.g, b.store, h)?;
            let h = b.bn(BN[2], h)?;
            let h = b.g.elu(h, 1.0);
            b.record("l3.separable", h);
            let h = b.g.avg_pool2d(h, (1, 5))?;
            let h = dropout(b.g, h, c.conv_dropout, mode, b.rng)?;
            b.record("l3.pool", h);
            let batch = b.g.shape(h)[0];
            let h = b.g.flatten(h)?;
            b.record("l4.flatten", h);
            let seq = match c.tcn_input {
                TcnInput::Sequence { time, channels } => {
                    b.g.reshape(h, &[batch, time, channels])?
                }
                TcnInput::Flattened => {
                    let n = b.g.shape(h)[1];
                    b.g.reshape(h, &[batch, n, 1])?
                }
            };
            let ret = if c.topology.lstm() {
                ReturnMode::All
            } else {
                ReturnMode::Last
            };
            let h = tcn(c).forward(b.g, b.store, seq, mode, ret, b.rng)?;
            b.record("l5.tcn", h);
            if c.topology.lstm() {
                let h = lstm(c, 1, ReturnMode::All).forward(b.g, b.store, h)?;
                b.record("l6.lstm", h);
                let h = lstm(c, 2, ReturnMode::Last).forward(b.g, b.store, h)?;
                b.record("l7.lstm", h);
                h
            } else {
                h
            }
        };

        let mut fnb_input = None;
        let head = if c.topology.has_fnb() {
            let block = fnb(c, self.fnb_dim());
            let rules = block.forward(b.g, b.store, trunk)?;
            b.record("fnb", rules);
            fnb_input = Some(trunk);
            let branch = if c.topology.lenet() {
                l5().forward(b.g, b.store, trunk)?
            } else {
                fc(c).forward(b.g, b.store, trunk)?
            };
            b.record("fc", branch);
            let merged = b.g.concat(&[branch, rules], 1)?;
            b.record("merge", merged);
            merged
        } else if c.topology.lenet() {
            let h = l5().forward(b.g, b.store, trunk)?;
            b.record("l5.dense", h);
            h
        } else {
            trunk
        };
        let logits = out().forward(b.g, b.store, head)?;
        let probs = b.g.softmax(logits)?;
        b.record("out.softmax", probs);
        Ok(ForwardPass {
            logits,
            probs,
            fnb_input,
            bn_stats: b.bn_stats,
            trace: b.trace,
        })
    }

    /// Inference-mode class probabilities for a `(batch, channels, samples, 1)` tensor.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = self.forward(&mut g, xv, Mode::Infer, &mut rng)?;
        Ok(g.value(pass.probs).clone())
    }

    /// Predicted label (1 = target) and the target-class probability for one
    /// `(channels, samples)` or `(channels, samples, 1)` epoch.
    pub fn predict(&self, epoch: &Tensor) -> Result<(usize, f64)> {
        let [h, w, m] = self.input_shape();
        if epoch.len() != h * w * m {
            return Err(Error::shape(
                "predict",
                format!("expected ({h}, {w}, {m}) epoch, got {:?}", epoch.shape()),
            ));
        }
        let p = self.predict_proba(&epoch.reshaped(vec![1, h, w, m])?)?;
        let target = p.data()[1];
        Ok((usize::from(target > p.data()[0]), target))
    }

    /// Shapes after each stage for a single-epoch input.
    pub fn shape_trace(&self) -> Result<ShapeTrace> {
        let mut g = Graph::new();
        let [h, w, m] = self.input_shape();
        let x = g.constant(Tensor::zeros([1, h, w, m]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(&mut g, x, Mode::Infer, &mut rng)?.trace)
    }

    /// Fold the batch statistics of a training pass into the running averages.
    pub fn apply_bn_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        for (name, s) in stats {
            BatchNorm::new(name.as_str()).update(&mut self.params, s)?;
        }
        Ok(())
    }
}

fn lenet_conv1() -> Conv2d {
    Conv2d {
        name: "l1.conv".into(),
        filters: 6,
        kernel: (5, 5),
        padding: Padding::Valid,
        bias: true,
    }
}

fn lenet_conv2() -> Conv2d {
    Conv2d {
        name: "l2.conv".into(),
        filters: 16,
        kernel: (5, 5),
        padding: Padding::Valid,
        bias: true,
    }
}

/// Spatial size after LeNet's two conv/pool stages.
fn lenet_flat(h: usize, w: usize) -> Result<(usize, usize)> {
    let stage = |n: usize| if n >= 5 { Some((n - 4) / 2) } else { None };
    match (stage(h).and_then(stage), stage(w).and_then(stage)) {
        (Some(h), Some(w)) if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(Error::invalid(format!(
            "LeNet needs inputs of at least 16×16, got {h}×{w}"
        ))),
    }
}

fn l4() -> Dense {
    Dense {
        name: "l4.dense".into(),
        units: 120,
        activation: Activation::Relu,
    }
}

fn l5() -> Dense {
    Dense {
        name: "l5.dense".into(),
        units: 84,
        activation: Activation::Relu,
    }
}

fn l1() -> Conv2d {
    Conv2d {
        name: "l1.conv".into(),
        filters: 8,
        kernel: (1, 20),
        padding: Padding::Same,
        bias: false,
    }
}

fn l2(channels: usize) -> DepthwiseConv2d {
    DepthwiseConv2d {
        name: "l2.depthwise".into(),
        kernel: (channels, 1),
        multiplier: 2,
        padding: Padding::Valid,
    }
}

fn l3() -> SeparableConv2d {
    SeparableConv2d {
        name: "l3.separable".into(),
        filters: 8,
        kernel: (1, 6),
    }
}

/// Time steps left after the (1,4) and (1,5) poolings.
fn eegnet_time(samples: usize) -> Result<usize> {
    match samples / 4 / 5 {
        0 => Err(Error::invalid(format!(
            "EEG-TCNet needs at least 20 samples per epoch, got {samples}"
        ))),
        t => Ok(t),
    }
}

fn tcn(c: &ModelConfig) -> Tcn {
    Tcn {
        name: "l5.tcn".into(),
        config: c.tcn.clone(),
    }
}

fn lstm(c: &ModelConfig, index: usize, return_mode: ReturnMode) -> Lstm {
    Lstm {
        name: format!("l{}.lstm", 5 + index),
        hidden: c.lstm_hidden,
        return_mode,
    }
}

fn fnb(c: &ModelConfig, dim: usize) -> FuzzyBlock {
    FuzzyBlock {
        name: "fnb".into(),
        rules: c.fnb_rules,
        dim,
        detach_input: c.fnb_detach,
    }
}

fn fc(c: &ModelConfig) -> Dense {
    Dense {
        name: "fc.dense".into(),
        units: c.fc_width,
        activation: Activation::Elu(1.0),
    }
}

fn out() -> Dense {
    Dense {
        name: "out.dense".into(),
        units: 2,
        activation: Activation::Linear,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{param_gradient_error, project};

    fn trace(t: Topology) -> ShapeTrace {
        Model::new(ModelConfig::new(t), 0)
            .unwrap()
            .shape_trace()
            .unwrap()
    }

    fn shape_of<'a>(tr: &'a ShapeTrace, label: &str) -> &'a [usize] {
        &tr.iter()
            .find(|(l, _)| l == label)
            .unwrap_or_else(|| panic!("no {label}"))
            .1
    }

    #[test]
    fn lenet_shapes_follow_the_table() {
        let tr = trace(Topology::LeNet);
        let expect: [(&str, &[usize]); 9] = [
            ("input", &[16, 120, 1]),
            ("l1.conv", &[12, 116, 6]),
            ("l1.pool", &[6, 58, 6]),
            ("l2.conv", &[2, 54, 16]),
            ("l2.pool", &[1, 27, 16]),
            ("l3.flatten", &[432]),
            ("l4.dense", &[120]),
            ("l5.dense", &[84]),
            ("out.softmax", &[2]),
        ];
        assert_eq!(tr.len(), expect.len());
        for ((label, shape), (l, s)) in tr.iter().zip(expect) {
            assert_eq!((label.as_str(), shape.as_slice()), (l, s));
        }
    }

    #[test]
    fn eeg_tcnet_shapes_follow_the_table() {
        let tr = trace(Topology::EegTcnet);
        // L1 is (16,120,8): same padding keeps all 16 electrodes.
        assert_eq!(shape_of(&tr, "l1.conv"), &[16, 120, 8]);
        assert_eq!(shape_of(&tr, "l2.depthwise"), &[1, 120, 16]);
        assert_eq!(shape_of(&tr, "l2.pool"), &[1, 30, 16]);
        assert_eq!(shape_of(&tr, "l3.separable"), &[1, 30, 8]);
        assert_eq!(shape_of(&tr, "l3.pool"), &[1, 6, 8]);
        assert_eq!(shape_of(&tr, "l4.flatten"), &[48]);
        assert_eq!(shape_of(&tr, "l5.tcn"), &[6]);
        assert_eq!(shape_of(&tr, "out.softmax"), &[2]);
    }

    #[test]
    fn tcfnet_merges_fuzzy_and_dense_branches() {
        let tr = trace(Topology::EegTcfnet);
        assert_eq!(shape_of(&tr, "l5.tcn"), &[6, 6]);
        assert_eq!(shape_of(&tr, "l6.lstm"), &[6, 30]);
        assert_eq!(shape_of(&tr, "l7.lstm"), &[30]);
        assert_eq!(shape_of(&tr, "fnb"), &[4]);
        assert_eq!(shape_of(&tr, "fc"), &[16]);
        assert_eq!(shape_of(&tr, "merge"), &[20]);
        let lenet = trace(Topology::LeNetFnb);
        assert_eq!(shape_of(&lenet, "fc"), &[84]);
        assert_eq!(shape_of(&lenet, "merge"), &[88]);
    }

    #[test]
    fn flattened_tcn_variant_runs() {
        let m = Model::new(ModelConfig::new(Topology::EegTcnet).with_flattened_tcn(), 0).unwrap();
        let tr = m.shape_trace().unwrap();
        assert_eq!(shape_of(&tr, "l5.tcn"), &[6]);
    }

    #[test]
    fn topology_names_round_trip() {
        for t in Topology::ALL {
            assert_eq!(t.name().parse::<Topology>().unwrap(), t);
        }
        assert_eq!(
            "EEG-TCNet-LSTM-FNB".parse::<Topology>().unwrap(),
            Topology::EegTcfnet
        );
        let err = "resnet".parse::<Topology>().unwrap_err().to_string();
        assert!(
            err.contains("resnet") && err.contains("eeg-tcfnet"),
            "{err}"
        );
    }

    #[test]
    fn parameter_counts() {
        let lenet = Model::new(ModelConfig::new(Topology::LeNet), 0).unwrap();
        assert_eq!(
            lenet.params.tensor("l4.dense.weight").unwrap().len() + 120,
            51_960
        );
        assert_eq!(lenet.count_parameters(), 156 + 2416 + 51_960 + 10_164 + 170);

        for (base, fuzzy, d, branch_in, branch) in [
            (Topology::EegTcnet, Topology::EegTcnetFnb, 6, 6, 16),
            (Topology::EegTcnetLstm, Topology::EegTcfnet, 30, 30, 16),
        ] {
            let b = Model::new(ModelConfig::new(base), 0)
                .unwrap()
                .count_parameters();
            let f = Model::new(ModelConfig::new(fuzzy), 0)
                .unwrap()
                .count_parameters();
            // + log a, + dense branch, and the output layer now reads branch + K.
            let delta = d + (branch_in * branch + branch) + (branch + 4) * 2 - d * 2;
            assert_eq!(f, b + delta, "{fuzzy}");
        }
        let b = lenet.count_parameters();
        let f = Model::new(ModelConfig::new(Topology::LeNetFnb), 0)
            .unwrap()
            .count_parameters();
        assert_eq!(f, b + 120 + 4 * 2);
    }

    #[test]
    fn fuzzy_variants_share_the_trunk() {
        for t in Topology::ALL.into_iter().filter(|t| t.has_fnb()) {
            let fz = Model::new(ModelConfig::new(t), 0).unwrap();
            let base = Model::new(ModelConfig::new(t.base()), 0).unwrap();
            for p in base.params.iter().filter(|p| !p.name.starts_with("out.")) {
                assert_eq!(
                    fz.params.tensor(&p.name).unwrap().shape(),
                    p.tensor.shape(),
                    "{t}: {}",
                    p.name
                );
            }
        }
    }

    #[test]
    fn outputs_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::new(
            [3, 16, 120, 1],
            (0..3 * 16 * 120)
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect(),
        )
        .unwrap();
        for t in Topology::ALL {
            let m = Model::new(ModelConfig::new(t), 1).unwrap();
            let p = m.predict_proba(&x).unwrap();
            assert_eq!(p.shape(), &[3, 2]);
            for row in p.data().chunks(2) {
                assert!((row[0] + row[1] - 1.0).abs() < 1e-12 && row.iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn zero_input_is_undecided_without_fuzzy_block() {
        for t in Topology::ALL.into_iter().filter(|t| !t.has_fnb()) {
            let m = Model::new(ModelConfig::new(t), 2).unwrap();
            let (_, conf) = m.predict(&Tensor::zeros([16, 120])).unwrap();
            assert!((conf - 0.5).abs() < 1e-12, "{t}: {conf}");
        }
    }

    #[test]
    fn wrong_input_shape_names_expected_shape() {
        let m = Model::new(ModelConfig::new(Topology::LeNet), 0).unwrap();
        let err = m
            .predict_proba(&Tensor::zeros([1, 8, 120, 1]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("(batch, 16, 120, 1)"), "{err}");
    }

    #[test]
    fn end_to_end_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::new(
            [2, 16, 120, 1],
            (0..2 * 16 * 120)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        for t in Topology::ALL {
            let mut m = Model::new(ModelConfig::new(t), 4).unwrap();
            if let Some(fnb) = m.fnb() {
                let c = &mut m.params.get_mut(&fnb.centroids_key()).unwrap().tensor;
                c.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.gen_range(-0.5..0.5));
            }
            let build = |g: &mut Graph, s: &ParamStore| {
                let probe = Model {
                    config: m.config.clone(),
                    params: s.clone(),
                };
                let xv = g.constant(x.clone());
                let pass = probe.forward(g, xv, Mode::Infer, &mut ChaCha8Rng::seed_from_u64(0))?;
                project(g, pass.probs, 5)
            };
            let names: Vec<String> = m.params.trainable().map(|p| p.name.clone()).collect();
            for name in names {
                let n = m.params.tensor(&name).unwrap().len();
                let coords: Vec<usize> = (0..n).step_by((n / 3).max(1)).take(3).collect();
                let err =
                    param_gradient_error(&m.params, &name, Some(&coords), 1e-5, build).unwrap();
                assert!(err < 1e-4, "{t} {name}: {err}");
            }
        }
    }
}
