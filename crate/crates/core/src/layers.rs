//! Layer primitives with their parameters.
//!
//! Feature maps use a fixed channels-last layout `(batch, H, W, M)`:
//! `H` is the electrode (or row) axis, `W` is time, `M` indexes filters.
//! A single epoch enters the networks as `(16, 120, 1)`.
//!
//! Each layer owns named entries in a [`ParamStore`]. Batch-norm running
//! statistics live there too as non-trainable entries, so a checkpoint of the
//! store captures the full model state.

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, Padding, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Relu,
    Elu(f64),
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Linear => x,
            Activation::Relu => g.relu(x),
            Activation::Elu(alpha) => g.elu(x, alpha),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }

    /// Variance-scaling factor for the initializer of the layer feeding this activation.
    fn init_scale(self) -> f64 {
        match self {
            Activation::Relu => 2.0,
            _ => 1.0,
        }
    }
}

/// Truncated normal (cut at ±2σ) scaled by `sqrt(scale / fan_in)`.
pub fn truncated_normal(shape: &[usize], fan_in: usize, scale: f64, rng: &mut impl Rng) -> Tensor {
    // Std of a unit normal truncated to [-2, 2].
    const TRUNC_STD: f64 = 0.879_625_661_034_239_8;
    let std = (scale / fan_in as f64).sqrt() / TRUNC_STD;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("initializer shape")
}

/// Standard 2-D convolution (cross-correlation) with per-filter bias.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv2d {
    pub name: String,
    pub filters: usize,
    pub kernel: (usize, usize),
    pub padding: Padding,
    pub bias: bool,
}

impl Conv2d {
    pub fn init(
        &self,
        store: &mut ParamStore,
        in_maps: usize,
        act: Activation,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let (kh, kw) = self.kernel;
        let fan_in = kh * kw * in_maps;
        store.insert(
            format!("{}.kernel", self.name),
            truncated_normal(
                &[kh, kw, in_maps, self.filters],
                fan_in,
                act.init_scale(),
                rng,
            ),
            true,
        )?;
        if self.bias {
            store.insert(
                format!("{}.bias", self.name),
                Tensor::zeros([self.filters]),
                true,
            )?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let k = g.param(store, &format!("{}.kernel", self.name))?;
        let b = if self.bias {
            Some(g.param(store, &format!("{}.bias", self.name))?)
        } else {
            None
        };
        g.conv2d(x, k, b, self.padding)
    }
}

/// Per-map convolution producing `multiplier` output maps per input map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DepthwiseConv2d {
    pub name: String,
    pub kernel: (usize, usize),
    pub multiplier: usize,
    pub padding: Padding,
}

impl DepthwiseConv2d {
    pub fn init(&self, store: &mut ParamStore, in_maps: usize, rng: &mut impl Rng) -> Result<()> {
        if self.multiplier < 1 {
            return Err(Error::invalid(format!(
                "depth multiplier must be ≥ 1, got {}",
                self.multiplier
            )));
        }
        let (kh, kw) = self.kernel;
        store.insert(
            format!("{}.kernel", self.name),
            truncated_normal(&[kh, kw, in_maps, self.multiplier], kh * kw, 1.0, rng),
            true,
        )
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let k = g.param(store, &format!("{}.kernel", self.name))?;
        g.depthwise_conv2d(x, k, self.padding)
    }
}

/// Depthwise stage (same padding, multiplier 1) followed by 1×1 pointwise mixing.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeparableConv2d {
    pub name: String,
    pub filters: usize,
    pub kernel: (usize, usize),
}

impl SeparableConv2d {
    pub fn init(&self, store: &mut ParamStore, in_maps: usize, rng: &mut impl Rng) -> Result<()> {
        let (kh, kw) = self.kernel;
        store.insert(
            format!("{}.depthwise", self.name),
            truncated_normal(&[kh, kw, in_maps, 1], kh * kw, 1.0, rng),
            true,
        )?;
        store.insert(
            format!("{}.pointwise", self.name),
            truncated_normal(&[1, 1, in_maps, self.filters], in_maps, 1.0, rng),
            true,
        )
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let dk = g.param(store, &format!("{}.depthwise", self.name))?;
        let pk = g.param(store, &format!("{}.pointwise", self.name))?;
        let d = g.depthwise_conv2d(x, dk, Padding::Same)?;
        g.conv2d(d, pk, None, Padding::Valid)
    }
}

/// Fully connected layer over `(batch, in)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dense {
    pub name: String,
    pub units: usize,
    pub activation: Activation,
}

impl Dense {
    pub fn init(&self, store: &mut ParamStore, inputs: usize, rng: &mut impl Rng) -> Result<()> {
        store.insert(
            format!("{}.weight", self.name),
            truncated_normal(
                &[inputs, self.units],
                inputs,
                self.activation.init_scale(),
                rng,
            ),
            true,
        )?;
        store.insert(
            format!("{}.bias", self.name),
            Tensor::zeros([self.units]),
            true,
        )
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{}.weight", self.name))?;
        let b = g.param(store, &format!("{}.bias", self.name))?;
        let z = g.matmul(x, w)?;
        let z = g.add(z, b)?;
        Ok(self.activation.apply(g, z))
    }
}

/// Batch normalization over every axis but the last (the map axis).
///
/// `gamma`/`beta` are trainable; `running_mean`, `running_var` and the
/// update counter `batches` are stored as non-trainable entries.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNorm {
    pub name: String,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>) -> Self {
        BatchNorm {
            name: name.into(),
            momentum: 0.99,
            eps: 1e-3,
        }
    }

    fn key(&self, field: &str) -> String {
        format!("{}.{field}", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, maps: usize) -> Result<()> {
        store.insert(self.key("gamma"), Tensor::ones([maps]), true)?;
        store.insert(self.key("beta"), Tensor::zeros([maps]), true)?;
        store.insert(self.key("running_mean"), Tensor::zeros([maps]), false)?;
        store.insert(self.key("running_var"), Tensor::ones([maps]), false)?;
        store.insert(self.key("batches"), Tensor::scalar(0.0), false)
    }

    /// Train mode normalizes with batch statistics and returns them for a
    /// later [`BatchNorm::update`]; infer mode uses the running statistics.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let gamma = g.param(store, &self.key("gamma"))?;
        let beta = g.param(store, &self.key("beta"))?;
        match mode {
            Mode::Train => g.batch_norm(x, gamma, beta, self.eps, None),
            Mode::Infer => {
                if store.tensor(&self.key("batches"))?.item() == 0.0 {
                    warn!("{}: inference before any training batch, using initial statistics (mean 0, var 1)", self.name);
                }
                let mean = store.tensor(&self.key("running_mean"))?.data().to_vec();
                let var = store.tensor(&self.key("running_var"))?.data().to_vec();
                g.batch_norm(x, gamma, beta, self.eps, Some((&mean, &var)))
            }
        }
    }

    /// Fold one batch's statistics into the running averages.
    pub fn update(&self, store: &mut ParamStore, stats: &BatchStats) -> Result<()> {
        let m = self.momentum;
        for (field, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let t = &mut store.get_mut(&self.key(field))?.tensor;
            for (r, b) in t.data_mut().iter_mut().zip(batch) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
        store.get_mut(&self.key("batches"))?.tensor.data_mut()[0] += 1.0;
        Ok(())
    }
}

/// Inverted dropout: train mode zeroes with probability `p` and rescales
/// survivors by `1/(1-p)`; infer mode is the identity.
pub fn dropout(g: &mut Graph, x: Var, p: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    if mode == Mode::Infer || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - p;
    let mask = (0..g.value(x).len())
        .map(|_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    g.dropout_mask(x, mask)
}

/// Softmax of a plain vector (no graph).
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let mut out = z.to_vec();
    crate::autodiff::softmax_row(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::elu;
    use crate::autodiff::gradcheck::{input_gradient_error, param_gradient_error, project};

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn out_shape(
        store: &ParamStore,
        input: &[usize],
        f: impl Fn(&mut Graph, &ParamStore, Var) -> Result<Var>,
    ) -> Vec<usize> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(input.to_vec()));
        let y = f(&mut g, store, x).unwrap();
        g.shape(y).to_vec()
    }

    #[test]
    fn conv2d_valid_lenet_first_layer() {
        let mut store = ParamStore::new();
        let c = Conv2d {
            name: "c".into(),
            filters: 6,
            kernel: (5, 5),
            padding: Padding::Valid,
            bias: true,
        };
        c.init(&mut store, 1, Activation::Relu, &mut rng(0))
            .unwrap();
        assert_eq!(
            out_shape(&store, &[1, 16, 120, 1], |g, s, x| c.forward(g, s, x)),
            vec![1, 12, 116, 6]
        );
    }

    #[test]
    fn conv2d_same_keeps_extent() {
        let mut store = ParamStore::new();
        let c = Conv2d {
            name: "c".into(),
            filters: 8,
            kernel: (1, 20),
            padding: Padding::Same,
            bias: false,
        };
        c.init(&mut store, 1, Activation::Linear, &mut rng(0))
            .unwrap();
        assert_eq!(
            out_shape(&store, &[1, 16, 120, 1], |g, s, x| c.forward(g, s, x)),
            vec![1, 16, 120, 8]
        );
    }

    #[test]
    fn conv2d_unit_kernel_is_identity() {
        let x = random(&[2, 3, 4, 1], &mut rng(1));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let k = g.constant(Tensor::ones([1, 1, 1, 1]));
        let b = g.constant(Tensor::zeros([1]));
        let y = g.conv2d(xv, k, Some(b), Padding::Valid).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn conv2d_kernel_too_large_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 4, 4, 1]));
        let k = g.constant(Tensor::zeros([5, 1, 1, 1]));
        assert!(g.conv2d(x, k, None, Padding::Valid).is_err());
    }

    #[test]
    fn conv2d_matches_direct_cross_correlation() {
        let mut r = rng(5);
        let x = random(&[1, 4, 5, 2], &mut r);
        let k = random(&[2, 3, 2, 3], &mut r);
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(xv, kv, None, Padding::Valid).unwrap();
        let y = g.value(y);
        for oh in 0..3 {
            for ow in 0..3 {
                for o in 0..3 {
                    let mut acc = 0.0;
                    for i in 0..2 {
                        for j in 0..3 {
                            for c in 0..2 {
                                acc += x.data()[((oh + i) * 5 + ow + j) * 2 + c]
                                    * k.data()[((i * 3 + j) * 2 + c) * 3 + o];
                            }
                        }
                    }
                    assert!((y.data()[(oh * 3 + ow) * 3 + o] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn depthwise_collapses_electrodes() {
        let mut store = ParamStore::new();
        let d = DepthwiseConv2d {
            name: "d".into(),
            kernel: (16, 1),
            multiplier: 2,
            padding: Padding::Valid,
        };
        d.init(&mut store, 8, &mut rng(0)).unwrap();
        assert_eq!(
            out_shape(&store, &[1, 16, 120, 8], |g, s, x| d.forward(g, s, x)),
            vec![1, 1, 120, 16]
        );
    }

    #[test]
    fn depthwise_multiplier_zero_rejected() {
        let d = DepthwiseConv2d {
            name: "d".into(),
            kernel: (1, 1),
            multiplier: 0,
            padding: Padding::Valid,
        };
        assert!(d.init(&mut ParamStore::new(), 3, &mut rng(0)).is_err());
    }

    #[test]
    fn depthwise_unit_kernel_is_identity() {
        let x = random(&[2, 3, 4, 5], &mut rng(2));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let k = g.constant(Tensor::ones([1, 1, 5, 1]));
        let y = g.depthwise_conv2d(xv, k, Padding::Valid).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn separable_shape() {
        let mut store = ParamStore::new();
        let s = SeparableConv2d {
            name: "s".into(),
            filters: 8,
            kernel: (1, 6),
        };
        s.init(&mut store, 16, &mut rng(0)).unwrap();
        assert_eq!(
            out_shape(&store, &[1, 1, 30, 16], |g, st, x| s.forward(g, st, x)),
            vec![1, 1, 30, 8]
        );
    }

    #[test]
    fn separable_impulse_passthrough() {
        // Depthwise unit impulse at the kernel centre and pointwise = first 8 maps.
        let mut store = ParamStore::new();
        let s = SeparableConv2d {
            name: "s".into(),
            filters: 8,
            kernel: (1, 6),
        };
        let mut dk = Tensor::zeros([1, 6, 16, 1]);
        for c in 0..16 {
            dk.data_mut()[2 * 16 + c] = 1.0; // same-padding offset (6-1)/2 = 2
        }
        let mut pk = Tensor::zeros([1, 1, 16, 8]);
        for o in 0..8 {
            pk.data_mut()[o * 8 + o] = 1.0;
        }
        store.insert("s.depthwise", dk, true).unwrap();
        store.insert("s.pointwise", pk, true).unwrap();
        let x = random(&[2, 1, 30, 16], &mut rng(3));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = s.forward(&mut g, &store, xv).unwrap();
        let y = g.value(y);
        for (i, row) in x.data().chunks(16).enumerate() {
            assert_eq!(&y.data()[i * 8..(i + 1) * 8], &row[..8]);
        }
    }

    #[test]
    fn separable_matches_direct_loop() {
        let mut r = rng(4);
        let mut store = ParamStore::new();
        let s = SeparableConv2d {
            name: "s".into(),
            filters: 3,
            kernel: (1, 4),
        };
        s.init(&mut store, 5, &mut r).unwrap();
        let x = random(&[2, 1, 9, 5], &mut r);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = s.forward(&mut g, &store, xv).unwrap();
        let dk = store.tensor("s.depthwise").unwrap().data();
        let pk = store.tensor("s.pointwise").unwrap().data();
        let pad = (4 - 1) / 2;
        for b in 0..2 {
            for t in 0..9 {
                for o in 0..3 {
                    let mut acc = 0.0;
                    for c in 0..5 {
                        let mut d = 0.0;
                        for j in 0..4 {
                            let src = t as isize + j as isize - pad as isize;
                            if (0..9).contains(&src) {
                                d += x.data()[(b * 9 + src as usize) * 5 + c] * dk[j * 5 + c];
                            }
                        }
                        acc += d * pk[c * 3 + o];
                    }
                    let got = g.value(y).data()[(b * 9 + t) * 3 + o];
                    assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn avg_pool_shapes_and_truncation() {
        let store = ParamStore::new();
        assert_eq!(
            out_shape(&store, &[1, 12, 116, 6], |g, _, x| g.avg_pool2d(x, (2, 2))),
            vec![1, 6, 58, 6]
        );
        assert_eq!(
            out_shape(&store, &[1, 1, 120, 16], |g, _, x| g.avg_pool2d(x, (1, 4))),
            vec![1, 1, 30, 16]
        );
        assert_eq!(
            out_shape(&store, &[1, 1, 30, 16], |g, _, x| g.avg_pool2d(x, (1, 4))),
            vec![1, 1, 7, 16]
        );
        assert_eq!(
            out_shape(&store, &[1, 1, 30, 8], |g, _, x| g.avg_pool2d(x, (1, 5))),
            vec![1, 1, 6, 8]
        );
    }

    #[test]
    fn avg_pool_of_constant_is_constant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([2, 4, 6, 3], 1.75));
        let y = g.avg_pool2d(x, (2, 3)).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 1.75));
    }

    #[test]
    fn batch_norm_infer_identity_at_init() {
        let mut store = ParamStore::new();
        let bn = BatchNorm {
            eps: 0.0,
            ..BatchNorm::new("bn")
        };
        bn.init(&mut store, 3).unwrap();
        let x = random(&[2, 2, 2, 3], &mut rng(6));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (y, stats) = bn.forward(&mut g, &store, xv, Mode::Infer).unwrap();
        assert!(stats.is_none());
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn batch_norm_train_standardizes() {
        let mut store = ParamStore::new();
        let bn = BatchNorm {
            eps: 0.0,
            ..BatchNorm::new("bn")
        };
        bn.init(&mut store, 2).unwrap();
        let x = random(&[8, 3, 1, 2], &mut rng(7)).map(|v| 4.0 * v + 3.0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (y, stats) = bn.forward(&mut g, &store, xv, Mode::Train).unwrap();
        let y = g.value(y).data();
        for c in 0..2 {
            let vals: Vec<f64> = y.iter().skip(c).step_by(2).copied().collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(
                mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9,
                "mean {mean} var {var}"
            );
        }
        let stats = stats.unwrap();
        bn.update(&mut store, &stats).unwrap();
        let rm = store.tensor("bn.running_mean").unwrap().data()[0];
        assert!((rm - 0.01 * stats.mean[0]).abs() < 1e-15);
        assert_eq!(store.tensor("bn.batches").unwrap().item(), 1.0);
    }

    #[test]
    fn elu_values() {
        assert_eq!(elu(0.0, 1.0), 0.0);
        assert_eq!(elu(2.5, 1.0), 2.5);
        // 1/e - 1
        assert!((elu(-1.0, 1.0) - (-0.632_120_558_828_557_7)).abs() < 1e-12);
    }

    #[test]
    fn softmax_and_sigmoid_basics() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert!(softmax(&[]).is_err());
        assert_eq!(crate::autodiff::sigmoid(0.0), 0.5);
    }

    #[test]
    fn flatten_lenet_features() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([3, 1, 27, 16]));
        let f = g.flatten(x).unwrap();
        assert_eq!(g.shape(f), &[3, 432]);
    }

    #[test]
    fn dropout_modes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1000], 2.0));
        let y = dropout(&mut g, x, 0.5, Mode::Infer, &mut rng(0)).unwrap();
        assert_eq!(y, x);
        assert!(dropout(&mut g, x, 1.0, Mode::Train, &mut rng(0)).is_err());
        let y = dropout(&mut g, x, 0.5, Mode::Train, &mut rng(0)).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 4.0));
    }

    fn layer_grad_errors(seed: u64) -> Vec<(&'static str, f64)> {
        let mut r = rng(seed);
        let mut out = Vec::new();

        let mut store = ParamStore::new();
        let conv = Conv2d {
            name: "c".into(),
            filters: 3,
            kernel: (2, 3),
            padding: Padding::Same,
            bias: true,
        };
        conv.init(&mut store, 2, Activation::Linear, &mut r)
            .unwrap();
        store.get_mut("c.bias").unwrap().tensor = random(&[3], &mut r);
        let x = random(&[2, 3, 5, 2], &mut r);
        let build = |g: &mut Graph, s: &ParamStore| {
            let xv = g.constant(x.clone());
            let y = conv.forward(g, s, xv)?;
            project(g, y, seed)
        };
        out.push((
            "conv2d.kernel",
            param_gradient_error(&store, "c.kernel", None, EPS, build).unwrap(),
        ));
        out.push((
            "conv2d.bias",
            param_gradient_error(&store, "c.bias", None, EPS, build).unwrap(),
        ));
        out.push((
            "conv2d.input",
            input_gradient_error(&x, EPS, |g, v| {
                let y = conv.forward(g, &store, v)?;
                project(g, y, seed)
            })
            .unwrap(),
        ));

        let mut store = ParamStore::new();
        let dw = DepthwiseConv2d {
            name: "d".into(),
            kernel: (3, 2),
            multiplier: 2,
            padding: Padding::Valid,
        };
        dw.init(&mut store, 2, &mut r).unwrap();
        let x = random(&[2, 4, 3, 2], &mut r);
        out.push((
            "depthwise.kernel",
            param_gradient_error(&store, "d.kernel", None, EPS, |g, s| {
                let xv = g.constant(x.clone());
                let y = dw.forward(g, s, xv)?;
                project(g, y, seed)
            })
            .unwrap(),
        ));
        out.push((
            "depthwise.input",
            input_gradient_error(&x, EPS, |g, v| {
                let y = dw.forward(g, &store, v)?;
                project(g, y, seed)
            })
            .unwrap(),
        ));

        let mut store = ParamStore::new();
        let sep = SeparableConv2d {
            name: "s".into(),
            filters: 3,
            kernel: (1, 4),
        };
        sep.init(&mut store, 4, &mut r).unwrap();
        let x = random(&[2, 1, 7, 4], &mut r);
        for name in ["s.depthwise", "s.pointwise"] {
            out.push((
                "separable.params",
                param_gradient_error(&store, name, None, EPS, |g, s| {
                    let xv = g.constant(x.clone());
                    let y = sep.forward(g, s, xv)?;
                    project(g, y, seed)
                })
                .unwrap(),
            ));
        }
        out.push((
            "avg_pool.input",
            input_gradient_error(&random(&[2, 4, 7, 3], &mut r), EPS, |g, v| {
                let y = g.avg_pool2d(v, (2, 3))?;
                project(g, y, seed)
            })
            .unwrap(),
        ));

        let mut store = ParamStore::new();
        let bn = BatchNorm::new("bn");
        bn.init(&mut store, 3).unwrap();
        store.get_mut("bn.gamma").unwrap().tensor = random(&[3], &mut r);
        store.get_mut("bn.beta").unwrap().tensor = random(&[3], &mut r);
        let x = random(&[4, 2, 2, 3], &mut r);
        let bn_build = |g: &mut Graph, s: &ParamStore, v: Var| {
            let (y, _) = bn.forward(g, s, v, Mode::Train)?;
            project(g, y, seed)
        };
        out.push((
            "batch_norm.input",
            input_gradient_error(&x, EPS, |g, v| bn_build(g, &store, v)).unwrap(),
        ));
        for name in ["bn.gamma", "bn.beta"] {
            out.push((
                "batch_norm.affine",
                param_gradient_error(&store, name, None, EPS, |g, s| {
                    let xv = g.constant(x.clone());
                    bn_build(g, s, xv)
                })
                .unwrap(),
            ));
        }

        let x = random(&[3, 5], &mut r).map(|v| if v.abs() < 1e-3 { 0.5 } else { 2.0 * v });
        out.push((
            "elu",
            input_gradient_error(&x, EPS, |g, v| {
                let y = g.elu(v, 1.0);
                project(g, y, seed)
            })
            .unwrap(),
        ));

        let mut store = ParamStore::new();
        let dense = Dense {
            name: "fc".into(),
            units: 4,
            activation: Activation::Elu(1.0),
        };
        dense.init(&mut store, 5, &mut r).unwrap();
        for name in ["fc.weight", "fc.bias"] {
            out.push((
                "dense",
                param_gradient_error(&store, name, None, EPS, |g, s| {
                    let xv = g.constant(x.clone());
                    let y = dense.forward(g, s, xv)?;
                    project(g, y, seed)
                })
                .unwrap(),
            ));
        }
        out.push((
            "softmax_ce",
            input_gradient_error(&random(&[5, 2], &mut r), EPS, |g, v| {
                g.softmax_cross_entropy(v, &[0, 1, 0, 0, 1], &[0.6, 3.0])
            })
            .unwrap(),
        ));
        out
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        for seed in 0..10 {
            for (name, err) in layer_grad_errors(seed) {
                assert!(err < TOL, "seed {seed} {name}: {err}");
            }
        }
    }
}
