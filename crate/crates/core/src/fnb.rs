//! Fuzzy neural block: Gaussian rule memberships around centroids learned by
//! fuzzy c-means on the previous epoch's activations.
//!
//! The firing strength of rule `k` is the product over dimensions of
//! `exp(−¼ (v_j − c_kj)² / a_j²)`, normalized over rules. The product is
//! evaluated as a sum of logs followed by a softmax, which is the same
//! quantity but cannot underflow when `d` is large (the LeNet head has
//! `d = 120`).
//!
//! Centroids are ordinary tensors in the [`ParamStore`] flagged
//! non-trainable, so they travel with checkpoints; the scaling vector is
//! stored as `log a` and is trainable.

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_row, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::tensor::Tensor;

/// Rule centroids `(K, d)` and the log of the shared scaling vector `(d)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuzzyRuleSet {
    pub centroids: Tensor,
    pub log_a: Tensor,
}

impl FuzzyRuleSet {
    /// All-zero centroids and `a = 1`: the state before the first epoch ends.
    pub fn new(k: usize, d: usize) -> Self {
        FuzzyRuleSet {
            centroids: Tensor::zeros([k, d]),
            log_a: Tensor::zeros([d]),
        }
    }

    pub fn k(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.centroids.shape()[1]
    }

    /// Log firing strengths `s_k = −¼ Σ_j (v_j − c_kj)² / a_j²`.
    pub fn log_strengths(&self, v: &[f64]) -> Result<Vec<f64>> {
        let d = self.d();
        if v.len() != d {
            return Err(Error::shape(
                "fnb",
                format!("input has {} values, rules expect {d}", v.len()),
            ));
        }
        let inv_a2: Vec<f64> = self
            .log_a
            .data()
            .iter()
            .map(|la| (-2.0 * la).exp())
            .collect();
        Ok(self
            .centroids
            .data()
            .chunks(d)
            .map(|c| {
                -0.25
                    * v.iter()
                        .zip(c)
                        .zip(&inv_a2)
                        .map(|((x, m), w)| (x - m) * (x - m) * w)
                        .sum::<f64>()
            })
            .collect())
    }

    /// Normalized activations `Õ` for one input vector.
    pub fn forward(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut s = self.log_strengths(v)?;
        softmax_row(&mut s);
        Ok(s)
    }
}

/// Bounded store of activation vectors seen during one epoch.
///
/// Once more than `capacity` vectors have been offered, each retained slot is
/// a uniform sample of everything seen so far (reservoir sampling).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ActivationBuffer {
    capacity: usize,
    items: Vec<Vec<f64>>,
    seen: u64,
    rng: ChaCha8Rng,
}

impl ActivationBuffer {
    pub const DEFAULT_CAPACITY: usize = 4096;

    pub fn new(capacity: usize, seed: u64) -> Self {
        ActivationBuffer {
            capacity,
            items: Vec::new(),
            seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Vectors offered since the last clear.
    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn items(&self) -> &[Vec<f64>] {
        &self.items
    }

    /// Offer one vector; ignored outside training.
    pub fn collect(&mut self, v: &[f64], mode: Mode) {
        if mode != Mode::Train || self.capacity == 0 {
            return;
        }
        self.seen += 1;
        if self.items.len() < self.capacity {
            self.items.push(v.to_vec());
        } else {
            let j = self.rng.gen_range(0..self.seen);
            if (j as usize) < self.capacity {
                self.items[j as usize] = v.to_vec();
            }
        }
    }

    /// Offer every row of a `(batch, d)` tensor.
    pub fn collect_rows(&mut self, t: &Tensor, mode: Mode) {
        let d = *t.shape().last().expect("rank ≥ 1");
        for row in t.data().chunks(d) {
            self.collect(row, mode);
        }
    }

    pub fn clear(&mut self) {
        self.items.clear();
        self.seen = 0;
    }
}

/// Settings for fuzzy c-means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcmConfig {
    /// Fuzzifier `m > 1`.
    pub m: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FcmConfig {
    fn default() -> Self {
        FcmConfig {
            m: 2.0,
            tol: 1e-5,
            max_iter: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FcmResult {
    /// `(K, d)`.
    pub centroids: Tensor,
    /// Final memberships, one row of `K` per point.
    pub memberships: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest `|Σ_k u_ik − 1|` observed over all points and iterations.
    pub max_row_sum_error: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Membership row of one point. Points sitting exactly on one or more
/// centroids split their membership evenly among those centroids.
fn memberships_into(v: &[f64], centroids: &[Vec<f64>], m: f64, row: &mut [f64]) {
    let dist: Vec<f64> = centroids.iter().map(|c| sq_dist(v, c)).collect();
    let zeros = dist.iter().filter(|&&d| d == 0.0).count();
    if zeros > 0 {
        for (u, &d) in row.iter_mut().zip(&dist) {
            *u = if d == 0.0 { 1.0 / zeros as f64 } else { 0.0 };
        }
        return;
    }
    // u_k = (1/d_k)^p / Σ_j (1/d_j)^p, with p = 1/(m−1); scaled by the
    // smallest distance so nothing overflows.
    let p = 1.0 / (m - 1.0);
    let dmin = dist.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    for (u, &d) in row.iter_mut().zip(&dist) {
        *u = (dmin / d).powf(p);
        total += *u;
    }
    for u in row.iter_mut() {
        *u /= total;
    }
}

/// Spread-relative jitter used to separate coincident centroids.
fn jitter(c: &mut [f64], scale: f64, rng: &mut impl Rng) {
    for x in c {
        *x += rng.gen_range(-1.0..1.0) * scale;
    }
}

fn separate_duplicates(centroids: &mut [Vec<f64>], scale: f64, rng: &mut impl Rng) {
    for k in 1..centroids.len() {
        while (0..k).any(|j| sq_dist(&centroids[k], &centroids[j]) == 0.0) {
            jitter(&mut centroids[k], scale, rng);
        }
    }
}

/// Fuzzy c-means on `data`, initialized from `k` distinct data points chosen
/// with `rng`. Coincident centroids are pulled apart by a small seeded jitter.
pub fn fuzzy_cluster(
    data: &[Vec<f64>],
    k: usize,
    cfg: &FcmConfig,
    rng: &mut impl Rng,
) -> Result<FcmResult> {
    if k == 0 {
        return Err(Error::invalid(
            "fuzzy clustering needs at least one cluster",
        ));
    }
    if data.len() < k {
        return Err(Error::invalid(format!(
            "fuzzy clustering of {} points into {k} clusters",
            data.len()
        )));
    }
    if cfg.m <= 1.0 {
        return Err(Error::invalid(format!(
            "fuzzifier must exceed 1, got {}",
            cfg.m
        )));
    }
    let d = data[0].len();
    if d == 0 || data.iter().any(|v| v.len() != d) {
        return Err(Error::shape(
            "fuzzy_cluster",
            "points must share a nonzero dimension",
        ));
    }
    if data.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::invalid("fuzzy clustering of non-finite data"));
    }

    let spread = data.iter().flatten().fold(0.0_f64, |a, x| a.max(x.abs()));
    let eps = 1e-6 * (1.0 + spread);

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    for &i in &order {
        if centroids.len() == k {
            break;
        }
        if centroids.iter().all(|c| sq_dist(c, &data[i]) > 0.0) {
            centroids.push(data[i].clone());
        }
    }
    while centroids.len() < k {
        centroids.push(data[order[centroids.len() % order.len()]].clone());
    }
    separate_duplicates(&mut centroids, eps, rng);

    let mut u = vec![vec![0.0; k]; data.len()];
    let mut max_row_sum_error = 0.0_f64;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        iterations += 1;
        for (v, row) in data.iter().zip(u.iter_mut()) {
            memberships_into(v, &centroids, cfg.m, row);
            max_row_sum_error = max_row_sum_error.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let mut next = vec![vec![0.0; d]; k];
        let mut weight = vec![0.0; k];
        for (v, row) in data.iter().zip(&u) {
            for (c, &uik) in row.iter().enumerate() {
                let w = uik.powf(cfg.m);
                if w == 0.0 {
                    continue;
                }
                weight[c] += w;
                for (acc, x) in next[c].iter_mut().zip(v) {
                    *acc += w * x;
                }
            }
        }
        for (c, centroid) in next.iter_mut().enumerate() {
            if weight[c] > 0.0 {
                centroid.iter_mut().for_each(|x| *x /= weight[c]);
            } else {
                // A cluster that lost every point keeps its old position.
                centroid.clone_from(&centroids[c]);
            }
        }
        separate_duplicates(&mut next, eps, rng);
        let shift = next
            .iter()
            .zip(&centroids)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < cfg.tol {
            converged = true;
            break;
        }
    }
    for (v, row) in data.iter().zip(u.iter_mut()) {
        memberships_into(v, &centroids, cfg.m, row);
    }
    Ok(FcmResult {
        centroids: Tensor::new([k, d], centroids.concat())?,
        memberships: u,
        iterations,
        converged,
        max_row_sum_error,
    })
}

/// Replace the centroids with a clustering of the buffer and clear it.
/// The scaling vector is left alone. An empty (or too small) buffer leaves
/// the rules unchanged.
pub fn epoch_end_update(
    rules: &FuzzyRuleSet,
    buffer: &mut ActivationBuffer,
    cfg: &FcmConfig,
    rng: &mut impl Rng,
) -> Result<FuzzyRuleSet> {
    let k = rules.k();
    if buffer.len() < k {
        warn!(
            "fuzzy block: {} buffered activations for {k} rules; centroids unchanged",
            buffer.len()
        );
        buffer.clear();
        return Ok(rules.clone());
    }
    let fit = fuzzy_cluster(buffer.items(), k, cfg, rng)?;
    if fit.centroids.shape()[1] != rules.d() {
        return Err(Error::shape(
            "fnb",
            format!(
                "buffered vectors have {} values, rules expect {}",
                fit.centroids.shape()[1],
                rules.d()
            ),
        ));
    }
    buffer.clear();
    Ok(FuzzyRuleSet {
        centroids: fit.centroids,
        log_a: rules.log_a.clone(),
    })
}

/// The fuzzy block as a model component whose state lives in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuzzyBlock {
    pub name: String,
    pub rules: usize,
    pub dim: usize,
    /// Block the gradient from flowing back into the block's input.
    pub detach_input: bool,
}

impl FuzzyBlock {
    pub fn log_a_key(&self) -> String {
        format!("{}.log_a", self.name)
    }

    pub fn centroids_key(&self) -> String {
        format!("{}.centroids", self.name)
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        if self.rules == 0 || self.dim == 0 {
            return Err(Error::invalid("fuzzy block needs K ≥ 1 and d ≥ 1"));
        }
        let fresh = FuzzyRuleSet::new(self.rules, self.dim);
        store.insert(self.log_a_key(), fresh.log_a, true)?;
        store.insert(self.centroids_key(), fresh.centroids, false)
    }

    pub fn rule_set(&self, store: &ParamStore) -> Result<FuzzyRuleSet> {
        Ok(FuzzyRuleSet {
            centroids: store.tensor(&self.centroids_key())?.clone(),
            log_a: store.tensor(&self.log_a_key())?.clone(),
        })
    }

    /// `(batch, d)` → `(batch, K)` normalized activations.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, v: Var) -> Result<Var> {
        let v = if self.detach_input { g.detach(v) } else { v };
        let log_a = g.param(store, &self.log_a_key())?;
        let centroids = store.tensor(&self.centroids_key())?;
        g.fuzzy_rules(v, log_a, centroids)
    }

    pub fn epoch_end_update(
        &self,
        store: &mut ParamStore,
        buffer: &mut ActivationBuffer,
        cfg: &FcmConfig,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let updated = epoch_end_update(&self.rule_set(store)?, buffer, cfg, rng)?;
        store.get_mut(&self.centroids_key())?.tensor = updated.centroids;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{input_gradient_error, param_gradient_error, project};
    use crate::autodiff::AdamState;
    use indexmap::IndexMap;

    /// Eq.-style product of memberships followed by normalization, with the
    /// running product kept as mantissa × 2^exponent so that it cannot
    /// underflow for the dimensions exercised here.
    fn product_oracle(v: &[f64], c: &[f64], a: &[f64], k: usize) -> Vec<f64> {
        let d = v.len();
        let mut parts = Vec::with_capacity(k);
        for r in 0..k {
            let (mut m, mut e) = (1.0_f64, 0_i64);
            for j in 0..d {
                let z = (v[j] - c[r * d + j]) / a[j];
                m *= (-0.25 * z * z).exp();
                while m != 0.0 && m < 2f64.powi(-500) {
                    m *= 2f64.powi(500);
                    e -= 500;
                }
            }
            parts.push((m, e));
        }
        let emax = parts
            .iter()
            .filter(|p| p.0 > 0.0)
            .map(|p| p.1)
            .max()
            .unwrap();
        let scaled: Vec<f64> = parts
            .iter()
            .map(|&(m, e)| m * 2f64.powi((e - emax).max(-2000) as i32))
            .collect();
        let total: f64 = scaled.iter().sum();
        scaled.iter().map(|x| x / total).collect()
    }

    fn rules(c: Vec<f64>, k: usize, a: Vec<f64>) -> FuzzyRuleSet {
        let d = a.len();
        FuzzyRuleSet {
            centroids: Tensor::new([k, d], c).unwrap(),
            log_a: Tensor::new([d], a.iter().map(|x: &f64| x.ln()).collect()).unwrap(),
        }
    }

    #[test]
    fn single_rule_is_certain() {
        let r = FuzzyRuleSet::new(1, 3);
        assert_eq!(r.forward(&[5.0, -2.0, 1.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn two_centroid_example() {
        let r = rules(vec![0.0, 2.0], 2, vec![1.0]);
        assert_eq!(r.log_strengths(&[0.0]).unwrap(), vec![0.0, -1.0]);
        let o = r.forward(&[0.0]).unwrap();
        assert!((o[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((o[1] - 0.2689414213699951).abs() < 1e-12);
        let p = product_oracle(&[0.0], &[0.0, 2.0], &[1.0], 2);
        assert!((o[0] - p[0]).abs() < 1e-15 && (o[1] - p[1]).abs() < 1e-15);
    }

    #[test]
    fn input_at_centroid_wins() {
        // Centroid 1 at v, the others equidistant from it.
        let r = rules(vec![1.0, 0.0, 0.0, 0.0, -1.0, 0.0], 3, vec![0.8, 1.3]);
        let o = r.forward(&[0.0, 0.0]).unwrap();
        assert!(o[1] > o[0] && o[1] > o[2]);
        assert!((o[0] - o[2]).abs() < 1e-15);
    }

    #[test]
    fn matches_product_form_for_small_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..500 {
            let d = 1 + trial % 16;
            let k = 1 + trial % 5;
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let c: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let a: Vec<f64> = (0..d).map(|_| rng.gen_range(0.2..3.0)).collect();
            let got = rules(c.clone(), k, a.clone()).forward(&v).unwrap();
            let want = product_oracle(&v, &c, &a, k);
            for (g, w) in got.iter().zip(&want) {
                assert!(
                    (g - w).abs() <= 1e-9 * w.abs().max(1e-300) || (g - w).abs() < 1e-300,
                    "trial {trial}: {g} vs {w}"
                );
            }
        }
    }

    #[test]
    fn outputs_form_a_distribution_even_for_wide_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10_000 {
            let d = rng.gen_range(1..200);
            let k = rng.gen_range(1..8);
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-20.0..20.0)).collect();
            let c: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-20.0..20.0)).collect();
            let a: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..2.0)).collect();
            let o = rules(c, k, a).forward(&v).unwrap();
            let s: f64 = o.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(o.iter().all(|x| x.is_finite() && *x >= 0.0 && *x <= 1.0));
        }
    }

    #[test]
    fn common_shrink_of_a_sharpens_without_changing_argmax() {
        let c = vec![0.0, 0.0, 1.0, 1.0, -2.0, 0.5];
        let v = [0.7, 0.4];
        let wide = rules(c.clone(), 3, vec![1.0, 2.0]).forward(&v).unwrap();
        let narrow = rules(c, 3, vec![0.1, 0.2]).forward(&v).unwrap();
        let argmax = |o: &[f64]| (0..o.len()).max_by(|&i, &j| o[i].total_cmp(&o[j])).unwrap();
        assert_eq!(argmax(&wide), argmax(&narrow));
        assert!(narrow[argmax(&narrow)] > wide[argmax(&wide)]);
        assert!(narrow[argmax(&narrow)] > 0.99);
    }

    fn block_store(k: usize, d: usize, seed: u64) -> (FuzzyBlock, ParamStore) {
        let b = FuzzyBlock {
            name: "fnb".into(),
            rules: k,
            dim: d,
            detach_input: false,
        };
        let mut s = ParamStore::new();
        b.init(&mut s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in s.iter_mut() {
            let r = if p.trainable { 0.5 } else { 1.0 };
            p.tensor
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = rng.gen_range(-r..r));
        }
        (b, s)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let (b, store) = block_store(4, 5, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
            let x =
                Tensor::new([3, 5], (0..15).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap();
            let err = input_gradient_error(&x, 1e-6, |g, v| {
                let o = b.forward(g, &store, v)?;
                project(g, o, seed)
            })
            .unwrap();
            assert!(err < 1e-4, "seed {seed} dv: {err}");
            let err = param_gradient_error(&store, "fnb.log_a", None, 1e-6, |g, s| {
                let v = g.constant(x.clone());
                let o = b.forward(g, s, v)?;
                project(g, o, seed)
            })
            .unwrap();
            assert!(err < 1e-4, "seed {seed} dlog_a: {err}");
        }
    }

    #[test]
    fn equal_centroids_give_uniform_output_and_no_input_gradient() {
        let (b, mut store) = block_store(4, 3, 1);
        store.get_mut("fnb.centroids").unwrap().tensor = Tensor::full([4, 3], 0.3);
        let mut g = Graph::new();
        let v = g.variable(Tensor::new([2, 3], vec![0.1, -2.0, 4.0, 1.0, 1.0, 1.0]).unwrap());
        let o = b.forward(&mut g, &store, v).unwrap();
        assert!(g.value(o).data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let loss = project(&mut g, o, 3).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads
            .wrt(v)
            .unwrap()
            .data()
            .iter()
            .all(|&x| x.abs() < 1e-15));
    }

    #[test]
    fn detached_input_gets_no_gradient() {
        let (mut b, store) = block_store(3, 2, 2);
        b.detach_input = true;
        let mut g = Graph::new();
        let v = g.variable(Tensor::new([1, 2], vec![0.3, -0.2]).unwrap());
        let o = b.forward(&mut g, &store, v).unwrap();
        let loss = project(&mut g, o, 1).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads
            .wrt(v)
            .map_or(true, |t| t.data().iter().all(|&x| x == 0.0)));
        assert!(grads.param("fnb.log_a").is_some());
    }

    #[test]
    fn scaling_stays_positive_under_adam() {
        let (b, mut store) = block_store(2, 3, 4);
        let mut adam = AdamState::new(0.5);
        let x = Tensor::new([1, 3], vec![5.0, -5.0, 5.0]).unwrap();
        for _ in 0..2000 {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let o = b.forward(&mut g, &store, v).unwrap();
            let first = g.slice(o, 1, 0, 1).unwrap();
            let loss = g.sum_all(first);
            let grads = g.backward(loss).unwrap();
            let mut map = IndexMap::new();
            map.insert(
                "fnb.log_a".to_string(),
                grads.param("fnb.log_a").unwrap().clone(),
            );
            adam.step(&mut store, &map).unwrap();
        }
        let a: Vec<f64> = store
            .tensor("fnb.log_a")
            .unwrap()
            .data()
            .iter()
            .map(|l| l.exp())
            .collect();
        assert!(a.iter().all(|&x| x > 0.0 && x.is_finite()), "{a:?}");
    }

    #[test]
    fn buffer_keeps_everything_under_capacity() {
        let mut buf = ActivationBuffer::new(ActivationBuffer::DEFAULT_CAPACITY, 0);
        for i in 0..100 {
            buf.collect(&[i as f64], Mode::Train);
        }
        assert_eq!(buf.len(), 100);
        assert!(buf
            .items()
            .iter()
            .enumerate()
            .all(|(i, v)| v[0] == i as f64));
    }

    #[test]
    fn buffer_ignores_inference() {
        let mut buf = ActivationBuffer::new(8, 0);
        buf.collect(&[1.0], Mode::Infer);
        assert!(buf.is_empty());
        assert_eq!(buf.seen(), 0);
    }

    #[test]
    fn reservoir_is_uniform() {
        // Inclusion counts of 1000 offered items, grouped in tens of 100,
        // over 4000 independent reservoirs of 8.
        let trials = 4000;
        let mut counts = [0u64; 10];
        for seed in 0..trials {
            let mut buf = ActivationBuffer::new(8, seed);
            for i in 0..1000 {
                buf.collect(&[i as f64], Mode::Train);
            }
            assert_eq!(buf.len(), 8);
            for v in buf.items() {
                counts[v[0] as usize / 100] += 1;
            }
        }
        let expected = trials as f64 * 8.0 / 10.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 9 degrees of freedom; 27.88 is the 0.1% critical value.
        assert!(chi2 < 27.88, "chi2 = {chi2}, counts {counts:?}");
    }

    fn points(values: &[f64]) -> Vec<Vec<f64>> {
        values.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn two_separated_clumps() {
        let mut data = points(&[0.0; 50]);
        data.extend(points(&[10.0; 50]));
        let fit = fuzzy_cluster(
            &data,
            2,
            &FcmConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let mut c = fit.centroids.data().to_vec();
        c.sort_by(f64::total_cmp);
        assert!(c[0].abs() < 0.1 && (c[1] - 10.0).abs() < 0.1, "{c:?}");
        assert!(fit.converged);
    }

    #[test]
    fn one_cluster_per_distinct_point() {
        let data = points(&[-3.0, 0.5, 2.0, 7.5]);
        let cfg = FcmConfig {
            tol: 1e-14,
            ..FcmConfig::default()
        };
        let fit = fuzzy_cluster(&data, 4, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut c = fit.centroids.data().to_vec();
        c.sort_by(f64::total_cmp);
        for (got, want) in c.iter().zip([-3.0, 0.5, 2.0, 7.5]) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn membership_rows_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let fit = fuzzy_cluster(&data, 5, &FcmConfig::default(), &mut rng).unwrap();
        assert!(fit.max_row_sum_error < 1e-9);
        for row in &fit.memberships {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn too_few_points_rejected() {
        let err = fuzzy_cluster(
            &points(&[1.0, 2.0]),
            3,
            &FcmConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(err.is_err());
    }

    #[test]
    fn identical_points_do_not_collapse_into_nan() {
        let data = points(&[4.0; 20]);
        let fit = fuzzy_cluster(
            &data,
            3,
            &FcmConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        assert!(fit.centroids.is_finite());
        assert!(fit.centroids.data().iter().all(|c| (c - 4.0).abs() < 1e-3));
    }

    #[test]
    fn clustering_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let a = fuzzy_cluster(
            &data,
            4,
            &FcmConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let b = fuzzy_cluster(
            &data,
            4,
            &FcmConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        assert_eq!(a.centroids, b.centroids);
    }

    #[test]
    fn tight_cluster_holds_every_centroid() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<Vec<f64>> = (0..500)
            .map(|_| {
                vec![
                    3.0 + rng.gen_range(-0.05..0.05),
                    -1.0 + rng.gen_range(-0.05..0.05),
                ]
            })
            .collect();
        let fit = fuzzy_cluster(&data, 4, &FcmConfig::default(), &mut rng).unwrap();
        for c in fit.centroids.data().chunks(2) {
            assert!(
                (c[0] - 3.0).abs() <= 0.05 && (c[1] + 1.0).abs() <= 0.05,
                "{c:?}"
            );
        }
    }

    #[test]
    fn epoch_update_replaces_centroids_only() {
        let (b, mut store) = block_store(2, 1, 7);
        let log_a = store.tensor("fnb.log_a").unwrap().clone();
        let mut buf = ActivationBuffer::new(64, 0);
        for i in 0..40 {
            buf.collect(&[if i % 2 == 0 { -5.0 } else { 5.0 }], Mode::Train);
        }
        b.epoch_end_update(
            &mut store,
            &mut buf,
            &FcmConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let mut c = store.tensor("fnb.centroids").unwrap().data().to_vec();
        c.sort_by(f64::total_cmp);
        assert!((c[0] + 5.0).abs() < 1e-6 && (c[1] - 5.0).abs() < 1e-6);
        assert_eq!(store.tensor("fnb.log_a").unwrap(), &log_a);
        assert!(buf.is_empty());
    }

    #[test]
    fn empty_buffer_leaves_centroids() {
        let b = FuzzyBlock {
            name: "fnb".into(),
            rules: 4,
            dim: 6,
            detach_input: false,
        };
        let mut store = ParamStore::new();
        b.init(&mut store).unwrap();
        assert!(store
            .tensor("fnb.centroids")
            .unwrap()
            .data()
            .iter()
            .all(|&c| c == 0.0));
        let mut buf = ActivationBuffer::new(16, 0);
        b.epoch_end_update(
            &mut store,
            &mut buf,
            &FcmConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(store
            .tensor("fnb.centroids")
            .unwrap()
            .data()
            .iter()
            .all(|&c| c == 0.0));
        assert!(!store.get("fnb.centroids").unwrap().trainable);
    }
}
