//! Central finite differences, the reference every analytic gradient is checked against.

use super::{Graph, ParamStore, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Per-coordinate `(f(x + eps·eᵢ) − f(x − eps·eᵢ)) / (2·eps)`.
pub fn finite_diff_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_diff_at(f, x, eps, &coords)
}

/// Finite differences restricted to `coords`; other entries are left at zero.
pub fn finite_diff_at(
    f: impl Fn(&Tensor) -> f64,
    x: &Tensor,
    eps: f64,
    coords: &[usize],
) -> Tensor {
    let mut grad = Tensor::zeros(x.shape().to_vec());
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// `‖a − b‖ / max(‖a‖ + ‖b‖, floor)`, the relative error used by all gradient checks.
///
/// The norm form keeps near-zero components from dominating the way an
/// elementwise ratio would.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-10)
}

/// Reduce `v` to a scalar through fixed pseudo-random weights, so that
/// outputs with a constant sum (softmax, normalized memberships) still
/// produce informative gradients.
pub fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let weights = (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    let w = g.constant(Tensor::new(shape, weights)?);
    let prod = g.mul(v, w)?;
    Ok(g.sum_all(prod))
}

/// Relative error between the analytic gradient of `build(x)` with respect
/// to `x` and central finite differences.
pub fn input_gradient_error(
    x: &Tensor,
    eps: f64,
    build: impl Fn(&mut Graph, Var) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let loss = build(&mut g, xv)?;
    let grads = g.backward(loss)?;
    let analytic = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    let numeric = finite_diff_gradient(
        |t| {
            let mut g = Graph::new();
            let v = g.constant(t.clone());
            let l = build(&mut g, v).expect("rebuild");
            g.value(l).item()
        },
        x,
        eps,
    );
    Ok(relative_error(analytic.data(), numeric.data()))
}

/// Relative error for parameter `name` of `store`, probing only `coords`
/// (all coordinates when `None`).
pub fn param_gradient_error(
    store: &ParamStore,
    name: &str,
    coords: Option<&[usize]>,
    eps: f64,
    build: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss)?;
    let p = store.tensor(name)?;
    let analytic = grads
        .param(name)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()));
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..p.len()).collect();
            &all
        }
    };
    let numeric = finite_diff_at(
        |t| {
            let mut probe = store.clone();
            probe.get_mut(name).expect("param").tensor = t.clone();
            let mut g = Graph::new();
            let l = build(&mut g, &probe).expect("rebuild");
            g.value(l).item()
        },
        p,
        eps,
        coords,
    );
    let a: Vec<f64> = coords.iter().map(|&i| analytic.data()[i]).collect();
    let n: Vec<f64> = coords.iter().map(|&i| numeric.data()[i]).collect();
    Ok(relative_error(&a, &n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_gradient(
            |t| t.data()[0] * t.data()[0],
            &Tensor::from_vec(vec![3.0]),
            1e-5,
        );
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn linear_sum_is_all_ones() {
        let x = Tensor::from_vec(vec![0.3, -2.0, 7.5, 1e3]);
        let g = finite_diff_gradient(|t| t.sum(), &x, 1e-5);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn relative_error_of_identical_is_zero() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }
}
