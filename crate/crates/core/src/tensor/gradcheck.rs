use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

/// Central difference `(f(x + eps) - f(x - eps)) / 2 eps` of a scalar function.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// Checks the reverse-mode gradient of `f` with respect to every coordinate
/// of every tensor in `inputs`.
///
/// `f` receives a fresh graph with `inputs` bound as gradient-tracking leaves
/// (in order) and must return a single-element node. It is evaluated once
/// with a backward pass and then twice per coordinate.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("input {i}")).collect();
    finite_diff_check_named(f, inputs, &names, eps)
}

/// [`finite_diff_check`] with a name per input; a non-finite function value
/// at a perturbed point is reported against the name and coordinate.
pub fn finite_diff_check_named<F>(
    mut f: F,
    inputs: &[Tensor],
    names: &[String],
    eps: f64,
) -> Result<GradCheck>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if names.len() != inputs.len() {
        return Err(Error::contract(format!(
            "{} names for {} inputs",
            names.len(),
            inputs.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::contract(format!("epsilon must be positive, got {eps}")));
    }
    let mut eval = |values: &[Tensor], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let y = g.item(out)?;
        if !y.is_finite() {
            return Err(Error::Numeric(format!("function value is {y}")));
        }
        let grads = if with_grad {
            g.backward(out)?;
            vars.iter().map(|&v| g.grad(v).to_vec()).collect()
        } else {
            Vec::new()
        };
        Ok((y, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut work = inputs.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (ti, grads) in analytic.iter().enumerate() {
        for j in 0..grads.len() {
            let orig = work[ti].data()[j];
            let at = |e: Error| match e {
                Error::Numeric(m) => Error::Numeric(format!("{m} when perturbing {}[{j}]", names[ti])),
                other => other,
            };
            work[ti].data_mut()[j] = orig + eps;
            let (plus, _) = eval(&work, false).map_err(at)?;
            work[ti].data_mut()[j] = orig - eps;
            let (minus, _) = eval(&work, false).map_err(at)?;
            work[ti].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grads[j];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((ti, j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{Elementwise, Reduction};

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    /// Weighted sum with fixed random weights, so symmetric cancellations in
    /// a plain sum cannot hide a wrong gradient.
    fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        let w = random(&mut rng, g.shape(y));
        let w = g.constant(w);
        let p = g.mul(y, w)?;
        Ok(g.sum_all(p))
    }

    #[test]
    fn scalar_examples() {
        let d = central_difference(|x| x * x, 3.0, 1e-5);
        assert!((d - 6.0).abs() < 1e-8);
        let d = central_difference(crate::tensor::graph::sigmoid, 0.0, 1e-5);
        assert!((d - 0.25).abs() < 1e-9);

        let r = finite_diff_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum_all(sq))
            },
            &[Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn rejects_bad_epsilon_and_non_finite() {
        let f = |g: &mut Graph, v: &[Var]| Ok(g.sum_all(v[0]));
        assert!(finite_diff_check(f, &[Tensor::scalar(1.0)], 0.0).is_err());
        let ln = |g: &mut Graph, v: &[Var]| Ok(g.ln(v[0]));
        assert!(matches!(
            finite_diff_check(ln, &[Tensor::scalar(-1.0)], 1e-5),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn non_finite_perturbation_names_the_input() {
        let ln = |g: &mut Graph, v: &[Var]| {
            let y = g.ln(v[1]);
            let s = g.sum_all(y);
            Ok(g.add(s, v[0])?)
        };
        let inputs = [Tensor::scalar(1.0), Tensor::row(&[1.0, 4e-6]).unwrap()];
        let names = ["bias".to_string(), "gate".to_string()];
        match finite_diff_check_named(ln, &inputs, &names, 1e-5) {
            Err(Error::Numeric(m)) => assert!(m.contains("gate[1]"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // one factor of x*x is detached, so the analytic gradient is half the true one
        let r = finite_diff_check(
            |g, v| {
                let c = g.constant(g.tensor(v[0]));
                let sq = g.mul(c, v[0])?;
                Ok(g.sum_all(sq))
            },
            &[Tensor::row(&[1.0, 2.0]).unwrap()],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn matmul_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, &[3, 3]);
        let b = random(&mut rng, &[3, 3]);
        let r = finite_diff_check(
            |g, v| {
                let m = g.matmul(v[0], v[1])?;
                Ok(g.sum_all(m))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.coordinates, 18);
    }

    #[test]
    fn every_op_passes_over_seeds() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = [
                rng.random_range(1..=8),
                rng.random_range(1..=8),
                rng.random_range(1..=8),
            ];
            let check = |name: &str, r: Result<GradCheck>, tol: f64| {
                let r = r.unwrap();
                assert!(r.max_rel_error < tol, "{name} seed {seed}: {r:?}");
            };
            let x = random(&mut rng, &shape);
            let y = random(&mut rng, &shape);
            for op in [Elementwise::Add, Elementwise::Sub, Elementwise::Mul] {
                check(
                    "binary",
                    finite_diff_check(
                        |g, v| {
                            let o = g.elementwise(op, &[v[0], v[1]])?;
                            weighted_sum(g, o, seed)
                        },
                        &[x.clone(), y.clone()],
                        1e-5,
                    ),
                    1e-6,
                );
            }
            for op in [Elementwise::Sigmoid, Elementwise::Tanh, Elementwise::Relu] {
                check(
                    "unary",
                    finite_diff_check(
                        |g, v| {
                            let o = g.elementwise(op, &[v[0]])?;
                            weighted_sum(g, o, seed)
                        },
                        &[x.clone()],
                        1e-5,
                    ),
                    1e-6,
                );
            }
            let s = Tensor::scalar(rng.random_range(-1.0..1.0));
            check(
                "scalar broadcast",
                finite_diff_check(
                    |g, v| {
                        let a = g.mul(v[1], v[0])?;
                        let b = g.sub(a, v[1])?;
                        weighted_sum(g, b, seed)
                    },
                    &[x.clone(), s],
                    1e-5,
                ),
                1e-6,
            );
            let pos = Tensor::from_fn(&shape, |_| rng.random_range(0.5..2.0)).unwrap();
            check(
                "ln",
                finite_diff_check(
                    |g, v| {
                        let o = g.ln(v[0]);
                        weighted_sum(g, o, seed)
                    },
                    &[pos],
                    1e-5,
                ),
                1e-6,
            );
            check(
                "softmax",
                finite_diff_check(
                    |g, v| {
                        let o = g.softmax(v[0])?;
                        weighted_sum(g, o, seed)
                    },
                    &[x.clone()],
                    1e-5,
                ),
                1e-6,
            );
            for axis in 0..3 {
                for op in [Reduction::Sum, Reduction::Mean] {
                    check(
                        "reduce",
                        finite_diff_check(
                            |g, v| {
                                let o = g.reduce(op, v[0], axis)?;
                                weighted_sum(g, o, seed)
                            },
                            &[x.clone()],
                            1e-5,
                        ),
                        1e-6,
                    );
                }
                let len = shape[axis];
                let start = rng.random_range(0..len);
                let n = rng.random_range(1..=len - start);
                check(
                    "narrow",
                    finite_diff_check(
                        |g, v| {
                            let o = g.narrow(v[0], axis, start, n)?;
                            weighted_sum(g, o, seed)
                        },
                        &[x.clone()],
                        1e-5,
                    ),
                    1e-6,
                );
                let mut other = shape;
                other[axis] = rng.random_range(1..=8);
                let z = random(&mut rng, &other);
                check(
                    "concat",
                    finite_diff_check(
                        |g, v| {
                            let o = g.concat(&[v[0], v[1], v[0]], axis)?;
                            weighted_sum(g, o, seed)
                        },
                        &[x.clone(), z],
                        1e-5,
                    ),
                    1e-6,
                );
            }
            let m = random(&mut rng, &shape[..2]);
            check(
                "transpose+reshape",
                finite_diff_check(
                    |g, v| {
                        let t = g.transpose(v[0])?;
                        let p = g.matmul(v[0], t)?;
                        let n = g.value(p).len();
                        let r = g.reshape(p, &[n])?;
                        weighted_sum(g, r, seed)
                    },
                    &[m],
                    1e-5,
                ),
                1e-6,
            );
        }
    }

    #[test]
    fn conv_and_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, &[3, 5, 4, 2]);
        let w = random(&mut rng, &[3, 3, 3, 1, 2]);
        let b = random(&mut rng, &[3]);
        let r = finite_diff_check(
            |g, v| {
                let c = g.conv3d(v[0], v[1], v[2])?;
                let p = g.max_pool3d(c, [1, 2, 2])?;
                weighted_sum(g, p, 11)
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
