//! Finite-difference validation of the tape's backward pass.
//!
//! Two layers of checking: the 64-bit backward is compared against
//! central differences, and the 32-bit backward is compared against the
//! already-verified 64-bit gradients of the same graph. Finite
//! differences evaluated in f32 are too noisy to resolve the 1e-3
//! tolerance, so the cross-width comparison is the meaningful 32-bit
//! test.

use std::sync::Arc;

use super::{Kernel, Scalar, Tape, Tensor};
use crate::error::Result;
use crate::rng::{self, DrawKey};

/// Relative-error floor: errors are measured against
/// max(|analytic|, |numeric|, 1e-8).
pub const REL_FLOOR: f64 = 1e-8;

/// Default tolerances per element width.
pub const TOL_F64: f64 = 1e-5;
pub const TOL_F32: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub checked: usize,
}

impl CheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compare the backward pass of `build` against central differences over
/// every element of every input. `build` must construct the same graph
/// whenever it is called with the same input values.
pub fn gradcheck_multi<F: Scalar>(
    name: &str,
    build: impl Fn(&mut Tape<F>, &[Tensor]) -> Result<Tensor>,
    inputs: &[(Vec<F>, Vec<usize>)],
    eps: f64,
) -> Result<CheckReport> {
    let eval = |values: &[Vec<F>]| -> Result<f64> {
        let mut tape: Tape<F> = Tape::new();
        let ts: Vec<Tensor> = values
            .iter()
            .zip(inputs)
            .map(|(v, (_, s))| tape.leaf(v.clone(), s.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut tape, &ts)?;
        Ok(tape.scalar_value(loss)?.to_f64())
    };

    let analytic = analytic_gradients(&build, inputs)?;

    let base: Vec<Vec<F>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    let mut max_rel: f64 = 0.0;
    let mut sum_rel = 0.0;
    let mut checked = 0;
    for (k, (v, _)) in inputs.iter().enumerate() {
        for i in 0..v.len() {
            let mut plus = base.clone();
            plus[k][i] = F::from_f64(plus[k][i].to_f64() + eps);
            let mut minus = base.clone();
            minus[k][i] = F::from_f64(minus[k][i].to_f64() - eps);
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let e = rel_err(analytic[k][i], numeric);
            max_rel = max_rel.max(e);
            sum_rel += e;
            checked += 1;
        }
    }
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        mean_rel_err: if checked > 0 {
            sum_rel / checked as f64
        } else {
            0.0
        },
        checked,
    })
}

/// Single-input convenience wrapper.
pub fn gradcheck<F: Scalar>(
    name: &str,
    build: impl Fn(&mut Tape<F>, Tensor) -> Result<Tensor>,
    value: Vec<F>,
    shape: Vec<usize>,
    eps: f64,
) -> Result<CheckReport> {
    gradcheck_multi(name, |tape, ts| build(tape, ts[0]), &[(value, shape)], eps)
}

/// Backward-pass gradients of `build`'s loss w.r.t. each input, as f64.
pub fn analytic_gradients<F: Scalar>(
    build: impl Fn(&mut Tape<F>, &[Tensor]) -> Result<Tensor>,
    inputs: &[(Vec<F>, Vec<usize>)],
) -> Result<Vec<Vec<f64>>> {
    let mut tape: Tape<F> = Tape::new();
    let ts: Vec<Tensor> = inputs
        .iter()
        .map(|(v, s)| tape.leaf(v.clone(), s.clone()))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &ts)?;
    let store = tape.backward(loss)?;
    Ok(ts
        .iter()
        .zip(inputs)
        .map(|(&t, (v, _))| {
            store
                .get(t)
                .map(|g| g.iter().map(|x| x.to_f64()).collect())
                .unwrap_or_else(|| vec![0.0; v.len()])
        })
        .collect())
}

/// One named graph plus its inputs, instantiable at any element width.
pub struct SuiteCheck<F: Scalar> {
    pub name: &'static str,
    pub inputs: Vec<(Vec<F>, Vec<usize>)>,
    #[allow(clippy::type_complexity)]
    pub build: Box<dyn Fn(&mut Tape<F>, &[Tensor]) -> Result<Tensor> + Send + Sync>,
}

fn draws(seed: u64, stream: u32, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let key = DrawKey {
        seed,
        frame: 0,
        stream,
    };
    (0..n)
        .map(|i| lo + (hi - lo) * key.uniform(i as u64))
        .collect()
}

fn to_f<F: Scalar>(v: Vec<f64>) -> Vec<F> {
    v.into_iter().map(F::from_f64).collect()
}

/// The standard battery of graphs covering every differentiable op.
///
/// All constants derive from f64 draws and convert exactly to f32, so a
/// check instantiated at both widths sees the same mathematical graph.
/// Input ranges keep the checks well conditioned: kinked ops (abs, relu)
/// stay away from their kinks and ops whose curvature blows up near zero
/// (div, log) stay away from zero.
pub fn suite_checks<F: Scalar>(seed: u64) -> Vec<SuiteCheck<F>> {
    let n = 12;
    let shape = || vec![3usize, 4usize];
    let sym = |salt: u32| -> Vec<F> { to_f(draws(seed, salt, n, -2.0, 2.0)) };
    let narrow = |salt: u32| -> Vec<F> { to_f(draws(seed, salt, n, -1.2, 1.2)) };
    let pos = |salt: u32| -> Vec<F> { to_f(draws(seed, salt, n, 0.5, 2.0)) };
    let away_from_zero = |salt: u32| -> Vec<F> {
        to_f(
            draws(seed, salt, n, 0.5, 2.0)
                .into_iter()
                .enumerate()
                .map(|(i, v)| if i % 2 == 0 { v } else { -v })
                .collect(),
        )
    };

    let mut checks: Vec<SuiteCheck<F>> = Vec::new();

    let binary = |name: &'static str,
                  f: fn(&mut Tape<F>, Tensor, Tensor) -> Result<Tensor>,
                  a: Vec<F>,
                  b: Vec<F>|
     -> SuiteCheck<F> {
        SuiteCheck {
            name,
            inputs: vec![(a, shape()), (b, shape())],
            build: Box::new(move |tape, ts| {
                let y = f(tape, ts[0], ts[1])?;
                Ok(tape.sum(y))
            }),
        }
    };
    checks.push(binary("add", Tape::add, sym(1), sym(2)));
    checks.push(binary("sub", Tape::sub, sym(3), sym(4)));
    checks.push(binary(
        "mul",
        Tape::mul,
        away_from_zero(5),
        away_from_zero(6),
    ));
    checks.push(binary(
        "div",
        Tape::div,
        away_from_zero(7),
        away_from_zero(8),
    ));

    let unary =
        |name: &'static str, f: fn(&mut Tape<F>, Tensor) -> Tensor, x: Vec<F>| -> SuiteCheck<F> {
            SuiteCheck {
                name,
                inputs: vec![(x, vec![3, 4])],
                build: Box::new(move |tape, ts| {
                    let y = f(tape, ts[0]);
                    Ok(tape.sum(y))
                }),
            }
        };
    checks.push(unary("neg", Tape::neg, sym(9)));
    checks.push(unary("exp", Tape::exp, narrow(10)));
    checks.push(unary("log_safe", Tape::log_safe, pos(11)));
    checks.push(unary("sin", Tape::sin, sym(12)));
    checks.push(unary("cos", Tape::cos, sym(13)));
    checks.push(unary("abs", Tape::abs, away_from_zero(14)));
    checks.push(unary("relu", Tape::relu, away_from_zero(15)));
    checks.push(unary("sigmoid", Tape::sigmoid, sym(16)));

    checks.push(SuiteCheck {
        name: "matmul",
        inputs: vec![
            (to_f(draws(seed, 17, 6, -1.0, 1.0)), vec![2, 3]),
            (to_f(draws(seed, 18, 12, -1.0, 1.0)), vec![3, 4]),
        ],
        build: Box::new(|tape, ts| {
            let y = tape.matmul(ts[0], ts[1])?;
            Ok(tape.sum(y))
        }),
    });

    checks.push(SuiteCheck {
        name: "add_bias",
        inputs: vec![
            (to_f(draws(seed, 19, 12, -1.0, 1.0)), vec![3, 4]),
            (to_f(draws(seed, 20, 4, -1.0, 1.0)), vec![4]),
        ],
        build: Box::new(|tape, ts| {
            let y = tape.add_bias(ts[0], ts[1])?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        }),
    });

    checks.push(SuiteCheck {
        name: "concat_cols",
        inputs: vec![
            (to_f(draws(seed, 21, 6, -1.0, 1.0)), vec![3, 2]),
            (to_f(draws(seed, 22, 9, -1.0, 1.0)), vec![3, 3]),
        ],
        build: Box::new(|tape, ts| {
            let y = tape.concat(&[ts[0], ts[1]], 1)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        }),
    });

    checks.push(SuiteCheck {
        name: "slice_cols",
        inputs: vec![(sym(23), vec![3, 4])],
        build: Box::new(|tape, ts| {
            let s = tape.slice_cols(ts[0], 1, 2)?;
            let sq = tape.mul(s, s)?;
            Ok(tape.sum(sq))
        }),
    });

    checks.push(SuiteCheck {
        name: "reshape",
        inputs: vec![(sym(24), vec![3, 4])],
        build: Box::new(|tape, ts| {
            let r = tape.reshape(ts[0], vec![4, 3])?;
            let sq = tape.mul(r, r)?;
            Ok(tape.sum(sq))
        }),
    });

    // Weighted sums expose every output of the cumulative products,
    // including one row containing an exact zero.
    let cum_weights = draws(seed, 25, 12, 0.5, 1.5);
    let mut cum_x = draws(seed, 26, 12, 0.2, 1.2);
    cum_x[5] = 0.0;
    for (label, exclusive) in [("cumprod_exclusive", true), ("cumprod_inclusive", false)] {
        let w: Vec<F> = to_f(cum_weights.clone());
        checks.push(SuiteCheck {
            name: label,
            inputs: vec![(to_f(cum_x.clone()), vec![3, 4])],
            build: Box::new(move |tape, ts| {
                let y = tape.cumprod_depth(ts[0], exclusive)?;
                let wt = tape.leaf(w.clone(), vec![3, 4])?;
                let p = tape.mul(y, wt)?;
                Ok(tape.sum(p))
            }),
        });
    }

    let kernel: Arc<Kernel<F>> =
        Arc::new(Kernel::new(3, 3, to_f(draws(seed, 27, 9, -0.5, 0.5))).expect("odd kernel"));
    checks.push(SuiteCheck {
        name: "conv2d_same",
        inputs: vec![(sym(28), vec![3, 4])],
        build: Box::new(move |tape, ts| {
            let y = tape.conv2d_same(ts[0], kernel.clone())?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        }),
    });

    checks.push(unary("sum", |tape, t| tape.sum(t), sym(29)));
    checks.push(unary("mean", |tape, t| tape.mean(t), sym(30)));

    // Smoothed Bernoulli relaxation with frozen noise, composed from
    // primitive ops: sigmoid((logit(p) + g) / tau).
    let noise_key = DrawKey {
        seed: rng::derive_seed(seed, 31),
        frame: 0,
        stream: rng::stream::BORDER,
    };
    let noise: Vec<F> = (0..12)
        .map(|i| {
            let u = 0.1 + 0.8 * noise_key.uniform(i as u64);
            F::from_f64(u.ln() - (1.0 - u).ln())
        })
        .collect();
    let tau = 0.7;
    checks.push(SuiteCheck {
        name: "relaxed_bernoulli",
        inputs: vec![(to_f(draws(seed, 32, 12, 0.25, 0.75)), vec![3, 4])],
        build: Box::new(move |tape, ts| {
            let one = tape.scalar(F::ONE);
            let q = tape.sub(one, ts[0])?;
            let lp = tape.log_safe(ts[0]);
            let lq = tape.log_safe(q);
            let logit = tape.sub(lp, lq)?;
            let nz = tape.leaf(noise.clone(), vec![3, 4])?;
            let z = tape.add(logit, nz)?;
            let zs = tape.scale(z, 1.0 / tau);
            let v = tape.sigmoid(zs);
            let sq = tape.mul(v, v)?;
            Ok(tape.sum(sq))
        }),
    });

    // Deep composite touching several op kinds at once.
    checks.push(SuiteCheck {
        name: "composite_mlp_layer",
        inputs: vec![
            (to_f(draws(seed, 33, 8, 0.2, 1.0)), vec![2, 4]),
            (to_f(draws(seed, 34, 12, -1.0, 1.0)), vec![4, 3]),
            (to_f(draws(seed, 35, 3, -0.5, 0.5)), vec![3]),
        ],
        build: Box::new(|tape, ts| {
            let h = tape.matmul(ts[0], ts[1])?;
            let hb = tape.add_bias(h, ts[2])?;
            let a = tape.relu(hb);
            let s = tape.sigmoid(a);
            let e = tape.exp(s);
            Ok(tape.mean(e))
        }),
    });

    checks
}

/// Central-difference reports for the whole battery at width `F`.
pub fn op_suite<F: Scalar>(seed: u64, eps: f64) -> Result<Vec<CheckReport>> {
    suite_checks::<F>(seed)
        .into_iter()
        .map(|c| gradcheck_multi(c.name, |tape, ts| (c.build)(tape, ts), &c.inputs, eps))
        .collect()
}

/// f32 analytic gradients compared against f64 analytic gradients of the
/// same graphs. The f64 side is the finite-difference-verified reference,
/// so this measures pure 32-bit arithmetic error.
pub fn cross_width_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let lo = suite_checks::<f32>(seed);
    let hi = suite_checks::<f64>(seed);
    lo.into_iter()
        .zip(hi)
        .map(|(c32, c64)| {
            let g32 = analytic_gradients(&c32.build, &c32.inputs)?;
            let g64 = analytic_gradients(&c64.build, &c64.inputs)?;
            let mut max_rel: f64 = 0.0;
            let mut sum_rel = 0.0;
            let mut checked = 0;
            for (a, b) in g32.iter().flatten().zip(g64.iter().flatten()) {
                let e = rel_err(*a, *b);
                max_rel = max_rel.max(e);
                sum_rel += e;
                checked += 1;
            }
            Ok(CheckReport {
                name: c32.name.to_string(),
                max_rel_err: max_rel,
                mean_rel_err: if checked > 0 {
                    sum_rel / checked as f64
                } else {
                    0.0
                },
                checked,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_in_f64() {
        let reports = op_suite::<f64>(7, 1e-6).unwrap();
        assert!(reports.len() >= 20);
        for r in &reports {
            assert!(
                r.passes(TOL_F64),
                "{}: max rel err {:.3e}",
                r.name,
                r.max_rel_err
            );
        }
    }

    #[test]
    fn f32_gradients_match_f64_reference() {
        for r in cross_width_suite(7).unwrap() {
            assert!(
                r.passes(TOL_F32),
                "{}: max rel err {:.3e}",
                r.name,
                r.max_rel_err
            );
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // straight_through claims gradient 1 while the numeric side sees
        // the squared values it was fed, so the check must flag it.
        let report = gradcheck::<f64>(
            "broken",
            |tape, t| {
                let doubled: Vec<f64> = tape.value(t).iter().map(|v| v * v).collect();
                let fake = tape.straight_through(t, doubled)?;
                Ok(tape.sum(fake))
            },
            vec![0.5, 1.5, -0.7],
            vec![3],
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_err > 0.1);
    }
}
