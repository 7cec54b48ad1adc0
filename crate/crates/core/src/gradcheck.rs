//! Central finite-difference oracle for every autodiff primitive.
//!
//! The oracle never touches the backward pass: it reruns the forward
//! computation with single coordinates perturbed by +-h and differences the
//! scalar probe loss. Non-scalar primitive outputs are reduced through a
//! fixed random linear functional (flatten, then matmul against a frozen
//! probe vector), so the chain through reshape/matmul is exercised on every
//! case as well.
//!
//! Available to downstream suites via the `gradcheck` feature.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::prng::Prng;
use crate::tape::{Reduction, Tape, Var};
use crate::tensor::Tensor;
use crate::Real;

/// `d loss / d x` by central differences with step `h`.
pub fn finite_difference_grad(
    mut eval: impl FnMut(&[Real]) -> Real,
    x: &[Real],
    h: Real,
) -> Vec<Real> {
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = eval(&xp);
        xp[i] = orig - h;
        let fm = eval(&xp);
        xp[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst relative discrepancy between analytic and numeric gradients.
/// Coordinates where both magnitudes sit below 1e-7 count as exact; an
/// absolute gap below 1e-7 also passes regardless of scale (pure relative
/// error is undefined around zero).
pub fn max_relative_error(analytic: &[Real], numeric: &[Real]) -> f64 {
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let (a, n) = (a as f64, n as f64);
        let gap = (a - n).abs();
        if gap <= 1e-7 {
            continue;
        }
        let rel = gap / a.abs().max(n.abs());
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// One primitive's aggregated check result.
#[derive(Debug, Clone)]
pub struct OpReport {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
}

const H: Real = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

struct Case {
    /// Input tensors in leaf order.
    inputs: Vec<Tensor>,
    /// Which input's gradient is checked.
    check: usize,
}

type Builder = fn(&mut Tape, &[Var], &CaseAux) -> Var;

/// Extra per-case data (labels, constants) captured outside the tensors.
#[derive(Default, Clone)]
struct CaseAux {
    labels: Vec<usize>,
    scalar: Real,
    k: usize,
    stride: usize,
    pad: usize,
    stats: (Vec<Real>, Vec<Real>),
}

fn run_case(build: Builder, case: &Case, aux: &CaseAux, probe_seed: u64) -> (Vec<Real>, Vec<Real>) {
    // Forward + backward for the analytic gradient.
    let run = |replace: Option<&[Real]>| -> (Real, Option<Vec<Real>>) {
        let mut tape = Tape::new();
        let mut vars = Vec::with_capacity(case.inputs.len());
        for (i, t) in case.inputs.iter().enumerate() {
            let mut t = if let (Some(data), true) = (replace, i == case.check) {
                Tensor::new(t.shape(), data.to_vec()).expect("same shape")
            } else {
                t.clone()
            };
            if replace.is_none() && i == case.check {
                t = t.with_grad();
            }
            vars.push(tape.leaf(t));
        }
        let out = build(&mut tape, &vars, aux);
        let numel = tape.value(out).numel();
        let loss = if numel == 1 {
            out
        } else {
            // Fixed random linear probe.
            let mut prng = Prng::new(probe_seed);
            let w = Tensor::new(&[numel, 1], prng.vec_uniform(numel, -1.0, 1.0)).expect("probe");
            let flat = tape.reshape(out, &[1, numel]).expect("flatten");
            let wv = tape.leaf(w);
            tape.matmul(flat, wv).expect("probe matmul")
        };
        let value = tape.value(loss).item().expect("scalar probe");
        let grad = if replace.is_none() {
            tape.backward(loss).expect("backward");
            Some(
                tape.grad(vars[case.check])
                    .expect("checked input requires grad")
                    .to_vec(),
            )
        } else {
            None
        };
        (value, grad)
    };

    let (_, analytic) = run(None);
    let x0 = case.inputs[case.check].data().to_vec();
    let numeric = finite_difference_grad(|x| run(Some(x)).0, &x0, H);
    (analytic.expect("analytic grad"), numeric)
}

fn rand_tensor(prng: &mut Prng, shape: &[usize]) -> Tensor {
    let numel = shape.iter().product();
    Tensor::new(shape, prng.vec_uniform(numel, -1.5, 1.5)).expect("shape")
}

/// Values kept away from the ReLU kink so finite differences stay valid.
fn rand_tensor_off_kink(prng: &mut Prng, shape: &[usize]) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<Real> = (0..numel)
        .map(|_| {
            let v = prng.uniform(-1.5, 1.5);
            if v.abs() < 0.05 {
                if v >= 0.0 {
                    v + 0.1
                } else {
                    v - 0.1
                }
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// Distinct well-separated values (multiples of 0.1) so pooling argmaxes
/// cannot flip under the finite-difference step.
fn rand_tensor_distinct(prng: &mut Prng, shape: &[usize]) -> Tensor {
    let numel: usize = shape.iter().product();
    let mut levels: Vec<usize> = (0..numel).collect();
    prng.shuffle(&mut levels);
    let data: Vec<Real> = levels
        .iter()
        .map(|&l| (l as Real - numel as Real / 2.0) * 0.1)
        .collect();
    Tensor::new(shape, data).expect("shape")
}

fn check_primitive(
    op: &'static str,
    cases: usize,
    seed: u64,
    make_case: impl Fn(&mut Prng, usize) -> (Case, CaseAux, Builder),
) -> Result<OpReport, String> {
    let mut worst = 0.0f64;
    for c in 0..cases {
        let mut prng = Prng::new(seed).split2(0xB0B, c as u64);
        let (case, aux, build) = make_case(&mut prng, c);
        let probe_seed = prng.next_u64();
        let (analytic, numeric) = run_case(build, &case, &aux, probe_seed);
        let rel = max_relative_error(&analytic, &numeric);
        if rel > worst {
            worst = rel;
        }
        if rel >= TOLERANCE {
            return Err(format!(
                "{op}: case {c} relative error {rel:.3e} exceeds {TOLERANCE:.0e}"
            ));
        }
    }
    Ok(OpReport {
        op,
        cases,
        max_rel_err: worst,
    })
}

/// Runs the finite-difference suite over every primitive; `cases` randomized
/// shapes/values per primitive.
pub fn run_primitive_suite(cases: usize, seed: u64) -> Result<Vec<OpReport>, String> {
    let mut reports = Vec::new();

    reports.push(check_primitive("matmul", cases, seed, |prng, _| {
        let (m, k, n) = (1 + prng.below(4), 1 + prng.below(4), 1 + prng.below(4));
        let case = Case {
            inputs: vec![rand_tensor(prng, &[m, k]), rand_tensor(prng, &[k, n])],
            check: prng.below(2),
        };
        (case, CaseAux::default(), |t, v, _| {
            t.matmul(v[0], v[1]).expect("matmul")
        })
    })?);

    reports.push(check_primitive("matmul_nt", cases, seed ^ 1, |prng, _| {
        let (m, k, n) = (1 + prng.below(4), 1 + prng.below(4), 1 + prng.below(4));
        let case = Case {
            inputs: vec![rand_tensor(prng, &[m, k]), rand_tensor(prng, &[n, k])],
            check: prng.below(2),
        };
        (case, CaseAux::default(), |t, v, _| {
            t.matmul_nt_weights(v[0], v[1]).expect("matmul_nt")
        })
    })?);

    reports.push(check_primitive("conv2d", cases, seed ^ 2, |prng, _| {
        let b = 1 + prng.below(2);
        let ci = 1 + prng.below(3);
        let co = 1 + prng.below(3);
        let k = 1 + prng.below(3);
        let h = k + prng.below(4);
        let w = k + prng.below(4);
        let stride = 1 + prng.below(2);
        let pad = prng.below(2);
        let aux = CaseAux {
            stride,
            pad,
            ..CaseAux::default()
        };
        let case = Case {
            inputs: vec![
                rand_tensor(prng, &[b, ci, h, w]),
                rand_tensor(prng, &[co, ci, k, k]),
            ],
            check: prng.below(2),
        };
        (case, aux, |t, v, aux| {
            t.conv2d(v[0], v[1], aux.stride, aux.pad).expect("conv2d")
        })
    })?);

    reports.push(check_primitive("add", cases, seed ^ 3, |prng, _| {
        let n = 1 + prng.below(12);
        let case = Case {
            inputs: vec![rand_tensor(prng, &[n]), rand_tensor(prng, &[n])],
            check: prng.below(2),
        };
        (case, CaseAux::default(), |t, v, _| {
            t.add(v[0], v[1]).expect("add")
        })
    })?);

    reports.push(check_primitive("mul", cases, seed ^ 4, |prng, _| {
        let n = 1 + prng.below(12);
        let case = Case {
            inputs: vec![rand_tensor(prng, &[n]), rand_tensor(prng, &[n])],
            check: prng.below(2),
        };
        (case, CaseAux::default(), |t, v, _| {
            t.mul(v[0], v[1]).expect("mul")
        })
    })?);

    reports.push(check_primitive("scale", cases, seed ^ 5, |prng, _| {
        let n = 1 + prng.below(12);
        let aux = CaseAux {
            scalar: prng.uniform(-2.0, 2.0),
            ..CaseAux::default()
        };
        let case = Case {
            inputs: vec![rand_tensor(prng, &[n])],
            check: 0,
        };
        (case, aux, |t, v, aux| {
            t.scale(v[0], aux.scalar).expect("scale")
        })
    })?);

    reports.push(check_primitive("relu", cases, seed ^ 6, |prng, _| {
        let n = 1 + prng.below(16);
        let case = Case {
            inputs: vec![rand_tensor_off_kink(prng, &[n])],
            check: 0,
        };
        (case, CaseAux::default(), |t, v, _| {
            t.relu(v[0]).expect("relu")
        })
    })?);

    reports.push(check_primitive("max_pool2d", cases, seed ^ 7, |prng, _| {
        let b = 1 + prng.below(2);
        let c = 1 + prng.below(2);
        let k = 1 + prng.below(3);
        let h = k + prng.below(4);
        let w = k + prng.below(4);
        let stride = 1 + prng.below(2);
        let pad = prng.below(k);
        let aux = CaseAux {
            k,
            stride,
            pad,
            ..CaseAux::default()
        };
        let case = Case {
            inputs: vec![rand_tensor_distinct(prng, &[b, c, h, w])],
            check: 0,
        };
        (case, aux, |t, v, aux| {
            t.max_pool2d(v[0], aux.k, aux.stride, aux.pad).expect("max_pool2d")
        })
    })?);

    reports.push(check_primitive("avg_pool2d", cases, seed ^ 8, |prng, _| {
        let b = 1 + prng.below(2);
        let c = 1 + prng.below(2);
        let k = 1 + prng.below(3);
        let h = k + prng.below(4);
        let w = k + prng.below(4);
        let stride = 1 + prng.below(2);
        let pad = prng.below(k);
        let aux = CaseAux {
            k,
            stride,
            pad,
            ..CaseAux::default()
        };
        let case = Case {
            inputs: vec![rand_tensor(prng, &[b, c, h, w])],
            check: 0,
        };
        (case, aux, |t, v, aux| {
            t.avg_pool2d(v[0], aux.k, aux.stride, aux.pad).expect("avg_pool2d")
        })
    })?);

    reports.push(check_primitive("batch_norm_train", cases, seed ^ 9, |prng, _| {
        let b = 2 + prng.below(2);
        let c = 1 + prng.below(3);
        let h = 1 + prng.below(3);
        let w = 1 + prng.below(3);
        let case = Case {
            inputs: vec![rand_tensor(prng, &[b, c, h, w])],
            check: 0,
        };
        (case, CaseAux::default(), |t, v, _| {
            t.batch_norm_train(v[0], 1e-5).expect("batch_norm").0
        })
    })?);

    reports.push(check_primitive("batch_norm_eval", cases, seed ^ 10, |prng, _| {
        let b = 1 + prng.below(3);
        let c = 1 + prng.below(3);
        let h = 1 + prng.below(3);
        let w = 1 + prng.below(3);
        let mean = prng.vec_uniform(c, -0.5, 0.5);
        let var = (0..c).map(|_| prng.uniform(0.2, 1.5)).collect();
        let aux = CaseAux {
            stats: (mean, var),
            ..CaseAux::default()
        };
        let case = Case {
            inputs: vec![rand_tensor(prng, &[b, c, h, w])],
            check: 0,
        };
        (case, aux, |t, v, aux| {
            t.batch_norm_eval(v[0], &aux.stats.0, &aux.stats.1, 1e-5)
                .expect("batch_norm_eval")
        })
    })?);

    reports.push(check_primitive("reshape", cases, seed ^ 11, |prng, _| {
        let a = 1 + prng.below(4);
        let b = 1 + prng.below(4);
        let case = Case {
            inputs: vec![rand_tensor(prng, &[a, b])],
            check: 0,
        };
        (case, CaseAux::default(), |t, v, _| {
            let numel = t.value(v[0]).numel();
            t.reshape(v[0], &[numel]).expect("reshape")
        })
    })?);

    reports.push(check_primitive("softmax", cases, seed ^ 12, |prng, _| {
        let b = 1 + prng.below(3);
        let c = 2 + prng.below(4);
        let case = Case {
            inputs: vec![rand_tensor(prng, &[b, c])],
            check: 0,
        };
        (case, CaseAux::default(), |t, v, _| {
            t.softmax(v[0]).expect("softmax")
        })
    })?);

    reports.push(check_primitive("cross_entropy", cases, seed ^ 13, |prng, _| {
        let b = 1 + prng.below(4);
        let c = 2 + prng.below(5);
        let labels = (0..b).map(|_| prng.below(c)).collect();
        let aux = CaseAux {
            labels,
            ..CaseAux::default()
        };
        let case = Case {
            inputs: vec![rand_tensor(prng, &[b, c])],
            check: 0,
        };
        (case, aux, |t, v, aux| {
            t.cross_entropy_logits(v[0], &aux.labels, Reduction::Mean)
                .expect("cross_entropy")
        })
    })?);

    reports.push(check_primitive("nll_from_probs", cases, seed ^ 14, |prng, _| {
        let b = 1 + prng.below(4);
        let c = 2 + prng.below(4);
        // Valid rows of probabilities, bounded away from zero.
        let mut data = vec![0.0; b * c];
        for i in 0..b {
            let row = &mut data[i * c..(i + 1) * c];
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = prng.uniform(0.1, 1.0);
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let labels = (0..b).map(|_| prng.below(c)).collect();
        let aux = CaseAux {
            labels,
            ..CaseAux::default()
        };
        let case = Case {
            inputs: vec![Tensor::new(&[b, c], data).expect("probs")],
            check: 0,
        };
        (case, aux, |t, v, aux| {
            t.nll_from_probs(v[0], &aux.labels, Reduction::Mean)
                .expect("nll_from_probs")
        })
    })?);

    Ok(reports)
}
