//! Finite-difference verification of tape gradients.
//!
//! The graph is re-evaluated in 64-bit by an interpreter that shares no
//! arithmetic with the backward pass, then each watched parameter element is
//! perturbed by ±h and the central difference compared against the analytic
//! gradient.

use crate::error::{PulseError, Result};

use super::tape::{Op, Tape, Var, LAYER_NORM_EPS};

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOLERANCE: f64 = 1e-3;
/// Floor for the relative-error denominator so near-zero gradients compare
/// absolutely.
const DENOM_FLOOR: f64 = 1e-3;
/// Elements checked per tensor; large tensors are strided.
const MAX_ELEMS_PER_TENSOR: usize = 32;

#[derive(Debug)]
pub struct CheckResult {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= REL_TOLERANCE
    }
}

/// Compare analytic gradients of `loss` against central differences for each
/// watched var. Errors if any element exceeds the tolerance.
pub fn check_gradients(tape: &Tape, loss: Var, watched: &[(&str, Var)]) -> Result<CheckResult> {
    let grads = tape.backward(loss)?;
    let mut result = CheckResult {
        max_rel_err: 0.0,
        checked: 0,
        worst: String::new(),
    };

    for &(name, var) in watched {
        let n = tape.value(var).len();
        let stride = n.div_ceil(MAX_ELEMS_PER_TENSOR).max(1);
        let analytic = grads.get(var);
        for i in (0..n).step_by(stride) {
            let plus = eval_f64(tape, loss, Some((var, i, FD_STEP)))?;
            let minus = eval_f64(tape, loss, Some((var, i, -FD_STEP)))?;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.map(|t| t.data()[i] as f64).unwrap_or(0.0);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(DENOM_FLOOR);
            result.checked += 1;
            if rel > result.max_rel_err {
                result.max_rel_err = rel;
                result.worst = format!("{name}[{i}]: analytic {a:.6e} vs fd {fd:.6e}");
            }
        }
    }

    if !result.passed() {
        return Err(PulseError::NumericError(format!(
            "gradient check failed: rel err {:.3e} at {}",
            result.max_rel_err, result.worst
        )));
    }
    Ok(result)
}

/// Evaluate the scalar at `target` in 64-bit, optionally perturbing one
/// element of one leaf.
pub(crate) fn eval_f64(tape: &Tape, target: Var, perturb: Option<(Var, usize, f64)>) -> Result<f64> {
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(target.0 + 1);
    for idx in 0..=target.0 {
        let node = &tape.nodes[idx];
        let cols = |v: Var| tape.value(v).cols();
        let rows = |v: Var| tape.value(v).rows();
        let out = match &node.op {
            Op::Leaf => {
                let mut data: Vec<f64> = node.value.data().iter().map(|&v| v as f64).collect();
                if let Some((pv, pi, delta)) = perturb {
                    if pv.0 == idx {
                        data[pi] += delta;
                    }
                }
                data
            }
            Op::Matmul(a, b) => {
                let (m, k, n) = (rows(*a), cols(*a), cols(*b));
                let (av, bv) = (&values[a.0], &values[b.0]);
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for p in 0..k {
                        let x = av[i * k + p];
                        for j in 0..n {
                            out[i * n + j] += x * bv[p * n + j];
                        }
                    }
                }
                out
            }
            Op::MatmulNt(a, b) => {
                let (m, k, n) = (rows(*a), cols(*a), rows(*b));
                let (av, bv) = (&values[a.0], &values[b.0]);
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for p in 0..k {
                            acc += av[i * k + p] * bv[j * k + p];
                        }
                        out[i * n + j] = acc;
                    }
                }
                out
            }
            Op::Add(a, b) => {
                let bc = cols(*b) * rows(*b);
                let av = &values[a.0];
                let bv = &values[b.0];
                if av.len() == bc {
                    av.iter().zip(bv).map(|(x, y)| x + y).collect()
                } else {
                    av.chunks(bv.len())
                        .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
                        .collect()
                }
            }
            Op::Mul(a, b) => values[a.0]
                .iter()
                .zip(&values[b.0])
                .map(|(x, y)| x * y)
                .collect(),
            Op::Scale(a, c) => values[a.0].iter().map(|x| x * *c as f64).collect(),
            Op::Relu(a) => values[a.0].iter().map(|x| x.max(0.0)).collect(),
            Op::SoftmaxRows(a) => {
                let c = cols(*a);
                let mut out = Vec::with_capacity(values[a.0].len());
                for row in values[a.0].chunks(c) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    out.extend(exps.into_iter().map(|e| e / sum));
                }
                out
            }
            Op::LayerNorm { x, gamma, beta } => {
                let c = cols(*x);
                let (gv, bv) = (&values[gamma.0], &values[beta.0]);
                let mut out = Vec::with_capacity(values[x.0].len());
                for row in values[x.0].chunks(c) {
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var =
                        row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS as f64).sqrt();
                    for j in 0..c {
                        out.push((row[j] - mean) * inv * gv[j] + bv[j]);
                    }
                }
                out
            }
            Op::Embedding { table, ids } => {
                let d = cols(*table);
                let tv = &values[table.0];
                let mut out = Vec::with_capacity(ids.len() * d);
                for &i in ids {
                    out.extend_from_slice(&tv[i * d..(i + 1) * d]);
                }
                out
            }
            Op::MeanRows(a) => {
                let (r, c) = (rows(*a), cols(*a));
                let mut out = vec![0.0; c];
                for row in values[a.0].chunks(c) {
                    for (acc, v) in out.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                out.iter_mut().for_each(|v| *v /= r as f64);
                out
            }
            Op::L2NormalizeRows(a) => {
                let c = cols(*a);
                let mut out = Vec::with_capacity(values[a.0].len());
                for row in values[a.0].chunks(c) {
                    let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
                    out.extend(row.iter().map(|&v| v / norm));
                }
                out
            }
            Op::ConcatCols(parts) => {
                let r = rows(parts[0]);
                let mut out = Vec::new();
                for i in 0..r {
                    for &p in parts {
                        let w = cols(p);
                        out.extend_from_slice(&values[p.0][i * w..(i + 1) * w]);
                    }
                }
                out
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (&values[a.0], &values[b.0]);
                let dot: f64 = av.iter().zip(bv).map(|(x, y)| x * y).sum();
                let na: f64 = av.iter().map(|&v| v * v).sum::<f64>().sqrt();
                let nb: f64 = bv.iter().map(|&v| v * v).sum::<f64>().sqrt();
                // Unclamped on purpose: the checker needs smoothness.
                vec![dot / (na * nb)]
            }
            Op::CrossEntropy { logits, label } => {
                vec![ce_f64(&values[logits.0], *label)]
            }
            Op::CrossEntropyRows { logits, labels } => {
                let c = cols(*logits);
                let total: f64 = values[logits.0]
                    .chunks(c)
                    .zip(labels)
                    .map(|(row, &l)| ce_f64(row, l))
                    .sum();
                vec![total / labels.len() as f64]
            }
            Op::StackScalars(parts) => parts.iter().map(|p| values[p.0][0]).collect(),
            Op::MeanScalars(parts) => {
                vec![parts.iter().map(|p| values[p.0][0]).sum::<f64>() / parts.len() as f64]
            }
        };
        values.push(out);
    }
    let out = &values[target.0];
    if out.len() != 1 {
        return Err(PulseError::InvalidArgument(
            "f64 evaluation target is not a scalar".into(),
        ));
    }
    Ok(out[0])
}

fn ce_f64(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    lse - logits[label]
}
