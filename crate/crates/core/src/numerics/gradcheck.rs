//! Central finite-difference checks for tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Result, SetnError};

/// Worst disagreement found by [`grad_check_params`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat entry index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
}

/// `|a - b| / max(|a|, |b|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-12);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(f: &mut F, params: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(SetnError::Contract("grad_check needs a scalar function".into()));
    }
    Ok(tape.item(out))
}

/// Compares tape gradients of a scalar `f` against central differences with
/// step `h`, over every entry of every tensor in `params` that requires grad.
pub fn grad_check_params<F>(mut f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(SetnError::Contract("grad_check needs a scalar function".into()));
    }
    let base = tape.item(out);
    tape.backward(out)?;
    let analytic: Vec<Option<Vec<f64>>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec))
        .collect();

    let again = evaluate(&mut f, params)?;
    if again.to_bits() != base.to_bits() {
        return Err(SetnError::Contract(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for (pi, param) in params.iter().enumerate() {
        if !param.requires_grad() {
            continue;
        }
        for ei in 0..param.numel() {
            let orig = param.data()[ei];
            work[pi].set(ei, orig + h)?;
            let plus = evaluate(&mut f, &work)?;
            work[pi].set(ei, orig - h)?;
            let minus = evaluate(&mut f, &work)?;
            work[pi].set(ei, orig)?;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].as_ref().map_or(0.0, |g| g[ei]);
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, ei));
            }
        }
    }
    Ok(report)
}

/// Single-tensor form: max relative error between the analytic gradient of
/// `f` at `x` and central differences with step `h`.
pub fn grad_check<F>(mut f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tracked = x.clone();
    tracked.set_requires_grad(true);
    let report = grad_check_params(|tape, vars| f(tape, vars[0]), &[tracked], h)?;
    Ok(report.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn relu_sum_matches_fd() {
        let x = random(vec![3, 4], 1);
        let err = grad_check(|t, v| Ok({ let r = t.relu(v); t.sum(r) }), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = random(vec![2, 2], 2);
        let err = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(4.0).unwrap())),
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn matmul_sum_matches_fd() {
        let x = random(vec![3, 4], 3).tracked();
        let w = random(vec![4, 2], 4).tracked();
        let report = grad_check_params(
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                Ok(t.sum(y))
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.entries_checked, 20);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn nondeterministic_function_rejected() {
        let x = random(vec![2], 5);
        let mut calls = 0.0;
        let res = grad_check(
            |t, v| {
                calls += 1.0;
                let s = t.scale(v, calls);
                Ok(t.sum(s))
            },
            &x,
            1e-5,
        );
        assert!(matches!(res, Err(SetnError::Contract(_))));
    }

    #[test]
    fn composite_primitives_match_fd() {
        // linear -> leaky relu -> softmax -> layer norm -> cross entropy
        let x = random(vec![3, 4], 6).tracked();
        let w = random(vec![4, 5], 7).tracked();
        let b = random(vec![5], 8).tracked();
        let g = random(vec![5], 9).tracked();
        let report = grad_check_params(
            |t, v| {
                let h = t.linear(v[0], v[1], v[2])?;
                let h = t.leaky_relu(h, 0.2);
                let n = t.layer_norm_rows(h, 1e-5)?;
                let n = t.mul_row(n, v[3])?;
                let s = t.softmax_rows(n)?;
                let s = t.add(s, n)?;
                t.cross_entropy(s, &[0, 2, 4])
            },
            &[x, w, b, g],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn pooling_and_gather_match_fd() {
        let table = random(vec![6, 3], 10).tracked();
        let report = grad_check_params(
            |t, v| {
                let rows = t.gather_rows(v[0], &[1, 4, 1, 5])?;
                let mean = t.mean_rows(rows)?;
                let max = t.max_rows(rows)?;
                let first = t.select_row(rows, 0)?;
                let stacked = t.stack_rows(&[mean, max, first])?;
                let tr = t.transpose(stacked)?;
                let sq = t.matmul(stacked, tr)?;
                Ok(t.sum(sq))
            },
            &[table],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn masked_attention_matches_fd() {
        let col = random(vec![3], 11).tracked();
        let row = random(vec![3], 12).tracked();
        let z = random(vec![3, 2], 13).tracked();
        let mask = [true, false, true, true, true, false, false, false, true];
        let report = grad_check_params(
            |t, v| {
                let e = t.add_outer(v[0], v[1])?;
                let e = t.leaky_relu(e, 0.2);
                let a = t.masked_softmax_rows(e, Some(&mask))?;
                let o = t.matmul(a, v[2])?;
                let o = t.mul(o, o)?;
                Ok(t.sum(o))
            },
            &[col, row, z],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
