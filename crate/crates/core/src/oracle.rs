//! Reference computations that the optimized paths are checked against.
//!
//! Nothing here shares code with the routines under test: gradients come from
//! central differences, triangle counts from enumerating node triples, AUC
//! from comparing every positive/negative pair.

use crate::autodiff::Tensor;

/// Absolute error below which an element is treated as matching regardless of scale.
pub const ABS_FLOOR: f64 = 1e-7;

/// Central finite-difference gradient of `f` at `x`.
pub fn central_diff(x: &Tensor<f64>, h: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Largest elementwise relative error, ignoring elements within [`ABS_FLOOR`].
pub fn rel_err(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let diff = (a - n).abs();
            if diff <= ABS_FLOOR {
                0.0
            } else {
                diff / a.abs().max(n.abs())
            }
        })
        .fold(0.0, f64::max)
}

/// Triangle counts by checking every node triple: `(total, per_node)`.
pub fn triangles_by_triples(n: usize, edges: &[[usize; 2]]) -> (u64, Vec<u64>) {
    let mut adj = vec![false; n * n];
    for &[i, j] in edges {
        adj[i * n + j] = true;
        adj[j * n + i] = true;
    }
    let mut total = 0;
    let mut per = vec![0; n];
    for a in 0..n {
        for b in a + 1..n {
            if !adj[a * n + b] {
                continue;
            }
            for c in b + 1..n {
                if adj[a * n + c] && adj[b * n + c] {
                    total += 1;
                    per[a] += 1;
                    per[b] += 1;
                    per[c] += 1;
                }
            }
        }
    }
    (total, per)
}

/// AUC in percent by comparing every positive against every negative (ties count half).
pub fn pairwise_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    (pairs > 0.0).then(|| 100.0 * wins / pairs)
}

/// Indices of the `k` largest values (ties to the lower index), ascending.
pub fn topk_by_sort(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = idx.into_iter().take(k).collect();
    kept.sort_unstable();
    kept
}

/// Indices strictly above `threshold`, or the first argmax when none are.
pub fn threshold_by_filter(values: &[f64], threshold: f64) -> Vec<usize> {
    let kept: Vec<usize> = (0..values.len()).filter(|&i| values[i] > threshold).collect();
    if !kept.is_empty() {
        return kept;
    }
    let mut best = 0;
    for i in 1..values.len() {
        if values[i] > values[best] {
            best = i;
        }
    }
    vec![best]
}

/// Induced edge list for a kept node set, by filtering and relabeling.
pub fn induced_edges(edges: &[[usize; 2]], keep: &[usize]) -> Vec<[usize; 2]> {
    let pos = |v: usize| keep.iter().position(|&k| k == v);
    let mut out: Vec<[usize; 2]> = edges
        .iter()
        .filter_map(|&[i, j]| match (pos(i), pos(j)) {
            (Some(a), Some(b)) => Some([a.min(b), a.max(b)]),
            _ => None,
        })
        .collect();
    out.sort_unstable();
    out
}

/// Worst relative error between tape gradients and central differences for
/// every entry of every input of `f`.
///
/// `f` builds a scalar on a fresh tape from the given input handles. The
/// numeric side only reads forward values.
pub fn gradient_check(
    inputs: &[Tensor<f64>],
    h: f64,
    f: impl Fn(&mut crate::autodiff::Tape<f64>, &[crate::autodiff::Var]) -> crate::error::Result<crate::autodiff::Var>,
) -> crate::error::Result<f64> {
    use crate::autodiff::Tape;

    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut tp = Tape::new();
        let vs: Vec<_> = values.iter().map(|t| tp.constant(t.clone())).collect();
        let l = f(&mut tp, &vs).expect("forward succeeded on the unperturbed inputs");
        tp.value(l).item()
    };

    let mut worst = 0.0f64;
    for (k, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].rows(), inputs[k].cols());
        let analytic = tape.grad(*var).unwrap_or(&zeros);
        let mut probe = inputs.to_vec();
        let numeric = central_diff(&inputs[k], h, |x| {
            probe[k] = x.clone();
            eval(&probe)
        });
        worst = worst.max(rel_err(analytic, &numeric));
    }
    Ok(worst)
}
