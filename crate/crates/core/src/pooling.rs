//! Attention over nodes and the two node-dropping pooling rules.
//!
//! Coefficients come from a softmax over per-node pre-activations produced
//! either by a projection vector or by a small GNN. Pooling multiplies each
//! node's features by its coefficient and keeps a subset of nodes: the
//! `⌈rN⌉` largest (top-k) or those strictly above a fixed threshold.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{Bound, ConvLayer, GraphOperators, ParamId};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    None,
    Topk,
    Threshold,
}

/// Node selection rule applied after attention weighting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Selection {
    Topk { ratio: f64 },
    Threshold { alpha_tilde: f64 },
}

/// Result of one attention + pooling stage.
///
/// `alpha_pre` and `alpha` cover the node set entering the stage, so they
/// can be compared with ground truth; `z` holds only the kept rows.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub alpha_pre: Var,
    pub alpha: Var,
    pub kept: Vec<usize>,
    pub z: Var,
}

impl AttentionOutput {
    pub fn alpha_values<T: Scalar>(&self, tape: &Tape<T>) -> Vec<f64> {
        tape.value(self.alpha).to_f64_vec()
    }

    pub fn alpha_pre_values<T: Scalar>(&self, tape: &Tape<T>) -> Vec<f64> {
        tape.value(self.alpha_pre).to_f64_vec()
    }
}

/// `alpha_pre = X p` for a `C x 1` projection without bias.
pub fn linear_attention<T: Scalar>(tape: &mut Tape<T>, x: Var, p: Var) -> Result<Var> {
    let (xs, ps) = (tape.shape(x), tape.shape(p));
    if ps.1 != 1 || xs.1 != ps.0 {
        return Err(Error::shape("linear_attention", xs, ps));
    }
    tape.matmul(x, p)
}

/// Pre-activations from a stack of graph convolutions ending in width 1.
pub fn gnn_attention<T: Scalar>(
    tape: &mut Tape<T>,
    ops: &mut GraphOperators,
    x: Var,
    layers: &[ConvLayer],
    params: &Bound,
) -> Result<Var> {
    let mut h = x;
    for layer in layers {
        h = layer.forward(tape, ops, params, h)?;
    }
    let s = tape.shape(h);
    if s.1 != 1 {
        return Err(Error::shape("gnn_attention", s, (s.0, 1)));
    }
    Ok(h)
}

/// Row `i` of the result is `alpha_i * X_i`.
pub fn attend<T: Scalar>(tape: &mut Tape<T>, x: Var, alpha: Var) -> Result<Var> {
    let (xs, a) = (tape.shape(x), tape.shape(alpha));
    if a != (xs.0, 1) {
        return Err(Error::shape("attend", xs, a));
    }
    tape.mul(x, alpha)
}

/// Number of nodes top-k keeps: `⌈rN⌉`, at least one.
pub fn topk_count(n: usize, ratio: f64) -> usize {
    // The epsilon absorbs representation error in products such as 0.97 * 100.
    let k = (ratio * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n.max(1))
}

/// The `⌈rN⌉` largest coefficients, lower index first on ties; ascending.
pub fn select_topk<T: Scalar>(alpha: &[T], ratio: f64) -> Vec<usize> {
    let k = topk_count(alpha.len(), ratio);
    let mut order: Vec<usize> = (0..alpha.len()).collect();
    order.sort_by(|&a, &b| alpha[b].partial_cmp(&alpha[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Nodes with `alpha_i > alpha_tilde`; if none qualify, the first argmax alone.
pub fn select_threshold<T: Scalar>(alpha: &[T], alpha_tilde: T) -> Vec<usize> {
    let kept: Vec<usize> = (0..alpha.len()).filter(|&i| alpha[i] > alpha_tilde).collect();
    if !kept.is_empty() || alpha.is_empty() {
        return kept;
    }
    let mut best = 0;
    for (i, &a) in alpha.iter().enumerate().skip(1) {
        if a > alpha[best] {
            best = i;
        }
    }
    vec![best]
}

/// Softmax, selection, weighting and node removal for one stage.
///
/// Returns the stage record and the operators of the reduced graph.
pub fn pool_stage<T: Scalar>(
    tape: &mut Tape<T>,
    ops: &GraphOperators,
    x: Var,
    alpha_pre: Var,
    selection: Selection,
) -> Result<(AttentionOutput, GraphOperators)> {
    let alpha = tape.softmax(alpha_pre)?;
    let kept = {
        let values = tape.value(alpha).data();
        match selection {
            Selection::Topk { ratio } => select_topk(values, ratio),
            Selection::Threshold { alpha_tilde } => select_threshold(values, T::from_f64_lossy(alpha_tilde)),
        }
    };
    let weighted = attend(tape, x, alpha)?;
    let z = if kept.len() == ops.n() { weighted } else { tape.select_rows(weighted, &kept)? };
    let reduced = if kept.len() == ops.n() {
        GraphOperators::new(ops.topology().clone())
    } else {
        GraphOperators::new(ops.topology().induced(&kept)?)
    };
    Ok((AttentionOutput { alpha_pre, alpha, kept, z }, reduced))
}

pub fn topk_pool<T: Scalar>(
    tape: &mut Tape<T>,
    ops: &GraphOperators,
    x: Var,
    alpha_pre: Var,
    ratio: f64,
) -> Result<(AttentionOutput, GraphOperators)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("top-k ratio {ratio} outside (0, 1]")));
    }
    pool_stage(tape, ops, x, alpha_pre, Selection::Topk { ratio })
}

pub fn threshold_pool<T: Scalar>(
    tape: &mut Tape<T>,
    ops: &GraphOperators,
    x: Var,
    alpha_pre: Var,
    alpha_tilde: f64,
) -> Result<(AttentionOutput, GraphOperators)> {
    if !(0.0..1.0).contains(&alpha_tilde) {
        return Err(Error::Config(format!("threshold {alpha_tilde} outside [0, 1)")));
    }
    pool_stage(tape, ops, x, alpha_pre, Selection::Threshold { alpha_tilde })
}

/// Parameters of one attention subnetwork.
#[derive(Clone, Debug)]
pub enum AttentionModule {
    Projection { p: ParamId },
    Gnn { layers: Vec<ConvLayer> },
}

impl AttentionModule {
    pub fn pre_activations<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ops: &mut GraphOperators,
        x: Var,
        params: &Bound,
    ) -> Result<Var> {
        match self {
            AttentionModule::Projection { p } => linear_attention(tape, x, params.var(*p)),
            AttentionModule::Gnn { layers } => gnn_attention(tape, ops, x, layers, params),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::graph::Topology;
    use crate::oracle::{gradient_check, threshold_by_filter, topk_by_sort};
    use crate::testutil::rand_tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn optimal_projection_marks_green_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(4, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1., 0., 1., 0.]).unwrap());
        let p = tape.constant(Tensor::column(vec![0., 1., 0.]));
        let pre = linear_attention(&mut tape, x, p).unwrap();
        assert_eq!(tape.value(pre).data(), &[0., 1., 0., 1.]);

        let zero = tape.constant(Tensor::zeros(3, 1));
        let pre0 = linear_attention(&mut tape, x, zero).unwrap();
        let a = tape.softmax(pre0).unwrap();
        assert!(tape.value(a).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let wrong = tape.constant(Tensor::zeros(2, 1));
        assert!(linear_attention(&mut tape, x, wrong).is_err());
    }

    #[test]
    fn projection_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, 6, 3);
        let p = rand_tensor(&mut rng, 3, 1);
        let err = gradient_check(&[p], 1e-5, |tape, v| {
            let xv = tape.constant(x.clone());
            let pre = linear_attention(tape, xv, v[0])?;
            let a = tape.softmax(pre)?;
            let z = attend(tape, xv, a)?;
            let sq = tape.mul(z, z)?;
            tape.sum(sq)
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn attend_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = rand_tensor(&mut rng, 4, 3);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let onehot = tape.constant(Tensor::column(vec![0., 0., 1., 0.]));
        let z = attend(&mut tape, x, onehot).unwrap();
        for r in 0..4 {
            let expect: Vec<f64> = if r == 2 { x0.row(2).to_vec() } else { vec![0.0; 3] };
            assert_eq!(tape.value(z).row(r), expect.as_slice());
        }
        let uni = tape.constant(Tensor::full(4, 1, 0.25));
        let z = attend(&mut tape, x, uni).unwrap();
        assert!(tape.value(z).max_abs_diff(&x0.map(|v| v * 0.25)) < 1e-15);

        let alpha: Vec<f64> = vec![0.1, 0.2, 0.3, 0.4];
        let av = tape.constant(Tensor::column(alpha.clone()));
        let z = attend(&mut tape, x, av).unwrap();
        let s = tape.sum_over_rows(z).unwrap();
        for c in 0..3 {
            let brute: f64 = (0..4).map(|i| alpha[i] * x0.get(i, c)).sum();
            assert!((tape.value(s).data()[c] - brute).abs() < 1e-12);
        }
        let short = tape.constant(Tensor::column(vec![1.0; 3]));
        assert!(attend(&mut tape, x, short).is_err());
    }

    #[test]
    fn topk_examples() {
        assert_eq!(select_topk(&[0.1, 0.2, 0.3, 0.4f64], 1.0), vec![0, 1, 2, 3]);
        assert_eq!(select_topk(&[0.4, 0.3, 0.2, 0.1f64], 0.5), vec![0, 1]);
        assert_eq!(select_topk(&[0.25, 0.25, 0.25, 0.25f64], 0.5), vec![0, 1]);
        assert_eq!(topk_count(100, 0.97), 97);
        assert_eq!(topk_count(3, 0.01), 1);
    }

    #[test]
    fn threshold_examples() {
        let softmaxed = crate::autodiff::softmax_values(&[0.3, -2.0, 1.0f64]);
        assert_eq!(select_threshold(&softmaxed, 0.0), vec![0, 1, 2]);
        assert_eq!(select_threshold(&[0.7, 0.1, 0.1, 0.1f64], 0.5), vec![0]);
        assert_eq!(select_threshold(&[0.25, 0.25, 0.25, 0.25f64], 0.25), vec![0]);
        assert_eq!(select_threshold(&[0.2, 0.4, 0.4f64], 0.5), vec![1]);
    }

    #[test]
    fn selections_match_sort_and_filter_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let n = rng.random_range(1..40);
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let alpha = crate::autodiff::softmax_values(&raw);
            let r: f64 = rng.random_range(0.01..=1.0);
            assert_eq!(select_topk(&alpha, r), topk_by_sort(&alpha, topk_count(n, r)));
            let t: f64 = rng.random_range(0.0..0.3);
            assert_eq!(select_threshold(&alpha, t), threshold_by_filter(&alpha, t));
        }
    }

    #[test]
    fn pool_stage_reduces_graph() {
        let topo = Topology::new(4, vec![[0, 1], [1, 2], [2, 3]]).unwrap();
        let ops = GraphOperators::new(topo);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(4, 2));
        let pre = tape.constant(Tensor::column(vec![3.0, 0.0, 3.0, 0.0]));
        let (out, reduced) = threshold_pool(&mut tape, &ops, x, pre, 0.3).unwrap();
        assert_eq!(out.kept, vec![0, 2]);
        assert_eq!(reduced.n(), 2);
        assert!(reduced.topology().edges().is_empty());
        assert_eq!(tape.shape(out.z), (2, 2));
        assert_eq!(out.alpha_values(&tape).len(), 4);

        let (full, same) = topk_pool(&mut tape, &ops, x, pre, 1.0).unwrap();
        assert_eq!(full.kept, vec![0, 1, 2, 3]);
        assert_eq!(same.topology(), ops.topology());
        assert!(topk_pool(&mut tape, &ops, x, pre, 0.0).is_err());
        assert!(threshold_pool(&mut tape, &ops, x, pre, 1.0).is_err());
    }
}
