//! Self-check suites: gradients against central differences, fast paths
//! against brute-force oracles, and structural invariants.
//!
//! Every case draws its instances from a named substream of the suite seed,
//! so a failure is reproducible from `(seed, case name)` alone.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_values, Tape, Tensor, Var};
use crate::datasets::{count_triangles, erdos_renyi, gen_colors, triangle_stats, ColorsConfig, Dataset, NodeRange};
use crate::error::{Error, Result};
use crate::eval::auc_percent;
use crate::graph::{Graph, SplitName, Topology};
use crate::layers::{readout, Activation, Bound, ConvKind, ConvLayer, GraphOperators, LayerSpec, ParamStore, Readout};
use crate::model::{AttentionGnnSpec, AttentionKind, AttentionSpec, Model, ModelConfig, PoolSpec};
use crate::oracle::{
    gradient_check, induced_edges, pairwise_auc, threshold_by_filter, topk_by_sort, triangles_by_triples,
};
use crate::pooling::{
    linear_attention, select_threshold, select_topk, threshold_pool, topk_count, topk_pool, PoolMode,
};
use crate::seeding::substream;
use crate::training::{
    graph_loss, kl_attention_loss, kl_value, mse_loss, parallel_map, train, Supervision, TrainConfig, TrainData,
};

/// Relative tolerance for single ops and layers.
pub const OP_TOL: f64 = 1e-4;
/// Relative tolerance for composed pipelines (pooling, full model loss).
pub const COMPOSED_TOL: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-6;
/// Random instances per gradient case.
pub const INSTANCES: usize = 20;
pub const AUC_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub suite: String,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
    pub runtime_secs: f64,
}

impl Summary {
    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

type Outcome = Result<(bool, String)>;

struct Case {
    name: &'static str,
    run: Box<dyn Fn(&mut ChaCha8Rng) -> Outcome + Sync>,
}

fn case(name: &'static str, run: impl Fn(&mut ChaCha8Rng) -> Outcome + Sync + 'static) -> Case {
    Case { name, run: Box::new(run) }
}

fn run_cases(suite: &str, seed: u64, cases: Vec<Case>, jobs: usize) -> Vec<CheckResult> {
    let results = parallel_map(&cases, jobs, |c| {
        let mut rng = substream(seed, &format!("{suite}/{}", c.name));
        let (passed, detail) = match (c.run)(&mut rng) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        Ok(CheckResult { suite: suite.to_string(), name: c.name.to_string(), passed, detail })
    });
    results.expect("cases report their own errors")
}

fn summarize(seed: u64, start: Instant, checks: Vec<CheckResult>) -> Summary {
    Summary { seed, passed: checks.iter().all(|c| c.passed), checks, runtime_secs: start.elapsed().as_secs_f64() }
}

pub fn run_gradient_suite(seed: u64, jobs: usize) -> Summary {
    let start = Instant::now();
    summarize(seed, start, run_cases("gradient", seed, gradient_cases(), jobs))
}

pub fn run_oracle_suite(seed: u64, jobs: usize) -> Summary {
    let start = Instant::now();
    summarize(seed, start, run_cases("oracle", seed, oracle_cases(), jobs))
}

pub fn run_invariant_suite(seed: u64, jobs: usize) -> Summary {
    let start = Instant::now();
    summarize(seed, start, run_cases("invariant", seed, invariant_cases(), jobs))
}

/// All three suites as one summary.
pub fn run_all(seed: u64, jobs: usize) -> Summary {
    let start = Instant::now();
    let mut checks = Vec::new();
    for s in [run_gradient_suite(seed, jobs), run_oracle_suite(seed, jobs), run_invariant_suite(seed, jobs)] {
        checks.extend(s.checks);
    }
    summarize(seed, start, checks)
}

// ---------------------------------------------------------------- gradients

fn rand_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

/// Entries at least `gap` away from zero, for kinked ops.
fn away_from_zero(rng: &mut impl Rng, rows: usize, cols: usize, gap: f64) -> Tensor<f64> {
    rand_tensor(rng, rows, cols).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

/// `sum(W * y)` with a fixed random `W`, so every output entry gets a distinct weight.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

fn random_topology(rng: &mut impl Rng, n: usize) -> Topology {
    let p = rng.random_range(0.2..0.7);
    erdos_renyi(n, p, rng)
}

type Loss = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Worst relative error over [`INSTANCES`] draws of `make`.
fn grad_case(
    rng: &mut ChaCha8Rng,
    tol: f64,
    make: impl Fn(&mut ChaCha8Rng) -> Result<(Vec<Tensor<f64>>, Loss)>,
) -> Outcome {
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let (inputs, f) = make(rng)?;
        worst = worst.max(gradient_check(&inputs, FD_STEP, |t, v| f(t, v))?);
    }
    Ok((worst <= tol, format!("max rel err {worst:.3e} over {INSTANCES} instances (tol {tol:.0e})")))
}

fn broadcast_operand(rng: &mut impl Rng, i: usize, rows: usize, cols: usize) -> Tensor<f64> {
    match i % 4 {
        0 => rand_tensor(rng, rows, cols),
        1 => rand_tensor(rng, 1, cols),
        2 => rand_tensor(rng, rows, 1),
        _ => rand_tensor(rng, 1, 1),
    }
}

fn binary_case(rng: &mut ChaCha8Rng, op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Outcome {
    let counter = std::cell::Cell::new(0usize);
    grad_case(rng, OP_TOL, |rng| {
        let i = counter.get();
        counter.set(i + 1);
        let (r, c) = (rng.random_range(1..6), rng.random_range(1..6));
        let a = rand_tensor(rng, r, c);
        let b = broadcast_operand(rng, i, r, c);
        let w = rand_tensor(rng, r, c);
        Ok((
            vec![a, b],
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                let y = op(t, v[0], v[1])?;
                weighted_sum(t, y, &w)
            }) as Loss,
        ))
    })
}

fn unary_case(
    rng: &mut ChaCha8Rng,
    input: fn(&mut ChaCha8Rng, usize, usize) -> Tensor<f64>,
    op: fn(&mut Tape<f64>, Var) -> Result<Var>,
) -> Outcome {
    grad_case(rng, OP_TOL, |rng| {
        let (r, c) = (rng.random_range(1..6), rng.random_range(1..6));
        let x = input(rng, r, c);
        let probe = {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let y = op(&mut t, v)?;
            t.shape(y)
        };
        let w = rand_tensor(rng, probe.0, probe.1);
        Ok((
            vec![x],
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                let y = op(t, v[0])?;
                weighted_sum(t, y, &w)
            }) as Loss,
        ))
    })
}

fn conv_spec(rng: &mut impl Rng, kind: ConvKind, in_dim: usize) -> LayerSpec {
    let k = kind.is_multiscale().then(|| rng.random_range(1..4));
    let mlp_hidden = match kind {
        ConvKind::Gin => Some(rng.random_range(2..6)),
        ConvKind::Chebygin => rng.random_bool(0.5).then(|| rng.random_range(2..6)),
        _ => None,
    };
    let activation = if rng.random_bool(0.5) { Activation::Relu } else { Activation::None };
    LayerSpec { kind, in_dim, out_dim: rng.random_range(1..5), k, mlp_hidden, activation }
}

fn conv_case(rng: &mut ChaCha8Rng, kind: ConvKind) -> Outcome {
    grad_case(rng, OP_TOL, move |rng| {
        let n = rng.random_range(2..8);
        let c = rng.random_range(1..4);
        let topo = random_topology(rng, n);
        let spec = conv_spec(rng, kind, c);
        let out_dim = spec.out_dim;
        let mut store = ParamStore::<f64>::new();
        let layer = ConvLayer::new(spec, &mut store, rng, "conv")?;
        let mut inputs = vec![rand_tensor(rng, n, c)];
        // Random biases so no parameter sits at an initialization special point.
        inputs.extend(store.values().iter().map(|p| rand_tensor(rng, p.rows(), p.cols())));
        let w = rand_tensor(rng, n, out_dim);
        Ok((
            inputs,
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                let mut ops = GraphOperators::new(topo.clone());
                let bound = Bound::from_vars(v[1..].to_vec());
                let y = layer.forward(t, &mut ops, &bound, v[0])?;
                weighted_sum(t, y, &w)
            }) as Loss,
        ))
    })
}

/// Threshold midway across the widest gap between sorted coefficients.
fn safe_threshold(alpha: &[f64]) -> (f64, f64) {
    let mut s = alpha.to_vec();
    s.sort_by(f64::total_cmp);
    let mut best = (s[0] / 2.0, s[0] / 2.0);
    for w in s.windows(2) {
        let gap = (w[1] - w[0]) / 2.0;
        if gap > best.1 {
            best = ((w[0] + w[1]) / 2.0, gap);
        }
    }
    best
}

fn pool_case(rng: &mut ChaCha8Rng, threshold: bool) -> Outcome {
    grad_case(rng, COMPOSED_TOL, move |rng| {
        let n = rng.random_range(3..10);
        let c = rng.random_range(1..4);
        let topo = random_topology(rng, n);
        let x = rand_tensor(rng, n, c);
        let p = rand_tensor(rng, c, 1);
        let alpha = softmax_values(x.matmul(&p)?.data());
        let (tilde, _) = safe_threshold(&alpha);
        let ratio = rng.random_range(0.3..1.0);
        let spec = LayerSpec {
            kind: ConvKind::Gcn,
            in_dim: c,
            out_dim: 2,
            k: None,
            mlp_hidden: None,
            activation: Activation::None,
        };
        let mut store = ParamStore::<f64>::new();
        let layer = ConvLayer::new(spec, &mut store, rng, "conv")?;
        let mut inputs = vec![x, p];
        inputs.extend(store.values().iter().cloned());
        Ok((
            inputs,
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                let ops = GraphOperators::new(topo.clone());
                let pre = linear_attention(t, v[0], v[1])?;
                let (out, mut reduced) = if threshold {
                    threshold_pool(t, &ops, v[0], pre, tilde)?
                } else {
                    topk_pool(t, &ops, v[0], pre, ratio)?
                };
                // Convolve on the reduced graph so the gradient flows through the kept rows.
                let bound = Bound::from_vars(v[2..].to_vec());
                let h = layer.forward(t, &mut reduced, &bound, out.z)?;
                let r = readout(t, h, Readout::Sum)?;
                t.sum(r)
            }) as Loss,
        ))
    })
}

fn random_target(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut g: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.4) { rng.random_range(0.1..1.0) } else { 0.0 }).collect();
    if g.iter().all(|&v| v == 0.0) {
        g[0] = 1.0;
    }
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

fn small_model_config(rng: &mut impl Rng, conv: ConvKind, pooling: bool) -> ModelConfig {
    let in_dim = rng.random_range(2..4);
    let (k, mlp_hidden) = match conv {
        ConvKind::Gin => (None, Some(4)),
        ConvKind::Chebygin => (Some(2), Some(4)),
        ConvKind::Cheby => (Some(2), None),
        ConvKind::Gcn => (None, None),
    };
    let readout = if rng.random_bool(0.5) { Readout::Sum } else { Readout::Max };
    let (pool, attention) = if pooling {
        let gnn = rng.random_bool(0.5);
        let layers_after = if gnn { vec![1] } else { vec![0] };
        let pool =
            PoolSpec { mode: PoolMode::Topk, r: Some(rng.random_range(0.5..1.0)), alpha_tilde: None, layers_after };
        let attn = if gnn {
            let spec = AttentionGnnSpec { conv, hidden: vec![3], k: k.map(|_| 2), mlp_hidden };
            AttentionSpec { kind: AttentionKind::Gnn, gnn_spec: Some(spec), projection_dim: None }
        } else {
            AttentionSpec { kind: AttentionKind::LinearProjection, gnn_spec: None, projection_dim: Some(in_dim) }
        };
        (pool, Some(attn))
    } else {
        (PoolSpec::none(), None)
    };
    ModelConfig { conv, in_dim, filters: vec![4, 3], k, mlp_hidden, readout, pool, attention }
}

fn random_graph(rng: &mut impl Rng, n: usize, dim: usize) -> Result<Graph> {
    let topo = random_topology(rng, n);
    let feats = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let gt = random_target(rng, n);
    Graph::new(topo, dim, feats, rng.random_range(0..5), Some(gt))
}

/// Smallest distance between a kept and a dropped coefficient in any stage.
fn selection_margin(model: &Model<f64>, graph: &Graph) -> Result<f64> {
    let (_, stages) = model.predict(graph)?;
    let mut margin = f64::INFINITY;
    for s in &stages {
        let kept_min = s.kept.iter().map(|&i| s.alpha[i]).fold(f64::INFINITY, f64::min);
        for (i, &a) in s.alpha.iter().enumerate() {
            if !s.kept.contains(&i) {
                margin = margin.min((kept_min - a).abs());
            }
        }
    }
    Ok(margin)
}

fn model_loss_case(rng: &mut ChaCha8Rng, conv: ConvKind) -> Outcome {
    grad_case(rng, COMPOSED_TOL, move |rng| {
        // Redraw until no coefficient sits within reach of the selection boundary.
        loop {
            let cfg = small_model_config(rng, conv, true);
            let mut model = Model::<f64>::new(cfg.clone(), rng)?;
            // Zero biases would put ReLUs of all-dead rows exactly on the kink.
            for id in model.params.ids().collect::<Vec<_>>() {
                if model.params.name(id).ends_with(".bias") {
                    let b = model.params.get_mut(id);
                    *b = rand_tensor(rng, b.rows(), b.cols()).map(|v| v / 4.0);
                }
            }
            let graph = {
                let n = rng.random_range(3..9);
                random_graph(rng, n, cfg.in_dim)?
            };
            if selection_margin(&model, &graph)? < 1e-4 {
                continue;
            }
            let target = graph.gt_attention().map(<[f64]>::to_vec);
            let inputs = model.params.values().to_vec();
            return Ok((
                inputs,
                Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                    graph_loss(&model, t, &Bound::from_vars(v.to_vec()), &graph, target.as_deref(), 100.0)
                }) as Loss,
            ));
        }
    })
}

fn gradient_cases() -> Vec<Case> {
    vec![
        case("matmul", |rng| {
            grad_case(rng, OP_TOL, |rng| {
                let (r, m, c) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
                let (a, b, w) = (rand_tensor(rng, r, m), rand_tensor(rng, m, c), rand_tensor(rng, r, c));
                Ok((
                    vec![a, b],
                    Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                        let y = t.matmul(v[0], v[1])?;
                        weighted_sum(t, y, &w)
                    }) as Loss,
                ))
            })
        }),
        case("add", |rng| binary_case(rng, |t, a, b| t.add(a, b))),
        case("sub", |rng| binary_case(rng, |t, a, b| t.sub(a, b))),
        case("mul", |rng| binary_case(rng, |t, a, b| t.mul(a, b))),
        case("scale", |rng| unary_case(rng, rand_tensor, |t, a| Ok(t.scale(a, -1.7)))),
        case("relu", |rng| unary_case(rng, |r, a, b| away_from_zero(r, a, b, 0.01), |t, a| Ok(t.relu(a)))),
        case("log", |rng| unary_case(rng, |r, a, b| rand_tensor(r, a, b).map(|v| v.abs() + 0.2), |t, a| t.log(a))),
        case("clamp_min", |rng| {
            unary_case(rng, |r, a, b| away_from_zero(r, a, b, 0.01), |t, a| Ok(t.clamp_min(a, 0.0)))
        }),
        case("sum", |rng| unary_case(rng, rand_tensor, |t, a| t.sum(a))),
        case("mean", |rng| unary_case(rng, rand_tensor, |t, a| t.mean(a))),
        case("max_over_rows", |rng| unary_case(rng, rand_tensor, |t, a| t.max_over_rows(a))),
        case("sum_over_rows", |rng| unary_case(rng, rand_tensor, |t, a| t.sum_over_rows(a))),
        case("softmax", |rng| unary_case(rng, |r, a, _| rand_tensor(r, a, 1), |t, a| t.softmax(a))),
        case("select_rows", |rng| {
            grad_case(rng, OP_TOL, |rng| {
                let (r, c) = (rng.random_range(1..7), rng.random_range(1..4));
                let mut idx: Vec<usize> = (0..r).filter(|_| rng.random_bool(0.6)).collect();
                if idx.is_empty() {
                    idx.push(r - 1);
                }
                let w = rand_tensor(rng, idx.len(), c);
                Ok((
                    vec![rand_tensor(rng, r, c)],
                    Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                        let y = t.select_rows(v[0], &idx)?;
                        weighted_sum(t, y, &w)
                    }) as Loss,
                ))
            })
        }),
        case("concat_cols", |rng| {
            grad_case(rng, OP_TOL, |rng| {
                let r = rng.random_range(1..5);
                let widths: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..4)).collect();
                let inputs: Vec<Tensor<f64>> = widths.iter().map(|&c| rand_tensor(rng, r, c)).collect();
                let w = rand_tensor(rng, r, widths.iter().sum());
                Ok((
                    inputs,
                    Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                        let y = t.concat_cols(v)?;
                        weighted_sum(t, y, &w)
                    }) as Loss,
                ))
            })
        }),
        case("gcn", |rng| conv_case(rng, ConvKind::Gcn)),
        case("gin", |rng| conv_case(rng, ConvKind::Gin)),
        case("cheby", |rng| conv_case(rng, ConvKind::Cheby)),
        case("chebygin", |rng| conv_case(rng, ConvKind::Chebygin)),
        case("readout_max", |rng| unary_case(rng, rand_tensor, |t, a| readout(t, a, Readout::Max))),
        case("mse_loss", |rng| {
            grad_case(rng, OP_TOL, |rng| {
                let label = rng.random_range(0.0..10.0);
                Ok((
                    vec![rand_tensor(rng, 1, 1)],
                    Box::new(move |t: &mut Tape<f64>, v: &[Var]| mse_loss(t, v[0], label)) as Loss,
                ))
            })
        }),
        case("kl_wrt_preactivations", |rng| {
            grad_case(rng, OP_TOL, |rng| {
                let n = rng.random_range(1..10);
                let gt = random_target(rng, n);
                let beta = rng.random_range(1.0..100.0);
                Ok((
                    vec![rand_tensor(rng, n, 1)],
                    Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                        let alpha = t.softmax(v[0])?;
                        kl_attention_loss(t, &gt, alpha, beta, n)?.ok_or(Error::Empty { op: "kl" })
                    }) as Loss,
                ))
            })
        }),
        case("threshold_pool_end_to_end", |rng| pool_case(rng, true)),
        case("topk_pool_end_to_end", |rng| pool_case(rng, false)),
        case("model_loss_gin", |rng| model_loss_case(rng, ConvKind::Gin)),
        case("model_loss_chebygin", |rng| model_loss_case(rng, ConvKind::Chebygin)),
        case("model_loss_cheby", |rng| model_loss_case(rng, ConvKind::Cheby)),
        case("model_loss_gcn", |rng| model_loss_case(rng, ConvKind::Gcn)),
    ]
}

// ------------------------------------------------------------------ oracles

fn pass_count(total: usize, failures: Vec<String>) -> Outcome {
    let passed = failures.is_empty();
    let detail = if passed {
        format!("{total} cases agree")
    } else {
        format!("{} of {total} disagree; first: {}", failures.len(), failures[0])
    };
    Ok((passed, detail))
}

/// Scores on a coarse grid so that ties are common.
fn tied_scores(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let levels = rng.random_range(2..8);
    (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect()
}

fn oracle_cases() -> Vec<Case> {
    vec![
        case("triangles_vs_triples", |rng| {
            let mut fails = Vec::new();
            for i in 0..500 {
                let n = rng.random_range(1..=20);
                let topo = erdos_renyi(n, rng.random_range(0.0..1.0), rng);
                let (total, per) = triangles_by_triples(n, topo.edges());
                let fast = triangle_stats(&topo);
                let dense = count_triangles(&topo.adjacency())?;
                if fast.total != total || fast.per_node != per || dense != fast {
                    fails.push(format!("graph {i}: oracle {total}, bitset {}, dense {}", fast.total, dense.total));
                }
            }
            pass_count(500, fails)
        }),
        case("triangles_k4", |_| {
            let k4 = Topology::new(4, vec![[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])?;
            let s = triangle_stats(&k4);
            Ok((s.total == 4 && s.per_node == vec![3; 4], format!("K4 total {}", s.total)))
        }),
        case("auc_vs_pairwise", |rng| {
            let mut fails = Vec::new();
            for i in 0..100 {
                let n = rng.random_range(2..60);
                let scores = tied_scores(rng, n);
                let mut pos: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
                pos[0] = true;
                pos[1] = false;
                let (a, b) = (auc_percent(&scores, &pos), pairwise_auc(&scores, &pos));
                match (a, b) {
                    (Some(a), Some(b)) if (a - b).abs() <= AUC_TOL => {}
                    _ => fails.push(format!("pool {i}: rank-sum {a:?}, pairwise {b:?}")),
                }
            }
            pass_count(100, fails)
        }),
        case("auc_reversed_is_zero", |_| {
            let auc = auc_percent(&[0.1, 0.2, 0.8, 0.9], &[true, true, false, false]);
            Ok((auc == Some(0.0), format!("{auc:?}")))
        }),
        case("kept_sets_vs_sort", |rng| {
            let mut fails = Vec::new();
            for i in 0..200 {
                let n = rng.random_range(1..40);
                let alpha = tied_scores(rng, n);
                let ratio = rng.random_range(0.01..=1.0);
                let fast = select_topk(&alpha, ratio);
                let oracle = topk_by_sort(&alpha, topk_count(n, ratio));
                if fast != oracle {
                    fails.push(format!("topk case {i}: {fast:?} vs {oracle:?}"));
                }
                let tilde = rng.random_range(0.0..1.0);
                let fast = select_threshold(&alpha, tilde);
                let oracle = threshold_by_filter(&alpha, tilde);
                if fast != oracle {
                    fails.push(format!("threshold case {i}: {fast:?} vs {oracle:?}"));
                }
            }
            pass_count(200, fails)
        }),
        case("induced_vs_edge_filter", |rng| {
            let mut fails = Vec::new();
            for i in 0..200 {
                let n = rng.random_range(1..25);
                let topo = random_topology(rng, n);
                let mut keep: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
                if keep.is_empty() {
                    keep.push(rng.random_range(0..n));
                }
                let sub = topo.induced(&keep)?;
                let oracle = induced_edges(topo.edges(), &keep);
                if sub.edges() != oracle.as_slice() || sub.n() != keep.len() {
                    fails.push(format!("case {i}: keep {keep:?}"));
                }
            }
            pass_count(200, fails)
        }),
    ]
}

// --------------------------------------------------------------- invariants

fn permute_graph(g: &Graph, perm: &[usize]) -> Result<Graph> {
    // Node `i` of the result is node `perm[i]` of the input.
    let n = g.n();
    let mut inv = vec![0; n];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let edges = g.edges().iter().map(|&[a, b]| [inv[a].min(inv[b]), inv[a].max(inv[b])]).collect();
    let feats = perm.iter().flat_map(|&old| g.feature_row(old).to_vec()).collect();
    let gt = g.gt_attention().map(|gt| perm.iter().map(|&old| gt[old]).collect());
    Graph::new(Topology::new(n, edges)?, g.feature_dim(), feats, g.label(), gt)
}

fn colors_model_config(mode: PoolMode) -> ModelConfig {
    let (r, alpha_tilde) = match mode {
        PoolMode::Topk => (Some(0.6), None),
        _ => (None, Some(0.05)),
    };
    ModelConfig {
        conv: ConvKind::Gin,
        in_dim: 4,
        filters: vec![16, 16],
        k: None,
        mlp_hidden: Some(32),
        readout: Readout::Sum,
        pool: PoolSpec { mode, r, alpha_tilde, layers_after: vec![0] },
        attention: Some(AttentionSpec {
            kind: AttentionKind::LinearProjection,
            gnn_spec: None,
            projection_dim: Some(4),
        }),
    }
}

fn one_hot_graph(rng: &mut impl Rng, n: usize) -> Result<Graph> {
    let topo = erdos_renyi(n, 0.2, rng);
    let mut feats = vec![0.0; n * 4];
    for i in 0..n {
        feats[i * 4 + rng.random_range(0..4)] = 1.0;
    }
    Graph::new(topo, 4, feats, 0, None)
}

fn tiny_colors() -> ColorsConfig {
    ColorsConfig {
        n_train: 20,
        n_val: 5,
        n_test: 5,
        small_nodes: NodeRange(4, 10),
        large_nodes: NodeRange(11, 20),
        seed: 7,
        ..ColorsConfig::default()
    }
}

fn dir_bytes(dir: &std::path::Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
    files.sort_by_key(|e| e.file_name());
    files.iter().map(|e| Ok((e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path())?))).collect()
}

fn invariant_cases() -> Vec<Case> {
    vec![
        case("permutation_invariance_colors_model", |rng| {
            let model = Model::<f64>::new(colors_model_config(PoolMode::Threshold), rng)?;
            let g = one_hot_graph(rng, 15)?;
            let (base, _) = model.predict(&g)?;
            let mut worst = 0.0f64;
            for _ in 0..50 {
                let mut perm: Vec<usize> = (0..g.n()).collect();
                perm.shuffle(rng);
                let (p, _) = model.predict(&permute_graph(&g, &perm)?)?;
                worst = worst.max((p - base).abs() / base.abs().max(1.0));
            }
            Ok((worst <= 1e-9, format!("max relative change {worst:.2e} over 50 permutations")))
        }),
        case("permutation_equivariance_convs", |rng| {
            let mut worst = 0.0f64;
            for kind in [ConvKind::Gcn, ConvKind::Gin, ConvKind::Cheby, ConvKind::Chebygin] {
                for _ in 0..10 {
                    let g = {
                        let n = rng.random_range(2..12);
                        random_graph(rng, n, 3)?
                    };
                    let spec = conv_spec(rng, kind, 3);
                    let mut store = ParamStore::<f64>::new();
                    let layer = ConvLayer::new(spec, &mut store, rng, "c")?;
                    let mut perm: Vec<usize> = (0..g.n()).collect();
                    perm.shuffle(rng);
                    let pg = permute_graph(&g, &perm)?;
                    let run = |g: &Graph| -> Result<Tensor<f64>> {
                        let mut t = Tape::new();
                        let b = store.bind_frozen(&mut t);
                        let x = t.constant(g.feature_tensor());
                        let y = layer.forward(&mut t, &mut GraphOperators::new(g.topology().clone()), &b, x)?;
                        Ok(t.value(y).clone())
                    };
                    let (y, py) = (run(&g)?, run(&pg)?);
                    for (new, &old) in perm.iter().enumerate() {
                        for (a, b) in py.row(new).iter().zip(y.row(old)) {
                            worst = worst.max((a - b).abs());
                        }
                    }
                }
            }
            Ok((worst <= 1e-9, format!("max abs deviation {worst:.2e}")))
        }),
        case("softmax_normalized", |rng| {
            let mut worst = 0.0f64;
            for _ in 0..200 {
                let n = rng.random_range(1..50);
                let scale = 10f64.powi(rng.random_range(-2..4));
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
                let s = softmax_values(&x);
                if s.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Ok((false, format!("entry outside [0, 1] for {x:?}")));
                }
                worst = worst.max((s.iter().sum::<f64>() - 1.0).abs());
            }
            Ok((worst <= 1e-12, format!("max |sum - 1| {worst:.2e}")))
        }),
        case("kl_nonnegative", |rng| {
            let mut min = f64::INFINITY;
            for _ in 0..200 {
                let n = rng.random_range(1..20);
                let gt = random_target(rng, n);
                let pre: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
                min = min.min(kl_value(&gt, &softmax_values(&pre), 1.0, n)?);
                let own = kl_value(&gt, &gt, 1.0, n)?;
                if own.abs() > 1e-12 {
                    return Ok((false, format!("KL of a target with itself is {own}")));
                }
            }
            Ok((min >= -1e-12, format!("min KL {min:.2e}; self-KL zero")))
        }),
        case("kl_beta_linear", |rng| {
            for _ in 0..100 {
                let n = rng.random_range(1..20);
                let gt = random_target(rng, n);
                let alpha = softmax_values(&(0..n).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<_>>());
                let beta = rng.random_range(0.1..100.0);
                let one = kl_value(&gt, &alpha, beta, n)?;
                for m in [2.0, 4.0, 0.5] {
                    let scaled = kl_value(&gt, &alpha, m * beta, n)?;
                    if scaled != m * one {
                        return Ok((false, format!("beta {beta} x{m}: {scaled} != {}", m * one)));
                    }
                }
            }
            Ok((true, "exact for power-of-two factors on 100 cases".into()))
        }),
        case("topk_full_equals_threshold_zero", |rng| {
            let mut worst = 0.0f64;
            for _ in 0..100 {
                let conv = [ConvKind::Gin, ConvKind::Gcn, ConvKind::Cheby, ConvKind::Chebygin][rng.random_range(0..4)];
                let mut cfg = small_model_config(rng, conv, true);
                cfg.pool.r = Some(1.0);
                let topk = Model::<f64>::new(cfg.clone(), rng)?;
                cfg.pool = PoolSpec { mode: PoolMode::Threshold, r: None, alpha_tilde: Some(0.0), ..cfg.pool };
                let mut thr = Model::<f64>::new(cfg.clone(), rng)?;
                thr.params = topk.params.clone();
                let g = {
                    let n = rng.random_range(1..12);
                    random_graph(rng, n, cfg.in_dim)?
                };
                let (a, _) = topk.predict(&g)?;
                let (b, _) = thr.predict(&g)?;
                worst = worst.max((a - b).abs());
            }
            Ok((worst <= 1e-9, format!("max |topk(r=1) - threshold(0)| {worst:.2e} over 100 pairs")))
        }),
        case("determinism_replay", |_| {
            let cfg = tiny_colors();
            let (a, b) = (gen_colors(&cfg)?, gen_colors(&cfg)?);
            if a != b {
                return Ok((false, "dataset generation differs between replays".into()));
            }
            let model_cfg = colors_model_config(PoolMode::Threshold);
            let train_cfg = TrainConfig {
                epochs: 2,
                decay_epochs: vec![1],
                seed: 3,
                supervision: Supervision::Gt,
                ..TrainConfig::default()
            };
            let data = TrainData {
                train: a.require(SplitName::Train)?,
                val: None,
                weak: None,
                label_range: a.info.label_range,
            };
            let r1 = train::<f64>(&model_cfg, data, &train_cfg)?;
            let r2 = train::<f64>(&model_cfg, data, &train_cfg)?;
            let same = r1.history == r2.history && r1.model.params.values() == r2.model.params.values();
            Ok((same, format!("final loss {:?}", r1.history.last().map(|h| h.train_loss))))
        }),
        case("dataset_round_trip", |_| {
            let ds = gen_colors(&tiny_colors())?;
            let (d1, d2) = (tempfile::tempdir()?, tempfile::tempdir()?);
            ds.save(d1.path())?;
            let loaded = Dataset::load(d1.path())?;
            loaded.save(d2.path())?;
            let same = loaded == ds && dir_bytes(d1.path())? == dir_bytes(d2.path())?;
            Ok((same, "save, load and re-save are byte-identical".into()))
        }),
    ]
}
