//! Stacked graph convolutions with optional attention pooling stages.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::{
    readout, Activation, Bound, ConvKind, ConvLayer, GraphOperators, LayerSpec, Linear, ParamStore, Readout,
};
use crate::pooling::{pool_stage, AttentionModule, AttentionOutput, PoolMode, Selection};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    LinearProjection,
    Gnn,
}

/// Convolution stack predicting one scalar per node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionGnnSpec {
    pub conv: ConvKind,
    /// Hidden widths; a final width-1 layer without activation is appended.
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub mlp_hidden: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionSpec {
    pub kind: AttentionKind,
    #[serde(default)]
    pub gnn_spec: Option<AttentionGnnSpec>,
    /// Input width of the projection; checked against the width at the pooling point.
    #[serde(default)]
    pub projection_dim: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub mode: PoolMode,
    #[serde(default)]
    pub r: Option<f64>,
    #[serde(default)]
    pub alpha_tilde: Option<f64>,
    /// Pooling points: 0 pools the input features, `l` pools the output of conv layer `l`.
    #[serde(default)]
    pub layers_after: Vec<usize>,
}

impl PoolSpec {
    pub fn none() -> Self {
        PoolSpec { mode: PoolMode::None, r: None, alpha_tilde: None, layers_after: Vec::new() }
    }

    pub fn selection(&self) -> Option<Selection> {
        match self.mode {
            PoolMode::None => None,
            PoolMode::Topk => self.r.map(|ratio| Selection::Topk { ratio }),
            PoolMode::Threshold => self.alpha_tilde.map(|alpha_tilde| Selection::Threshold { alpha_tilde }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub conv: ConvKind,
    pub in_dim: usize,
    pub filters: Vec<usize>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub mlp_hidden: Option<usize>,
    pub readout: Readout,
    pub pool: PoolSpec,
    #[serde(default)]
    pub attention: Option<AttentionSpec>,
}

impl ModelConfig {
    /// Feature width at pooling point `l`.
    pub fn width_at(&self, l: usize) -> usize {
        if l == 0 {
            self.in_dim
        } else {
            self.filters[l - 1]
        }
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut in_dim = self.in_dim;
        self.filters
            .iter()
            .map(|&out_dim| {
                let spec = LayerSpec {
                    kind: self.conv,
                    in_dim,
                    out_dim,
                    k: self.k,
                    mlp_hidden: self.mlp_hidden,
                    activation: Activation::Relu,
                };
                in_dim = out_dim;
                spec
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.in_dim == 0 {
            return bad("in_dim must be positive");
        }
        if self.filters.is_empty() {
            return bad("at least one conv layer is required");
        }
        for spec in self.layer_specs() {
            spec.validate()?;
        }
        let pool = &self.pool;
        match pool.mode {
            PoolMode::None => {
                if pool.r.is_some() || pool.alpha_tilde.is_some() || !pool.layers_after.is_empty() {
                    return bad("pool mode none takes no r, alpha_tilde or layers_after");
                }
                if self.attention.is_some() {
                    return bad("attention given without pooling");
                }
                return Ok(());
            }
            PoolMode::Topk => match (pool.r, pool.alpha_tilde) {
                (Some(r), None) if r > 0.0 && r <= 1.0 => {}
                (Some(_), None) => return bad("r must lie in (0, 1]"),
                _ => return bad("topk pooling needs r and no alpha_tilde"),
            },
            PoolMode::Threshold => match (pool.r, pool.alpha_tilde) {
                (None, Some(t)) if (0.0..1.0).contains(&t) => {}
                (None, Some(_)) => return bad("alpha_tilde must lie in [0, 1)"),
                _ => return bad("threshold pooling needs alpha_tilde and no r"),
            },
        }
        if pool.layers_after.is_empty() {
            return bad("pooling needs at least one entry in layers_after");
        }
        if pool.layers_after.windows(2).any(|w| w[0] >= w[1]) {
            return bad("layers_after must be strictly increasing");
        }
        if pool.layers_after.iter().any(|&l| l > self.filters.len()) {
            return bad("layers_after refers to a missing conv layer");
        }
        let Some(attn) = &self.attention else {
            return bad("pooling needs an attention spec");
        };
        match attn.kind {
            AttentionKind::LinearProjection => {
                if attn.gnn_spec.is_some() {
                    return bad("linear_projection attention takes no gnn_spec");
                }
                let widths: Vec<usize> = pool.layers_after.iter().map(|&l| self.width_at(l)).collect();
                match attn.projection_dim {
                    Some(d) if widths.iter().all(|&w| w == d) => {}
                    Some(_) => return bad("projection_dim differs from the width at the pooling point"),
                    None => return bad("linear_projection attention needs projection_dim"),
                }
            }
            AttentionKind::Gnn => {
                if attn.projection_dim.is_some() {
                    return bad("gnn attention takes no projection_dim");
                }
                let Some(g) = &attn.gnn_spec else {
                    return bad("gnn attention needs gnn_spec");
                };
                for spec in attention_layer_specs(g, 1) {
                    spec.validate()?;
                }
            }
        }
        Ok(())
    }
}

fn attention_layer_specs(g: &AttentionGnnSpec, in_dim: usize) -> Vec<LayerSpec> {
    let mut widths = g.hidden.clone();
    widths.push(1);
    let last = widths.len() - 1;
    let mut prev = in_dim;
    widths
        .iter()
        .enumerate()
        .map(|(i, &out_dim)| {
            let spec = LayerSpec {
                kind: g.conv,
                in_dim: prev,
                out_dim,
                k: g.k,
                mlp_hidden: g.mlp_hidden,
                activation: if i == last { Activation::None } else { Activation::Relu },
            };
            prev = out_dim;
            spec
        })
        .collect()
}

/// Model prediction and one record per pooling stage, in order.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub prediction: Var,
    pub stages: Vec<AttentionOutput>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    convs: Vec<ConvLayer>,
    attention: Vec<AttentionModule>,
    head: Linear,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        for (i, spec) in config.layer_specs().into_iter().enumerate() {
            convs.push(ConvLayer::new(spec, &mut params, rng, &format!("conv{i}"))?);
        }
        let mut attention = Vec::new();
        if let Some(attn) = &config.attention {
            for (s, &l) in config.pool.layers_after.iter().enumerate() {
                let width = config.width_at(l);
                let module = match attn.kind {
                    AttentionKind::LinearProjection => {
                        let data = (0..width).map(|_| T::from_f64_lossy(StandardNormal.sample(rng))).collect();
                        let p = params.add(format!("attn{s}.p"), Tensor::from_vec(width, 1, data)?);
                        AttentionModule::Projection { p }
                    }
                    AttentionKind::Gnn => {
                        let g = attn.gnn_spec.as_ref().expect("validated");
                        let layers = attention_layer_specs(g, width)
                            .into_iter()
                            .enumerate()
                            .map(|(j, spec)| ConvLayer::new(spec, &mut params, rng, &format!("attn{s}.conv{j}")))
                            .collect::<Result<Vec<_>>>()?;
                        AttentionModule::Gnn { layers }
                    }
                };
                attention.push(module);
            }
        }
        let last = *config.filters.last().expect("validated");
        let head = Linear::new(&mut params, rng, "head", last, 1, true);
        Ok(Model { config, params, convs, attention, head })
    }

    pub fn num_stages(&self) -> usize {
        self.attention.len()
    }

    /// Full forward pass with the given parameter binding.
    pub fn forward_bound(&self, tape: &mut Tape<T>, bound: &Bound, graph: &Graph) -> Result<ForwardOutput> {
        if graph.feature_dim() != self.config.in_dim {
            return Err(Error::shape("model input", (graph.n(), graph.feature_dim()), (graph.n(), self.config.in_dim)));
        }
        let mut ops = GraphOperators::new(graph.topology().clone());
        let mut h = tape.constant(graph.feature_tensor());
        let selection = self.config.pool.selection();
        let points = &self.config.pool.layers_after;
        let mut stages = Vec::with_capacity(points.len());

        for l in 0..=self.convs.len() {
            if l > 0 {
                h = self.convs[l - 1].forward(tape, &mut ops, bound, h)?;
            }
            if let Some(s) = points.iter().position(|&p| p == l) {
                let pre = self.attention[s].pre_activations(tape, &mut ops, h, bound)?;
                let (out, reduced) = pool_stage(tape, &ops, h, pre, selection.expect("validated"))?;
                h = out.z;
                ops = reduced;
                stages.push(out);
            }
        }
        let pooled = readout(tape, h, self.config.readout)?;
        let prediction = self.head.forward(tape, bound, pooled)?;
        Ok(ForwardOutput { prediction, stages })
    }

    /// Inference pass on a fresh tape with frozen parameters.
    pub fn predict(&self, graph: &Graph) -> Result<(f64, Vec<StageValues>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let out = self.forward_bound(&mut tape, &bound, graph)?;
        let pred = tape.value(out.prediction).item().to_f64_lossy();
        let stages = out.stages.iter().map(|s| StageValues::read(&tape, s)).collect();
        Ok((pred, stages))
    }
}

/// Plain values of an [`AttentionOutput`], detached from the tape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageValues {
    pub alpha_pre: Vec<f64>,
    pub alpha: Vec<f64>,
    pub kept: Vec<usize>,
}

impl StageValues {
    pub fn read<T: Scalar>(tape: &Tape<T>, out: &AttentionOutput) -> Self {
        StageValues { alpha_pre: out.alpha_pre_values(tape), alpha: out.alpha_values(tape), kept: out.kept.clone() }
    }
}

/// Runs `model` on `graph` with trainable parameters bound on `tape`.
pub fn forward_with_pooling<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    graph: &Graph,
) -> Result<(Bound, ForwardOutput)> {
    let bound = model.params.bind(tape);
    let out = model.forward_bound(tape, &bound, graph)?;
    Ok((bound, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Topology;
    use crate::oracle::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn colors_graph() -> Graph {
        // 5 nodes, one-hot RGB; nodes 1 and 3 green.
        let feats = vec![1., 0., 0., 0., 1., 0., 0., 0., 1., 0., 1., 0., 1., 0., 0.];
        let topo = Topology::new(5, vec![[0, 1], [1, 2], [2, 3], [3, 4], [0, 4]]).unwrap();
        Graph::new(topo, 3, feats, 2, Some(vec![0., 0.5, 0., 0.5, 0.])).unwrap()
    }

    fn base(conv: ConvKind, pool: PoolSpec, attention: Option<AttentionSpec>) -> ModelConfig {
        let (k, mlp_hidden) = match conv {
            ConvKind::Gin => (None, Some(8)),
            ConvKind::Chebygin => (Some(2), Some(8)),
            ConvKind::Cheby => (Some(2), None),
            ConvKind::Gcn => (None, None),
        };
        ModelConfig { conv, in_dim: 3, filters: vec![6, 6], k, mlp_hidden, readout: Readout::Sum, pool, attention }
    }

    fn projection() -> Option<AttentionSpec> {
        Some(AttentionSpec { kind: AttentionKind::LinearProjection, gnn_spec: None, projection_dim: Some(3) })
    }

    fn threshold(t: f64, at: Vec<usize>) -> PoolSpec {
        PoolSpec { mode: PoolMode::Threshold, r: None, alpha_tilde: Some(t), layers_after: at }
    }

    fn permuted(g: &Graph, perm: &[usize]) -> Graph {
        // perm[new] = old
        let n = g.n();
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let edges = g.edges().iter().map(|e| [inv[e[0]], inv[e[1]]]).collect();
        let feats = perm.iter().flat_map(|&o| g.feature_row(o).to_vec()).collect();
        let gt = g.gt_attention().map(|a| perm.iter().map(|&o| a[o]).collect());
        Graph::new(Topology::new(n, edges).unwrap(), g.feature_dim(), feats, g.label(), gt).unwrap()
    }

    #[test]
    fn config_validation() {
        let ok = base(ConvKind::Gin, threshold(0.05, vec![0]), projection());
        assert!(ok.validate().is_ok());
        let mut c = ok.clone();
        c.pool.r = Some(0.5);
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.attention = None;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.pool.layers_after = vec![3];
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.pool.layers_after = vec![1];
        assert!(c.validate().is_err(), "projection width 3 vs hidden width 6");
        let mut c = ok;
        c.attention.as_mut().unwrap().gnn_spec =
            Some(AttentionGnnSpec { conv: ConvKind::Gcn, hidden: vec![4], k: None, mlp_hidden: None });
        assert!(c.validate().is_err());
        let json = r#"{"conv":"gcn","in_dim":3,"filters":[4],"readout":"sum","pool":{"mode":"none"},"bogus":1}"#;
        assert!(serde_json::from_str::<ModelConfig>(json).is_err());
    }

    #[test]
    fn pool_none_matches_plain_stack() {
        let g = colors_graph();
        let model: Model<f64> =
            Model::new(base(ConvKind::Gin, PoolSpec::none(), None), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (pred, stages) = model.predict(&g).unwrap();
        assert!(stages.is_empty());

        let mut tape = Tape::new();
        let b = model.params.bind_frozen(&mut tape);
        let mut ops = GraphOperators::new(g.topology().clone());
        let mut h = tape.constant(g.feature_tensor());
        for conv in &model.convs {
            h = conv.forward(&mut tape, &mut ops, &b, h).unwrap();
        }
        let r = readout(&mut tape, h, Readout::Sum).unwrap();
        let y = model.head.forward(&mut tape, &b, r).unwrap();
        assert_eq!(tape.value(y).item(), pred);
    }

    #[test]
    fn zero_threshold_only_rescales() {
        let g = colors_graph();
        let model: Model<f64> =
            Model::new(base(ConvKind::Gcn, threshold(0.0, vec![0]), projection()), &mut ChaCha8Rng::seed_from_u64(4))
                .unwrap();
        let mut tape = Tape::new();
        let b = model.params.bind_frozen(&mut tape);
        let out = model.forward_bound(&mut tape, &b, &g).unwrap();
        let stage = &out.stages[0];
        assert_eq!(stage.kept, vec![0, 1, 2, 3, 4]);
        let alpha = stage.alpha_values(&tape);
        let z = tape.value(stage.z);
        for i in 0..5 {
            for c in 0..3 {
                assert!((z.get(i, c) - alpha[i] * g.feature_row(i)[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn optimal_projection_keeps_green_nodes() {
        // 25-node path, green at 4, 11, 19; with p = [0,1,0] green alpha is
        // e / (3e + 22) ~ 0.090 and the rest 1 / (3e + 22) ~ 0.033.
        let green = [4, 11, 19];
        let feats: Vec<f64> = (0..25)
            .flat_map(|i| {
                if green.contains(&i) {
                    [0., 1., 0.]
                } else if i % 2 == 0 {
                    [1., 0., 0.]
                } else {
                    [0., 0., 1.]
                }
            })
            .collect();
        let topo = Topology::new(25, (0..24).map(|i| [i, i + 1]).collect()).unwrap();
        let g = Graph::new(topo, 3, feats, 3, None).unwrap();
        let mut model: Model<f64> =
            Model::new(base(ConvKind::Gin, threshold(0.05, vec![0]), projection()), &mut ChaCha8Rng::seed_from_u64(5))
                .unwrap();
        let p = model.params.find("attn0.p").unwrap();
        *model.params.get_mut(p) = Tensor::column(vec![0.0, 1.0, 0.0]);
        let (_, stages) = model.predict(&g).unwrap();
        assert_eq!(stages[0].kept, green.to_vec());
        let e = 1f64.exp();
        assert!((stages[0].alpha[4] - e / (3.0 * e + 22.0)).abs() < 1e-12);
    }

    #[test]
    fn topk_full_equals_threshold_zero() {
        let g = colors_graph();
        let mk = |pool| {
            Model::<f64>::new(base(ConvKind::Cheby, pool, projection()), &mut ChaCha8Rng::seed_from_u64(8)).unwrap()
        };
        let a = mk(threshold(0.0, vec![0]));
        let b = mk(PoolSpec { mode: PoolMode::Topk, r: Some(1.0), alpha_tilde: None, layers_after: vec![0] });
        let (pa, sa) = a.predict(&g).unwrap();
        let (pb, sb) = b.predict(&g).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(sa, sb);
    }

    fn two_stage_gnn(conv: ConvKind) -> ModelConfig {
        let mut c = base(conv, threshold(0.1, vec![1, 2]), None);
        let (k, mlp_hidden) = if conv.is_multiscale() { (Some(2), c.mlp_hidden) } else { (None, c.mlp_hidden) };
        c.attention = Some(AttentionSpec {
            kind: AttentionKind::Gnn,
            gnn_spec: Some(AttentionGnnSpec { conv, hidden: vec![4, 4], k, mlp_hidden }),
            projection_dim: None,
        });
        c.readout = Readout::Max;
        c
    }

    #[test]
    fn prediction_is_permutation_invariant() {
        let g = colors_graph();
        let perm = [3, 0, 4, 2, 1];
        let pg = permuted(&g, &perm);
        for conv in [ConvKind::Gcn, ConvKind::Gin, ConvKind::Chebygin] {
            let model: Model<f64> = Model::new(two_stage_gnn(conv), &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
            let (a, sa) = model.predict(&g).unwrap();
            let (b, sb) = model.predict(&pg).unwrap();
            assert!((a - b).abs() < 1e-9, "{conv:?}: {a} vs {b}");
            for (new, &old) in perm.iter().enumerate() {
                assert!((sa[0].alpha[old] - sb[0].alpha[new]).abs() < 1e-9);
            }
            let mut mapped: Vec<usize> = sb[0].kept.iter().map(|&new| perm[new]).collect();
            mapped.sort_unstable();
            assert_eq!(mapped, sa[0].kept);
        }
    }

    #[test]
    fn single_node_gnn_attention() {
        let g = Graph::new(Topology::new(1, vec![]).unwrap(), 3, vec![0.2, 0.5, 0.1], 0, None).unwrap();
        let model: Model<f64> = Model::new(two_stage_gnn(ConvKind::Gin), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (_, stages) = model.predict(&g).unwrap();
        assert_eq!(stages[0].alpha, vec![1.0]);
        assert_eq!(stages[1].kept, vec![0]);
    }

    #[test]
    fn gradients_through_two_pooling_stages() {
        let g = colors_graph();
        let model: Model<f64> =
            Model::new(two_stage_gnn(ConvKind::Chebygin), &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
        let values: Vec<Tensor<f64>> = model.params.values().to_vec();
        let err = gradient_check(&values, 1e-5, |tape, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let out = model.forward_bound(tape, &bound, &g)?;
            let mut loss = tape.mul(out.prediction, out.prediction)?;
            for s in &out.stages {
                let sq = tape.mul(s.alpha, s.alpha)?;
                let t = tape.sum(sq)?;
                loss = tape.add(loss, t)?;
            }
            Ok(loss)
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
