//! Graph convolution layers (GCN, Cheby, GIN, ChebyGIN), MLP heads and readout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{gcn_norm, mean_propagation, Topology};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    Gcn,
    Cheby,
    Gin,
    Chebygin,
}

impl ConvKind {
    pub fn is_multiscale(self) -> bool {
        matches!(self, ConvKind::Cheby | ConvKind::Chebygin)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConvKind::Gcn => "gcn",
            ConvKind::Cheby => "cheby",
            ConvKind::Gin => "gin",
            ConvKind::Chebygin => "chebygin",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    Sum,
    Max,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: ConvKind,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Scale count; multiscale kinds only.
    pub k: Option<usize>,
    /// Hidden width of a two-layer post-aggregation MLP.
    pub mlp_hidden: Option<usize>,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_dim == 0 || self.out_dim == 0 {
            return bad(format!("{} layer with zero width", self.kind.as_str()));
        }
        match (self.kind.is_multiscale(), self.k) {
            (true, None) | (true, Some(0)) => return bad(format!("{} needs K >= 1", self.kind.as_str())),
            (false, Some(_)) => return bad(format!("{} takes no K", self.kind.as_str())),
            _ => {}
        }
        match (self.kind, self.mlp_hidden) {
            (ConvKind::Gin, None) => bad("gin needs mlp_hidden".into()),
            (ConvKind::Gcn | ConvKind::Cheby, Some(_)) => bad(format!("{} has no MLP", self.kind.as_str())),
            (_, Some(0)) => bad("mlp_hidden must be positive".into()),
            _ => Ok(()),
        }
    }

    /// Width entering the first linear map.
    fn linear_in(&self) -> usize {
        self.in_dim * self.k.unwrap_or(1)
    }
}

/// Index into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter on `tape` as a gradient leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.values.iter().map(|v| tape.param(v.clone())).collect())
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.values.iter().map(|v| tape.constant(v.clone())).collect())
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Uniform(-a, a) with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn uniform_init<T: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| T::from_f64_lossy(rng.random_range(-a..a))).collect();
    Tensor::from_vec(fan_in, fan_out, data).expect("sized by construction")
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_init(rng, fan_in, fan_out));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out)));
        Linear { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => tape.add(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Linear maps with ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, lin) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.relu(h);
            }
            h = lin.forward(tape, p, h)?;
        }
        Ok(h)
    }
}

/// Structural operators of one graph, placed on a tape on first use.
#[derive(Debug)]
pub struct GraphOperators {
    topo: Topology,
    adj: Option<Var>,
    adj_self: Option<Var>,
    gcn: Option<Var>,
    mean: Option<Var>,
    degree: Option<Var>,
}

impl GraphOperators {
    pub fn new(topo: Topology) -> Self {
        GraphOperators { topo, adj: None, adj_self: None, gcn: None, mean: None, degree: None }
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn n(&self) -> usize {
        self.topo.n()
    }

    /// Raw adjacency `A`.
    pub fn adj<T: Scalar>(&mut self, tape: &mut Tape<T>) -> Var {
        if let Some(v) = self.adj {
            return v;
        }
        let v = tape.constant(self.topo.adjacency());
        self.adj = Some(v);
        v
    }

    /// `A + I`.
    pub fn adj_self<T: Scalar>(&mut self, tape: &mut Tape<T>) -> Var {
        if let Some(v) = self.adj_self {
            return v;
        }
        let mut a: Tensor<T> = self.topo.adjacency();
        for i in 0..a.rows() {
            a.set(i, i, T::one());
        }
        let v = tape.constant(a);
        self.adj_self = Some(v);
        v
    }

    pub fn gcn<T: Scalar>(&mut self, tape: &mut Tape<T>) -> Var {
        if let Some(v) = self.gcn {
            return v;
        }
        let v = tape.constant(gcn_norm(&self.topo.adjacency::<T>()));
        self.gcn = Some(v);
        v
    }

    /// Row-normalized `D^{-1} A`.
    pub fn mean<T: Scalar>(&mut self, tape: &mut Tape<T>) -> Var {
        if let Some(v) = self.mean {
            return v;
        }
        let v = tape.constant(mean_propagation(&self.topo.adjacency::<T>()));
        self.mean = Some(v);
        v
    }

    /// Node degrees as an `N x 1` column.
    pub fn degree<T: Scalar>(&mut self, tape: &mut Tape<T>) -> Var {
        if let Some(v) = self.degree {
            return v;
        }
        let d = self.topo.degrees().into_iter().map(|d| T::from_f64_lossy(d as f64)).collect();
        let v = tape.constant(Tensor::column(d));
        self.degree = Some(v);
        v
    }
}

fn activate<T: Scalar>(tape: &mut Tape<T>, act: Activation, x: Var) -> Var {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::None => x,
    }
}

/// `activation(Â X W + b)`.
pub fn gcn_forward<T: Scalar>(
    tape: &mut Tape<T>,
    a_hat: Var,
    x: Var,
    p: &Bound,
    lin: &Linear,
    act: Activation,
) -> Result<Var> {
    let ax = tape.matmul(a_hat, x)?;
    let y = lin.forward(tape, p, ax)?;
    Ok(activate(tape, act, y))
}

/// `[X, P X, P^2 X, ...]` with `K` blocks, where `P` is the propagation operator.
pub fn multiscale_stack<T: Scalar>(tape: &mut Tape<T>, prop: Var, x: Var, k: usize) -> Result<Var> {
    if k == 0 {
        return Err(Error::Config("multiscale stack needs K >= 1".into()));
    }
    let mut blocks = vec![x];
    for _ in 1..k {
        let prev = *blocks.last().unwrap();
        blocks.push(tape.matmul(prop, prev)?);
    }
    tape.concat_cols(&blocks)
}

/// `[X, D P X, D P^2 X, ...]`: mean-aggregated scales multiplied by node degrees.
///
/// The first hop equals `A X`; later hops stay on the scale of the degree
/// instead of growing like powers of it.
pub fn degree_scaled_stack<T: Scalar>(tape: &mut Tape<T>, mean: Var, degree: Var, x: Var, k: usize) -> Result<Var> {
    if k == 0 {
        return Err(Error::Config("multiscale stack needs K >= 1".into()));
    }
    let mut blocks = vec![x];
    let mut cur = x;
    for _ in 1..k {
        cur = tape.matmul(mean, cur)?;
        blocks.push(tape.mul(cur, degree)?);
    }
    tape.concat_cols(&blocks)
}

/// One graph convolution with its parameters.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub spec: LayerSpec,
    pub mlp: Mlp,
}

impl ConvLayer {
    pub fn new<T: Scalar>(spec: LayerSpec, store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.linear_in();
        let layers = match spec.mlp_hidden {
            Some(hidden) => vec![
                Linear::new(store, rng, &format!("{name}.mlp0"), fan_in, hidden, true),
                Linear::new(store, rng, &format!("{name}.mlp1"), hidden, spec.out_dim, true),
            ],
            None => vec![Linear::new(store, rng, &format!("{name}.lin"), fan_in, spec.out_dim, true)],
        };
        Ok(ConvLayer { spec, mlp: Mlp { layers } })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ops: &mut GraphOperators, p: &Bound, x: Var) -> Result<Var> {
        let (n, c) = tape.shape(x);
        if c != self.spec.in_dim || n != ops.n() {
            return Err(Error::shape(self.spec.kind.as_str(), (n, c), (ops.n(), self.spec.in_dim)));
        }
        let agg = match self.spec.kind {
            ConvKind::Gcn => {
                let a_hat = ops.gcn(tape);
                tape.matmul(a_hat, x)?
            }
            ConvKind::Gin => {
                let a = ops.adj_self(tape);
                tape.matmul(a, x)?
            }
            ConvKind::Cheby => {
                let prop = ops.mean(tape);
                multiscale_stack(tape, prop, x, self.spec.k.unwrap_or(1))?
            }
            ConvKind::Chebygin => {
                let mean = ops.mean(tape);
                let degree = ops.degree(tape);
                degree_scaled_stack(tape, mean, degree, x, self.spec.k.unwrap_or(1))?
            }
        };
        let y = self.mlp.forward(tape, p, agg)?;
        Ok(activate(tape, self.spec.activation, y))
    }
}

/// Column-wise sum or max over nodes.
pub fn readout<T: Scalar>(tape: &mut Tape<T>, x: Var, kind: Readout) -> Result<Var> {
    match kind {
        Readout::Sum => tape.sum_over_rows(x),
        Readout::Max => tape.max_over_rows(x),
    }
}
