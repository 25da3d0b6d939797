//! Bundled chains and couplings: lazy hypercube walk, lazy biased cycle,
//! Metropolis colorings and hardcore Glauber dynamics.
//!
//! Configurations are enumerated lexicographically by their vector of
//! site values, first site most significant. For the hypercube, state
//! index `Σ x_i 2^{n−i}` with `x_1` the leading bit.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::chain::{Distribution, TransitionMatrix};
use crate::check::CheckResult;
use crate::coupling::{self, pair_index, CoalescenceReport, CouplingMatrix, RandomMapping, RandomMappingRep, TailMode};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::math;
use crate::quantize::{self, KrausSet};
use crate::rng::StreamRng;
use crate::{Guards, COMPUTED_TOL};

/// Simple undirected graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphSpec {
    n: usize,
    edges: Vec<(usize, usize)>,
    adj: Vec<Vec<usize>>,
    label: String,
}

impl GraphSpec {
    /// Rejects loops, repeated edges and out-of-range endpoints.
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("graph needs at least one vertex".into()));
        }
        let mut adj = vec![Vec::new(); n];
        let mut norm = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::InvalidArgument(format!("edge ({a}, {b}) outside 0..{n}")));
            }
            if a == b {
                return Err(Error::InvalidArgument(format!("self-loop at {a}")));
            }
            let e = (a.min(b), a.max(b));
            if norm.contains(&e) {
                return Err(Error::InvalidArgument(format!("repeated edge {e:?}")));
            }
            norm.push(e);
            adj[a].push(b);
            adj[b].push(a);
        }
        adj.iter_mut().for_each(|l| l.sort_unstable());
        let label = format!("G{n}m{}", norm.len());
        Ok(Self { n, edges: norm, adj, label })
    }

    pub fn path(n: usize) -> Result<Self> {
        let e: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::new(n, &e).map(|g| g.labeled(format!("P{n}")))
    }

    pub fn cycle(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidArgument("a cycle needs at least 3 vertices".into()));
        }
        let e: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Self::new(n, &e).map(|g| g.labeled(format!("C{n}")))
    }

    pub fn complete(n: usize) -> Result<Self> {
        let e: Vec<_> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        Self::new(n, &e).map(|g| g.labeled(format!("K{n}")))
    }

    pub fn empty(n: usize) -> Result<Self> {
        Self::new(n, &[]).map(|g| g.labeled(format!("E{n}")))
    }

    fn labeled(mut self, label: String) -> Self {
        self.label = label;
        self
    }

    /// Short name: `K3`, `P5`, or `G<n>m<edges>` for explicit edge lists.
    pub fn label(&self) -> &str {
        &self.label
    }

    /// `K<n>`, `P<n>`, `C<n>` or `E<n>` (complete, path, cycle, empty).
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown graph '{s}' (expected K<n>, P<n>, C<n> or E<n>)"));
        let mut chars = s.chars();
        let kind = chars.next().ok_or_else(bad)?;
        let n: usize = chars.as_str().parse().map_err(|_| bad())?;
        match kind {
            'K' => Self::complete(n),
            'P' => Self::path(n),
            'C' => Self::cycle(n),
            'E' => Self::empty(n),
            _ => Err(bad()),
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adj[v]
    }

    /// `Δ`.
    pub fn max_degree(&self) -> usize {
        self.adj.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// `c_met = 1 − 3Δ/q`; may be negative (vacuous envelope).
pub fn c_met(max_degree: usize, q: usize) -> f64 {
    1.0 - 3.0 * max_degree as f64 / q as f64
}

/// `c_H = (1 + λ(1 − Δ)) / (1 + λ)`; may be negative.
pub fn c_hardcore(lambda: f64, max_degree: usize) -> f64 {
    (1.0 + lambda * (1.0 - max_degree as f64)) / (1.0 + lambda)
}

/// Lazy hypercube walk as a random mapping: `r = 2(i−1) + b` sets
/// coordinate `i` to `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct HypercubeWalk {
    n: usize,
    probs: Vec<f64>,
}

impl HypercubeWalk {
    pub fn new(n: usize) -> Self {
        Self { n, probs: vec![1.0 / (2 * n) as f64; 2 * n] }
    }
}

impl RandomMapping for HypercubeWalk {
    fn num_states(&self) -> usize {
        1 << self.n
    }

    fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    fn successor(&self, x: usize, r: usize) -> usize {
        let bit = self.n - 1 - r / 2;
        (x & !(1 << bit)) | ((r & 1) << bit)
    }
}

/// Random mapping carried by a model.
#[derive(Debug, Clone, PartialEq)]
pub enum Mapping {
    Table(RandomMappingRep),
    Hypercube(HypercubeWalk),
}

impl Mapping {
    fn inner(&self) -> &dyn RandomMapping {
        match self {
            Self::Table(t) => t,
            Self::Hypercube(h) => h,
        }
    }
}

impl RandomMapping for Mapping {
    fn num_states(&self) -> usize {
        self.inner().num_states()
    }

    fn probabilities(&self) -> &[f64] {
        self.inner().probabilities()
    }

    #[inline]
    fn successor(&self, x: usize, r: usize) -> usize {
        match self {
            Self::Table(t) => t.successor(x, r),
            Self::Hypercube(h) => h.successor(x, r),
        }
    }
}

/// Which reading of the biased-cycle coupling to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CycleVariant {
    /// A fair coin picks the particle that moves; a valid coupling.
    Prose,
    /// Off-diagonal weights doubled; reproduces the published 9×9 Choi
    /// matrix but is not column-stochastic.
    Printed,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Hypercube { n: usize },
    Cycle { n: usize, p: f64, variant: CycleVariant },
    Colorings { q: usize },
    Hardcore { lambda: f64 },
}

/// How a model's coupling is represented.
#[derive(Debug, Clone, PartialEq)]
pub enum CouplingSource {
    Grand(Mapping),
    Matrix(Box<CouplingMatrix>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelInstance {
    pub name: String,
    pub kind: ModelKind,
    pub graph: Option<GraphSpec>,
    num_states: usize,
    // Encoded configurations (base q or 2, first site most significant),
    // ascending.
    configs: Option<Vec<u64>>,
    source: CouplingSource,
    r_labels: Vec<String>,
    stationary: Distribution,
    /// Too many states for exact pair-space work.
    pub mc_only: bool,
}

impl ModelInstance {
    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn stationary(&self) -> &Distribution {
        &self.stationary
    }

    pub fn mapping(&self) -> Option<&Mapping> {
        match &self.source {
            CouplingSource::Grand(m) => Some(m),
            CouplingSource::Matrix(_) => None,
        }
    }

    pub fn randomness_labels(&self) -> &[String] {
        &self.r_labels
    }

    fn site_values(&self, i: usize) -> Vec<usize> {
        match (&self.kind, &self.configs) {
            (ModelKind::Hypercube { n }, _) => (0..*n).map(|k| (i >> (n - 1 - k)) & 1).collect(),
            (ModelKind::Colorings { q }, Some(c)) => decode(c[i], *q, self.sites()),
            (ModelKind::Hardcore { .. }, Some(c)) => decode(c[i], 2, self.sites()),
            _ => vec![i],
        }
    }

    fn sites(&self) -> usize {
        match &self.kind {
            ModelKind::Hypercube { n } => *n,
            _ => self.graph.as_ref().map_or(1, GraphSpec::num_vertices),
        }
    }

    /// Hypercube and hardcore states print as bit strings, colorings as
    /// 1-based colors, cycle states as their position.
    pub fn state_label(&self, i: usize) -> String {
        let vals = self.site_values(i);
        match self.kind {
            ModelKind::Colorings { q } => {
                let parts: Vec<String> = vals.iter().map(|c| (c + 1).to_string()).collect();
                parts.join(if q < 10 { "" } else { "-" })
            }
            ModelKind::Cycle { .. } => i.to_string(),
            _ => vals.iter().map(|b| b.to_string()).collect(),
        }
    }

    pub fn state_labels(&self) -> Vec<String> {
        (0..self.num_states).map(|i| self.state_label(i)).collect()
    }

    /// Index of a configuration given as site values.
    pub fn index_of(&self, values: &[usize]) -> Option<usize> {
        match (&self.kind, &self.configs) {
            (ModelKind::Hypercube { n }, _) if values.len() == *n => {
                Some(values.iter().fold(0, |acc, &b| (acc << 1) | (b & 1)))
            }
            (ModelKind::Colorings { q }, Some(c)) => c.binary_search(&encode(values, *q)).ok(),
            (ModelKind::Hardcore { .. }, Some(c)) => c.binary_search(&encode(values, 2)).ok(),
            (ModelKind::Cycle { n, .. }, _) if values.len() == 1 && values[0] < *n => Some(values[0]),
            _ => None,
        }
    }

    pub fn transition_matrix(&self) -> Result<TransitionMatrix> {
        let p = match &self.source {
            CouplingSource::Grand(m) => coupling::induced_transition_matrix(m, &Guards::default())?,
            CouplingSource::Matrix(c) => c.base().clone(),
        };
        TransitionMatrix::new(self.state_labels(), p.entries().clone())
    }

    /// Grand coupling (exact guard applies) or the stored cycle coupling.
    pub fn coupling_matrix(&self) -> Result<CouplingMatrix> {
        match &self.source {
            CouplingSource::Grand(m) => coupling::grand_coupling_matrix(m),
            CouplingSource::Matrix(c) => Ok((**c).clone()),
        }
    }

    /// Tabulated random mapping representation.
    pub fn rmr(&self) -> Result<RandomMappingRep> {
        match &self.source {
            CouplingSource::Grand(Mapping::Table(t)) => Ok(t.clone()),
            CouplingSource::Grand(m) => {
                let limit = Guards::default().enumeration;
                if self.num_states * self.r_labels.len() > limit {
                    return Err(Error::GuardExceeded {
                        what: "mapping table size",
                        size: self.num_states * self.r_labels.len(),
                        limit,
                        hint: "the mapping is evaluated on the fly instead",
                    });
                }
                RandomMappingRep::from_mapping(m, self.r_labels.clone())
            }
            CouplingSource::Matrix(_) => Err(Error::InvalidArgument(format!("{} has no random mapping representation", self.name))),
        }
    }

    /// Kraus operators of the quantized grand coupling.
    pub fn kraus(&self) -> Result<KrausSet> {
        let m = self.mapping().ok_or_else(|| Error::InvalidArgument(format!("{} is not a grand coupling", self.name)))?;
        let limit = Guards::default().dense_states;
        if self.num_states > limit {
            return Err(Error::GuardExceeded {
                what: "number of states",
                size: self.num_states,
                limit,
                hint: "dense Kraus operators are limited",
            });
        }
        quantize::kraus_from_grand(m, self.r_labels.clone(), &self.stationary)
    }

    /// Contraction rate `c` of the envelope `n·exp(−m·c/n)`.
    pub fn rate_constant(&self) -> Option<f64> {
        match &self.kind {
            ModelKind::Hypercube { .. } => Some(1.0),
            ModelKind::Colorings { q } => Some(c_met(self.graph.as_ref()?.max_degree(), *q)),
            ModelKind::Hardcore { lambda } => Some(c_hardcore(*lambda, self.graph.as_ref()?.max_degree())),
            ModelKind::Cycle { .. } => None,
        }
    }

    /// `n·exp(−m·c/n)` with `n` the number of sites.
    pub fn envelope(&self, m: usize) -> Option<f64> {
        let c = self.rate_constant()?;
        let n = self.sites() as f64;
        Some(n * math::exp(-(m as f64) * c / n))
    }

    fn hamming(&self, a: usize, b: usize) -> usize {
        self.site_values(a).iter().zip(self.site_values(b)).filter(|(x, y)| **x != *y).count()
    }

    /// State 0 against the state farthest from it in Hamming distance,
    /// followed by `extra` seeded random distinct pairs.
    pub fn mc_start_pairs(&self, seed: u64, extra: usize) -> Vec<(usize, usize)> {
        let n = self.num_states;
        if n < 2 {
            return Vec::new();
        }
        let far = match self.kind {
            ModelKind::Hypercube { .. } => n - 1,
            _ => (1..n).max_by_key(|&s| (self.hamming(0, s), core::cmp::Reverse(s))).unwrap_or(1),
        };
        let mut pairs = vec![(0, far)];
        let mut rng = StreamRng::new(seed, u64::MAX);
        while pairs.len() < extra + 1 {
            let x = rng.below(n);
            let y = rng.below(n);
            if x != y {
                pairs.push((x, y));
            }
        }
        pairs
    }
}

/// Number of extra random start pairs in Monte Carlo rate checks.
pub const MC_RANDOM_PAIRS: usize = 7;

fn encode(values: &[usize], base: usize) -> u64 {
    values.iter().fold(0u64, |acc, &v| acc * base as u64 + v as u64)
}

fn decode(mut code: u64, base: usize, len: usize) -> Vec<usize> {
    let mut out = vec![0; len];
    for k in (0..len).rev() {
        out[k] = (code % base as u64) as usize;
        code /= base as u64;
    }
    out
}

/// Largest hypercube dimension supported.
pub const HYPERCUBE_MAX_N: usize = 20;

pub fn hypercube_model(n: usize) -> Result<ModelInstance> {
    if !(1..=HYPERCUBE_MAX_N).contains(&n) {
        return Err(Error::InvalidArgument(format!("hypercube dimension must lie in 1..={HYPERCUBE_MAX_N}, got {n}")));
    }
    let size = 1usize << n;
    let r_labels = (1..=n).flat_map(|i| (0..2).map(move |b| format!("({i},{b})"))).collect();
    Ok(ModelInstance {
        name: format!("hypercube{n}"),
        kind: ModelKind::Hypercube { n },
        graph: None,
        num_states: size,
        configs: None,
        source: CouplingSource::Grand(Mapping::Hypercube(HypercubeWalk::new(n))),
        r_labels,
        stationary: Distribution::uniform(size),
        mc_only: size > Guards::default().exact_states,
    })
}

/// Lazy `(p, 1−p)`-biased walk on `Z_n` with the one-particle-moves
/// coupling.
pub fn cycle_coupling_model(n: usize, p: f64, variant: CycleVariant) -> Result<(TransitionMatrix, CouplingMatrix)> {
    if n < 3 {
        return Err(Error::InvalidArgument(format!("cycle needs n ≥ 3, got {n}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("bias p must lie in [0, 1], got {p}")));
    }
    let q = 1.0 - p;
    let up = |x: usize| (x + 1) % n;
    let down = |x: usize| (x + n - 1) % n;
    let mut pm = Matrix::zeros(n, n);
    for x in 0..n {
        pm[(x, x)] += 0.5;
        pm[(up(x), x)] += p / 2.0;
        pm[(down(x), x)] += q / 2.0;
    }
    let chain = TransitionMatrix::from_matrix(pm)?;
    let f = match variant {
        CycleVariant::Prose => 1.0,
        CycleVariant::Printed => 2.0,
    };
    let columns = (0..n * n)
        .map(|col| {
            let (x, y) = coupling::pair_of(col, n);
            if x == y {
                vec![
                    (pair_index(x, x, n), 0.5),
                    (pair_index(up(x), up(x), n), p / 2.0),
                    (pair_index(down(x), down(x), n), q / 2.0),
                ]
            } else {
                vec![
                    (pair_index(up(x), y, n), f * p / 2.0),
                    (pair_index(down(x), y, n), f * q / 2.0),
                    (pair_index(x, up(y), n), f * p / 2.0),
                    (pair_index(x, down(y), n), f * q / 2.0),
                ]
            }
        })
        .collect();
    let c = CouplingMatrix::from_columns(chain.clone(), columns)?;
    Ok((chain, c))
}

/// Cycle model wrapped as a [`ModelInstance`].
pub fn cycle_model(n: usize, p: f64, variant: CycleVariant) -> Result<ModelInstance> {
    let (_, c) = cycle_coupling_model(n, p, variant)?;
    let suffix = match variant {
        CycleVariant::Prose => "prose",
        CycleVariant::Printed => "printed",
    };
    Ok(ModelInstance {
        name: format!("cycle{n}-{suffix}"),
        kind: ModelKind::Cycle { n, p, variant },
        graph: None,
        num_states: n,
        configs: None,
        source: CouplingSource::Matrix(Box::new(c)),
        r_labels: Vec::new(),
        stationary: Distribution::uniform(n),
        mc_only: false,
    })
}

fn check_enumeration(raw: f64) -> Result<()> {
    let limit = Guards::default().enumeration;
    if raw > limit as f64 {
        return Err(Error::GuardExceeded {
            what: "raw configuration count",
            size: if raw >= usize::MAX as f64 { usize::MAX } else { raw as usize },
            limit,
            hint: "use a smaller graph",
        });
    }
    Ok(())
}

/// Backtracking enumeration in lexicographic order.
fn enumerate(n: usize, base: usize, ok: &dyn Fn(&[usize], usize) -> bool) -> Vec<u64> {
    let mut out = Vec::new();
    let mut vals = vec![0usize; n];
    fn rec(v: usize, vals: &mut Vec<usize>, base: usize, ok: &dyn Fn(&[usize], usize) -> bool, out: &mut Vec<u64>) {
        if v == vals.len() {
            out.push(encode(vals, base));
            return;
        }
        for c in 0..base {
            vals[v] = c;
            if ok(&vals[..=v], v) {
                rec(v + 1, vals, base, ok, out);
            }
        }
    }
    rec(0, &mut vals, base, ok, &mut out);
    out
}

/// Metropolis chain on proper `q`-colorings with its grand coupling.
pub fn colorings_model(g: &GraphSpec, q: usize) -> Result<ModelInstance> {
    let n = g.num_vertices();
    let delta = g.max_degree();
    if q < delta + 2 {
        return Err(Error::InvalidArgument(format!("need q ≥ Δ + 2 = {} for ergodicity, got q = {q}", delta + 2)));
    }
    check_enumeration(math::powi(q as f64, n as i32))?;
    // Partial assignment: only edges into earlier vertices are checked.
    let configs = enumerate(n, q, &|vals, v| g.neighbors(v).iter().filter(|&&w| w < v).all(|&w| vals[w] != vals[v]));
    if configs.is_empty() {
        return Err(Error::InvalidArgument("graph has no proper coloring".into()));
    }
    let num_states = configs.len();
    let k = n * q;
    let mut table = Vec::with_capacity(num_states);
    for &code in &configs {
        let x = decode(code, q, n);
        let row = (0..k)
            .map(|r| {
                let (v, color) = (r / q, r % q);
                if g.neighbors(v).iter().any(|&w| x[w] == color) {
                    return code_index(&configs, code);
                }
                let mut y = x.clone();
                y[v] = color;
                code_index(&configs, encode(&y, q))
            })
            .collect();
        table.push(row);
    }
    let r_labels: Vec<String> = (0..k).map(|r| format!("({},{})", r / q, r % q + 1)).collect();
    let rmr = RandomMappingRep::new(num_states, r_labels.clone(), vec![1.0 / k as f64; k], table)?;
    Ok(ModelInstance {
        name: format!("colorings-{}-q{q}", g.label()),
        kind: ModelKind::Colorings { q },
        graph: Some(g.clone()),
        num_states,
        configs: Some(configs),
        source: CouplingSource::Grand(Mapping::Table(rmr)),
        r_labels,
        stationary: Distribution::uniform(num_states),
        mc_only: num_states > Guards::default().exact_states,
    })
}

fn code_index(configs: &[u64], code: u64) -> usize {
    configs.binary_search(&code).expect("update keeps the configuration proper")
}

/// Hardcore Glauber dynamics with fugacity `λ` and its grand coupling.
/// Outcomes are ordered `(v, H), (v, T)` per vertex.
pub fn hardcore_model(g: &GraphSpec, lambda: f64) -> Result<ModelInstance> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("fugacity must be positive, got {lambda}")));
    }
    let n = g.num_vertices();
    check_enumeration(math::powi(2.0, n as i32))?;
    let configs = enumerate(n, 2, &|vals, v| vals[v] == 0 || g.neighbors(v).iter().filter(|&&w| w < v).all(|&w| vals[w] == 0));
    let num_states = configs.len();
    let heads = lambda / (n as f64 * (1.0 + lambda));
    let tails = 1.0 / (n as f64 * (1.0 + lambda));
    let mut table = Vec::with_capacity(num_states);
    let mut weights = Vec::with_capacity(num_states);
    for &code in &configs {
        let x = decode(code, 2, n);
        weights.push(math::powi(lambda, x.iter().sum::<usize>() as i32));
        let mut row = Vec::with_capacity(2 * n);
        for v in 0..n {
            let free = g.neighbors(v).iter().all(|&w| x[w] == 0);
            let mut h = x.clone();
            if free {
                h[v] = 1;
            }
            let mut t = x.clone();
            t[v] = 0;
            row.push(code_index(&configs, encode(&h, 2)));
            row.push(code_index(&configs, encode(&t, 2)));
        }
        table.push(row);
    }
    let r_labels: Vec<String> = (0..n).flat_map(|v| [format!("({v},H)"), format!("({v},T)")]).collect();
    let probs = (0..2 * n).map(|r| if r % 2 == 0 { heads } else { tails }).collect();
    let rmr = RandomMappingRep::new(num_states, r_labels.clone(), probs, table)?;
    Ok(ModelInstance {
        name: format!("hardcore-{}-l{lambda}", g.label()),
        kind: ModelKind::Hardcore { lambda },
        graph: Some(g.clone()),
        num_states,
        configs: Some(configs),
        source: CouplingSource::Grand(Mapping::Table(rmr)),
        r_labels,
        stationary: Distribution::from_weights(&weights)?,
        mc_only: num_states > Guards::default().exact_states,
    })
}

/// Recoloring maps `T_(v,k)` on all `q^n` configurations: identity on
/// improper colorings and on disallowed moves. Returns `(labels, images)`
/// with `images[r][x]` the image of configuration `x`.
pub fn colorings_full_space_maps(g: &GraphSpec, q: usize) -> Result<(Vec<String>, Vec<Vec<usize>>)> {
    let n = g.num_vertices();
    check_enumeration(math::powi(q as f64, n as i32))?;
    let total = q.pow(n as u32);
    let proper = |x: &[usize]| g.edges().iter().all(|&(a, b)| x[a] != x[b]);
    let mut labels = Vec::new();
    let mut images = Vec::new();
    for v in 0..n {
        for k in 0..q {
            labels.push(format!("({},{})", v, k + 1));
            let img = (0..total)
                .map(|code| {
                    let x = decode(code as u64, q, n);
                    if !proper(&x) || g.neighbors(v).iter().any(|&w| x[w] == k) {
                        code
                    } else {
                        let mut y = x;
                        y[v] = k;
                        encode(&y, q) as usize
                    }
                })
                .collect();
            images.push(img);
        }
    }
    Ok((labels, images))
}

/// Largest preimage count of any full-space recoloring map (row sparsity).
pub fn full_space_max_preimages(images: &[Vec<usize>]) -> usize {
    images
        .iter()
        .map(|img| {
            let mut counts = vec![0usize; img.len()];
            img.iter().for_each(|&y| counts[y] += 1);
            counts.into_iter().max().unwrap_or(0)
        })
        .max()
        .unwrap_or(0)
}

/// Published Choi matrix of the `n = 3`, `p = 1/2` cycle coupling, basis
/// factor first.
pub const PRINTED_CHOI_N3: [[f64; 9]; 9] = [
    [0.5, 0.0, 0.0, 0.5, 0.0, 0.5, 0.5, 0.5, 0.0],
    [0.0, 0.25, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.5],
    [0.0, 0.0, 0.25, 0.0, 0.5, 0.0, 0.0, 0.0, 0.5],
    [0.5, 0.0, 0.0, 0.25, 0.0, 0.0, 0.0, 0.0, 0.5],
    [0.0, 0.5, 0.5, 0.0, 0.5, 0.0, 0.5, 0.5, 0.0],
    [0.5, 0.0, 0.0, 0.0, 0.0, 0.25, 0.0, 0.0, 0.5],
    [0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.25, 0.0, 0.0],
    [0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.25, 0.0],
    [0.0, 0.5, 0.5, 0.5, 0.0, 0.5, 0.0, 0.0, 0.5],
];

/// Its published eigenvalues, two digits.
pub const PRINTED_EIGENVALUES: [f64; 9] = [-1.04, -0.34, -0.34, 0.25, 0.25, 0.25, 1.09, 1.09, 1.79];

#[derive(Debug, Clone, PartialEq)]
pub enum RateMode {
    Exact,
    MonteCarlo { samples: u64, seed: u64 },
}

/// Minimum sample count for Monte Carlo rate checks.
pub const MC_MIN_SAMPLES: u64 = 1000;

/// Tails against `n·exp(−m·c/n)`, computing the report sequentially.
pub fn contraction_rate_check(model: &ModelInstance, m_grid: &[usize], mode: &RateMode) -> Result<CheckResult> {
    if m_grid.is_empty() {
        return Err(Error::InvalidArgument("m grid must be non-empty".into()));
    }
    let report = match mode {
        RateMode::Exact => {
            let c = model.coupling_matrix()?;
            coupling::coalescence_tail_exact(&c, m_grid.iter().copied().max().unwrap_or(0))?
        }
        RateMode::MonteCarlo { samples, seed } => {
            if *samples < MC_MIN_SAMPLES {
                return Err(Error::InvalidArgument(format!("Monte Carlo rate checks need at least {MC_MIN_SAMPLES} samples, got {samples}")));
            }
            let m = model.mapping().ok_or_else(|| Error::InvalidArgument(format!("{} has no random mapping", model.name)))?;
            let pairs = model.mc_start_pairs(*seed, MC_RANDOM_PAIRS);
            coupling::coalescence_tail_mc(m, &pairs, m_grid, *samples, *seed)?
        }
    };
    contraction_rate_check_report(model, &report, m_grid)
}

/// Compares an existing report with the model envelope at each grid
/// point. Exact tails allow `1e-10`; Monte Carlo tails allow
/// `max(3σ̂, 3/samples)` of the worst pair.
pub fn contraction_rate_check_report(model: &ModelInstance, report: &CoalescenceReport, m_grid: &[usize]) -> Result<CheckResult> {
    let c = model.rate_constant().ok_or_else(|| Error::InvalidArgument(format!("{} has no contraction rate", model.name)))?;
    if c <= 0.0 {
        return Ok(CheckResult::at_most("contraction envelope", 0.0, 0.0, 0.0, "Pr{X_m^x ≠ X_m^y} ≤ n·exp(−m·c/n)")
            .with_detail(format!("vacuous: rate constant c = {c} ≤ 0")));
    }
    let mut worst: Option<(usize, f64, f64, f64)> = None;
    let mut failed = 0;
    for &m in m_grid {
        let k = report.m_grid.iter().position(|&g| g == m).ok_or_else(|| Error::InvalidArgument(format!("report has no tail at m = {m}")))?;
        let tail = report.tail_max[k];
        let env = model.envelope(m).unwrap_or(f64::INFINITY);
        let tol = match report.mode {
            TailMode::Exact => COMPUTED_TOL,
            TailMode::MonteCarlo { samples, .. } => {
                let s = samples as f64;
                (3.0 * math::sqrt(tail * (1.0 - tail) / s)).max(3.0 / s)
            }
        };
        if tail > env + tol {
            failed += 1;
        }
        let gap = tail - env - tol;
        if worst.is_none_or(|w| gap > w.1 - w.2 - w.3) {
            worst = Some((m, tail, env, tol));
        }
    }
    let (m, tail, env, tol) = worst.unwrap_or((0, 0.0, 0.0, 0.0));
    let mut r = CheckResult::at_most("contraction envelope", tail, env, tol, "Pr{X_m^x ≠ X_m^y} ≤ n·exp(−m·c/n)")
        .with_detail(format!("c = {c:.6}, tightest at m = {m}, {failed} violations"));
    r.pass = failed == 0;
    Ok(r)
}
