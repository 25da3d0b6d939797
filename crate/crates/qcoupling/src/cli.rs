//! Command-line front end.
//!
//! Every subcommand writes its artifacts plus a JSON summary into the
//! output directory and maps the outcome to an exit code: 0 when every
//! check passes, 1 when a check fails, 2 for invalid input, 3 when a size
//! guard is exceeded.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use qcoupling_core::chain::{mixing_report, stationary_distribution, validate_chain, Distribution, TransitionMatrix};
use qcoupling_core::check::CheckResult;
use qcoupling_core::coupling::{
    self, check_coupling_inequality, check_diagonal_block, check_tail_submultiplicativity, exact_coupling_time,
    exact_tails, grand_coupling_matrix_with, independent_coupling, validate_coupling, CoalescenceReport,
    CouplingMatrix, RandomMapping,
};
use qcoupling_core::dilation::{
    amplify_and_extract, branch_decomposition, build_dilation_with, channel_equality_check, channel_via_dilation,
    exact_iterations, predicted_fidelity, state_decomposition_check, DilationMode, DEFECT_TOL, UNITARY_TOL,
};
use qcoupling_core::evolve::{
    coalescence_trace_identity_check, evolve_trace, expanding_projector_check, fixed_point_stability_check,
    gentle_measurement_step_check, laplacian_preservation_check, main_theorem_check, qperp_bound_check, qsample,
    random_density_matrix, random_unit_vector, reducing_projector_check, rescaled_qperp_decomposition_check,
    DensityMatrix, Qsample,
};
use qcoupling_core::linalg::Matrix;
use qcoupling_core::models::{
    colorings_model, contraction_rate_check_report, cycle_model, hardcore_model, hypercube_model, CycleVariant,
    GraphSpec, ModelInstance, ModelKind, MC_RANDOM_PAIRS,
};
use qcoupling_core::quantize::{
    c_star_matches_coupling, c_star_unchecked, choi_matrix, duality_check, fixed_point_check, kraus_from_grand,
    quantized_coupling, superop_from_kraus, trace_preservation_check, unitality_check, Channel, FactorOrder, KrausSet,

};
use qcoupling_core::rng::StreamRng;
use qcoupling_core::{Error as CoreError, Guards, COMPUTED_TOL};

use crate::error::{CliError, Result, EXIT_CHECK_FAILED, EXIT_INVALID_INPUT, EXIT_OK};
use crate::formats::{self, CouplingInput};
use crate::mc::coalescence_tail_mc_parallel;
use crate::output::OutputDir;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    Model,
    Validate,
    Quantize,
    Coalesce,
    Evolve,
    Verify,
    Dilate,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Model => "model",
            Self::Validate => "validate",
            Self::Quantize => "quantize",
            Self::Coalesce => "coalesce",
            Self::Evolve => "evolve",
            Self::Verify => "verify",
            Self::Dilate => "dilate",
        }
    }
}

/// Size caps; unset values fall back to the library defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct GuardConfig {
    /// Largest state count for exact pair-space computations
    #[arg(long = "max-exact-states")]
    pub exact_states: Option<usize>,
    /// Largest simulated dilation dimension κ·2d
    #[arg(long = "max-dilation-dim")]
    pub dilation_dim: Option<usize>,
}

/// Flags shared by all subcommands. A `--config` JSON file uses the same
/// kebab-case keys plus `command`; flags given on the command line win.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct RunConfig {
    #[arg(skip)]
    pub command: Option<CommandKind>,
    /// Bundled model: hypercube<n>, cycle<n>-printed|prose, colorings-<G>-q<q>, hardcore-<G>-l<λ>
    /// with G one of K<n>, P<n>, C<n>, E<n>
    #[arg(long)]
    pub model: Option<String>,
    /// Chain JSON file
    #[arg(long)]
    pub chain: Option<PathBuf>,
    /// Coupling JSON file (dense or random mapping)
    #[arg(long)]
    pub coupling: Option<PathBuf>,
    /// Step-up probability p of the biased cycle
    #[arg(long)]
    pub bias: Option<f64>,
    /// Largest step count reported
    #[arg(long)]
    pub m_max: Option<usize>,
    /// Accuracy targets ε, comma separated
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    /// Use Monte Carlo coalescence instead of exact pair-space tails
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub mc: Option<bool>,
    /// Monte Carlo trajectories per start pair
    #[arg(long)]
    pub samples: Option<u64>,
    /// Seed for every random stream
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for Monte Carlo (does not change results)
    #[arg(long)]
    pub workers: Option<usize>,
    /// Choi factor order: map-first or basis-first
    #[arg(long)]
    pub order: Option<String>,
    /// Initial state: basis:<i>, mixed or random:<stream>
    #[arg(long)]
    pub rho: Option<String>,
    /// Random input states per dilation check
    #[arg(long)]
    pub inputs: Option<usize>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Add one tail column per start pair to coalescence CSVs
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub per_pair: Option<bool>,
    #[command(flatten)]
    pub guards: GuardConfig,
}

impl RunConfig {
    /// Fields set here win over `base`.
    pub fn merged_over(self, base: RunConfig) -> RunConfig {
        RunConfig {
            command: self.command.or(base.command),
            model: self.model.or(base.model),
            chain: self.chain.or(base.chain),
            coupling: self.coupling.or(base.coupling),
            bias: self.bias.or(base.bias),
            m_max: self.m_max.or(base.m_max),
            eps: self.eps.or(base.eps),
            mc: self.mc.or(base.mc),
            samples: self.samples.or(base.samples),
            seed: self.seed.or(base.seed),
            workers: self.workers.or(base.workers),
            order: self.order.or(base.order),
            rho: self.rho.or(base.rho),
            inputs: self.inputs.or(base.inputs),
            out: self.out.or(base.out),
            per_pair: self.per_pair.or(base.per_pair),
            guards: GuardConfig {
                exact_states: self.guards.exact_states.or(base.guards.exact_states),
                dilation_dim: self.guards.dilation_dim.or(base.guards.dilation_dim),
            },
        }
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = formats::read_text(path)?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::format(path.display().to_string(), format!("line {}, column {}: {e}", e.line(), e.column())))
    }
}

#[derive(Debug, Parser)]
#[command(name = "qcoupling", version, about = "Build, quantize and verify Markov chain couplings")]
pub struct Cli {
    /// JSON file supplying defaults for any flag
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Option<Cmd>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Write a bundled model's chain and coupling files
    Model(RunConfig),
    /// Check chain ergodicity and coupling conditions
    Validate(RunConfig),
    /// Build the quantized map, its Choi matrix and Kraus operators
    Quantize(RunConfig),
    /// Coalescence tails and the coupling time
    Coalesce(RunConfig),
    /// Evolve a density matrix and trace its distance to the qsample
    Evolve(RunConfig),
    /// Run every exact identity and bound check, plus the model rate envelope
    Verify(RunConfig),
    /// Simulate the channel through block-encodings
    Dilate(RunConfig),
}

impl Cmd {
    fn split(self) -> (CommandKind, RunConfig) {
        match self {
            Self::Model(c) => (CommandKind::Model, c),
            Self::Validate(c) => (CommandKind::Validate, c),
            Self::Quantize(c) => (CommandKind::Quantize, c),
            Self::Coalesce(c) => (CommandKind::Coalesce, c),
            Self::Evolve(c) => (CommandKind::Evolve, c),
            Self::Verify(c) => (CommandKind::Verify, c),
            Self::Dilate(c) => (CommandKind::Dilate, c),
        }
    }
}

/// Parses arguments, merges the optional config file and runs.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let mut config = match cli.command {
        Some(cmd) => {
            let (kind, mut c) = cmd.split();
            c.command = Some(kind);
            c
        }
        None => RunConfig::default(),
    };
    if let Some(path) = &cli.config {
        match RunConfig::load(path) {
            Ok(file) => config = config.merged_over(file),
            Err(e) => {
                eprintln!("error: {e}");
                return e.exit_code();
            }
        }
    }
    run(&config)
}

/// Runs one configuration, printing check lines to stdout and
/// diagnostics to stderr.
pub fn run(config: &RunConfig) -> i32 {
    match execute(config) {
        Ok(outcome) => {
            for c in &outcome.checks {
                println!("{} {}: {} vs {} (tol {}) {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.lhs, c.rhs, c.tolerance, c.detail);
            }
            println!("summary: {}", outcome.summary_path.display());
            outcome.exit_code
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Result of a successful run.
#[derive(Debug)]
pub struct Outcome {
    pub exit_code: i32,
    pub checks: Vec<CheckResult>,
    pub summary: Value,
    pub summary_path: PathBuf,
    /// Every file written, summary last.
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
struct Params {
    seed: u64,
    samples: u64,
    workers: usize,
    mc: bool,
    eps: Vec<f64>,
    inputs: usize,
    order: FactorOrder,
    per_pair: bool,
    guards: Guards,
}

impl Params {
    fn from_config(c: &RunConfig) -> Result<Self> {
        let mut guards = Guards::default();
        if let Some(g) = c.guards.exact_states {
            guards.exact_states = g;
        }
        if let Some(g) = c.guards.dilation_dim {
            guards.dilation_dim = g;
        }
        if guards.exact_states == 0 || guards.dilation_dim == 0 {
            return Err(CliError::Usage("guards must be positive".into()));
        }
        let eps = c.eps.clone().unwrap_or_else(|| vec![0.25, 0.04, 0.01]);
        if let Some(e) = eps.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
            return Err(CliError::Usage(format!("eps values must lie in (0, 1), got {e}")));
        }
        let order = match c.order.as_deref() {
            None => FactorOrder::BasisFirst,
            Some(s) => formats::parse_order(s).ok_or_else(|| CliError::Usage(format!("unknown order '{s}' (map-first or basis-first)")))?,
        };
        let p = Params {
            seed: c.seed.unwrap_or(1),
            samples: c.samples.unwrap_or(10_000),
            workers: c.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
            mc: c.mc.unwrap_or(false),
            eps,
            inputs: c.inputs.unwrap_or(20),
            order,
            per_pair: c.per_pair.unwrap_or(false),
            guards,
        };
        if p.samples == 0 || p.workers == 0 || p.inputs == 0 {
            return Err(CliError::Usage("samples, workers and inputs must be positive".into()));
        }
        Ok(p)
    }
}

fn parse_number(s: &str) -> Option<f64> {
    match s.split_once('/') {
        Some((a, b)) => Some(a.parse::<f64>().ok()? / b.parse::<f64>().ok()?),
        None => s.parse().ok(),
    }
}

/// Resolves a bundled model name.
pub fn parse_model(name: &str, bias: f64) -> Result<ModelInstance> {
    let bad = || {
        CliError::Usage(format!(
            "unknown model '{name}'; expected hypercube<n>, cycle<n>-printed|prose, colorings-<G>-q<q> or hardcore-<G>-l<λ>"
        ))
    };
    let mut m = if let Some(n) = name.strip_prefix("hypercube") {
        hypercube_model(n.parse().map_err(|_| bad())?)?
    } else if let Some(rest) = name.strip_prefix("cycle") {
        let (n, variant) = rest.split_once('-').ok_or_else(bad)?;
        let variant = match variant {
            "printed" => CycleVariant::Printed,
            "prose" => CycleVariant::Prose,
            _ => return Err(bad()),
        };
        cycle_model(n.parse().map_err(|_| bad())?, bias, variant)?
    } else if let Some(rest) = name.strip_prefix("colorings-") {
        let (g, q) = rest.rsplit_once("-q").ok_or_else(bad)?;
        colorings_model(&GraphSpec::parse(g)?, q.parse().map_err(|_| bad())?)?
    } else if let Some(rest) = name.strip_prefix("hardcore-") {
        let (g, l) = rest.rsplit_once("-l").ok_or_else(bad)?;
        hardcore_model(&GraphSpec::parse(g)?, parse_number(l).ok_or_else(bad)?)?
    } else {
        return Err(bad());
    };
    m.name = name.to_string();
    Ok(m)
}

/// What a command operates on: a bundled model or files.
struct Subject {
    name: String,
    model: Option<ModelInstance>,
    chain: Option<TransitionMatrix>,
    coupling: Option<CouplingInput>,
}

impl Subject {
    fn from_config(c: &RunConfig) -> Result<Self> {
        if let Some(name) = &c.model {
            if c.chain.is_some() || c.coupling.is_some() {
                return Err(CliError::Usage("--model cannot be combined with --chain or --coupling".into()));
            }
            let model = parse_model(name, c.bias.unwrap_or(0.5))?;
            return Ok(Subject { name: name.clone(), model: Some(model), chain: None, coupling: None });
        }
        let chain = c.chain.as_deref().map(formats::read_chain).transpose()?;
        let coupling = c.coupling.as_deref().map(formats::read_coupling).transpose()?;
        let stem = c.coupling.as_deref().or(c.chain.as_deref()).and_then(|p| p.file_stem()).map(|s| s.to_string_lossy().into_owned());
        let name = stem.ok_or_else(|| CliError::Usage("give --model, or --chain and/or --coupling".into()))?;
        if let (Some(p), Some(cin)) = (&chain, &coupling) {
            let n = match cin {
                CouplingInput::Dense(c) => c.num_states(),
                CouplingInput::Rmr { rmr, .. } => rmr.num_states(),
            };
            if n != p.num_states() {
                return Err(CliError::Usage(format!("chain has {} states but coupling has {n}", p.num_states())));
            }
        }
        Ok(Subject { name, model: None, chain, coupling })
    }

    fn num_states(&self) -> usize {
        match (&self.model, &self.coupling, &self.chain) {
            (Some(m), _, _) => m.num_states(),
            (_, Some(CouplingInput::Dense(c)), _) => c.num_states(),
            (_, Some(CouplingInput::Rmr { rmr, .. }), _) => rmr.num_states(),
            (_, _, Some(p)) => p.num_states(),
            _ => 0,
        }
    }

    fn mapping(&self) -> Option<&dyn RandomMapping> {
        match (&self.model, &self.coupling) {
            (Some(m), _) => m.mapping().map(|m| m as &dyn RandomMapping),
            (_, Some(CouplingInput::Rmr { rmr, .. })) => Some(rmr),
            _ => None,
        }
    }

    fn chain(&self) -> Result<TransitionMatrix> {
        if let Some(m) = &self.model {
            return Ok(m.transition_matrix()?);
        }
        if let Some(p) = &self.chain {
            return Ok(p.clone());
        }
        match &self.coupling {
            Some(CouplingInput::Dense(c)) => Ok(c.base().clone()),
            Some(CouplingInput::Rmr { labels, rmr }) => Ok(TransitionMatrix::new(labels.clone(), rmr.transition_matrix()?.entries().clone())?),
            None => Err(CliError::Usage("no chain given".into())),
        }
    }

    /// Model coupling, file coupling, or the independent coupling of a
    /// bare chain.
    fn coupling(&self, guards: &Guards) -> Result<(CouplingMatrix, &'static str)> {
        if let Some(m) = &self.model {
            return Ok(match m.mapping() {
                Some(map) => (grand_coupling_matrix_with(map, guards)?, "grand"),
                None => (m.coupling_matrix()?, "explicit"),
            });
        }
        match &self.coupling {
            Some(CouplingInput::Dense(c)) => Ok((c.clone(), "explicit")),
            Some(CouplingInput::Rmr { rmr, .. }) => Ok((grand_coupling_matrix_with(rmr, guards)?, "grand")),
            None => Ok((independent_coupling(&self.chain()?)?, "independent")),
        }
    }

    fn stationary(&self) -> Result<Distribution> {
        match &self.model {
            Some(m) => Ok(m.stationary().clone()),
            None => Ok(stationary_distribution(&self.chain()?)?),
        }
    }

    fn kraus(&self) -> Result<KrausSet> {
        if let Some(m) = &self.model {
            return Ok(m.kraus()?);
        }
        match &self.coupling {
            Some(CouplingInput::Rmr { rmr, .. }) => Ok(kraus_from_grand(rmr, rmr.labels().to_vec(), &self.stationary()?)?),
            _ => Err(CliError::Usage("Kraus operators need a random mapping (a bundled grand-coupling model or an rmr coupling file)".into())),
        }
    }

    fn start_pairs(&self, seed: u64) -> Vec<(usize, usize)> {
        if let Some(m) = &self.model {
            return m.mc_start_pairs(seed, MC_RANDOM_PAIRS);
        }
        let n = self.num_states();
        let mut pairs = vec![(0, n - 1)];
        let mut rng = StreamRng::new(seed, u64::MAX);
        while n > 1 && pairs.len() < MC_RANDOM_PAIRS + 1 {
            let (x, y) = (rng.below(n), rng.below(n));
            if x != y {
                pairs.push((x, y));
            }
        }
        pairs
    }

    fn sites(&self) -> Option<usize> {
        let m = self.model.as_ref()?;
        match m.kind {
            ModelKind::Hypercube { n } => Some(n),
            ModelKind::Cycle { .. } => None,
            _ => m.graph.as_ref().map(GraphSpec::num_vertices),
        }
    }

    fn default_m_max(&self) -> usize {
        match self.sites() {
            Some(n) => {
                let n = n as f64;
                (2.0 * (n * (n.ln() + 2.0)).ceil()).max(40.0) as usize
            }
            None => 40,
        }
    }
}

struct Session {
    command: CommandKind,
    name: String,
    params: Params,
    mode: &'static str,
    out: OutputDir,
    checks: Vec<CheckResult>,
    data: Map<String, Value>,
    notes: Vec<String>,
}

impl Session {
    fn meta(&self) -> Vec<(&'static str, String)> {
        vec![
            ("model", self.name.clone()),
            ("seed", self.params.seed.to_string()),
            ("samples", self.params.samples.to_string()),
            ("mode", self.mode.to_string()),
        ]
    }

    /// Records a check. Library errors other than guards become a failed
    /// check; guard errors abort the run.
    fn check(&mut self, name: &str, r: qcoupling_core::Result<CheckResult>) -> Result<bool> {
        let c = match r {
            Ok(mut c) => {
                c.name = name.into();
                c
            }
            Err(e) if e.is_guard() => return Err(e.into()),
            Err(e) => CheckResult {
                name: name.into(),
                lhs: f64::NAN,
                rhs: f64::NAN,
                tolerance: 0.0,
                pass: false,
                bound: String::new(),
                detail: format!("error: {e}"),
            },
        };
        let pass = c.pass;
        self.checks.push(c);
        Ok(pass)
    }

    fn check_all(&mut self, name: &str, results: Vec<qcoupling_core::Result<CheckResult>>) -> Result<bool> {
        let mut collected = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok(c) => collected.push(c),
                Err(e) => return self.check(name, Err(e)),
            }
        }
        match CheckResult::combine(name, collected) {
            Some(c) => self.check(name, Ok(c)),
            None => Ok(true),
        }
    }

    fn data(&mut self, key: &str, v: impl Into<Value>) {
        self.data.insert(key.into(), v.into());
    }

    fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }

    fn finish(mut self) -> Result<Outcome> {
        let all_pass = self.checks.iter().all(|c| c.pass);
        let summary = json!({
            "command": self.command.name(),
            "model": self.name,
            "seed": self.params.seed,
            "samples": self.params.samples,
            "mode": self.mode,
            "all_pass": all_pass,
            "checks": self.checks.iter().map(formats::check_to_json).collect::<Vec<_>>(),
            "data": Value::Object(self.data),
            "notes": self.notes,
            "files": self.out.files(),
        });
        let text = formats::pretty(&summary);
        let kind = format!("{}-summary", self.command.name());
        let summary_path = self.out.write(&kind, "json", &text)?;
        let files = self.out.files().iter().map(|f| self.out.dir().join(f)).collect();
        Ok(Outcome {
            exit_code: if all_pass { EXIT_OK } else { EXIT_CHECK_FAILED },
            checks: self.checks,
            summary,
            summary_path,
            files,
        })
    }
}

fn flag(name: &str, ok: bool, bound: &str, detail: impl Into<String>) -> CheckResult {
    CheckResult::residual(name, if ok { 0.0 } else { 1.0 }, 0.0, bound).with_detail(detail)
}

/// Runs one configuration and returns the outcome without printing.
pub fn execute(config: &RunConfig) -> Result<Outcome> {
    let command = config.command.ok_or_else(|| CliError::Usage("no subcommand given".into()))?;
    let params = Params::from_config(config)?;
    let subject = Subject::from_config(config)?;
    let out_dir = config.out.clone().unwrap_or_else(|| PathBuf::from("qcoupling-out"));
    let out = OutputDir::create(&out_dir, &subject.name, params.seed)?;
    let mode = if params.mc { "monte-carlo" } else { "exact" };
    let mut s = Session { command, name: subject.name.clone(), params, mode, out, checks: Vec::new(), data: Map::new(), notes: Vec::new() };
    s.data("num_states", subject.num_states());
    match command {
        CommandKind::Model => cmd_model(&mut s, &subject)?,
        CommandKind::Validate => cmd_validate(&mut s, &subject)?,
        CommandKind::Quantize => cmd_quantize(&mut s, &subject)?,
        CommandKind::Coalesce => cmd_coalesce(&mut s, &subject, config.m_max)?,
        CommandKind::Evolve => cmd_evolve(&mut s, &subject, config.m_max, config.rho.as_deref())?,
        CommandKind::Verify => cmd_verify(&mut s, &subject)?,
        CommandKind::Dilate => cmd_dilate(&mut s, &subject)?,
    }
    s.finish()
}

fn cmd_model(s: &mut Session, subj: &Subject) -> Result<()> {
    let m = subj.model.as_ref().ok_or_else(|| CliError::Usage("model needs --model".into()))?;
    s.data("mc_only", m.mc_only);
    s.data("rate_constant", m.rate_constant().map(formats::num));
    s.data("min_stationary_weight", m.stationary().min_weight());
    if m.num_states() <= s.params.guards.dense_states {
        let json = formats::chain_to_json(&m.transition_matrix()?);
        s.out.write("chain", "json", &json)?;
    } else {
        s.note(format!("chain JSON skipped: {} states exceed the dense guard {}", m.num_states(), s.params.guards.dense_states));
    }
    let coupling = match m.mapping() {
        Some(_) => formats::rmr_to_json(&m.state_labels(), &m.rmr()?),
        None => formats::coupling_dense_to_json(&m.coupling_matrix()?),
    };
    s.out.write("coupling", "json", &coupling)?;
    Ok(())
}

/// Strong connectivity and period of the successor graph of a mapping.
fn mapping_structure(map: &dyn RandomMapping) -> (bool, usize) {
    let n = map.num_states();
    let probs = map.probabilities();
    let mut fwd = vec![Vec::new(); n];
    let mut rev = vec![Vec::new(); n];
    #[allow(clippy::needless_range_loop)]
    for x in 0..n {
        for (r, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                let y = map.successor(x, r);
                fwd[x].push(y);
                rev[y].push(x);
            }
        }
    }
    let bfs = |adj: &[Vec<usize>]| {
        let mut level = vec![usize::MAX; n];
        let mut queue = std::collections::VecDeque::from([0usize]);
        level[0] = 0;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if level[v] == usize::MAX {
                    level[v] = level[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        level
    };
    let level = bfs(&fwd);
    let irreducible = level.iter().all(|&l| l != usize::MAX) && bfs(&rev).iter().all(|&l| l != usize::MAX);
    let mut period = 0usize;
    for (u, succ) in fwd.iter().enumerate() {
        for &v in succ {
            if level[u] != usize::MAX && level[v] != usize::MAX {
                period = gcd(period, (level[u] + 1).abs_diff(level[v]));
            }
        }
    }
    (irreducible, period)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn cmd_validate(s: &mut Session, subj: &Subject) -> Result<()> {
    if let Some(map) = subj.mapping() {
        let (irreducible, period) = mapping_structure(map);
        s.check("irreducible", Ok(flag("", irreducible, "successor graph strongly connected", "")))?;
        s.check("aperiodic", Ok(flag("", period == 1, "gcd of cycle lengths = 1", format!("period {period}"))))?;
        let pi = subj.stationary();
        if let Ok(pi) = pi {
            let w = pi.weights();
            let mut next = vec![0.0; w.len()];
            for (x, &wx) in w.iter().enumerate() {
                for (r, &p) in map.probabilities().iter().enumerate() {
                    next[map.successor(x, r)] += wx * p;
                }
            }
            let r = next.iter().zip(w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            s.check("stationary distribution", Ok(CheckResult::residual("", r, COMPUTED_TOL, "πP = π")))?;
        }
        if let (Some(p), Some(CouplingInput::Rmr { rmr, .. })) = (&subj.chain, &subj.coupling) {
            s.check("mapping induces chain", rmr.deviation_from(p).map(|d| CheckResult::residual("", d, COMPUTED_TOL, "Σ_r Pr(r)·1[f(x,r)=y] = P[y][x]")))?;
        }
    } else {
        let rep = validate_chain(&subj.chain()?);
        s.check("column-stochastic", Ok(flag("", rep.stochastic_violations.is_empty(), "P ≥ 0, Σ_i P[i][j] = 1", format!("{} violations", rep.stochastic_violations.len()))))?;
        s.check("irreducible", Ok(flag("", rep.irreducible, "P irreducible", "")))?;
        s.check("aperiodic", Ok(flag("", rep.aperiodic, "P aperiodic", format!("period {:?}", rep.period))))?;
    }
    if subj.model.is_none() && subj.coupling.is_none() {
        return Ok(());
    }
    if subj.num_states() > s.params.guards.exact_states && subj.mapping().is_some() {
        s.note("pair-space conditions not enumerated: the state count exceeds the exact guard; grand couplings satisfy them by construction");
        return Ok(());
    }
    let (c, kind) = subj.coupling(&s.params.guards)?;
    s.data("coupling_kind", kind);
    let v = validate_coupling(&c);
    for r in &v.conditions {
        let name = format!("coupling condition {:?}", r.condition);
        let detail = match r.worst {
            Some(w) => format!("{} violations, worst {:e} at column {:?} row {:?}", r.count, w.magnitude, w.col, w.row),
            None => String::new(),
        };
        s.check(&name, Ok(flag("", r.holds(), "coupling definition", detail)))?;
    }
    s.data("coupling_valid", v.valid);
    Ok(())
}

fn cmd_quantize(s: &mut Session, subj: &Subject) -> Result<()> {
    let (c, kind) = subj.coupling(&s.params.guards)?;
    s.data("coupling_kind", kind);
    let star = c_star_unchecked(&c)?;
    let j = choi_matrix(&star, s.params.order);
    let ev = j.eigenvalues()?.to_vec();
    let cp = ev[0] >= -j.cp_tolerance();
    s.data("order", formats::order_name(s.params.order));
    s.data("min_choi_eigenvalue", ev[0]);
    s.data("eigenvalue_sum", ev.iter().sum::<f64>());
    s.data("cp_tolerance", j.cp_tolerance());
    s.data("cp", cp);
    s.data("eigenvalues", ev.clone());
    s.out.write("choi", "json", &formats::choi_to_json(&j, Some(&ev), Some(cp)))?;
    s.out.write("choi", "csv", &formats::choi_to_csv(&j))?;
    let valid = validate_coupling(&c).valid;
    s.data("coupling_valid", valid);
    s.check("C* matches coupling", Ok(c_star_matches_coupling(&c, &star)))?;
    if !valid {
        s.note("coupling is invalid: T, T* and trace preservation are not built");
        return Ok(());
    }
    let pi = subj.stationary()?;
    let (t, t_star) = quantized_coupling(&c, &pi)?;
    s.check("trace preservation", Ok(trace_preservation_check(&t)))?;
    s.check("unitality of T*", unitality_check(&t_star))?;
    s.check("fixed point T(Q) = Q", fixed_point_check(&t, &pi))?;
    let n = c.num_states();
    let pairs: Vec<(Matrix, Matrix)> =
        (0..5).map(|k| (random_density_matrix(n, s.params.seed, 2 * k).into_matrix(), random_density_matrix(n, s.params.seed, 2 * k + 1).into_matrix())).collect();
    s.check("duality ⟨A, T(B)⟩ = ⟨T*(A), B⟩", duality_check(&t, &t_star, &pairs))?;
    if subj.mapping().is_some() {
        let k = subj.kraus()?;
        s.data("kraus_count", k.ops().len());
        s.data("kraus_max_sparsity", k.max_sparsity());
        s.check("Kraus completeness", Ok(CheckResult::residual("", k.completeness_residual(), COMPUTED_TOL, "Σ T_rᵀT_r = I")))?;
        let via = superop_from_kraus(&k)?;
        s.check("Kraus route equals T", Ok(CheckResult::residual("", via.matrix().max_abs_diff(t.matrix()), COMPUTED_TOL, "Σ T_r ρ T_rᵀ = T(ρ)")))?;
        s.out.write("kraus", "json", &formats::kraus_to_json(&k))?;
        for (i, (_, csv)) in formats::kraus_to_csv(&k).into_iter().enumerate() {
            s.out.write(&format!("kraus{i}"), "csv", &csv)?;
        }
    }
    Ok(())
}

fn mc_report(s: &Session, subj: &Subject, grid: &[usize]) -> Result<CoalescenceReport> {
    let map = subj.mapping().ok_or_else(|| CliError::Usage("Monte Carlo needs a random mapping (grand coupling)".into()))?;
    let pairs = subj.start_pairs(s.params.seed);
    coalescence_tail_mc_parallel(map, &pairs, grid, s.params.samples, s.params.seed, s.params.workers)
}

fn exact_report(s: &Session, subj: &Subject, m_max: usize, keep_pairs: bool) -> Result<(CouplingMatrix, CoalescenceReport)> {
    let n = subj.num_states();
    let g = &s.params.guards;
    if n > g.exact_states {
        return Err(CoreError::GuardExceeded { what: "number of states", size: n, limit: g.exact_states, hint: "exact tails need N ≤ the exact guard; pass --mc for Monte Carlo" }.into());
    }
    let (c, _) = subj.coupling(g)?;
    let r = exact_tails(&c, m_max, false, keep_pairs, g)?;
    Ok((c, r))
}

fn cmd_coalesce(s: &mut Session, subj: &Subject, m_max: Option<usize>) -> Result<()> {
    let m_max = m_max.unwrap_or_else(|| subj.default_m_max());
    let grid: Vec<usize> = (0..=m_max).collect();
    let report = if s.params.mc {
        let r = mc_report(s, subj, &grid)?;
        s.data("start_pairs", r.pairs.iter().map(|p| json!([p.x, p.y])).collect::<Vec<_>>());
        s.data("t_couple", r.t_couple);
        r
    } else {
        let (c, r) = exact_report(s, subj, m_max, s.params.per_pair)?;
        s.data("t_couple", exact_coupling_time(&c)?);
        if let Some((e, m)) = r.expected_tau {
            s.data("expected_tau_truncated", json!({ "value": e, "through_m": m }));
        }
        r
    };
    s.data("tail_at_m_max", report.tail_max[report.tail_max.len() - 1]);
    let csv = formats::report_to_csv(&report, &s.meta(), s.params.per_pair);
    s.out.write("tails", "csv", &csv)?;
    Ok(())
}

fn parse_rho(spec: &str, n: usize, seed: u64) -> Result<DensityMatrix> {
    let bad = || CliError::Usage(format!("unknown --rho '{spec}' (basis:<i>, mixed or random:<stream>)"));
    if spec == "mixed" {
        return Ok(DensityMatrix::maximally_mixed(n));
    }
    let (kind, arg) = spec.split_once(':').ok_or_else(bad)?;
    match kind {
        "basis" => {
            let i: usize = arg.parse().map_err(|_| bad())?;
            if i >= n {
                return Err(CliError::Usage(format!("basis state {i} outside 0..{n}")));
            }
            Ok(DensityMatrix::basis(n, i))
        }
        "random" => Ok(random_density_matrix(n, seed, arg.parse().map_err(|_| bad())?)),
        _ => Err(bad()),
    }
}

/// The CP channel used for evolution: Kraus operators when available,
/// otherwise the dense `T` with a verified Choi spectrum.
fn channel(s: &Session, subj: &Subject) -> Result<Box<dyn Channel>> {
    if subj.mapping().is_some() {
        return Ok(Box::new(subj.kraus()?));
    }
    let (c, _) = subj.coupling(&s.params.guards)?;
    let (mut t, _) = quantized_coupling(&c, &subj.stationary()?)?;
    t.verify_cp()?;
    Ok(Box::new(t))
}

fn cmd_evolve(s: &mut Session, subj: &Subject, m_max: Option<usize>, rho: Option<&str>) -> Result<()> {
    let m_max = m_max.unwrap_or(40);
    let n = subj.num_states();
    let rho0 = parse_rho(rho.unwrap_or("basis:0"), n, s.params.seed)?;
    let pi = subj.stationary()?;
    let q = qsample(&pi)?;
    let grid: Vec<usize> = (0..=m_max).collect();
    let report = if s.params.mc {
        Some(mc_report(s, subj, &grid)?)
    } else if n <= s.params.guards.exact_states {
        Some(exact_report(s, subj, m_max, false)?.1)
    } else {
        s.note("classical columns empty: the state count exceeds the exact guard (pass --mc for estimates)");
        None
    };
    let t = channel(s, subj)?;
    let trace = evolve_trace(t.as_ref(), &rho0, &q, m_max, report.as_ref())?;
    s.out.write("trace", "csv", &formats::trace_to_csv(&trace, &s.meta()))?;
    s.data("pi_min", trace.pi_min);
    s.data("final_trace_distance", trace.rows[trace.rows.len() - 1].trace_distance);
    s.data("overlap_monotone", trace.overlap_monotone);
    s.check("trace distance non-increasing", Ok(flag("", trace.distance_monotone, "½‖T(ρ) − Q‖ ≤ ½‖ρ − Q‖", "")))?;
    if !s.params.mc {
        if let Some(r) = trace.worst_ratio() {
            s.check("Q-perp overlap bound", Ok(CheckResult::at_most("", r, 1.0, COMPUTED_TOL, "tr(Q⊥T^m ρ) ≤ Pr_max{τ > m}/π_*")))?;
        }
    }
    Ok(())
}

/// States `(1−δ)Q + δσ` close to the qsample.
fn near_qsample_states(q: &Qsample, count: usize, seed: u64) -> Vec<DensityMatrix> {
    let n = q.dim();
    (0..count)
        .map(|k| {
            let delta = 0.5f64.powi((k % 10) as i32 + 1);
            let sigma = random_density_matrix(n, seed, 1000 + k as u64);
            let m = q.projector().scale(1.0 - delta).add(&sigma.matrix().scale(delta));
            DensityMatrix::new(m.symmetrized()).expect("convex combination of states")
        })
        .collect()
}

fn cmd_verify(s: &mut Session, subj: &Subject) -> Result<()> {
    if s.params.mc {
        s.note("Monte Carlo mode: only the model rate envelope is checked");
        return verify_envelope(s, subj);
    }
    let g = s.params.guards;
    let p = subj.chain()?;
    let (c, kind) = subj.coupling(&g)?;
    s.data("coupling_kind", kind);
    let n = c.num_states();
    let pi = subj.stationary()?;
    let q = qsample(&pi)?;
    let seed = s.params.seed;

    s.check("chain ergodic", Ok(flag("", validate_chain(&p).ergodic, "P irreducible and aperiodic", "")))?;
    let v = validate_coupling(&c);
    let broken: Vec<String> = v.violated().map(|r| format!("{:?}", r.condition)).collect();
    s.check("coupling conditions", Ok(flag("", v.valid, "stochastic, marginals, coalescence, symmetry", broken.join(", "))))?;
    let star = c_star_unchecked(&c)?;
    let j = choi_matrix(&star, FactorOrder::MapFirst);
    let min = j.eigenvalues().map(|e| e[0]);
    s.check("C* completely positive", min.map(|m| CheckResult::at_most("", -m, 0.0, j.cp_tolerance(), "Choi(C*) ⪰ 0")))?;
    if !v.valid {
        s.note("remaining checks need a valid coupling");
        return Ok(());
    }
    let (mut t, t_star) = quantized_coupling(&c, &pi)?;
    s.check("trace preservation", Ok(trace_preservation_check(&t)))?;
    s.check("unitality of T*", unitality_check(&t_star))?;
    s.check("fixed point T(Q) = Q", fixed_point_check(&t, &pi))?;
    let pairs: Vec<(Matrix, Matrix)> =
        (0..5).map(|k| (random_density_matrix(n, seed, 2 * k).into_matrix(), random_density_matrix(n, seed, 2 * k + 1).into_matrix())).collect();
    s.check("duality", duality_check(&t, &t_star, &pairs))?;
    if subj.mapping().is_some() {
        let k = subj.kraus()?;
        s.check("Kraus completeness", Ok(CheckResult::residual("", k.completeness_residual(), COMPUTED_TOL, "Σ T_rᵀT_r = I")))?;
        let via = superop_from_kraus(&k)?;
        s.check("Kraus route equals T", Ok(CheckResult::residual("", via.matrix().max_abs_diff(t.matrix()), COMPUTED_TOL, "Σ T_r ρ T_rᵀ = T(ρ)")))?;
    }

    let lap: Vec<_> = (0..n).flat_map(|x| (0..n).filter(move |&y| y != x).map(move |y| (x, y))).map(|(x, y)| laplacian_preservation_check(&c, x, y)).collect();
    s.check_all("Laplacian preservation", lap)?;
    s.check("rescaled Q-perp decomposition", rescaled_qperp_decomposition_check(&pi))?;
    s.check_all("coalescence trace identity", (0..=20).map(|m| coalescence_trace_identity_check(&c, m)).collect())?;
    let gentle: Vec<_> = near_qsample_states(&q, 20, seed)
        .iter()
        .map(|rho| {
            let overlap = q.perp_overlap(rho.matrix());
            gentle_measurement_step_check(rho, &q, overlap * (1.0 + 1e-6) + 1e-15)
        })
        .collect();
    s.check_all("gentle measurement", gentle)?;

    let t_couple = exact_coupling_time(&c)?;
    s.data("t_couple", t_couple);
    let mult = s.params.eps.iter().map(|&e| qcoupling_core::evolve::theorem_multiplier(e, pi.min_weight())).max().unwrap_or(1);
    let horizon = 20.max(mult * t_couple);
    let report = exact_tails(&c, horizon, false, false, &g)?;
    let mut rhos: Vec<DensityMatrix> = (0..n).map(|x| DensityMatrix::basis(n, x)).collect();
    rhos.extend((0..50).map(|k| random_density_matrix(n, seed, 100 + k)));
    let grid: Vec<usize> = (0..=20).collect();
    t.verify_cp()?;
    s.check("Q-perp bound", qperp_bound_check(&t, &pi, &report, &rhos, &grid))?;
    let sub: Vec<_> = (1..=10).flat_map(|m| (1..=4).map(move |l| (m, l))).map(|(m, l)| check_tail_submultiplicativity(&c, m, l)).collect();
    s.check_all("tail submultiplicativity", sub)?;
    s.check_all("diagonal block equals P^m", (0..=20).map(|m| check_diagonal_block(&c, m)).collect())?;
    s.check("mixing below coalescence", check_coupling_inequality(&c, 20))?;
    let theorem_rhos: Vec<DensityMatrix> = (0..n).map(|x| DensityMatrix::basis(n, x)).chain((0..20).map(|k| random_density_matrix(n, seed, 200 + k))).collect();
    s.check("main theorem", main_theorem_check(&t, &pi, &report, &theorem_rhos, &s.params.eps.clone()))?;
    let red: Vec<(DensityMatrix, Matrix)> = (0..5).map(|k| (random_density_matrix(n, seed, 300 + k), random_density_matrix(n, seed, 400 + k).into_matrix())).collect();
    s.check("reducing projector", reducing_projector_check(&t, &q, &red, 20))?;
    let k_exp = (1e8 / pi.min_weight()).log2().ceil() as usize;
    s.check("expanding projector", expanding_projector_check(&t_star, &q, k_exp * t_couple))?;
    s.check("fixed-point stability", fixed_point_stability_check(&t, &q, 20))?;
    let mix = mixing_report(&p, &[0.125, 0.0625], coupling::default_m_cap(n)).map(|r| {
        let worst = r.bounds.iter().map(|b| b.t_mix_eps as f64 - b.bound as f64).fold(f64::NEG_INFINITY, f64::max);
        let detail: Vec<String> = r.bounds.iter().map(|b| format!("t_mix({}) = {} ≤ {}", b.eps, b.t_mix_eps, b.bound)).collect();
        CheckResult::at_most("", worst, 0.0, 0.0, "t_mix(ε) ≤ ⌈log₂ ε⁻¹⌉·t_mix").with_detail(detail.join(", "))
    });
    s.check("mixing-time doubling", mix)?;
    if subj.model.as_ref().and_then(ModelInstance::rate_constant).is_some() {
        verify_envelope(s, subj)?;
    }
    Ok(())
}

fn envelope_grid(subj: &Subject) -> Option<Vec<usize>> {
    let n = subj.sites()?;
    Some((1..=14).map(|k| k * n).collect())
}

fn verify_envelope(s: &mut Session, subj: &Subject) -> Result<()> {
    let (Some(model), Some(grid)) = (subj.model.as_ref(), envelope_grid(subj)) else {
        s.note("no rate envelope for this subject");
        return Ok(());
    };
    if model.rate_constant().is_none() {
        s.note("no rate envelope for this subject");
        return Ok(());
    }
    let report = if s.params.mc { mc_report(s, subj, &grid)? } else { exact_report(s, subj, grid[grid.len() - 1], false)?.1 };
    s.check("contraction envelope", contraction_rate_check_report(model, &report, &grid))?;
    Ok(())
}

fn cmd_dilate(s: &mut Session, subj: &Subject) -> Result<()> {
    let k = subj.kraus()?;
    let circ = build_dilation_with(&k, &s.params.guards)?;
    let kappa = circ.kappa();
    let d = circ.dim();
    let seed = s.params.seed;
    let inputs = s.params.inputs;
    s.data("kappa", kappa);
    s.data("dim", d);
    s.data("total_dim", circ.total_dim());
    s.check("defect identity", Ok(CheckResult::residual("", circ.defect_residual, DEFECT_TOL, "Σ B_kᵀB_k = (κ−1)I")))?;
    s.check("W unitary", Ok(CheckResult::residual("", circ.w_unitarity_residual(), UNITARY_TOL, "WᵀW = I")))?;
    let xis: Vec<Vec<f64>> = (0..inputs as u64).map(|i| random_unit_vector(d, seed, i)).collect();
    s.check_all("branch amplitudes", xis.iter().map(|xi| state_decomposition_check(&circ, xi)).collect())?;
    let norms = xis.iter().map(|xi| branch_decomposition(&circ, xi)).collect::<qcoupling_core::Result<Vec<_>>>()?;
    let dev = norms.iter().map(|b| (b.good_norm - norms[0].good_norm).abs().max((b.bad_norm - norms[0].bad_norm).abs())).fold(0.0, f64::max);
    s.check("amplitudes independent of input", Ok(CheckResult::residual("", dev, COMPUTED_TOL, "branch norms do not depend on ξ")))?;
    s.data("branch_norms", json!([norms[0].good_norm, norms[0].bad_norm]));

    let sweep: Vec<Value> = (0..4)
        .map(|l| {
            let f = amplify_and_extract(&circ, &xis[0], l).map(|(_, f)| f).unwrap_or(f64::NAN);
            json!({ "iterations": l, "fidelity": formats::num(f), "predicted": predicted_fidelity(kappa, l) })
        })
        .collect();
    s.data("fidelity_sweep", sweep);
    let sweep_dev = (0..4)
        .map(|l| amplify_and_extract(&circ, &xis[0], l).map(|(_, f)| (f - predicted_fidelity(kappa, l)).abs()))
        .collect::<qcoupling_core::Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    s.check("fidelity follows rotation", Ok(CheckResult::residual("", sweep_dev, COMPUTED_TOL, "|sin((2ℓ+1)θ)|, sin θ = 1/√κ")))?;

    let rhos: Vec<DensityMatrix> = (0..inputs as u64).map(|i| random_density_matrix(d, seed, 500 + i)).collect();
    let mode = match exact_iterations(kappa) {
        Some(l) => {
            let worst = xis.iter().map(|xi| amplify_and_extract(&circ, xi, l).map(|(_, f)| f)).collect::<qcoupling_core::Result<Vec<_>>>()?.into_iter().fold(1.0, f64::min);
            s.data("iterations", l);
            s.data("fidelity", worst);
            s.check("amplified fidelity", Ok(CheckResult::at_most("", 1.0 - worst, 0.0, 1e-9, "oblivious amplitude amplification")))?;
            DilationMode::Amplified
        }
        None => {
            s.note(format!("κ = {kappa} admits no exact rotation; channel checked in postselect mode"));
            DilationMode::Postselect
        }
    };
    s.data("mode", format!("{mode:?}").to_lowercase());
    let eq = channel_equality_check(&circ, &k, &rhos, mode);
    if let Ok(r) = &eq {
        s.data("channel_residual", r.lhs);
    }
    s.check("dilation equals Kraus channel", eq)?;
    let acc = rhos
        .iter()
        .map(|r| channel_via_dilation(&circ, r, DilationMode::Postselect).map(|o| o.acceptance.unwrap_or(f64::NAN)))
        .collect::<qcoupling_core::Result<Vec<_>>>()?;
    let acc_dev = acc.iter().map(|a| (a - 1.0 / kappa as f64).abs()).fold(0.0, f64::max);
    s.data("acceptance", acc[0]);
    s.check("postselect acceptance", Ok(CheckResult::residual("", acc_dev, COMPUTED_TOL, "Pr[ancilla 0] = 1/κ")))?;
    Ok(())
}
