//! Tick-driven scenario execution.
//!
//! Time advances in one-second ticks. Within a tick, arriving requests are
//! routed under the current link weights, the network is snapshotted, and
//! adaptive routers run one [`Adapter::adapt_step`]. Flows never depart.

use std::fmt;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::genplan::{GpConfig, PlanError, PlanResult};
use crate::mapek::{detect, import_kb, Adapter, InvocationRecord, KbError, KnowledgeBase};
use crate::netmodel::{
    full_topology, link_loads, mnp_topology, shortest_weighted_path, BandwidthProfile, ConfigError,
    EdgeListError, Flow, LinkId, NetError, Network, NodeId, Request, RequestId, Snapshot,
    WeightAssignment,
};

/// Reference bandwidth for the inverse-bandwidth baseline, in Mbps.
pub const INVERSE_BW_REFERENCE: f64 = 1e5;

pub const DEFAULT_LINK_BANDWIDTH: f64 = 100.0;
pub const DEFAULT_LINK_DELAY: f64 = 25.0;
/// Seconds simulated after the last arrival when no duration is given.
pub const DEFAULT_TAIL: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Router {
    UnitOspf,
    InverseBwOspf,
    GenAdapt,
    GenAdaptReuse,
}

impl Router {
    pub const ALL: [Router; 4] = [
        Router::UnitOspf,
        Router::InverseBwOspf,
        Router::GenAdapt,
        Router::GenAdaptReuse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Router::UnitOspf => "unit-ospf",
            Router::InverseBwOspf => "inverse-bw-ospf",
            Router::GenAdapt => "genadapt",
            Router::GenAdaptReuse => "genadapt-reuse",
        }
    }

    pub fn is_adaptive(self) -> bool {
        matches!(self, Router::GenAdapt | Router::GenAdaptReuse)
    }
}

impl fmt::Display for Router {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown router `{0}` (expected unit-ospf, inverse-bw-ospf, genadapt or genadapt-reuse)")]
pub struct UnknownRouter(pub String);

impl FromStr for Router {
    type Err = UnknownRouter;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Router::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| UnknownRouter(s.to_string()))
    }
}

/// How the scenario's network was obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum NetworkSpec {
    Full(usize),
    Mnp(usize),
    File(PathBuf),
}

impl NetworkSpec {
    /// Generation cap used when a scenario does not set one.
    pub fn default_max_generations(&self) -> usize {
        match self {
            NetworkSpec::Mnp(k) if *k >= 4 => 500,
            NetworkSpec::Mnp(_) => 300,
            NetworkSpec::Full(_) | NetworkSpec::File(_) => 200,
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("field `{field}`: {reason}")]
    Field { field: &'static str, reason: String },
    #[error("field `network`: {0}")]
    Topology(#[from] ConfigError),
    #[error("field `network`: {path}: {source}")]
    EdgeList {
        path: PathBuf,
        source: EdgeListError,
    },
    #[error("field `kb`: {path}: {source}")]
    Kb { path: PathBuf, source: KbError },
    #[error("request {request}: {source}")]
    Request {
        request: RequestId,
        source: NetError,
    },
    #[error("request {request}: node {dst} is unreachable from node {src}")]
    Unreachable {
        request: RequestId,
        src: NodeId,
        dst: NodeId,
    },
}

fn field_err(field: &'static str, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Field {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("planner failed at t={tick}: {source}")]
    Plan { tick: u64, source: PlanError },
    #[error("request {request}: node {dst} is unreachable from node {src}")]
    Unreachable {
        request: RequestId,
        src: NodeId,
        dst: NodeId,
    },
}

/// A validated, ready-to-run scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub network_spec: NetworkSpec,
    pub network: Network,
    /// Requests sorted by arrival; ids are dense and follow that order.
    pub requests: Vec<Request>,
    pub threshold: f64,
    /// Number of simulated one-second ticks.
    pub duration: u64,
    pub router: Router,
    /// Formulas seeding the first planner invocation of `genadapt-reuse`.
    pub kb: Option<KnowledgeBase>,
    pub gp: GpConfig,
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    network: Option<String>,
    link_bandwidth: Option<f64>,
    link_delay: Option<f64>,

    source: Option<usize>,
    destination: Option<usize>,
    bursts: Option<usize>,
    requests_per_burst: Option<usize>,
    spacing: Option<f64>,
    start: Option<f64>,
    request_bandwidth: Option<f64>,
    #[serde(default)]
    request: Vec<RawRequest>,

    threshold: Option<f64>,
    duration: Option<u64>,
    router: Option<String>,
    kb: Option<String>,
    seed: Option<u64>,

    population_size: Option<usize>,
    max_generations: Option<usize>,
    crossover_rate: Option<f64>,
    mutation_rate: Option<f64>,
    tournament_size: Option<usize>,
    max_depth: Option<usize>,
    const_min: Option<f64>,
    const_max: Option<f64>,
    early_stop_fitness: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRequest {
    src: NodeId,
    dst: NodeId,
    arrival: f64,
    bandwidth: Option<f64>,
    /// `[[from, bandwidth], ...]`, ascending in `from`.
    profile: Option<Vec<(f64, f64)>>,
}

impl Scenario {
    /// Loads a scenario file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base).map_err(|e| match e {
            ScenarioError::Syntax { message, .. } => ScenarioError::Syntax {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    /// Parses scenario text, resolving relative paths against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ScenarioError> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| ScenarioError::Syntax {
            path: PathBuf::from("<scenario>"),
            message: e.message().to_string(),
        })?;
        raw.build(base)
    }

    /// Switches router, loading or dropping the seed knowledge base.
    pub fn set_router(
        &mut self,
        router: Router,
        kb: Option<KnowledgeBase>,
    ) -> Result<(), ScenarioError> {
        if router == Router::GenAdaptReuse {
            let kb = kb.or_else(|| self.kb.take());
            if kb.is_none() {
                return Err(field_err(
                    "kb",
                    "genadapt-reuse needs a knowledge-base file",
                ));
            }
            self.kb = kb;
        }
        self.router = router;
        Ok(())
    }

    pub fn last_arrival(&self) -> f64 {
        self.requests.last().map_or(0.0, |r| r.arrival)
    }
}

fn positive(field: &'static str, v: f64) -> Result<f64, ScenarioError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(field_err(field, format!("must be positive, got {v}")))
    }
}

fn parse_network_spec(text: &str, base: &Path) -> Result<NetworkSpec, ScenarioError> {
    let mut words = text.split_whitespace();
    let kind = words.next().unwrap_or("");
    let size = words.next();
    let sized = |make: fn(usize) -> NetworkSpec| {
        let n = size.and_then(|s| s.parse::<usize>().ok()).ok_or_else(|| {
            field_err("network", format!("expected `{kind} <size>`, got `{text}`"))
        })?;
        if words.clone().next().is_some() {
            return Err(field_err("network", format!("trailing text in `{text}`")));
        }
        Ok(make(n))
    };
    match kind {
        "full" => sized(NetworkSpec::Full),
        "mnp" => sized(NetworkSpec::Mnp),
        "" => Err(field_err("network", "is empty")),
        _ => Ok(NetworkSpec::File(base.join(text.trim()))),
    }
}

impl RawScenario {
    fn build(self, base: &Path) -> Result<Scenario, ScenarioError> {
        let spec_text = self.network.ok_or_else(|| {
            field_err(
                "network",
                "missing (use `full <n>`, `mnp <k>` or an edge-list path)",
            )
        })?;
        let network_spec = parse_network_spec(&spec_text, base)?;
        let link_bw = positive(
            "link_bandwidth",
            self.link_bandwidth.unwrap_or(DEFAULT_LINK_BANDWIDTH),
        )?;
        let link_dl = positive("link_delay", self.link_delay.unwrap_or(DEFAULT_LINK_DELAY))?;
        let network = match &network_spec {
            NetworkSpec::Full(n) => full_topology(*n, link_bw, link_dl)?,
            NetworkSpec::Mnp(k) => mnp_topology(*k, link_bw, link_dl)?,
            NetworkSpec::File(path) => {
                if self.link_bandwidth.is_some() || self.link_delay.is_some() {
                    return Err(field_err(
                        "link_bandwidth",
                        "link properties come from the edge-list file",
                    ));
                }
                let text = fs::read_to_string(path).map_err(|e| {
                    field_err("network", format!("cannot read {}: {e}", path.display()))
                })?;
                Network::from_edge_list(&text).map_err(|source| ScenarioError::EdgeList {
                    path: path.clone(),
                    source,
                })?
            }
        };

        let generated = self.bursts.is_some() || self.request_bandwidth.is_some();
        let mut requests = if generated {
            if !self.request.is_empty() {
                return Err(field_err(
                    "request",
                    "explicit requests cannot be combined with `bursts`/`request_bandwidth`",
                ));
            }
            let bursts = self.bursts.ok_or_else(|| field_err("bursts", "missing"))?;
            let bandwidth = positive(
                "request_bandwidth",
                self.request_bandwidth
                    .ok_or_else(|| field_err("request_bandwidth", "missing"))?,
            )?;
            let per_burst = self.requests_per_burst.unwrap_or(1);
            if per_burst == 0 {
                return Err(field_err("requests_per_burst", "must be at least 1"));
            }
            let spacing = positive("spacing", self.spacing.unwrap_or(10.0))?;
            let start = self.start.unwrap_or(0.0);
            if !(start.is_finite() && start >= 0.0) {
                return Err(field_err(
                    "start",
                    format!("must be non-negative, got {start}"),
                ));
            }
            let src = self.source.unwrap_or(0);
            let dst = self.destination.unwrap_or(1);
            (0..bursts * per_burst)
                .map(|i| {
                    let arrival = start + (i / per_burst) as f64 * spacing;
                    Request::constant(i, src, dst, arrival, bandwidth)
                })
                .collect::<Vec<_>>()
        } else {
            for (field, set) in [
                ("source", self.source.is_some()),
                ("destination", self.destination.is_some()),
                ("requests_per_burst", self.requests_per_burst.is_some()),
                ("spacing", self.spacing.is_some()),
                ("start", self.start.is_some()),
            ] {
                if set {
                    return Err(field_err(
                        field,
                        "only valid with generated requests (`bursts`)",
                    ));
                }
            }
            let mut out = Vec::with_capacity(self.request.len());
            for (i, r) in self.request.into_iter().enumerate() {
                if !(r.arrival.is_finite() && r.arrival >= 0.0) {
                    return Err(field_err(
                        "request",
                        format!("entry {i}: arrival must be non-negative"),
                    ));
                }
                let bandwidth = match (r.bandwidth, r.profile) {
                    (Some(bw), None) => {
                        BandwidthProfile::constant(r.arrival, positive("request", bw)?)
                    }
                    (None, Some(steps)) => BandwidthProfile::piecewise(steps).ok_or_else(|| {
                        field_err("request", format!("entry {i}: invalid bandwidth profile"))
                    })?,
                    _ => {
                        return Err(field_err(
                            "request",
                            format!("entry {i}: give exactly one of `bandwidth` or `profile`"),
                        ))
                    }
                };
                out.push(Request {
                    id: i,
                    src: r.src,
                    dst: r.dst,
                    arrival: r.arrival,
                    bandwidth,
                });
            }
            out.sort_by(|a, b| a.arrival.total_cmp(&b.arrival));
            for (i, r) in out.iter_mut().enumerate() {
                r.id = i;
            }
            out
        };
        requests.shrink_to_fit();

        let unit = WeightAssignment::uniform(network.link_count(), 1);
        for r in &requests {
            r.validate(&network)
                .map_err(|source| ScenarioError::Request {
                    request: r.id,
                    source,
                })?;
            let reachable = shortest_weighted_path(&network, &unit, r.src, r.dst)
                .map_err(|source| ScenarioError::Request {
                    request: r.id,
                    source,
                })?
                .is_some();
            if !reachable {
                return Err(ScenarioError::Unreachable {
                    request: r.id,
                    src: r.src,
                    dst: r.dst,
                });
            }
        }

        let threshold = self.threshold.unwrap_or(0.8);
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(field_err(
                "threshold",
                format!("must lie in (0, 1), got {threshold}"),
            ));
        }

        let last = requests.last().map_or(0.0, |r| r.arrival);
        let duration = match self.duration {
            Some(d) => {
                if (d as f64) <= last {
                    return Err(field_err(
                        "duration",
                        format!("{d} s ends before the last arrival at {last} s"),
                    ));
                }
                d
            }
            None => last.floor() as u64 + DEFAULT_TAIL,
        };

        let defaults = GpConfig::default();
        let gp = GpConfig {
            population_size: self.population_size.unwrap_or(defaults.population_size),
            max_generations: self
                .max_generations
                .unwrap_or_else(|| network_spec.default_max_generations()),
            crossover_rate: self.crossover_rate.unwrap_or(defaults.crossover_rate),
            mutation_rate: self.mutation_rate.unwrap_or(defaults.mutation_rate),
            tournament_size: self.tournament_size.unwrap_or(defaults.tournament_size),
            max_depth: self.max_depth.unwrap_or(defaults.max_depth),
            threshold,
            const_min: self.const_min.unwrap_or(defaults.const_min),
            const_max: self.const_max.unwrap_or(defaults.const_max),
            early_stop_fitness: self
                .early_stop_fitness
                .unwrap_or(defaults.early_stop_fitness),
        };
        gp.validate().map_err(|e| field_err("gp", e.to_string()))?;

        let router = match self.router.as_deref() {
            None => Router::GenAdapt,
            Some(name) => name
                .parse()
                .map_err(|e: UnknownRouter| field_err("router", e.to_string()))?,
        };
        let kb = match &self.kb {
            None => None,
            Some(p) => {
                let path = base.join(p);
                Some(load_kb(&path, &gp).map_err(|e| match e {
                    ScenarioError::Io { path, source } => {
                        field_err("kb", format!("cannot read {}: {source}", path.display()))
                    }
                    other => other,
                })?)
            }
        };
        if router == Router::GenAdaptReuse && kb.is_none() {
            return Err(field_err(
                "kb",
                "genadapt-reuse needs a knowledge-base file",
            ));
        }

        Ok(Scenario {
            network_spec,
            network,
            requests,
            threshold,
            duration,
            router,
            kb,
            gp,
            seed: self.seed.unwrap_or(0),
        })
    }
}

/// Reads a knowledge-base file, validating it against `gp`'s bounds.
pub fn load_kb(path: &Path, gp: &GpConfig) -> Result<KnowledgeBase, ScenarioError> {
    let file = fs::File::open(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    import_kb(BufReader::new(file), path.display().to_string(), gp).map_err(|source| {
        ScenarioError::Kb {
            path: path.to_path_buf(),
            source,
        }
    })
}

/// Static weights `max(1, floor(C / bw))` with `C` = [`INVERSE_BW_REFERENCE`].
pub fn inverse_bw_weights(network: &Network) -> WeightAssignment {
    WeightAssignment::new(
        network
            .links()
            .iter()
            .map(|l| {
                let w = (INVERSE_BW_REFERENCE / l.bw).floor();
                if w >= u32::MAX as f64 {
                    u32::MAX
                } else {
                    (w as u32).max(1)
                }
            })
            .collect(),
    )
}

/// Routes `request` on its shortest weighted path.
pub fn route_request(
    network: &Network,
    weights: &WeightAssignment,
    request: &Request,
) -> Result<Flow, SimError> {
    match shortest_weighted_path(network, weights, request.src, request.dst)? {
        Some(path) => Ok(Flow {
            request: request.id,
            path,
        }),
        None => Err(SimError::Unreachable {
            request: request.id,
            src: request.src,
            dst: request.dst,
        }),
    }
}

/// One row of the tick trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub t: u64,
    pub max_util: f64,
    pub congested: bool,
    pub flow_count: usize,
    /// 1-based index of the invocation whose formula routed this tick's
    /// arrivals; 0 while unit or static weights apply.
    pub active_formula_id: usize,
    /// Traffic in excess of capacity, summed over links.
    pub excess: f64,
    /// Total bandwidth demanded by live flows.
    pub demand: f64,
}

pub const TRACE_CSV_HEADER: &str = "t,max_util,congested_flag,flow_count,active_formula_id";

impl TickRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{},{},{}",
            self.t,
            self.max_util,
            u8::from(self.congested),
            self.flow_count,
            self.active_formula_id
        )
    }
}

pub fn trace_csv(trace: &[TickRecord]) -> String {
    let mut out = String::from(TRACE_CSV_HEADER);
    out.push('\n');
    for r in trace {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Fraction of offered traffic above link capacity, over the whole run.
pub fn packet_loss_proxy(trace: &[TickRecord]) -> f64 {
    let excess: f64 = trace.iter().map(|r| r.excess).sum();
    let demand: f64 = trace.iter().map(|r| r.demand).sum();
    if demand > 0.0 {
        (excess / demand).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Why a flow got (re-)routed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteCause {
    Arrival,
    Reroute,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteEvent {
    pub t: u64,
    pub request: RequestId,
    pub path: Vec<LinkId>,
    pub cause: RouteCause,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub congestion_occurrences: usize,
    /// Congested ticks, in seconds.
    pub congestion_duration: u64,
    pub packet_loss_proxy: f64,
    pub planner_invocations: usize,
    pub planner_wallclock_ms: Vec<f64>,
    /// Highest link utilization once the last tick has been handled.
    pub final_max_util: f64,
}

pub const METRICS_CSV_HEADER: &str =
    "congestion_occurrences,congestion_duration,packet_loss_proxy,planner_invocations,final_max_util";

impl MetricsRecord {
    /// Reproducible columns only; wall-clock times are reported separately.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{},{:.6}",
            self.congestion_occurrences,
            self.congestion_duration,
            self.packet_loss_proxy,
            self.planner_invocations,
            self.final_max_util
        )
    }

    pub fn mean_planner_ms(&self) -> f64 {
        if self.planner_wallclock_ms.is_empty() {
            0.0
        } else {
            self.planner_wallclock_ms.iter().sum::<f64>() / self.planner_wallclock_ms.len() as f64
        }
    }

    pub fn resolved(&self, threshold: f64) -> bool {
        self.final_max_util <= threshold
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: MetricsRecord,
    pub trace: Vec<TickRecord>,
    pub routes: Vec<RouteEvent>,
    pub invocations: Vec<InvocationRecord>,
    pub plans: Vec<PlanResult>,
    pub final_flows: Vec<Flow>,
    pub kb: KnowledgeBase,
}

pub fn invocations_csv(records: &[InvocationRecord]) -> String {
    let mut out = String::from(crate::mapek::INVOCATION_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

fn max_util(network: &Network, loads: &[f64]) -> f64 {
    loads
        .iter()
        .zip(network.links())
        .map(|(load, l)| load / l.bw)
        .fold(0.0, f64::max)
}

/// Runs `scenario` from t=0 for `scenario.duration` ticks.
pub fn run_scenario(scenario: &Scenario) -> Result<RunOutput, SimError> {
    let net = &scenario.network;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let kb = match scenario.router {
        Router::GenAdaptReuse => scenario.kb.clone().unwrap_or_default(),
        _ => KnowledgeBase::new(),
    };
    let mut adapter = if scenario.router.is_adaptive() {
        Some(
            Adapter::new(scenario.gp.clone(), kb.clone())
                .map_err(|source| SimError::Plan { tick: 0, source })?,
        )
    } else {
        None
    };
    let static_weights = match scenario.router {
        Router::InverseBwOspf => inverse_bw_weights(net),
        _ => WeightAssignment::uniform(net.link_count(), 1),
    };

    let mut flows: Vec<Flow> = Vec::new();
    let mut next = 0;
    let mut trace = Vec::with_capacity(scenario.duration as usize);
    let mut routes = Vec::new();
    let mut plans = Vec::new();
    let mut bandwidths = vec![0.0; scenario.requests.len()];

    for t in 0..scenario.duration {
        let now = t as f64;
        for (bd, r) in bandwidths.iter_mut().zip(&scenario.requests) {
            *bd = r.bd(now);
        }

        while let Some(request) = scenario.requests.get(next).filter(|r| r.arrival <= now) {
            let weights = match &adapter {
                Some(a) if a.state().active_expr.is_some() => {
                    let loads = link_loads(net, &flows, &bandwidths)?;
                    let util: Vec<f64> = loads
                        .iter()
                        .zip(net.links())
                        .map(|(load, l)| load / l.bw)
                        .collect();
                    a.state().weights(net, &util, scenario.threshold)
                }
                _ => static_weights.clone(),
            };
            let flow = route_request(net, &weights, request)?;
            routes.push(RouteEvent {
                t,
                request: request.id,
                path: flow.path.clone(),
                cause: RouteCause::Arrival,
            });
            flows.push(flow);
            next += 1;
        }

        let loads = link_loads(net, &flows, &bandwidths)?;
        let excess = loads
            .iter()
            .zip(net.links())
            .map(|(load, l)| (load - l.bw).max(0.0))
            .sum();
        let demand = flows.iter().map(|f| bandwidths[f.request]).sum();
        let snapshot = Snapshot {
            t: now,
            flows: flows.clone(),
            util: loads
                .iter()
                .zip(net.links())
                .map(|(load, l)| load / l.bw)
                .collect(),
        };
        let active_formula_id = adapter.as_ref().map_or(0, |a| a.state().invocation_count);
        trace.push(TickRecord {
            t,
            max_util: snapshot.max_util(),
            congested: detect(&snapshot, scenario.threshold),
            flow_count: flows.len(),
            active_formula_id,
            excess,
            demand,
        });

        if let Some(adapter) = adapter.as_mut() {
            let step = adapter
                .adapt_step(net, &snapshot, &bandwidths, &mut rng)
                .map_err(|source| SimError::Plan { tick: t, source })?;
            if let Some(adaptation) = step {
                let mut new_flows = adaptation.new_flows;
                new_flows.sort_by_key(|f| f.request);
                for (old, new) in flows.iter().zip(&new_flows) {
                    if old.path != new.path {
                        routes.push(RouteEvent {
                            t,
                            request: new.request,
                            path: new.path.clone(),
                            cause: RouteCause::Reroute,
                        });
                    }
                }
                flows = new_flows;
                plans.push(adaptation.plan);
            }
        }
    }

    let final_bandwidths: Vec<f64> = scenario
        .requests
        .iter()
        .map(|r| r.bd(scenario.duration.saturating_sub(1) as f64))
        .collect();
    let final_max_util = max_util(net, &link_loads(net, &flows, &final_bandwidths)?);

    let mut occurrences = 0;
    let mut prev = false;
    for r in &trace {
        if r.congested && !prev {
            occurrences += 1;
        }
        prev = r.congested;
    }
    let (kb, invocations) = match adapter {
        Some(a) => {
            let (kb, state) = a.into_parts();
            (kb, state.log)
        }
        None => (kb, Vec::new()),
    };
    let metrics = MetricsRecord {
        congestion_occurrences: occurrences,
        congestion_duration: trace.iter().filter(|r| r.congested).count() as u64,
        packet_loss_proxy: packet_loss_proxy(&trace),
        planner_invocations: invocations.len(),
        planner_wallclock_ms: invocations.iter().map(|r| r.wallclock_ms).collect(),
        final_max_util,
    };
    Ok(RunOutput {
        metrics,
        trace,
        routes,
        invocations,
        plans,
        final_flows: flows,
        kb,
    })
}
