//! The genetic-programming planner.
//!
//! Given a congested set of flows, the planner picks the flows to move
//! ([`find_flows_causing_congestion`]), then evolves link-weight formulas.
//! Each candidate is scored on a frozen snapshot: the moved flows are
//! re-routed under the candidate's weights ([`compute_surrogate`]) and the
//! outcome is scored by [`evaluate`]. Lower fitness is better; anything
//! below 2 resolves the congestion.

use std::collections::HashMap;

use rand::Rng;
use thiserror::Error;

use crate::expr::{crossover, grow_random, mutate, EvalContext, ExprLimits, WeightExpr};
use crate::netmodel::{
    link_loads, shortest_weighted_path, utilization, Flow, LinkId, NetError, Network, RequestId,
    WeightAssignment,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("new and old flows cover different requests")]
    RequestMismatch,
    #[error("flow for request {0} has an empty path")]
    EmptyPath(RequestId),
    #[error("cannot select from an empty population")]
    EmptyPopulation,
    #[error("invalid planner configuration: {0}")]
    Config(String),
}

/// A candidate formula with its cached fitness.
#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub expr: WeightExpr,
    pub fitness: Option<f64>,
}

impl Individual {
    pub fn new(expr: WeightExpr) -> Self {
        Self {
            expr,
            fitness: None,
        }
    }

    fn score(&self) -> f64 {
        self.fitness.unwrap_or(f64::INFINITY)
    }
}

/// Planner parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GpConfig {
    pub population_size: usize,
    pub max_generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub tournament_size: usize,
    pub max_depth: usize,
    pub threshold: f64,
    pub const_min: f64,
    pub const_max: f64,
    pub early_stop_fitness: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            population_size: 10,
            max_generations: 200,
            crossover_rate: 0.7,
            mutation_rate: 0.1,
            tournament_size: 7,
            max_depth: 15,
            threshold: 0.8,
            const_min: 0.0,
            const_max: 100.0,
            early_stop_fitness: 2.0,
        }
    }
}

impl GpConfig {
    pub fn limits(&self) -> ExprLimits {
        ExprLimits {
            max_depth: self.max_depth,
            const_min: self.const_min,
            const_max: self.const_max,
        }
    }

    /// Number of individuals carried between planner invocations.
    pub fn retained_size(&self) -> usize {
        self.population_size / 2
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |msg: String| Err(PlanError::Config(msg));
        if self.population_size < 2 {
            return bad(format!(
                "population_size must be at least 2, got {}",
                self.population_size
            ));
        }
        if self.tournament_size == 0 || self.tournament_size > self.population_size {
            return bad(format!(
                "tournament_size must be in 1..={}, got {}",
                self.population_size, self.tournament_size
            ));
        }
        for (name, p) in [
            ("crossover_rate", self.crossover_rate),
            ("mutation_rate", self.mutation_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be a probability, got {p}"));
            }
        }
        if self.max_depth == 0 {
            return bad("max_depth must be at least 1".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            ));
        }
        if self.const_min.is_nan() || self.const_max.is_nan() || self.const_min > self.const_max {
            return bad(format!(
                "const_min {} exceeds const_max {}",
                self.const_min, self.const_max
            ));
        }
        Ok(())
    }
}

/// The three objectives behind a fitness value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fitness {
    /// Highest link utilization under the new flows.
    pub max_util: f64,
    /// Link insertions plus deletions needed to move from old to new flows.
    pub reroute_cost: usize,
    /// Sum of link delays over every new flow's path, in ms.
    pub total_delay: f64,
    pub value: f64,
}

/// Outcome of one planner invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub best: Individual,
    pub best_detail: Fitness,
    pub new_flows: Vec<Flow>,
    /// Top half of the final population, ascending by fitness.
    pub retained: Vec<Individual>,
    pub bad_flows: Vec<Flow>,
    /// Generation-0 population in evaluation order, bootstrapped
    /// individuals first.
    pub initial_population: Vec<Individual>,
    /// How many of `initial_population` came from the bootstrap set.
    pub bootstrapped: usize,
    /// Generations bred after the initial population.
    pub generations: usize,
    /// Best fitness seen so far, after generation 0, 1, ...
    pub best_history: Vec<f64>,
    /// Link weights the best formula assigns before the first moved flow is
    /// placed.
    pub reroute_weights: WeightAssignment,
}

fn argmax_link(util: &[f64]) -> Option<(LinkId, f64)> {
    let mut best: Option<(LinkId, f64)> = None;
    for (l, &u) in util.iter().enumerate() {
        if best.is_none_or(|(_, b)| u > b) {
            best = Some((l, u));
        }
    }
    best
}

/// Removes flows from the most utilized link (lowest id on ties), one
/// uniformly random flow at a time, until no link exceeds `threshold`.
///
/// Returns `(removed, remaining)`; removed flows are in removal order.
pub fn find_flows_causing_congestion<R: Rng + ?Sized>(
    network: &Network,
    flows: &[Flow],
    bandwidths: &[f64],
    threshold: f64,
    rng: &mut R,
) -> Result<(Vec<Flow>, Vec<Flow>), PlanError> {
    let mut remaining = flows.to_vec();
    let mut removed = Vec::new();
    loop {
        let util = utilization(network, &remaining, bandwidths)?;
        let Some((link, max)) = argmax_link(&util) else {
            break;
        };
        if max <= threshold {
            break;
        }
        let carriers: Vec<usize> = remaining
            .iter()
            .enumerate()
            .filter(|(_, f)| f.path.contains(&link))
            .map(|(i, _)| i)
            .collect();
        assert!(
            !carriers.is_empty(),
            "link {link} is over threshold but carries no flow"
        );
        let pick = carriers[rng.random_range(0..carriers.len())];
        removed.push(remaining.remove(pick));
    }
    Ok((removed, remaining))
}

/// Re-routing produced by one candidate formula.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    /// Re-routed flows (in input order) followed by the kept flows.
    pub flows: Vec<Flow>,
    /// Weights derived from the kept flows alone.
    pub initial_weights: WeightAssignment,
}

// Memoizes formula values per (bw, dl, util) bit pattern; most links share
// their static properties and many are idle.
struct WeightCache<'a> {
    expr: &'a WeightExpr,
    threshold: f64,
    memo: HashMap<(u64, u64, u64), u32>,
}

impl<'a> WeightCache<'a> {
    fn new(expr: &'a WeightExpr, threshold: f64) -> Self {
        Self {
            expr,
            threshold,
            memo: HashMap::new(),
        }
    }

    fn weight(&mut self, bw: f64, dl: f64, util: f64) -> u32 {
        let key = (bw.to_bits(), dl.to_bits(), util.to_bits());
        let (expr, threshold) = (self.expr, self.threshold);
        *self.memo.entry(key).or_insert_with(|| {
            expr.weight(&EvalContext {
                bw,
                dl,
                util,
                threshold,
            })
        })
    }
}

fn endpoints(network: &Network, flow: &Flow) -> Result<(usize, usize), PlanError> {
    let first = flow
        .path
        .first()
        .ok_or(PlanError::EmptyPath(flow.request))?;
    let last = flow.path.last().expect("non-empty");
    Ok((network.link(*first)?.src, network.link(*last)?.dst))
}

/// Routes `bad_flows` one after another by shortest weighted path under
/// `expr`, updating the utilization and weight of each link a placed flow
/// uses. A flow with no path keeps its original one.
pub fn compute_surrogate(
    network: &Network,
    keep_flows: &[Flow],
    bad_flows: &[Flow],
    bandwidths: &[f64],
    expr: &WeightExpr,
    threshold: f64,
) -> Result<Surrogate, PlanError> {
    let mut load = link_loads(network, keep_flows, bandwidths)?;
    let mut cache = WeightCache::new(expr, threshold);
    let links = network.links();
    let weights: Vec<u32> = links
        .iter()
        .zip(&load)
        .map(|(l, &x)| cache.weight(l.bw, l.dl, x / l.bw))
        .collect();
    let initial_weights = WeightAssignment::new(weights);
    let mut weights = initial_weights.clone();

    let mut flows = Vec::with_capacity(keep_flows.len() + bad_flows.len());
    for flow in bad_flows {
        let (src, dst) = endpoints(network, flow)?;
        let bd = *bandwidths
            .get(flow.request)
            .ok_or(NetError::UnknownRequest(flow.request))?;
        let path = shortest_weighted_path(network, &weights, src, dst)?
            .unwrap_or_else(|| flow.path.clone());
        for &e in &path {
            load[e] += bd;
            let l = &links[e];
            weights.set(e, cache.weight(l.bw, l.dl, load[e] / l.bw));
        }
        flows.push(Flow {
            request: flow.request,
            path,
        });
    }
    flows.extend_from_slice(keep_flows);
    Ok(Surrogate {
        flows,
        initial_weights,
    })
}

/// Insert/delete edit distance between two link sequences:
/// `|a| + |b| - 2 * LCS(a, b)`.
///
/// Uses the greedy diagonal search of Myers' O((N+M)D) difference
/// algorithm, which is cheap when paths share most of their links.
pub fn lcs_distance(a: &[LinkId], b: &[LinkId]) -> usize {
    let (n, m) = (a.len() as isize, b.len() as isize);
    let max = n + m;
    if max == 0 {
        return 0;
    }
    let off = max + 1;
    let mut v = vec![0isize; (2 * max + 3) as usize];
    for d in 0..=max {
        let mut k = -d;
        while k <= d {
            let down = k == -d || (k != d && v[(k - 1 + off) as usize] < v[(k + 1 + off) as usize]);
            let mut x = if down {
                v[(k + 1 + off) as usize]
            } else {
                v[(k - 1 + off) as usize] + 1
            };
            let mut y = x - k;
            while x < n && y < m && a[x as usize] == b[y as usize] {
                x += 1;
                y += 1;
            }
            v[(k + off) as usize] = x;
            if x >= n && y >= m {
                return d as usize;
            }
            k += 2;
        }
    }
    unreachable!("edit distance is bounded by n + m")
}

/// Rational normalization `x / (x + 1)`, mapping `[0, inf)` onto `[0, 1)`.
pub fn normalize(x: f64) -> f64 {
    x / (x + 1.0)
}

/// Scores `new_flows` against `old_flows`.
///
/// While the maximum utilization is at or above `threshold` the fitness is
/// `2 + norm(max_util)`; otherwise it is `norm(reroute_cost) +
/// norm(total_delay)`.
pub fn evaluate(
    network: &Network,
    new_flows: &[Flow],
    old_flows: &[Flow],
    bandwidths: &[f64],
    threshold: f64,
) -> Result<Fitness, PlanError> {
    if new_flows.len() != old_flows.len() {
        return Err(PlanError::RequestMismatch);
    }
    let old_by_request: HashMap<RequestId, &Flow> =
        old_flows.iter().map(|f| (f.request, f)).collect();
    if old_by_request.len() != old_flows.len() {
        return Err(PlanError::RequestMismatch);
    }

    let util = utilization(network, new_flows, bandwidths)?;
    let max_util = util.iter().copied().fold(0.0, f64::max);

    let mut reroute_cost = 0;
    let mut total_delay = 0.0;
    let mut matched = std::collections::HashSet::with_capacity(new_flows.len());
    for flow in new_flows {
        let old = old_by_request
            .get(&flow.request)
            .ok_or(PlanError::RequestMismatch)?;
        if !matched.insert(flow.request) {
            return Err(PlanError::RequestMismatch);
        }
        reroute_cost += lcs_distance(&old.path, &flow.path);
        for &e in &flow.path {
            total_delay += network.link(e)?.dl;
        }
    }

    Ok(Fitness {
        max_util,
        reroute_cost,
        total_delay,
        value: combine_objectives(max_util, reroute_cost as f64, total_delay, threshold),
    })
}

/// Two-regime combination: congestion dominates until it is resolved.
pub fn combine_objectives(
    max_util: f64,
    reroute_cost: f64,
    total_delay: f64,
    threshold: f64,
) -> f64 {
    if max_util >= threshold {
        normalize(max_util) + 2.0
    } else {
        normalize(reroute_cost) + normalize(total_delay)
    }
}

/// Draws `k` individuals uniformly with replacement and returns the fittest
/// (lowest value; the earliest draw wins ties). Unevaluated individuals lose
/// to every evaluated one.
pub fn tournament_select<'p, R: Rng + ?Sized>(
    population: &'p [Individual],
    k: usize,
    rng: &mut R,
) -> Result<&'p Individual, PlanError> {
    if population.is_empty() {
        return Err(PlanError::EmptyPopulation);
    }
    let mut winner = &population[rng.random_range(0..population.len())];
    for _ in 1..k {
        let challenger = &population[rng.random_range(0..population.len())];
        if challenger.score() < winner.score() {
            winner = challenger;
        }
    }
    Ok(winner)
}

/// Frozen inputs shared by every fitness evaluation in one invocation.
struct PlanningProblem<'a> {
    network: &'a Network,
    old_flows: &'a [Flow],
    keep_flows: &'a [Flow],
    bad_flows: &'a [Flow],
    bandwidths: &'a [f64],
    threshold: f64,
}

impl PlanningProblem<'_> {
    fn surrogate(&self, expr: &WeightExpr) -> Result<Surrogate, PlanError> {
        compute_surrogate(
            self.network,
            self.keep_flows,
            self.bad_flows,
            self.bandwidths,
            expr,
            self.threshold,
        )
    }

    fn fitness(&self, expr: &WeightExpr) -> Result<Fitness, PlanError> {
        let s = self.surrogate(expr)?;
        evaluate(
            self.network,
            &s.flows,
            self.old_flows,
            self.bandwidths,
            self.threshold,
        )
    }
}

/// Tracks the lowest-fitness individual over all generations. Only a
/// strictly better candidate replaces the incumbent.
struct BestSoFar(Option<Individual>);

impl BestSoFar {
    fn offer(&mut self, ind: &Individual) {
        if self.0.as_ref().is_none_or(|b| ind.score() < b.score()) {
            self.0 = Some(ind.clone());
        }
    }

    fn fitness(&self) -> f64 {
        self.0.as_ref().map_or(f64::INFINITY, Individual::score)
    }
}

fn breed<R: Rng + ?Sized>(
    population: &[Individual],
    config: &GpConfig,
    rng: &mut R,
) -> Result<Vec<Individual>, PlanError> {
    let limits = config.limits();
    let mut offspring = Vec::with_capacity(config.population_size);
    while offspring.len() < config.population_size {
        let a = &tournament_select(population, config.tournament_size, rng)?.expr;
        let b = &tournament_select(population, config.tournament_size, rng)?.expr;
        let (mut c1, mut c2) = if rng.random_bool(config.crossover_rate) {
            crossover(a, b, &limits, rng)
        } else {
            (a.clone(), b.clone())
        };
        if rng.random_bool(config.mutation_rate) {
            c1 = mutate(&c1, &limits, rng);
        }
        if rng.random_bool(config.mutation_rate) {
            c2 = mutate(&c2, &limits, rng);
        }
        offspring.push(Individual::new(c1));
        if offspring.len() < config.population_size {
            offspring.push(Individual::new(c2));
        }
    }
    Ok(offspring)
}

/// Evolves a link-weight formula that resolves the congestion present in
/// `old_flows` and returns it with the re-routed flows.
///
/// Up to half the initial population is taken from `bootstrap` (fitness is
/// recomputed against this snapshot); the rest is grown at random. Breeding
/// stops once the best fitness drops below `config.early_stop_fitness` or
/// after `config.max_generations` generations.
pub fn gen_plan<R: Rng + ?Sized>(
    network: &Network,
    old_flows: &[Flow],
    bandwidths: &[f64],
    bootstrap: &[Individual],
    config: &GpConfig,
    rng: &mut R,
) -> Result<PlanResult, PlanError> {
    config.validate()?;
    let (bad_flows, keep_flows) =
        find_flows_causing_congestion(network, old_flows, bandwidths, config.threshold, rng)?;
    let problem = PlanningProblem {
        network,
        old_flows,
        keep_flows: &keep_flows,
        bad_flows: &bad_flows,
        bandwidths,
        threshold: config.threshold,
    };
    let limits = config.limits();

    let mut population: Vec<Individual> = bootstrap
        .iter()
        .take(config.retained_size())
        .map(|ind| Individual::new(ind.expr.clone()))
        .collect();
    let bootstrapped = population.len();
    while population.len() < config.population_size {
        population.push(Individual::new(grow_random(config.max_depth, &limits, rng)));
    }

    let mut best = BestSoFar(None);
    let mut best_history = Vec::new();
    let evaluate_all = |pop: &mut Vec<Individual>, best: &mut BestSoFar| {
        for ind in pop.iter_mut() {
            ind.fitness = Some(problem.fitness(&ind.expr)?.value);
            best.offer(ind);
        }
        Ok::<_, PlanError>(())
    };

    evaluate_all(&mut population, &mut best)?;
    best_history.push(best.fitness());
    let initial_population = population.clone();

    let mut generations = 0;
    while best.fitness() >= config.early_stop_fitness && generations < config.max_generations {
        population = breed(&population, config, rng)?;
        evaluate_all(&mut population, &mut best)?;
        best_history.push(best.fitness());
        generations += 1;
    }

    let best = best.0.expect("population is non-empty");
    let surrogate = problem.surrogate(&best.expr)?;
    let best_detail = evaluate(
        network,
        &surrogate.flows,
        old_flows,
        bandwidths,
        config.threshold,
    )?;

    let mut ranked = population;
    ranked.sort_by(|a, b| a.score().total_cmp(&b.score()));
    ranked.truncate(config.retained_size());

    Ok(PlanResult {
        best,
        best_detail,
        new_flows: surrogate.flows,
        retained: ranked,
        bad_flows,
        initial_population,
        bootstrapped,
        generations,
        best_history,
        reroute_weights: surrogate.initial_weights,
    })
}
