//! Static network structure, requests, flows and link utilization, plus
//! deterministic shortest-weighted-path routing.
//!
//! Links are always directed. Generators that model an undirected cable emit
//! one link per direction.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use thiserror::Error;

pub type NodeId = usize;
pub type LinkId = usize;
pub type RequestId = usize;

/// Structural violations of the network model.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("unknown link id {0}")]
    UnknownLink(LinkId),
    #[error("node {node} out of range (network has {nodes} nodes)")]
    UnknownNode { node: NodeId, nodes: usize },
    #[error("link {0} is a self-loop")]
    SelfLoop(LinkId),
    #[error("duplicate link {src}->{dst}")]
    DuplicateLink { src: NodeId, dst: NodeId },
    #[error("link ids must be dense: expected {expected}, found {found}")]
    NonDenseLinkId { expected: LinkId, found: LinkId },
    #[error("link {link}: {what} must be positive, got {value}")]
    NonPositive {
        link: LinkId,
        what: &'static str,
        value: f64,
    },
    #[error("bandwidth must be positive, got {0}")]
    NonPositiveBandwidth(f64),
    #[error("source and destination are both node {0}")]
    SameEndpoints(NodeId),
    #[error("weight assignment covers {got} links, network has {expected}")]
    WeightCount { expected: usize, got: usize },
    #[error("request {0} has no bandwidth entry")]
    UnknownRequest(RequestId),
}

/// Invalid parameters for a topology generator.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("full topology needs at least 2 nodes, got {0}")]
    FullTooSmall(usize),
    #[error("mnp topology needs at least 2 paths, got {0}")]
    MnpTooSmall(usize),
    #[error("link {what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
}

/// Errors from reading the edge-list format.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EdgeListError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("missing `nodes <n>` header")]
    MissingHeader,
    #[error(transparent)]
    Invalid(#[from] NetError),
}

/// A directed link with its static properties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub id: LinkId,
    pub src: NodeId,
    pub dst: NodeId,
    /// Capacity in Mbps.
    pub bw: f64,
    /// Nominal delay in ms.
    pub dl: f64,
}

/// A validated directed graph. Node ids are `0..node_count`, link ids are
/// `0..links.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    node_count: usize,
    links: Vec<Link>,
    // Outgoing links per node, sorted by destination node id.
    out: Vec<Vec<LinkId>>,
    // Incoming links per node.
    inc: Vec<Vec<LinkId>>,
}

impl Network {
    pub fn new(node_count: usize, links: Vec<Link>) -> Result<Self, NetError> {
        let mut out = vec![Vec::new(); node_count];
        let mut inc = vec![Vec::new(); node_count];
        let mut seen = std::collections::HashSet::new();
        for (idx, link) in links.iter().enumerate() {
            if link.id != idx {
                return Err(NetError::NonDenseLinkId {
                    expected: idx,
                    found: link.id,
                });
            }
            for node in [link.src, link.dst] {
                if node >= node_count {
                    return Err(NetError::UnknownNode {
                        node,
                        nodes: node_count,
                    });
                }
            }
            if link.src == link.dst {
                return Err(NetError::SelfLoop(link.id));
            }
            if !(link.bw > 0.0 && link.bw.is_finite()) {
                return Err(NetError::NonPositive {
                    link: link.id,
                    what: "bandwidth",
                    value: link.bw,
                });
            }
            if !(link.dl > 0.0 && link.dl.is_finite()) {
                return Err(NetError::NonPositive {
                    link: link.id,
                    what: "delay",
                    value: link.dl,
                });
            }
            if !seen.insert((link.src, link.dst)) {
                return Err(NetError::DuplicateLink {
                    src: link.src,
                    dst: link.dst,
                });
            }
            out[link.src].push(link.id);
            inc[link.dst].push(link.id);
        }
        for adj in &mut out {
            adj.sort_by_key(|&l| links[l].dst);
        }
        Ok(Self {
            node_count,
            links,
            out,
            inc,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link(&self, id: LinkId) -> Result<&Link, NetError> {
        self.links.get(id).ok_or(NetError::UnknownLink(id))
    }

    /// Outgoing links of `node`, ordered by destination id.
    pub fn out_links(&self, node: NodeId) -> &[LinkId] {
        &self.out[node]
    }

    pub fn in_links(&self, node: NodeId) -> &[LinkId] {
        &self.inc[node]
    }

    pub fn find_link(&self, src: NodeId, dst: NodeId) -> Option<LinkId> {
        self.out
            .get(src)?
            .iter()
            .copied()
            .find(|&l| self.links[l].dst == dst)
    }

    fn check_node(&self, node: NodeId) -> Result<(), NetError> {
        if node < self.node_count {
            Ok(())
        } else {
            Err(NetError::UnknownNode {
                node,
                nodes: self.node_count,
            })
        }
    }

    /// Node sequence visited by a link path, starting at the first link's
    /// source.
    pub fn path_nodes(&self, path: &[LinkId]) -> Vec<NodeId> {
        let mut nodes = Vec::with_capacity(path.len() + 1);
        if let Some(&first) = path.first() {
            nodes.push(self.links[first].src);
        }
        nodes.extend(path.iter().map(|&l| self.links[l].dst));
        nodes
    }

    /// True if `path` is a directed simple path from `src` to `dst`.
    pub fn is_simple_path(&self, path: &[LinkId], src: NodeId, dst: NodeId) -> bool {
        if path.is_empty() || path.iter().any(|&l| l >= self.links.len()) {
            return false;
        }
        if self.links[path[0]].src != src || self.links[path[path.len() - 1]].dst != dst {
            return false;
        }
        if path
            .windows(2)
            .any(|w| self.links[w[0]].dst != self.links[w[1]].src)
        {
            return false;
        }
        let nodes = self.path_nodes(path);
        let mut seen = vec![false; self.node_count];
        nodes
            .iter()
            .all(|&n| !std::mem::replace(&mut seen[n], true))
    }

    /// Serializes to the edge-list text format.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("nodes {}\n", self.node_count);
        for l in &self.links {
            let _ = writeln!(out, "link {} {} {} {} {}", l.id, l.src, l.dst, l.bw, l.dl);
        }
        out
    }

    /// Parses the edge-list text format. Blank lines and `#` comments are
    /// ignored; links may appear in any order but their ids must be dense.
    pub fn from_edge_list(text: &str) -> Result<Self, EdgeListError> {
        let mut nodes = None;
        let mut links = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |message: String| EdgeListError::Syntax {
                line: line_no,
                message,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields[0] {
                "nodes" => {
                    if fields.len() != 2 {
                        return Err(syntax("expected `nodes <n>`".into()));
                    }
                    if nodes.is_some() {
                        return Err(syntax("duplicate `nodes` header".into()));
                    }
                    let n = fields[1]
                        .parse::<usize>()
                        .map_err(|e| syntax(format!("bad node count: {e}")))?;
                    nodes = Some(n);
                }
                "link" => {
                    if fields.len() != 6 {
                        return Err(syntax("expected `link <id> <src> <dst> <bw> <dl>`".into()));
                    }
                    let int = |i: usize, name: &str| {
                        fields[i]
                            .parse::<usize>()
                            .map_err(|e| syntax(format!("bad {name} `{}`: {e}", fields[i])))
                    };
                    let real = |i: usize, name: &str| {
                        fields[i]
                            .parse::<f64>()
                            .map_err(|e| syntax(format!("bad {name} `{}`: {e}", fields[i])))
                    };
                    links.push(Link {
                        id: int(1, "link id")?,
                        src: int(2, "source")?,
                        dst: int(3, "destination")?,
                        bw: real(4, "bandwidth")?,
                        dl: real(5, "delay")?,
                    });
                }
                other => return Err(syntax(format!("unknown record `{other}`"))),
            }
        }
        let nodes = nodes.ok_or(EdgeListError::MissingHeader)?;
        links.sort_by_key(|l| l.id);
        Ok(Network::new(nodes, links)?)
    }
}

/// Per-request bandwidth as a piecewise-constant function of absolute time.
///
/// Each step `(t, bw)` holds from `t` until the next step. Before the first
/// step the bandwidth is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthProfile {
    steps: Vec<(f64, f64)>,
}

impl BandwidthProfile {
    pub fn constant(from: f64, bw: f64) -> Self {
        Self {
            steps: vec![(from, bw)],
        }
    }

    /// Steps must have non-decreasing times and non-negative bandwidths.
    pub fn piecewise(mut steps: Vec<(f64, f64)>) -> Option<Self> {
        if steps.is_empty()
            || steps
                .iter()
                .any(|&(t, bw)| bw.is_nan() || bw < 0.0 || !t.is_finite())
        {
            return None;
        }
        steps.sort_by(|a, b| a.0.total_cmp(&b.0));
        Some(Self { steps })
    }

    pub fn at(&self, t: f64) -> f64 {
        self.steps
            .iter()
            .take_while(|&&(start, _)| start <= t)
            .last()
            .map_or(0.0, |&(_, bw)| bw)
    }

    pub fn steps(&self) -> &[(f64, f64)] {
        &self.steps
    }
}

/// A data-transmission request from `src` to `dst`.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: RequestId,
    pub src: NodeId,
    pub dst: NodeId,
    /// Arrival time in seconds.
    pub arrival: f64,
    pub bandwidth: BandwidthProfile,
}

impl Request {
    pub fn constant(id: RequestId, src: NodeId, dst: NodeId, arrival: f64, bw: f64) -> Self {
        Self {
            id,
            src,
            dst,
            arrival,
            bandwidth: BandwidthProfile::constant(arrival, bw),
        }
    }

    pub fn bd(&self, t: f64) -> f64 {
        self.bandwidth.at(t)
    }

    pub fn validate(&self, network: &Network) -> Result<(), NetError> {
        network.check_node(self.src)?;
        network.check_node(self.dst)?;
        if self.src == self.dst {
            return Err(NetError::SameEndpoints(self.src));
        }
        Ok(())
    }
}

/// The path currently serving one request.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Flow {
    pub request: RequestId,
    pub path: Vec<LinkId>,
}

/// Integer routing weights, one per link, each at least 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightAssignment(Vec<u32>);

impl WeightAssignment {
    /// Weights below 1 are raised to 1.
    pub fn new(mut weights: Vec<u32>) -> Self {
        for w in &mut weights {
            *w = (*w).max(1);
        }
        Self(weights)
    }

    pub fn uniform(links: usize, weight: u32) -> Self {
        Self::new(vec![weight; links])
    }

    pub fn get(&self, link: LinkId) -> u32 {
        self.0[link]
    }

    pub fn set(&mut self, link: LinkId, weight: u32) {
        self.0[link] = weight.max(1);
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Monitored state at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub flows: Vec<Flow>,
    /// Per-link utilization, indexed by link id.
    pub util: Vec<f64>,
}

impl Snapshot {
    /// Builds a snapshot with utilization derived from `flows`.
    pub fn capture(
        network: &Network,
        t: f64,
        flows: Vec<Flow>,
        bandwidths: &[f64],
    ) -> Result<Self, NetError> {
        let util = utilization(network, &flows, bandwidths)?;
        Ok(Self { t, flows, util })
    }

    pub fn max_util(&self) -> f64 {
        self.util.iter().copied().fold(0.0, f64::max)
    }
}

/// Sum of the bandwidths of the flows whose path contains `link`.
pub fn throughput(
    network: &Network,
    flows: &[Flow],
    bandwidths: &[f64],
    link: LinkId,
) -> Result<f64, NetError> {
    network.link(link)?;
    let mut total = 0.0;
    for flow in flows {
        if flow.path.contains(&link) {
            total += *bandwidths
                .get(flow.request)
                .ok_or(NetError::UnknownRequest(flow.request))?;
        }
    }
    Ok(total)
}

pub fn link_utilization(throughput: f64, bw: f64) -> Result<f64, NetError> {
    if bw > 0.0 {
        Ok(throughput / bw)
    } else {
        Err(NetError::NonPositiveBandwidth(bw))
    }
}

/// Per-link throughput for all links at once.
pub fn link_loads(
    network: &Network,
    flows: &[Flow],
    bandwidths: &[f64],
) -> Result<Vec<f64>, NetError> {
    let mut load = vec![0.0; network.link_count()];
    for flow in flows {
        let bd = *bandwidths
            .get(flow.request)
            .ok_or(NetError::UnknownRequest(flow.request))?;
        for &l in &flow.path {
            *load.get_mut(l).ok_or(NetError::UnknownLink(l))? += bd;
        }
    }
    Ok(load)
}

/// Per-link utilization for all links at once.
pub fn utilization(
    network: &Network,
    flows: &[Flow],
    bandwidths: &[f64],
) -> Result<Vec<f64>, NetError> {
    let mut load = link_loads(network, flows, bandwidths)?;
    for (u, link) in load.iter_mut().zip(network.links()) {
        *u /= link.bw;
    }
    Ok(load)
}

/// Minimum-total-weight directed path from `src` to `dst`.
///
/// Among equal-cost paths the one with the lexicographically smallest node
/// sequence is returned. Runs one Dijkstra pass toward `dst` over incoming
/// links, then walks forward from `src` always taking the smallest-id
/// neighbour that stays on a shortest path.
pub fn shortest_weighted_path(
    network: &Network,
    weights: &WeightAssignment,
    src: NodeId,
    dst: NodeId,
) -> Result<Option<Vec<LinkId>>, NetError> {
    network.check_node(src)?;
    network.check_node(dst)?;
    if src == dst {
        return Err(NetError::SameEndpoints(src));
    }
    if weights.len() != network.link_count() {
        return Err(NetError::WeightCount {
            expected: network.link_count(),
            got: weights.len(),
        });
    }

    let mut dist = vec![u64::MAX; network.node_count()];
    dist[dst] = 0;
    let mut heap = BinaryHeap::new();
    heap.push(Reverse((0u64, dst)));
    while let Some(Reverse((d, node))) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        if node == src {
            break;
        }
        for &l in network.in_links(node) {
            let link = &network.links[l];
            let nd = d + u64::from(weights.get(l));
            if nd < dist[link.src] {
                dist[link.src] = nd;
                heap.push(Reverse((nd, link.src)));
            }
        }
    }
    if dist[src] == u64::MAX {
        return Ok(None);
    }

    // Nodes popped after `src` may hold tentative distances, but any node on
    // a shortest src->dst path has dist < dist[src] and is therefore final.
    let mut path = Vec::new();
    let mut node = src;
    while node != dst {
        let next = network.out_links(node).iter().copied().find(|&l| {
            let v = network.links[l].dst;
            dist[v] != u64::MAX
                && dist[v] < dist[node]
                && u64::from(weights.get(l)) + dist[v] == dist[node]
        });
        let l = next.expect("shortest-path tree is consistent");
        path.push(l);
        node = network.links[l].dst;
    }
    Ok(Some(path))
}

fn check_link_props(bw: f64, dl: f64) -> Result<(), ConfigError> {
    if bw.is_nan() || bw <= 0.0 {
        return Err(ConfigError::NonPositive {
            what: "bandwidth",
            value: bw,
        });
    }
    if dl.is_nan() || dl <= 0.0 {
        return Err(ConfigError::NonPositive {
            what: "delay",
            value: dl,
        });
    }
    Ok(())
}

/// Directed complete graph on `n` nodes: one link per ordered pair.
pub fn full_topology(n: usize, bw: f64, dl: f64) -> Result<Network, ConfigError> {
    if n < 2 {
        return Err(ConfigError::FullTooSmall(n));
    }
    check_link_props(bw, dl)?;
    let mut links = Vec::with_capacity(n * (n - 1));
    for src in 0..n {
        for dst in 0..n {
            if src != dst {
                links.push(Link {
                    id: links.len(),
                    src,
                    dst,
                    bw,
                    dl,
                });
            }
        }
    }
    Ok(Network::new(n, links).expect("complete graph is well formed"))
}

/// `k` node-disjoint paths of 1, 2, ..., k hops between node 0 (source) and
/// node 1 (destination), each hop carried by a link in both directions.
///
/// Intermediate nodes are numbered path by path, so `k = 3` yields the
/// five-node network where path 2 is `0 -> 2 -> 1` and path 3 is
/// `0 -> 3 -> 4 -> 1`.
pub fn mnp_topology(k: usize, bw: f64, dl: f64) -> Result<Network, ConfigError> {
    if k < 2 {
        return Err(ConfigError::MnpTooSmall(k));
    }
    check_link_props(bw, dl)?;
    let (source, dest) = (0, 1);
    let mut next_node = 2;
    let mut links = Vec::new();
    let push = |links: &mut Vec<Link>, a: NodeId, b: NodeId| {
        for (src, dst) in [(a, b), (b, a)] {
            links.push(Link {
                id: links.len(),
                src,
                dst,
                bw,
                dl,
            });
        }
    };
    for hops in 1..=k {
        let mut prev = source;
        for _ in 1..hops {
            push(&mut links, prev, next_node);
            prev = next_node;
            next_node += 1;
        }
        push(&mut links, prev, dest);
    }
    Ok(Network::new(next_node, links).expect("mnp graph is well formed"))
}
