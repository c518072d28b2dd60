//! Self-adaptive routing for software-defined networks.
//!
//! Forwarding is shortest-weighted-path routing where each link's weight
//! comes from an evolvable formula ([`expr::WeightExpr`]). When monitoring
//! detects a congested link, a genetic-programming planner ([`genplan`])
//! evolves a new formula and re-routes a minimal set of flows. The
//! [`mapek`] module wires monitoring, planning and the knowledge base
//! together, and [`sim`] drives whole scenarios tick by tick.

pub mod expr;
pub mod genplan;
pub mod mapek;
pub mod netmodel;
pub mod sim;
