//! Two-player stopping game with default: payoff assembly, nonlinear
//! evaluation by backward induction, a brute-force value oracle over all
//! stopping rules, and saddle-point extraction and verification.
//!
//! Player 1 receives `L` when stopping first, player 2 pays `U` when stopping
//! first, simultaneous interior stops pay `Q`, and both are forced to stop at
//! `τ^T = T ∧ τ`, where the payoff is `ξ₁` on survival and `ξ₂` at default.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filtration::{
    conditional_expectation, g_index, prefix_mask, split_g_index, AdaptedProcess, Children,
    LatticeModel, Measure, RandomVariable, TreeKind,
};
use crate::solver::{solve_drbsde, DRBSDEProblem, DRBSDESolution, DriverSpec, Terminal};

/// Default cap on the number of stopping rules enumerated per player.
pub const DEFAULT_RULE_CAP: usize = 4096;

/// Tolerance of the saddle inequalities.
pub const SADDLE_TOL: f64 = 1e-9;

/// Game data. All processes are F-processes; barriers and `Q` are read at
/// alive nodes, `ξ₁` at the horizon and `ξ₂` at the default step.
#[derive(Clone, Debug)]
pub struct GameSpec {
    pub measure: Arc<Measure>,
    pub lower: AdaptedProcess,
    pub upper: AdaptedProcess,
    pub q_proc: AdaptedProcess,
    pub xi1: AdaptedProcess,
    pub xi2: AdaptedProcess,
    pub driver: DriverSpec,
}

impl GameSpec {
    pub fn new(
        measure: Arc<Measure>,
        lower: AdaptedProcess,
        upper: AdaptedProcess,
        q_proc: AdaptedProcess,
        xi1: AdaptedProcess,
        xi2: AdaptedProcess,
        driver: DriverSpec,
    ) -> Result<Self> {
        let spec = Self {
            measure,
            lower,
            upper,
            q_proc,
            xi1,
            xi2,
            driver,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn model(&self) -> &LatticeModel {
        self.measure.model()
    }

    fn validate(&self) -> Result<()> {
        let n = self.model().n_steps;
        for p in [&self.lower, &self.upper, &self.q_proc, &self.xi1, &self.xi2] {
            if p.kind() != TreeKind::F || p.n_steps() != n {
                return Err(Error::Shape(format!("game data must be F-processes with {n} steps")));
            }
        }
        for k in 0..=n {
            for prefix in 0..1usize << k {
                let (l, u) = (self.lower.at(k, prefix), self.upper.at(k, prefix));
                let q = self.q_proc.at(k, prefix);
                if k < n && !(l <= q && q <= u) {
                    return Err(Error::Hypothesis {
                        name: "game-ordering",
                        detail: format!("L ≤ Q ≤ U fails at step {k}, prefix {prefix}"),
                    });
                }
                if k >= 1 && !(self.xi2.at(k, prefix) > self.xi1.at(k, prefix)) {
                    return Err(Error::Hypothesis {
                        name: "penalty",
                        detail: format!(
                            "penalty must be positive: ξ₂ - ξ₁ = {} at step {k}, prefix {prefix}",
                            self.xi2.at(k, prefix) - self.xi1.at(k, prefix)
                        ),
                    });
                }
            }
        }
        // Remaining orderings (ξ within the barriers, strict separation) are
        // the DRBSDE hypotheses.
        self.problem().map(|_| ())
    }

    /// The associated DRBSDE with `ξ = ξ₁ 1_{T<τ} + ξ₂ 1_{τ≤T}`.
    pub fn problem(&self) -> Result<DRBSDEProblem> {
        DRBSDEProblem::new(
            self.measure.clone(),
            Terminal::split(self.xi1.clone(), self.xi2.clone()),
            self.driver.clone(),
            Some(self.lower.clone()),
            Some(self.upper.clone()),
            4.0,
        )
    }

    /// Same game with `Q` replaced.
    pub fn with_q(&self, q_proc: AdaptedProcess) -> Result<Self> {
        Self::new(
            self.measure.clone(),
            self.lower.clone(),
            self.upper.clone(),
            q_proc,
            self.xi1.clone(),
            self.xi2.clone(),
            self.driver.clone(),
        )
    }

    fn xi_at(&self, k: usize, prefix: usize, status: usize) -> f64 {
        if status == 0 {
            self.xi1.at(k, prefix)
        } else {
            self.xi2.at(status, prefix & prefix_mask(status))
        }
    }
}

/// Stop decisions at alive nodes before the horizon, `stop[k][prefix]`.
/// Every rule is forced to stop at `τ^T`; the realized stop on a path is the
/// first node of the set at or after the game's start.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StoppingRule {
    pub stop: Vec<Vec<bool>>,
}

impl StoppingRule {
    /// Stops only at `τ^T`.
    pub fn never(n_steps: usize) -> Self {
        Self {
            stop: (0..n_steps).map(|k| vec![false; 1 << k]).collect(),
        }
    }

    /// Stops at every alive node of step `k` (`k = N` means `τ^T`).
    pub fn at_step(n_steps: usize, k: usize) -> Self {
        let mut r = Self::never(n_steps);
        if k < n_steps {
            r.stop[k].iter_mut().for_each(|b| *b = true);
        }
        r
    }

    pub fn from_nodes(n_steps: usize, nodes: &[(usize, usize)]) -> Result<Self> {
        let mut r = Self::never(n_steps);
        for &(k, prefix) in nodes {
            if k >= n_steps || prefix >= 1 << k {
                return Err(Error::Rule(format!("no alive pre-horizon node ({k}, {prefix})")));
            }
            r.stop[k][prefix] = true;
        }
        Ok(r)
    }

    pub fn n_steps(&self) -> usize {
        self.stop.len()
    }

    /// Whether the rule stops at the alive node `(k, prefix)`; always true
    /// at the horizon.
    pub fn stops_at(&self, k: usize, prefix: usize) -> bool {
        k >= self.stop.len() || self.stop[k][prefix & prefix_mask(k)]
    }

    /// Alive stop nodes in the set.
    pub fn nodes(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (k, row) in self.stop.iter().enumerate() {
            for (p, &b) in row.iter().enumerate() {
                if b {
                    out.push((k, p));
                }
            }
        }
        out
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.stop.len() != n || self.stop.iter().enumerate().any(|(k, r)| r.len() != 1 << k) {
            return Err(Error::Rule(format!("rule does not match a {n}-step tree")));
        }
        Ok(())
    }
}

/// Start of the game: a grid step or a stopping rule.
#[derive(Clone, Debug, PartialEq)]
pub enum Theta {
    Step(usize),
    Rule(StoppingRule),
}

/// A G-node `(step, prefix, status)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GNodeRef {
    pub step: usize,
    pub prefix: usize,
    pub status: usize,
}

impl GNodeRef {
    fn is_terminal(&self, n: usize) -> bool {
        self.status != 0 || self.step == n
    }
}

/// Positive-mass G-nodes where the game starts.
pub fn theta_nodes(spec: &GameSpec, theta: &Theta) -> Result<Vec<GNodeRef>> {
    let n = spec.model().n_steps;
    let m = &spec.measure;
    let mut out = Vec::new();
    match theta {
        Theta::Step(k) => {
            if *k > n {
                return Err(Error::Rule(format!("θ = {k} beyond the horizon {n}")));
            }
            for (i, &w) in m.g_masses(*k).iter().enumerate() {
                if w > 0.0 {
                    let (prefix, status) = split_g_index(*k, i);
                    out.push(GNodeRef {
                        step: *k,
                        prefix,
                        status,
                    });
                }
            }
        }
        Theta::Rule(rule) => {
            rule.check(n)?;
            collect_first_stops(m, rule, 0, 0, &mut out);
        }
    }
    Ok(out)
}

fn collect_first_stops(
    m: &Measure,
    rule: &StoppingRule,
    k: usize,
    prefix: usize,
    out: &mut Vec<GNodeRef>,
) {
    let n = m.model().n_steps;
    if k == n || rule.stops_at(k, prefix) {
        out.push(GNodeRef {
            step: k,
            prefix,
            status: 0,
        });
        return;
    }
    for bit in 0..2usize {
        let c = prefix | (bit << k);
        if m.g_mass(k + 1, g_index(k + 1, c, k + 1)) > 0.0 {
            out.push(GNodeRef {
                step: k + 1,
                prefix: c,
                status: k + 1,
            });
        }
    }
    for bit in 0..2usize {
        collect_first_stops(m, rule, k + 1, prefix | (bit << k), out);
    }
}

/// Step at which the game starts on an atom.
fn theta_step(theta: &Theta, n: usize, path: usize, outcome: usize) -> usize {
    match theta {
        Theta::Step(k) => *k,
        Theta::Rule(rule) => {
            for k in 0..=n {
                if outcome >= 1 && outcome <= k {
                    return k;
                }
                if rule.stops_at(k, path) {
                    return k;
                }
            }
            n
        }
    }
}

/// Which payoff case fired on an atom.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PayoffCase {
    Lower,
    Upper,
    Simultaneous,
    Terminal,
}

fn payoff_on_atom(
    r1: &StoppingRule,
    r2: &StoppingRule,
    spec: &GameSpec,
    start: usize,
    path: usize,
    outcome: usize,
) -> (f64, PayoffCase) {
    let n = spec.model().n_steps;
    for k in start..=n {
        let prefix = path & prefix_mask(k);
        if (outcome >= 1 && outcome <= k) || k == n {
            let status = if outcome >= 1 && outcome <= k { outcome } else { 0 };
            return (spec.xi_at(k, prefix, status), PayoffCase::Terminal);
        }
        let s1 = r1.stops_at(k, prefix);
        let s2 = r2.stops_at(k, prefix);
        match (s1, s2) {
            (true, true) => return (spec.q_proc.at(k, prefix), PayoffCase::Simultaneous),
            (true, false) => return (spec.lower.at(k, prefix), PayoffCase::Lower),
            (false, true) => return (spec.upper.at(k, prefix), PayoffCase::Upper),
            _ => {}
        }
    }
    unreachable!("every path stops at the horizon")
}

/// Payoff of the rule pair on every atom.
pub fn payoff(
    rule1: &StoppingRule,
    rule2: &StoppingRule,
    spec: &GameSpec,
    theta: &Theta,
) -> Result<RandomVariable> {
    Ok(payoff_with_cases(rule1, rule2, spec, theta)?.0)
}

/// Payoff plus the case that fired on each atom.
pub fn payoff_with_cases(
    rule1: &StoppingRule,
    rule2: &StoppingRule,
    spec: &GameSpec,
    theta: &Theta,
) -> Result<(RandomVariable, Vec<PayoffCase>)> {
    let model = *spec.model();
    let n = model.n_steps;
    rule1.check(n)?;
    rule2.check(n)?;
    let mut values = Vec::with_capacity(model.n_atoms());
    let mut cases = Vec::with_capacity(model.n_atoms());
    for path in 0..model.n_paths() {
        for o in 0..=n {
            let start = theta_step(theta, n, path, o);
            let (v, c) = payoff_on_atom(rule1, rule2, spec, start, path, o);
            values.push(v);
            cases.push(c);
        }
    }
    Ok((RandomVariable { values }, cases))
}

/// The minimum of two rules: stops wherever either stops.
pub fn rule_min(a: &StoppingRule, b: &StoppingRule) -> StoppingRule {
    StoppingRule {
        stop: a
            .stop
            .iter()
            .zip(&b.stop)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| *p || *q).collect())
            .collect(),
    }
}

/// Nonlinear evaluation of `payoff_rv` stopped at `horizon`: the explicit
/// BSDE scheme run backward from the realized stop node on each path.
/// Returns the value at each node of [`theta_nodes`].
pub fn ef_evaluate(
    payoff_rv: &RandomVariable,
    horizon: &StoppingRule,
    driver: &DriverSpec,
    measure: &Measure,
    theta: &Theta,
) -> Result<Vec<(GNodeRef, f64)>> {
    let model = *measure.model();
    let n = model.n_steps;
    horizon.check(n)?;
    // Alive nodes at or after θ.
    let mut active: Vec<Vec<bool>> = (0..=n).map(|k| vec![false; 1 << k]).collect();
    match theta {
        Theta::Step(k0) => {
            for k in *k0..=n {
                active[k].iter_mut().for_each(|b| *b = true);
            }
        }
        Theta::Rule(rule) => {
            for k in 0..=n {
                for p in 0..1usize << k {
                    let started = k == 0 && rule.stops_at(0, 0)
                        || k > 0 && (active[k - 1][p & prefix_mask(k - 1)] || rule.stops_at(k, p));
                    active[k][p] = started || k == n;
                }
            }
        }
    }
    let mut x = AdaptedProcess::zeros(TreeKind::G, n);
    for k in (0..=n).rev() {
        let proj = conditional_expectation(payoff_rv, k, TreeKind::G, measure)?;
        for (i, &w) in measure.g_masses(k).iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let (prefix, status) = split_g_index(k, i);
            let stopped = status != 0 || k == n || (active[k][prefix] && horizon.stops_at(k, prefix));
            let v = if stopped {
                proj.values[i]
            } else {
                let ch = measure.children(k, prefix, 0);
                continuation(&ch, |c| x.at(k + 1, c.index), driver, k, prefix, model.dt)
            };
            x.set(k, i, v);
        }
    }
    let nodes = theta_nodes_from_measure(measure, theta)?;
    Ok(nodes
        .into_iter()
        .map(|g| (g, x.at(g.step, g_index(g.step, g.prefix, g.status))))
        .collect())
}

fn theta_nodes_from_measure(measure: &Measure, theta: &Theta) -> Result<Vec<GNodeRef>> {
    let n = measure.model().n_steps;
    let mut out = Vec::new();
    match theta {
        Theta::Step(k) => {
            for (i, &w) in measure.g_masses(*k).iter().enumerate() {
                if w > 0.0 {
                    let (prefix, status) = split_g_index(*k, i);
                    out.push(GNodeRef {
                        step: *k,
                        prefix,
                        status,
                    });
                }
            }
        }
        Theta::Rule(rule) => {
            rule.check(n)?;
            collect_first_stops(measure, rule, 0, 0, &mut out);
        }
    }
    Ok(out)
}

#[inline]
fn continuation(
    ch: &Children,
    value: impl Fn(&crate::filtration::Child) -> f64,
    driver: &DriverSpec,
    k: usize,
    prefix: usize,
    dt: f64,
) -> f64 {
    let pred = ch.mean(&value);
    let z = ch.mean(|c| (value(c) - pred) * c.db) / ch.mean(|c| c.db * c.db);
    pred + driver.eval(k, prefix, pred, z) * dt
}

/// Alive part of the game tree below a θ-node, with local heap numbering
/// `id(d, l) = 2^d - 1 + l` of the alive nodes at depth `d < depth`.
struct Subtree {
    root_step: usize,
    root_prefix: usize,
    depth: usize,
    /// Per local node: children, `(L, U, Q)`, dead-child terminal values.
    nodes: Vec<LocalNode>,
    leaves: Vec<f64>,
}

struct LocalNode {
    k: usize,
    prefix: usize,
    ch: Children,
    lower: f64,
    upper: f64,
    q: f64,
    /// `ξ₂` at each child, indexed like `ch`.
    child_terminal: [f64; 4],
}

#[inline]
fn local_id(d: usize, l: usize) -> usize {
    (1usize << d) - 1 + l
}

impl Subtree {
    fn new(spec: &GameSpec, root: GNodeRef) -> Self {
        let n = spec.model().n_steps;
        let depth = n - root.step;
        let mut nodes = Vec::with_capacity((1usize << depth).saturating_sub(1));
        for d in 0..depth {
            let k = root.step + d;
            for l in 0..1usize << d {
                let prefix = root.prefix | (l << root.step);
                let ch = spec.measure.children(k, prefix, 0);
                let mut child_terminal = [0.0; 4];
                for (j, c) in ch.iter().enumerate() {
                    if c.status != 0 {
                        child_terminal[j] = spec.xi_at(k + 1, c.prefix, c.status);
                    }
                }
                nodes.push(LocalNode {
                    k,
                    prefix,
                    ch,
                    lower: spec.lower.at(k, prefix),
                    upper: spec.upper.at(k, prefix),
                    q: spec.q_proc.at(k, prefix),
                    child_terminal,
                });
            }
        }
        let leaves = (0..1usize << depth)
            .map(|l| spec.xi1.at(n, root.prefix | (l << root.step)))
            .collect();
        Self {
            root_step: root.step,
            root_prefix: root.prefix,
            depth,
            nodes,
            leaves,
        }
    }

    /// Value at the root for stop masks `m1`, `m2`.
    fn evaluate(&self, m1: u64, m2: u64, driver: &DriverSpec, dt: f64, buf: &mut Vec<f64>) -> f64 {
        buf.clear();
        buf.extend_from_slice(&self.leaves);
        let mut next = std::mem::take(buf);
        for d in (0..self.depth).rev() {
            let mut cur = vec![0.0; 1usize << d];
            for (l, slot) in cur.iter_mut().enumerate() {
                let id = local_id(d, l);
                let node = &self.nodes[id];
                let s1 = m1 >> id & 1 == 1;
                let s2 = m2 >> id & 1 == 1;
                *slot = match (s1, s2) {
                    (true, true) => node.q,
                    (true, false) => node.lower,
                    (false, true) => node.upper,
                    (false, false) => {
                        let vals: Vec<f64> = node
                            .ch
                            .iter()
                            .enumerate()
                            .map(|(j, c)| {
                                if c.status != 0 {
                                    node.child_terminal[j]
                                } else {
                                    let bit = (c.prefix >> node.k) & 1;
                                    next[l | (bit << d)]
                                }
                            })
                            .collect();
                        let pred = node
                            .ch
                            .iter()
                            .zip(&vals)
                            .map(|(c, v)| c.weight * v)
                            .sum::<f64>()
                            / node.ch.total;
                        let zn = node
                            .ch
                            .iter()
                            .zip(&vals)
                            .map(|(c, v)| c.weight * (v - pred) * c.db)
                            .sum::<f64>()
                            / node.ch.total;
                        let zd = node.ch.iter().map(|c| c.weight * c.db * c.db).sum::<f64>()
                            / node.ch.total;
                        let z = zn / zd;
                        pred + driver.eval(node.k, node.prefix, pred, z) * dt
                    }
                };
            }
            next = cur;
        }
        let v = next[0];
        *buf = next;
        v
    }

    fn rule_count(&self) -> usize {
        let mut c: usize = 1;
        for _ in 0..self.depth {
            c = c.saturating_mul(c).saturating_add(1);
        }
        c
    }

    /// All minimal stop sets of the subtree.
    fn enumerate(&self) -> Vec<u64> {
        fn rec(d: usize, l: usize, depth: usize) -> Vec<u64> {
            if d == depth {
                return vec![0];
            }
            let here = 1u64 << local_id(d, l);
            let a = rec(d + 1, l, depth);
            let b = rec(d + 1, l | (1 << d), depth);
            let mut out = Vec::with_capacity(1 + a.len() * b.len());
            out.push(here);
            for x in &a {
                for y in &b {
                    out.push(x | y);
                }
            }
            out
        }
        rec(0, 0, self.depth)
    }

    /// Random minimal stop set, stopping at each reachable node with
    /// probability `p`.
    fn random_rule(&self, rng: &mut ChaCha8Rng, p: f64) -> u64 {
        let mut mask = 0u64;
        let mut stack = vec![(0usize, 0usize)];
        while let Some((d, l)) = stack.pop() {
            if d == self.depth {
                continue;
            }
            if rng.random::<f64>() < p {
                mask |= 1 << local_id(d, l);
            } else {
                stack.push((d + 1, l));
                stack.push((d + 1, l | (1 << d)));
            }
        }
        mask
    }

    /// Restriction of a global rule (first-stop semantics).
    fn mask_of(&self, rule: &StoppingRule) -> u64 {
        let mut mask = 0u64;
        for d in 0..self.depth {
            for l in 0..1usize << d {
                if rule.stops_at(self.root_step + d, self.root_prefix | (l << self.root_step)) {
                    mask |= 1 << local_id(d, l);
                }
            }
        }
        mask
    }

    fn write_mask(&self, mask: u64, rule: &mut StoppingRule) {
        for d in 0..self.depth {
            for l in 0..1usize << d {
                if mask >> local_id(d, l) & 1 == 1 {
                    let k = self.root_step + d;
                    rule.stop[k][self.root_prefix | (l << self.root_step)] = true;
                }
            }
        }
    }
}

/// Game values at one θ-node.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeGameValue {
    pub node: GNodeRef,
    pub upper: f64,
    pub lower: f64,
    pub y: f64,
    pub rules_per_player: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GameValueReport {
    /// Values at the first θ-node.
    pub upper: f64,
    pub lower: f64,
    pub y_at_theta: f64,
    /// Argmax-min rule of player 1 and argmin-max rule of player 2.
    pub saddle: (StoppingRule, StoppingRule),
    pub deviations_checked: usize,
    pub nodes: Vec<NodeGameValue>,
}

impl GameValueReport {
    /// Largest `|upper - lower|` and `|value - Y_θ|` over θ-nodes.
    pub fn max_gap(&self) -> (f64, f64) {
        self.nodes.iter().fold((0.0f64, 0.0f64), |(a, b), v| {
            (a.max((v.upper - v.lower).abs()), b.max((v.upper - v.y).abs().max((v.lower - v.y).abs())))
        })
    }
}

fn y_at(sol: &DRBSDESolution, g: GNodeRef) -> f64 {
    sol.y.at(g.step, g_index(g.step, g.prefix, g.status))
}

/// Brute-force upper and lower values over all stopping rules.
pub fn brute_force_value(spec: &GameSpec, theta: &Theta) -> Result<GameValueReport> {
    brute_force_value_capped(spec, theta, DEFAULT_RULE_CAP)
}

pub fn brute_force_value_capped(spec: &GameSpec, theta: &Theta, cap: usize) -> Result<GameValueReport> {
    let model = *spec.model();
    let n = model.n_steps;
    let sol = solve_drbsde(&spec.problem()?)?;
    let mut rule1 = StoppingRule::never(n);
    let mut rule2 = StoppingRule::never(n);
    let mut nodes = Vec::new();
    let mut deviations = 0usize;
    for g in theta_nodes(spec, theta)? {
        let y = y_at(&sol, g);
        if g.is_terminal(n) {
            let v = spec.xi_at(g.step, g.prefix, g.status);
            nodes.push(NodeGameValue {
                node: g,
                upper: v,
                lower: v,
                y,
                rules_per_player: 1,
            });
            continue;
        }
        let sub = Subtree::new(spec, g);
        let count = sub.rule_count();
        if count > cap {
            return Err(Error::Size(format!(
                "{count} stopping rules per player exceed the cap {cap}; use saddle verification instead"
            )));
        }
        let rules = sub.enumerate();
        let table: Vec<Vec<f64>> = rules
            .par_iter()
            .map(|&a| {
                let mut buf = Vec::new();
                rules
                    .iter()
                    .map(|&b| sub.evaluate(a, b, &spec.driver, model.dt, &mut buf))
                    .collect()
            })
            .collect();
        deviations += rules.len() * rules.len();
        // lower = max_i min_j, upper = min_j max_i; first index wins ties.
        let (mut lower, mut best1) = (f64::NEG_INFINITY, 0);
        for (i, row) in table.iter().enumerate() {
            let mn = row.iter().cloned().fold(f64::INFINITY, f64::min);
            if mn > lower {
                lower = mn;
                best1 = i;
            }
        }
        let (mut upper, mut best2) = (f64::INFINITY, 0);
        for j in 0..rules.len() {
            let mx = table.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
            if mx < upper {
                upper = mx;
                best2 = j;
            }
        }
        sub.write_mask(rules[best1], &mut rule1);
        sub.write_mask(rules[best2], &mut rule2);
        nodes.push(NodeGameValue {
            node: g,
            upper,
            lower,
            y,
            rules_per_player: rules.len(),
        });
    }
    let first = nodes
        .first()
        .cloned()
        .ok_or_else(|| Error::Rule("θ has no positive-mass node".into()))?;
    Ok(GameValueReport {
        upper: first.upper,
        lower: first.lower,
        y_at_theta: first.y,
        saddle: (rule1, rule2),
        deviations_checked: deviations,
        nodes,
    })
}

/// `σ₁` stops where `Y = L`, `σ₂` where `Y = U` (exact equality, as the
/// clamp writes the barrier value itself).
pub fn saddle_from_solution(
    solution: &DRBSDESolution,
    spec: &GameSpec,
    _theta: &Theta,
) -> (StoppingRule, StoppingRule) {
    let n = spec.model().n_steps;
    let mut r1 = StoppingRule::never(n);
    let mut r2 = StoppingRule::never(n);
    for k in 0..n {
        for prefix in 0..1usize << k {
            let y = solution.y.at(k, g_index(k, prefix, 0));
            r1.stop[k][prefix] = y == spec.lower.at(k, prefix);
            r2.stop[k][prefix] = y == spec.upper.at(k, prefix);
        }
    }
    (r1, r2)
}

/// Player 1's rule moved one step earlier on every path: each realized stop
/// after θ (including the forced stop at the horizon on alive paths) is
/// replaced by its parent.
pub fn perturb_early(rule: &StoppingRule, spec: &GameSpec, theta: &Theta) -> Result<StoppingRule> {
    let n = spec.model().n_steps;
    rule.check(n)?;
    let mut out = StoppingRule::never(n);
    for g in theta_nodes(spec, theta)? {
        if g.is_terminal(n) {
            continue;
        }
        mark_early(rule, g.step, g.prefix, g.step, &mut out);
    }
    Ok(out)
}

fn mark_early(rule: &StoppingRule, k: usize, prefix: usize, start: usize, out: &mut StoppingRule) {
    let n = rule.n_steps();
    if k < n && rule.stops_at(k, prefix) {
        if k == start {
            out.stop[k][prefix] = true;
        }
        return;
    }
    let child_stops = (0..2usize).any(|bit| {
        let c = prefix | (bit << k);
        k + 1 == n || rule.stops_at(k + 1, c)
    });
    if child_stops {
        out.stop[k][prefix] = true;
        return;
    }
    for bit in 0..2usize {
        mark_early(rule, k + 1, prefix | (bit << k), start, out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaddleReport {
    /// `V(σ₁, σ₂)` at the first θ-node.
    pub pair_value: f64,
    pub y_at_theta: f64,
    /// Largest `|V(σ₁, σ₂) - Y_θ|` over θ-nodes.
    pub value_gap: f64,
    pub left_violations: usize,
    pub right_violations: usize,
    pub max_left_excess: f64,
    pub max_right_excess: f64,
    pub band_violations: usize,
    pub band_max_error: f64,
    pub deviations_checked: usize,
    pub sampled: bool,
}

impl SaddleReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.left_violations == 0
            && self.right_violations == 0
            && self.band_violations == 0
            && self.value_gap <= tol
    }
}

const SAMPLED_DEVIATIONS: usize = 2048;

/// Checks both saddle inequalities against every unilateral deviation, the
/// value identity `V(σ₁, σ₂) = Y_θ`, and that `Y` is an `𝓔^f`-martingale
/// between every band node and every later horizon before `σ₁ ∧ σ₂`.
pub fn verify_saddle(
    pair: &(StoppingRule, StoppingRule),
    spec: &GameSpec,
    theta: &Theta,
) -> Result<SaddleReport> {
    let model = *spec.model();
    let n = model.n_steps;
    let dt = model.dt;
    pair.0.check(n)?;
    pair.1.check(n)?;
    let sol = solve_drbsde(&spec.problem()?)?;
    let mut rep = SaddleReport {
        pair_value: f64::NAN,
        y_at_theta: f64::NAN,
        value_gap: 0.0,
        left_violations: 0,
        right_violations: 0,
        max_left_excess: 0.0,
        max_right_excess: 0.0,
        band_violations: 0,
        band_max_error: 0.0,
        deviations_checked: 0,
        sampled: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5add1e);
    for g in theta_nodes(spec, theta)? {
        let y = y_at(&sol, g);
        if rep.y_at_theta.is_nan() {
            rep.y_at_theta = y;
        }
        if g.is_terminal(n) {
            if rep.pair_value.is_nan() {
                rep.pair_value = y;
            }
            continue;
        }
        let sub = Subtree::new(spec, g);
        let (a, b) = (sub.mask_of(&pair.0), sub.mask_of(&pair.1));
        let mut buf = Vec::new();
        let v = sub.evaluate(a, b, &spec.driver, dt, &mut buf);
        if rep.pair_value.is_nan() {
            rep.pair_value = v;
        }
        rep.value_gap = rep.value_gap.max((v - y).abs());
        let devs = if sub.rule_count() <= DEFAULT_RULE_CAP {
            sub.enumerate()
        } else {
            rep.sampled = true;
            (0..SAMPLED_DEVIATIONS)
                .map(|_| sub.random_rule(&mut rng, 0.3))
                .collect()
        };
        let tol = SADDLE_TOL * (1.0 + v.abs());
        let results: Vec<(f64, f64)> = devs
            .par_iter()
            .map(|&d| {
                let mut buf = Vec::new();
                (
                    sub.evaluate(d, b, &spec.driver, dt, &mut buf),
                    sub.evaluate(a, d, &spec.driver, dt, &mut buf),
                )
            })
            .collect();
        for (left, right) in results {
            rep.deviations_checked += 2;
            if left > v + tol {
                rep.left_violations += 1;
                rep.max_left_excess = rep.max_left_excess.max(left - v);
            }
            if right < v - tol {
                rep.right_violations += 1;
                rep.max_right_excess = rep.max_right_excess.max(v - right);
            }
        }
        band_check(spec, &sol, pair, g, &mut rep);
    }
    Ok(rep)
}

/// `Y_n = 𝓔^f_{n, m ∧ σ}(Y_{m ∧ σ})` for band nodes `n` and steps `m > n`.
fn band_check(
    spec: &GameSpec,
    sol: &DRBSDESolution,
    pair: &(StoppingRule, StoppingRule),
    root: GNodeRef,
    rep: &mut SaddleReport,
) {
    let n = spec.model().n_steps;
    let dt = spec.model().dt;
    let stopped = |k: usize, p: usize| pair.0.stops_at(k, p) || pair.1.stops_at(k, p);
    let mut band = Vec::new();
    let mut stack = vec![(root.step, root.prefix)];
    while let Some((k, p)) = stack.pop() {
        if k == n || stopped(k, p) {
            continue;
        }
        band.push((k, p));
        for bit in 0..2usize {
            stack.push((k + 1, p | (bit << k)));
        }
    }
    let tol = SADDLE_TOL * (1.0 + sol.y.max_abs());
    for &(k0, p0) in &band {
        for horizon in k0 + 1..=n {
            let v = band_value(spec, sol, &stopped, k0, p0, horizon, dt);
            let err = (v - sol.y.at(k0, g_index(k0, p0, 0))).abs();
            rep.band_max_error = rep.band_max_error.max(err);
            if err > tol {
                rep.band_violations += 1;
            }
        }
    }
}

fn band_value(
    spec: &GameSpec,
    sol: &DRBSDESolution,
    stopped: &dyn Fn(usize, usize) -> bool,
    k: usize,
    prefix: usize,
    horizon: usize,
    dt: f64,
) -> f64 {
    let n = spec.model().n_steps;
    if k == horizon || k == n || stopped(k, prefix) {
        return sol.y.at(k, g_index(k, prefix, 0));
    }
    let ch = spec.measure.children(k, prefix, 0);
    let vals: Vec<f64> = ch
        .iter()
        .map(|c| {
            if c.status != 0 {
                sol.y.at(k + 1, c.index)
            } else {
                band_value(spec, sol, stopped, k + 1, c.prefix, horizon, dt)
            }
        })
        .collect();
    let pred = ch.iter().zip(&vals).map(|(c, v)| c.weight * v).sum::<f64>() / ch.total;
    let zn = ch.iter().zip(&vals).map(|(c, v)| c.weight * (v - pred) * c.db).sum::<f64>() / ch.total;
    let zd = ch.iter().map(|c| c.weight * c.db * c.db).sum::<f64>() / ch.total;
    pred + spec.driver.eval(k, prefix, pred, zn / zd) * dt
}

/// Game values with `Q = L` and with `Q = U`, to gauge the influence of
/// the simultaneous-stop payoff.
pub fn q_sensitivity(spec: &GameSpec, theta: &Theta) -> Result<(GameValueReport, GameValueReport)> {
    let at_l = brute_force_value(&spec.with_q(spec.lower.clone())?, theta)?;
    let at_u = brute_force_value(&spec.with_q(spec.upper.clone())?, theta)?;
    Ok((at_l, at_u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtration::{build_azema, reweight_to_q, DefaultLaw};

    fn trivial(n: usize) -> GameSpec {
        let model = LatticeModel::new(n, 0.5).unwrap();
        let b = build_azema(&model, &DefaultLaw::none(&model)).unwrap();
        let q = Arc::new(reweight_to_q(&b).unwrap());
        let c = |v| AdaptedProcess::constant(TreeKind::F, n, v);
        GameSpec::new(q, c(-1.0), c(1.0), c(0.0), c(0.0), c(0.5), DriverSpec::zero(n)).unwrap()
    }

    #[test]
    fn forced_stops_pay_terminal() {
        let spec = trivial(2);
        let never = StoppingRule::never(2);
        let (x, cases) = payoff_with_cases(&never, &never, &spec, &Theta::Step(0)).unwrap();
        for (i, v) in x.values.iter().enumerate() {
            let expected = if i % 3 == 0 { 0.0 } else { 0.5 };
            assert_eq!(*v, expected);
        }
        assert!(cases.iter().all(|c| *c == PayoffCase::Terminal));
    }

    #[test]
    fn immediate_stop_pays_lower() {
        let spec = trivial(2);
        let now = StoppingRule::at_step(2, 0);
        let x = payoff(&now, &StoppingRule::never(2), &spec, &Theta::Step(0)).unwrap();
        assert!(x.values.iter().all(|v| *v == -1.0));
        let both = payoff(&now, &now, &spec, &Theta::Step(0)).unwrap();
        assert!(both.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn trivial_game_value_is_zero() {
        let spec = trivial(3);
        let r = brute_force_value(&spec, &Theta::Step(0)).unwrap();
        assert_eq!(r.upper, 0.0);
        assert_eq!(r.lower, 0.0);
        assert_eq!(r.nodes[0].rules_per_player, 26);
    }

    #[test]
    fn penalty_must_be_positive() {
        let spec = trivial(2);
        let c = |v| AdaptedProcess::constant(TreeKind::F, 2, v);
        let err = GameSpec::new(
            spec.measure.clone(),
            c(-1.0),
            c(1.0),
            c(0.0),
            c(0.0),
            c(0.0),
            DriverSpec::zero(2),
        )
        .unwrap_err();
        assert!(err.to_string().contains("penalty must be positive"));
    }

    #[test]
    fn discounted_constant_payoff() {
        let spec = trivial(3);
        let model = *spec.model();
        let x = RandomVariable::constant(&model, 2.0);
        let d = DriverSpec::linear_constant(3, 0.2, 0.0);
        let v = ef_evaluate(&x, &StoppingRule::at_step(3, 2), &d, &spec.measure, &Theta::Step(0)).unwrap();
        assert!((v[0].1 - 2.0 * (1.0 - 0.2 * 0.5f64).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn cap_is_enforced() {
        let spec = trivial(3);
        assert!(matches!(
            brute_force_value_capped(&spec, &Theta::Step(0), 10),
            Err(Error::Size(_))
        ));
    }
}
