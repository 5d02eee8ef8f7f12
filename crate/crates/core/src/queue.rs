//! The queueing environment: a balancer hands each packet to a random
//! scheduler, the scheduler routes it to one of the queues it can access,
//! and every queue serves and drops independently.
//!
//! Time is slotted. Per slot and queue j, departures D_j ~ Poisson(beta_j dt)
//! leave first, then arrivals A_j ~ Poisson(lambda dt p_j) join, where p_j is
//! the fraction of routed packets aimed at j (Poisson thinning of the packet
//! stream by the population's joint state-action distribution). Arrivals
//! beyond the buffer cap are dropped and penalized.

use crate::error::Error;
use crate::model::{DecisionRule, PolicyTuple, SpaceSpec, StateActionDist, StationaryPolicy};
use crate::prob::{sample_poisson, FiniteDist, RngStream};
use crate::Result;
use std::fmt;
use std::str::FromStr;

/// Buffer fill levels of every queue; the shared environment state.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EnvState(pub Vec<u32>);

/// The sorted set of queues one scheduler can reach.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgentState {
    access: Vec<usize>,
}

impl AgentState {
    pub fn new(mut access: Vec<usize>) -> Result<Self> {
        access.sort_unstable();
        if access.is_empty() {
            return Err(Error::InvalidParameter(
                "an agent must reach at least one queue".into(),
            ));
        }
        if access.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter(
                "agent access set contains a duplicate queue index".into(),
            ));
        }
        Ok(Self { access })
    }

    pub fn access(&self) -> &[usize] {
        &self.access
    }

    pub fn can_reach(&self, queue: usize) -> bool {
        self.access.binary_search(&queue).is_ok()
    }
}

impl fmt::Display for EnvState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_bracketed(f, self.0.iter())
    }
}

impl fmt::Display for AgentState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_bracketed(f, self.access.iter())
    }
}

fn write_bracketed<T: fmt::Display>(
    f: &mut fmt::Formatter<'_>,
    items: impl Iterator<Item = T>,
) -> fmt::Result {
    write!(f, "[")?;
    for (i, x) in items.enumerate() {
        if i > 0 {
            write!(f, ",")?;
        }
        write!(f, "{x}")?;
    }
    write!(f, "]")
}

fn parse_bracketed<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    let inner = s
        .trim()
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| Error::InvalidParameter(format!("{what} must look like [a,b,...]: {s:?}")))?;
    inner
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<T>()
                .map_err(|_| Error::InvalidParameter(format!("bad component {part:?} in {what} {s:?}")))
        })
        .collect()
}

impl FromStr for EnvState {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(EnvState(parse_bracketed(s, "environment state")?))
    }
}

impl FromStr for AgentState {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AgentState::new(parse_bracketed(s, "agent state")?)
    }
}

/// Physical parameters of the queue system.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueConfig {
    pub num_queues: usize,
    /// Buffer cap per queue.
    pub capacities: Vec<u32>,
    /// Total packet arrival rate at the balancer, packets per second.
    pub arrival_rate: f64,
    /// Service rate per queue, packets per second.
    pub service_rates: Vec<f64>,
    /// Slot length in seconds.
    pub dt: f64,
    /// Penalty per dropped packet.
    pub drop_penalty: f64,
    /// Mass a truncated Poisson kernel may discard before renormalizing.
    pub trunc_eps: f64,
}

impl Default for QueueConfig {
    /// Two queues with cap 5, lambda = 3M - 1 = 5/s, beta = 3/s, half-second
    /// slots, unit drop penalty.
    fn default() -> Self {
        Self {
            num_queues: 2,
            capacities: vec![5, 5],
            arrival_rate: 5.0,
            service_rates: vec![3.0, 3.0],
            dt: 0.5,
            drop_penalty: 1.0,
            trunc_eps: 1e-12,
        }
    }
}

impl QueueConfig {
    /// Symmetric system: `m` queues sharing one cap and service rate.
    pub fn symmetric(m: usize, cap: u32, arrival_rate: f64, service_rate: f64) -> Self {
        Self {
            num_queues: m,
            capacities: vec![cap; m],
            arrival_rate,
            service_rates: vec![service_rate; m],
            ..Self::default()
        }
    }

    /// Default balancer rate for `m` queues.
    pub fn default_arrival_rate(m: usize) -> f64 {
        (3 * m) as f64 - 1.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_queues < 1 || self.num_queues > 16 {
            return Err(Error::InvalidParameter(format!(
                "num_queues must be in 1..=16, got {}",
                self.num_queues
            )));
        }
        if self.capacities.len() != self.num_queues {
            return Err(Error::InvalidParameter(format!(
                "capacities has {} entries for {} queues",
                self.capacities.len(),
                self.num_queues
            )));
        }
        if self.service_rates.len() != self.num_queues {
            return Err(Error::InvalidParameter(format!(
                "service_rates has {} entries for {} queues",
                self.service_rates.len(),
                self.num_queues
            )));
        }
        for (j, &s) in self.service_rates.iter().enumerate() {
            if !s.is_finite() || s < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "service_rates[{j}] must be finite and nonnegative, got {s}"
                )));
            }
        }
        if !self.arrival_rate.is_finite() || self.arrival_rate < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "arrival_rate must be finite and nonnegative, got {}",
                self.arrival_rate
            )));
        }
        if !self.dt.is_finite() || self.dt <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !self.drop_penalty.is_finite() || self.drop_penalty < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "drop_penalty must be finite and nonnegative, got {}",
                self.drop_penalty
            )));
        }
        if !(self.trunc_eps > 0.0 && self.trunc_eps <= 1e-6) {
            return Err(Error::InvalidParameter(format!(
                "trunc_eps must lie in (0, 1e-6], got {}",
                self.trunc_eps
            )));
        }
        Ok(())
    }

    /// Largest possible per-step penalty magnitude: every expected arrival
    /// dropped, so R = drop_penalty * arrival_rate * dt.
    pub fn reward_bound(&self) -> f64 {
        self.drop_penalty * self.arrival_rate * self.dt
    }

    /// Expected arrivals per slot at the balancer.
    pub fn arrivals_per_slot(&self) -> f64 {
        self.arrival_rate * self.dt
    }

    /// Expected service completions per slot at queue `j`.
    pub fn services_per_slot(&self, j: usize) -> f64 {
        self.service_rates[j] * self.dt
    }
}

/// All buffer-filling vectors in lexicographic order.
pub fn enumerate_env_states(capacities: &[u32]) -> Vec<EnvState> {
    let mut out = Vec::new();
    let mut levels = vec![0u32; capacities.len()];
    loop {
        out.push(EnvState(levels.clone()));
        let mut j = capacities.len();
        loop {
            if j == 0 {
                return out;
            }
            j -= 1;
            if levels[j] < capacities[j] {
                levels[j] += 1;
                for l in &mut levels[j + 1..] {
                    *l = 0;
                }
                break;
            }
        }
    }
}

/// All nonempty access sets in canonical (lexicographic) order.
pub fn enumerate_agent_states(num_queues: usize) -> Vec<AgentState> {
    let mut out: Vec<AgentState> = (1u32..(1 << num_queues))
        .map(|mask| {
            let access: Vec<usize> = (0..num_queues).filter(|q| mask >> q & 1 == 1).collect();
            AgentState { access }
        })
        .collect();
    out.sort();
    out
}

/// Default access distribution: probability 0.6 of reaching every queue,
/// the rest uniform over the other nonempty access sets. A single queue
/// degenerates to a point mass.
pub fn default_access_dist(num_queues: usize) -> Result<FiniteDist<AgentState>> {
    let states = enumerate_agent_states(num_queues);
    if states.len() == 1 {
        return Ok(FiniteDist::point_mass(states.into_iter().next().unwrap()));
    }
    let full = AgentState::new((0..num_queues).collect())?;
    let rest = 0.4 / (states.len() - 1) as f64;
    FiniteDist::new(
        states
            .into_iter()
            .map(|x| {
                let m = if x == full { 0.6 } else { rest };
                (x, m)
            })
            .collect(),
    )
}

/// Default initial environment distribution: all buffers empty, expressed
/// densely over the full state list.
pub fn default_start_dist(capacities: &[u32]) -> FiniteDist<EnvState> {
    let states = enumerate_env_states(capacities);
    let mass = states
        .iter()
        .map(|s| if s.0.iter().all(|&b| b == 0) { 1.0 } else { 0.0 })
        .collect();
    FiniteDist::from_sorted(states, mass).expect("a dense point mass is a valid distribution")
}

/// Spaces of the queue problem.
pub type QueueSpace = SpaceSpec<EnvState, AgentState, usize>;
pub type QueueRule = DecisionRule<AgentState, usize>;
pub type QueueStateActionDist = StateActionDist<AgentState, usize>;
pub type QueuePolicy = StationaryPolicy<EnvState, AgentState, usize>;
pub type QueuePolicyTuple = PolicyTuple<EnvState, AgentState, usize>;

/// Where a packet lands when a scheduler in state `x` targets queue `u`:
/// accessible targets are taken as-is, inaccessible ones are resampled
/// uniformly over the scheduler's access set.
pub fn routing_kernel(num_queues: usize, x: &AgentState, u: usize) -> Result<FiniteDist<usize>> {
    if u >= num_queues || x.access().last().is_some_and(|&q| q >= num_queues) {
        return Err(Error::InvalidParameter(format!(
            "routing target {u} or access set {x} outside of {num_queues} queues"
        )));
    }
    let mut mass = vec![0.0; num_queues];
    if x.can_reach(u) {
        mass[u] = 1.0;
    } else {
        let w = 1.0 / x.access().len() as f64;
        for &q in x.access() {
            mass[q] = w;
        }
    }
    FiniteDist::from_sorted((0..num_queues).collect(), mass)
}

/// Fraction of routed packets aimed at each queue under the joint
/// distribution `g`: p_j = sum_{x,u} g(x, u) * routing(x, u)(j).
pub fn aggregate_routing(num_queues: usize, g: &QueueStateActionDist) -> Result<Vec<f64>> {
    let mut p = vec![0.0; num_queues];
    for ((x, u), m) in g.joint().iter() {
        if m == 0.0 {
            continue;
        }
        let route = routing_kernel(num_queues, x, *u)?;
        for (j, w) in route.masses().iter().enumerate() {
            p[j] += m * w;
        }
    }
    Ok(p)
}

/// Poisson pmf on {0..K} where K is the smallest count whose upper tail mass
/// is below `trunc_eps`; the kept mass is renormalized.
pub fn truncated_poisson(rate: f64, trunc_eps: f64) -> Result<FiniteDist<u32>> {
    let mass = truncated_poisson_masses(rate, trunc_eps)?;
    FiniteDist::from_sorted((0..mass.len() as u32).collect(), mass)
}

pub(crate) fn truncated_poisson_masses(rate: f64, trunc_eps: f64) -> Result<Vec<f64>> {
    if !rate.is_finite() || rate < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "Poisson rate must be finite and nonnegative, got {rate}"
        )));
    }
    if !(trunc_eps > 0.0 && trunc_eps < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "trunc_eps must lie in (0, 1), got {trunc_eps}"
        )));
    }
    if rate == 0.0 {
        return Ok(vec![1.0]);
    }
    if rate > 700.0 {
        // exp(-rate) underflows; slot loads this large are outside scope.
        return Err(Error::Numerical(format!(
            "per-slot Poisson rate {rate} too large for the kernel recursion"
        )));
    }
    let mut pmf = (-rate).exp();
    let mut cum = pmf;
    let mut mass = vec![pmf];
    let target = 1.0 - trunc_eps;
    let mut k = 0u64;
    while cum <= target {
        k += 1;
        if k > 100_000 {
            return Err(Error::Numerical(format!(
                "Poisson truncation at rate {rate} did not reach tail {trunc_eps}"
            )));
        }
        pmf *= rate / k as f64;
        cum += pmf;
        mass.push(pmf);
    }
    for m in &mut mass {
        *m /= cum;
    }
    Ok(mass)
}

/// One queue, one slot: distribution of the next fill level and the expected
/// number of dropped packets, for a queue at `level` with buffer `cap`,
/// expected arrivals `arrivals` and expected services `services` per slot.
///
/// Departures happen first: b' = max(level - D, 0), next = min(b' + A, cap),
/// drops = max(b' + A - cap, 0), via the exact double sum over the truncated
/// supports of D and A.
pub fn queue_transition(
    level: u32,
    cap: u32,
    arrivals: f64,
    services: f64,
    trunc_eps: f64,
) -> Result<(FiniteDist<u32>, f64)> {
    if level > cap {
        return Err(Error::InvalidParameter(format!(
            "fill level {level} above buffer cap {cap}"
        )));
    }
    let pd = truncated_poisson_masses(services, trunc_eps)?;
    let pa = truncated_poisson_masses(arrivals, trunc_eps)?;
    let mut next = vec![0.0; cap as usize + 1];
    let mut drops = 0.0;
    for (d, &wd) in pd.iter().enumerate() {
        let after_service = level.saturating_sub(d as u32) as usize;
        for (a, &wa) in pa.iter().enumerate() {
            let total = after_service + a;
            let kept = total.min(cap as usize);
            next[kept] += wd * wa;
            drops += wd * wa * (total - kept) as f64;
        }
    }
    Ok((FiniteDist::from_sorted((0..=cap).collect(), next)?, drops))
}

/// Joint next-state distribution: queues evolve independently given the
/// per-queue arrival rates induced by `g`, so the row is a product measure.
pub fn env_transition(
    config: &QueueConfig,
    x0: &EnvState,
    g: &QueueStateActionDist,
) -> Result<FiniteDist<EnvState>> {
    config.validate()?;
    check_env_state(config, x0)?;
    let p = aggregate_routing(config.num_queues, g)?;
    let mut per_queue = Vec::with_capacity(config.num_queues);
    for (j, &pj) in p.iter().enumerate() {
        let (dist, _) = queue_transition(
            x0.0[j],
            config.capacities[j],
            config.arrivals_per_slot() * pj,
            config.services_per_slot(j),
            config.trunc_eps,
        )?;
        per_queue.push(dist);
    }
    let states = enumerate_env_states(&config.capacities);
    let mass = states
        .iter()
        .map(|s| {
            s.0.iter()
                .enumerate()
                .map(|(j, &b)| per_queue[j].masses()[b as usize])
                .product()
        })
        .collect();
    FiniteDist::from_sorted(states, mass)
}

/// Expected per-step reward: minus the drop penalty times the total expected
/// number of dropped packets across queues.
pub fn reward(config: &QueueConfig, x0: &EnvState, g: &QueueStateActionDist) -> Result<f64> {
    config.validate()?;
    check_env_state(config, x0)?;
    let p = aggregate_routing(config.num_queues, g)?;
    let mut drops = 0.0;
    for (j, &pj) in p.iter().enumerate() {
        let (_, d) = queue_transition(
            x0.0[j],
            config.capacities[j],
            config.arrivals_per_slot() * pj,
            config.services_per_slot(j),
            config.trunc_eps,
        )?;
        drops += d;
    }
    Ok(-config.drop_penalty * drops)
}

/// Draws one slot of the real system: exact (untruncated) Poisson departures
/// and thinned arrivals per queue, in queue order, departures before
/// arrivals. Returns the next state and the realized drop count.
pub fn sample_env_step(
    config: &QueueConfig,
    x0: &EnvState,
    g: &QueueStateActionDist,
    rng: &mut RngStream,
) -> Result<(EnvState, u64)> {
    config.validate()?;
    check_env_state(config, x0)?;
    let p = aggregate_routing(config.num_queues, g)?;
    let arrival_rates: Vec<f64> = p.iter().map(|pj| config.arrivals_per_slot() * pj).collect();
    Ok(sample_step_levels(
        &x0.0,
        &config.capacities,
        &arrival_rates,
        |j| config.services_per_slot(j),
        rng,
    ))
}

/// Shared sampling core; the draw order (per queue: departures, then
/// arrivals) is part of the reproducibility contract.
fn sample_step_levels(
    levels: &[u32],
    caps: &[u32],
    arrival_rates: &[f64],
    services_per_slot: impl Fn(usize) -> f64,
    rng: &mut RngStream,
) -> (EnvState, u64) {
    let mut next = Vec::with_capacity(levels.len());
    let mut dropped = 0u64;
    for (j, (&b, &cap)) in levels.iter().zip(caps).enumerate() {
        let d = sample_poisson(services_per_slot(j), rng);
        let a = sample_poisson(arrival_rates[j], rng);
        let after_service = (b as u64).saturating_sub(d);
        let total = after_service + a;
        let kept = total.min(cap as u64);
        dropped += total - kept;
        next.push(kept as u32);
    }
    (EnvState(next), dropped)
}

fn check_env_state(config: &QueueConfig, x0: &EnvState) -> Result<()> {
    if x0.0.len() != config.num_queues
        || x0.0.iter().zip(&config.capacities).any(|(&b, &cap)| b > cap)
    {
        return Err(Error::SpaceMismatch {
            what: "environment state",
            detail: format!("{x0} does not fit the configured buffers"),
        });
    }
    Ok(())
}

/// The queues an agent in state `x` can deterministically reach; actions
/// outside this set are equivalent to a uniform mixture over it.
pub fn canonical_decision_support(x: &AgentState) -> &[usize] {
    x.access()
}

/// Pushes any mass a rule puts on inaccessible targets through the routing
/// kernel, yielding the equivalent rule supported on accessible queues only.
pub fn canonicalize_rule(num_queues: usize, rule: &QueueRule) -> Result<QueueRule> {
    let states: Vec<AgentState> = rule.iter().map(|(x, _)| x.clone()).collect();
    DecisionRule::from_fn(&states, |x| {
        let dist = rule.dist(x).expect("iterating the rule's own states");
        if dist.support() != (0..num_queues).collect::<Vec<_>>() {
            return Err(Error::SpaceMismatch {
                what: "decision rule",
                detail: "action distribution must be dense over the queue list".into(),
            });
        }
        let mut mass = vec![0.0; num_queues];
        for (&u, m) in dist.iter() {
            if m == 0.0 {
                continue;
            }
            let route = routing_kernel(num_queues, x, u)?;
            for (j, w) in route.masses().iter().enumerate() {
                mass[j] += m * w;
            }
        }
        FiniteDist::from_sorted((0..num_queues).collect(), mass)
    })
}

/// The queue problem with every slot-level quantity precomputed: spaces,
/// routing matrix, per-queue post-service distributions. This is what the
/// solver and the simulator consume.
#[derive(Debug, Clone)]
pub struct QueueModel {
    config: QueueConfig,
    space: QueueSpace,
    /// Routing probability per (agent state, action) cell and queue,
    /// flattened as cell * num_queues + queue.
    routing_flat: Vec<f64>,
    /// survive[j][b][b'] = P(max(b - D_j, 0) = b').
    survive: Vec<Vec<Vec<f64>>>,
    /// Strides of the lexicographic environment enumeration.
    strides: Vec<usize>,
    mu0_cum: Vec<f64>,
    mu0_env_cum: Vec<f64>,
}

impl QueueModel {
    pub fn new(
        config: QueueConfig,
        mu0: FiniteDist<AgentState>,
        mu0_env: FiniteDist<EnvState>,
        gamma: f64,
    ) -> Result<Self> {
        config.validate()?;
        let env_states = enumerate_env_states(&config.capacities);
        let agent_states = enumerate_agent_states(config.num_queues);
        let actions: Vec<usize> = (0..config.num_queues).collect();
        let space = SpaceSpec::new(env_states, agent_states, actions, mu0, mu0_env, gamma)?;

        let m = config.num_queues;
        let mut routing_flat = Vec::with_capacity(space.agent_states().len() * m * m);
        for x in space.agent_states() {
            for u in 0..m {
                routing_flat.extend_from_slice(routing_kernel(m, x, u)?.masses());
            }
        }

        let mut survive = Vec::with_capacity(m);
        for j in 0..m {
            let pd = truncated_poisson_masses(config.services_per_slot(j), config.trunc_eps)?;
            let per_level = (0..=config.capacities[j])
                .map(|b| {
                    let mut w = vec![0.0; b as usize + 1];
                    for (d, &wd) in pd.iter().enumerate() {
                        w[b.saturating_sub(d as u32) as usize] += wd;
                    }
                    w
                })
                .collect();
            survive.push(per_level);
        }

        let mut strides = vec![1usize; m];
        for j in (0..m.saturating_sub(1)).rev() {
            strides[j] = strides[j + 1] * (config.capacities[j + 1] as usize + 1);
        }

        let cum = |masses: &[f64]| {
            let mut acc = 0.0;
            masses
                .iter()
                .map(|m| {
                    acc += m;
                    acc
                })
                .collect::<Vec<f64>>()
        };
        let mu0_cum = cum(space.mu0().masses());
        let mu0_env_cum = cum(space.mu0_env().masses());

        Ok(Self {
            config,
            space,
            routing_flat,
            survive,
            strides,
            mu0_cum,
            mu0_env_cum,
        })
    }

    /// Model with the default access distribution and empty-buffer start.
    pub fn from_config(config: QueueConfig, gamma: f64) -> Result<Self> {
        let mu0 = default_access_dist(config.num_queues)?;
        let mu0_env = default_start_dist(&config.capacities);
        Self::new(config, mu0, mu0_env, gamma)
    }

    pub fn config(&self) -> &QueueConfig {
        &self.config
    }

    pub fn space(&self) -> &QueueSpace {
        &self.space
    }

    pub fn gamma(&self) -> f64 {
        self.space.gamma()
    }

    pub fn reward_bound(&self) -> f64 {
        self.config.reward_bound()
    }

    pub fn num_env_states(&self) -> usize {
        self.space.env_states().len()
    }

    pub fn num_cells(&self) -> usize {
        self.space.agent_states().len() * self.config.num_queues
    }

    pub(crate) fn mu0_cum(&self) -> &[f64] {
        &self.mu0_cum
    }

    pub(crate) fn mu0_env_cum(&self) -> &[f64] {
        &self.mu0_env_cum
    }

    /// Joint-distribution masses in canonical cell order, after validating
    /// the distribution lives on this model's product space.
    pub(crate) fn cells_of<'a>(&self, g: &'a QueueStateActionDist) -> Result<&'a [f64]> {
        let m = self.config.num_queues;
        let ok = g.joint().len() == self.num_cells()
            && g.joint().support().iter().enumerate().all(|(i, (x, u))| {
                *u == i % m && x == &self.space.agent_states()[i / m]
            });
        if !ok {
            return Err(Error::SpaceMismatch {
                what: "state-action distribution",
                detail: "not defined on this model's agent-state/action product".into(),
            });
        }
        Ok(g.joint().masses())
    }

    /// p_j = sum_cells g(cell) * routing(cell)(j).
    pub(crate) fn aggregate_cells(&self, cells: &[f64]) -> Vec<f64> {
        let m = self.config.num_queues;
        let mut p = vec![0.0; m];
        for (c, &mass) in cells.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let row = &self.routing_flat[c * m..(c + 1) * m];
            for (pj, w) in p.iter_mut().zip(row) {
                *pj += mass * w;
            }
        }
        p
    }

    /// Expected drops at queue `j` for fill level `b` and expected arrivals
    /// `arrivals`, using the precomputed post-service weights.
    fn expected_drops_at(&self, j: usize, b: u32, arrivals: f64) -> Result<f64> {
        let pa = truncated_poisson_masses(arrivals, self.config.trunc_eps)?;
        let cap = self.config.capacities[j] as usize;
        let mut drops = 0.0;
        for (b1, &w) in self.survive[j][b as usize].iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let free = cap - b1;
            let mut overflow = 0.0;
            for (a, &wa) in pa.iter().enumerate().skip(free + 1) {
                overflow += wa * (a - free) as f64;
            }
            drops += w * overflow;
        }
        Ok(drops)
    }

    /// Next-level distribution at queue `j` (dense over 0..=cap).
    fn next_level_dist(&self, j: usize, b: u32, arrivals: f64) -> Result<Vec<f64>> {
        let pa = truncated_poisson_masses(arrivals, self.config.trunc_eps)?;
        let cap = self.config.capacities[j] as usize;
        let mut next = vec![0.0; cap + 1];
        for (b1, &w) in self.survive[j][b as usize].iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (a, &wa) in pa.iter().enumerate() {
                next[(b1 + a).min(cap)] += w * wa;
            }
        }
        Ok(next)
    }

    pub(crate) fn reward_cells(&self, x0_idx: usize, cells: &[f64]) -> Result<f64> {
        let p = self.aggregate_cells(cells);
        let levels = &self.space.env_states()[x0_idx].0;
        let mut drops = 0.0;
        for (j, &b) in levels.iter().enumerate() {
            drops += self.expected_drops_at(j, b, self.config.arrivals_per_slot() * p[j])?;
        }
        Ok(-self.config.drop_penalty * drops)
    }

    /// Dense transition row over environment-state indices.
    pub(crate) fn transition_row_cells(&self, x0_idx: usize, cells: &[f64]) -> Result<Vec<f64>> {
        let p = self.aggregate_cells(cells);
        let levels = &self.space.env_states()[x0_idx].0;
        let per_queue: Vec<Vec<f64>> = levels
            .iter()
            .enumerate()
            .map(|(j, &b)| self.next_level_dist(j, b, self.config.arrivals_per_slot() * p[j]))
            .collect::<Result<_>>()?;
        let mut row = vec![1.0; self.num_env_states()];
        for (i, s) in self.space.env_states().iter().enumerate() {
            for (j, &b) in s.0.iter().enumerate() {
                row[i] *= per_queue[j][b as usize];
            }
        }
        Ok(row)
    }

    pub(crate) fn sample_cells(
        &self,
        x0_idx: usize,
        cells: &[f64],
        rng: &mut RngStream,
    ) -> (usize, u64) {
        let p = self.aggregate_cells(cells);
        let arrival_rates: Vec<f64> = p
            .iter()
            .map(|pj| self.config.arrivals_per_slot() * pj)
            .collect();
        let (next, dropped) = sample_step_levels(
            &self.space.env_states()[x0_idx].0,
            &self.config.capacities,
            &arrival_rates,
            |j| self.config.services_per_slot(j),
            rng,
        );
        let idx: usize = next
            .0
            .iter()
            .zip(&self.strides)
            .map(|(&b, &s)| b as usize * s)
            .sum();
        (idx, dropped)
    }

    /// Expected reward under a joint distribution; matches the free function
    /// [`reward`] and is the path the solver and simulator use.
    pub fn reward(&self, x0: &EnvState, g: &QueueStateActionDist) -> Result<f64> {
        let idx = self.env_index(x0)?;
        self.reward_cells(idx, self.cells_of(g)?)
    }

    /// Next-state distribution; matches the free function [`env_transition`].
    pub fn transition(&self, x0: &EnvState, g: &QueueStateActionDist) -> Result<FiniteDist<EnvState>> {
        let idx = self.env_index(x0)?;
        let row = self.transition_row_cells(idx, self.cells_of(g)?)?;
        FiniteDist::from_sorted(self.space.env_states().to_vec(), row)
    }

    /// One realized slot; matches the free function [`sample_env_step`].
    pub fn sample_step(
        &self,
        x0: &EnvState,
        g: &QueueStateActionDist,
        rng: &mut RngStream,
    ) -> Result<(EnvState, u64)> {
        let idx = self.env_index(x0)?;
        let (next, dropped) = self.sample_cells(idx, self.cells_of(g)?, rng);
        Ok((self.space.env_states()[next].clone(), dropped))
    }

    pub fn env_index(&self, x0: &EnvState) -> Result<usize> {
        self.space.env_index(x0).ok_or(Error::SpaceMismatch {
            what: "environment state",
            detail: format!("{x0} is not a state of this model"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dual_state() -> AgentState {
        AgentState::new(vec![0, 1]).unwrap()
    }

    fn dist_over_cells(space: &QueueSpace, f: impl Fn(&AgentState, usize) -> f64) -> QueueStateActionDist {
        let mut pairs = Vec::new();
        for x in space.agent_states() {
            for &u in space.actions() {
                pairs.push(((x.clone(), u), f(x, u)));
            }
        }
        QueueStateActionDist::from_joint(FiniteDist::new(pairs).unwrap())
    }

    fn default_model() -> QueueModel {
        QueueModel::from_config(QueueConfig::default(), 0.99).unwrap()
    }

    #[test]
    fn state_display_and_parse_round_trip() {
        let e = EnvState(vec![2, 5]);
        assert_eq!(e.to_string(), "[2,5]");
        assert_eq!("[2,5]".parse::<EnvState>().unwrap(), e);

        let a = AgentState::new(vec![1, 0]).unwrap();
        assert_eq!(a.to_string(), "[0,1]");
        assert_eq!("[0, 1]".parse::<AgentState>().unwrap(), a);
        assert!("0,1".parse::<AgentState>().is_err());
        assert!("[]".parse::<AgentState>().is_err());
        assert!(AgentState::new(vec![]).is_err());
        assert!(AgentState::new(vec![1, 1]).is_err());
    }

    #[test]
    fn enumerations_are_canonical() {
        let envs = enumerate_env_states(&[1, 2]);
        let as_vecs: Vec<Vec<u32>> = envs.iter().map(|e| e.0.clone()).collect();
        assert_eq!(
            as_vecs,
            vec![
                vec![0, 0],
                vec![0, 1],
                vec![0, 2],
                vec![1, 0],
                vec![1, 1],
                vec![1, 2]
            ]
        );
        let mut sorted = envs.clone();
        sorted.sort();
        assert_eq!(envs, sorted);

        let agents = enumerate_agent_states(2);
        let shown: Vec<String> = agents.iter().map(|a| a.to_string()).collect();
        assert_eq!(shown, vec!["[0]", "[0,1]", "[1]"]);
        assert_eq!(enumerate_agent_states(3).len(), 7);
    }

    #[test]
    fn default_access_matches_reference_values() {
        let mu = default_access_dist(2).unwrap();
        assert_eq!(mu.mass_of(&dual_state()), 0.6);
        assert_eq!(mu.mass_of(&AgentState::new(vec![0]).unwrap()), 0.2);
        assert_eq!(mu.mass_of(&AgentState::new(vec![1]).unwrap()), 0.2);

        let mu1 = default_access_dist(1).unwrap();
        assert_eq!(mu1.mass_of(&AgentState::new(vec![0]).unwrap()), 1.0);

        let mu3 = default_access_dist(3).unwrap();
        let sum: f64 = mu3.masses().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert_eq!(mu3.mass_of(&AgentState::new(vec![0, 1, 2]).unwrap()), 0.6);
    }

    #[test]
    fn routing_examples() {
        // Accessible target: point mass.
        let r = routing_kernel(2, &dual_state(), 1).unwrap();
        assert_eq!(r.masses(), &[0.0, 1.0]);

        // Inaccessible target: uniform over the access set.
        let only1 = AgentState::new(vec![1]).unwrap();
        let r = routing_kernel(2, &only1, 0).unwrap();
        assert_eq!(r.masses(), &[0.0, 1.0]);

        let r = routing_kernel(3, &AgentState::new(vec![0, 2]).unwrap(), 1).unwrap();
        assert_eq!(r.masses(), &[0.5, 0.0, 0.5]);

        assert!(routing_kernel(2, &dual_state(), 2).is_err());
    }

    #[test]
    fn aggregate_routing_reference_value() {
        let model = default_model();
        let space = model.space();

        // Everyone aims at queue 0 and can reach it: all mass lands there.
        // Mass 0.75 on ([0,1], 0) and 0.25 on ([0], 0).
        let g = dist_over_cells(space, |x, u| {
            if u != 0 || !x.can_reach(0) {
                0.0
            } else if *x == dual_state() {
                0.75
            } else {
                0.25
            }
        });
        let p = aggregate_routing(2, &g).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12);

        // mu0 = (0.2, 0.6, 0.2), dual-access rule (0.7, 0.3), singles fixed:
        // p_0 = 0.6 * 0.7 + 0.2 = 0.62.
        let g = dist_over_cells(space, |x, u| {
            let mu = space.mu0().mass_of(x);
            if x.access().len() == 2 {
                mu * if u == 0 { 0.7 } else { 0.3 }
            } else if x.can_reach(u) {
                mu
            } else {
                0.0
            }
        });
        let p = aggregate_routing(2, &g).unwrap();
        assert!((p[0] - 0.62).abs() < 1e-12, "p0 = {}", p[0]);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_routing_uniform_mu0_is_symmetric() {
        let model = default_model();
        let space = model.space();
        let g = dist_over_cells(space, |x, u| {
            let w = 1.0 / x.access().len() as f64;
            space.mu0().mass_of(x) * if x.can_reach(u) { w } else { 0.0 }
        });
        let p = aggregate_routing(2, &g).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn truncated_poisson_basics() {
        let d = truncated_poisson(0.0, 1e-12).unwrap();
        assert_eq!(d.support(), &[0]);
        assert_eq!(d.masses(), &[1.0]);

        let d = truncated_poisson(1.5, 1e-12).unwrap();
        assert!((d.masses()[0] - (-1.5f64).exp()).abs() < 1e-9);
        let sum: f64 = d.masses().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);

        assert!(truncated_poisson(-1.0, 1e-12).is_err());
        assert!(truncated_poisson(1.0, 0.0).is_err());
    }

    #[test]
    fn truncated_poisson_mean_bound() {
        // |truncated mean - rate| = rate * pmf(K) / S <= eps (K+1) / (1-eps).
        let eps = 1e-12;
        for rate in [0.3, 1.5, 2.5, 7.0] {
            let d = truncated_poisson(rate, eps).unwrap();
            let k = (d.len() - 1) as f64;
            let mean = d.expectation(|&x| x as f64);
            let bound = eps * (k + 1.0) / (1.0 - eps);
            assert!(
                (mean - rate).abs() <= bound,
                "rate {rate}: mean {mean}, bound {bound}"
            );
        }
    }

    #[test]
    fn queue_transition_examples() {
        // Empty queue, no arrivals: stays empty no matter the service rate.
        let (d, drops) = queue_transition(0, 5, 0.0, 1.5, 1e-12).unwrap();
        assert!((d.mass_of(&0) - 1.0).abs() < 1e-12);
        assert_eq!(drops, 0.0);

        // Full unit buffer, no arrivals: survives only if no departure.
        let (d, drops) = queue_transition(1, 1, 0.0, 1.5, 1e-12).unwrap();
        assert!((d.mass_of(&1) - (-1.5f64).exp()).abs() < 1e-9);
        assert!((d.mass_of(&0) - (1.0 - (-1.5f64).exp())).abs() < 1e-9);
        assert_eq!(drops, 0.0);

        // Level above cap is rejected.
        assert!(queue_transition(3, 2, 1.0, 1.0, 1e-12).is_err());

        let (d, drops) = queue_transition(5, 5, 2.5, 1.5, 1e-12).unwrap();
        let sum: f64 = d.masses().iter().sum();
        assert!((sum - 1.0).abs() < 1e-10);
        assert!(drops > 0.0 && drops < 2.5);
    }

    #[test]
    fn queue_transition_drop_accounting() {
        // expected drops = E[A] - E[accepted], with E[accepted] =
        // E[next] - E[after service]; all terms computed independently.
        let (arr, srv, b, cap, eps) = (2.0, 1.5, 3u32, 5u32, 1e-12);
        let (dist, drops) = queue_transition(b, cap, arr, srv, eps).unwrap();
        let pa = truncated_poisson(arr, eps).unwrap();
        let pd = truncated_poisson(srv, eps).unwrap();
        let e_a = pa.expectation(|&a| a as f64);
        let e_after = pd.expectation(|&d| b.saturating_sub(d) as f64);
        let e_next = dist.expectation(|&n| n as f64);
        let accepted = e_next - e_after;
        assert!(
            (drops - (e_a - accepted)).abs() < 1e-10,
            "drops {drops} vs accounting {}",
            e_a - accepted
        );
    }

    #[test]
    fn drops_monotone_in_level_and_arrivals() {
        for b in 0..5u32 {
            let (_, lo) = queue_transition(b, 5, 2.0, 1.5, 1e-12).unwrap();
            let (_, hi) = queue_transition(b + 1, 5, 2.0, 1.5, 1e-12).unwrap();
            assert!(hi >= lo - 1e-12, "level {b}: {lo} -> {hi}");
        }
        let mut prev = -1.0;
        for i in 0..=10 {
            let arr = 0.5 * i as f64;
            let (_, d) = queue_transition(4, 5, arr, 1.5, 1e-12).unwrap();
            assert!(d >= prev - 1e-12, "arrivals {arr}");
            prev = d;
        }
    }

    #[test]
    fn env_transition_factorizes() {
        let model = default_model();
        let space = model.space();
        let g = dist_over_cells(space, |x, u| {
            let w = 1.0 / x.access().len() as f64;
            space.mu0().mass_of(x) * if x.can_reach(u) { w } else { 0.0 }
        });
        let x0 = EnvState(vec![3, 1]);
        let row = env_transition(model.config(), &x0, &g).unwrap();
        let sum: f64 = row.masses().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);

        // Product structure: joint mass equals the product of marginals.
        let p = aggregate_routing(2, &g).unwrap();
        let (q0, _) = queue_transition(3, 5, 2.5 * p[0], 1.5, 1e-12).unwrap();
        let (q1, _) = queue_transition(1, 5, 2.5 * p[1], 1.5, 1e-12).unwrap();
        for (s, m) in row.iter() {
            let expect = q0.mass_of(&s.0[0]) * q1.mass_of(&s.0[1]);
            assert!((m - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn reward_zero_without_arrivals_and_bounded() {
        let config = QueueConfig {
            arrival_rate: 0.0,
            ..QueueConfig::default()
        };
        let model = QueueModel::from_config(config.clone(), 0.99).unwrap();
        let space = model.space();
        let g = dist_over_cells(space, |x, u| {
            space.mu0().mass_of(x) * if x.can_reach(u) { 1.0 / x.access().len() as f64 } else { 0.0 }
        });
        let r = reward(&config, &EnvState(vec![5, 5]), &g).unwrap();
        assert_eq!(r, 0.0);

        let config = QueueConfig::default();
        let r = reward(&config, &EnvState(vec![5, 5]), &g).unwrap();
        assert!(r <= 0.0 && r >= -config.reward_bound());
    }

    #[test]
    fn model_paths_match_free_functions() {
        let model = default_model();
        let space = model.space();
        // A lopsided joint to exercise asymmetric rates.
        let g = dist_over_cells(space, |x, u| {
            let mu = space.mu0().mass_of(x);
            if x.access().len() == 2 {
                mu * if u == 0 { 0.9 } else { 0.1 }
            } else if x.can_reach(u) {
                mu
            } else {
                0.0
            }
        });
        for x0 in [EnvState(vec![0, 0]), EnvState(vec![3, 1]), EnvState(vec![5, 5])] {
            let r_free = reward(model.config(), &x0, &g).unwrap();
            let r_model = model.reward(&x0, &g).unwrap();
            assert!((r_free - r_model).abs() < 1e-12);

            let t_free = env_transition(model.config(), &x0, &g).unwrap();
            let t_model = model.transition(&x0, &g).unwrap();
            assert!(t_free.l1_distance(&t_model).unwrap() < 1e-12);

            // Identical draw order: same stream gives the same slot.
            let mut rng_a = RngStream::new(5, 1);
            let mut rng_b = RngStream::new(5, 1);
            let s_free = sample_env_step(model.config(), &x0, &g, &mut rng_a).unwrap();
            let s_model = model.sample_step(&x0, &g, &mut rng_b).unwrap();
            assert_eq!(s_free, s_model);
        }
    }

    #[test]
    fn sampled_steps_match_kernel() {
        let model = default_model();
        let space = model.space();
        let g = dist_over_cells(space, |x, u| {
            let w = 1.0 / x.access().len() as f64;
            space.mu0().mass_of(x) * if x.can_reach(u) { w } else { 0.0 }
        });
        let x0 = EnvState(vec![4, 2]);
        let kernel = env_transition(model.config(), &x0, &g).unwrap();

        let mut rng = RngStream::new(99, 0);
        let n = 100_000;
        let mut counts = vec![0usize; kernel.len()];
        let mut drop_sum = 0u64;
        for _ in 0..n {
            let (next, dropped) = sample_env_step(model.config(), &x0, &g, &mut rng).unwrap();
            counts[kernel.index_of(&next).unwrap()] += 1;
            drop_sum += dropped;
        }
        let l1: f64 = counts
            .iter()
            .zip(kernel.masses())
            .map(|(&c, &m)| (c as f64 / n as f64 - m).abs())
            .sum();
        assert!(l1 <= 0.02, "empirical kernel L1 error {l1}");

        // Realized drops agree with the analytic expectation within 5 sigma
        // (drop count per slot is bounded by a few packets, variance < 10).
        let analytic = -reward(model.config(), &x0, &g).unwrap() / model.config().drop_penalty;
        let mean = drop_sum as f64 / n as f64;
        assert!(
            (mean - analytic).abs() < 0.05,
            "realized {mean} vs analytic {analytic}"
        );
    }

    #[test]
    fn canonicalization_moves_inaccessible_mass() {
        let states = enumerate_agent_states(2);
        // Rule aiming everything at queue 0, even for agents who only see 1.
        let rule = DecisionRule::from_fn(&states, |_| {
            Ok(FiniteDist::from_sorted(vec![0usize, 1], vec![1.0, 0.0]).unwrap())
        })
        .unwrap();
        let canon = canonicalize_rule(2, &rule).unwrap();
        let only1 = AgentState::new(vec![1]).unwrap();
        assert_eq!(canon.dist(&only1).unwrap().masses(), &[0.0, 1.0]);
        assert_eq!(canon.dist(&dual_state()).unwrap().masses(), &[1.0, 0.0]);

        // Already-canonical rules are fixed points.
        let again = canonicalize_rule(2, &canon).unwrap();
        assert_eq!(again, canon);
    }

    #[test]
    fn canonicalization_preserves_aggregate_routing() {
        let model = default_model();
        let space = model.space();
        let mut rng = RngStream::new(17, 0);
        for _ in 0..50 {
            // Random dense rule.
            let rule = DecisionRule::from_fn(space.agent_states(), |_| {
                let a = rng.next_f64();
                FiniteDist::from_sorted(vec![0usize, 1], vec![a, 1.0 - a])
            })
            .unwrap();
            let canon = canonicalize_rule(2, &rule).unwrap();
            let g = QueueStateActionDist::mean_field_joint(space, space.mu0(), &rule).unwrap();
            let gc = QueueStateActionDist::mean_field_joint(space, space.mu0(), &canon).unwrap();
            let p = aggregate_routing(2, &g).unwrap();
            let pc = aggregate_routing(2, &gc).unwrap();
            for (a, b) in p.iter().zip(&pc) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reward_and_kernel_are_continuous_in_g() {
        let model = default_model();
        let space = model.space();
        let mut rng = RngStream::new(23, 0);
        let x0 = EnvState(vec![4, 3]);
        for _ in 0..20 {
            // Random joint, then a perturbation of L1 size 1e-6 moving mass
            // between two cells that both keep nonnegative mass.
            let raw: Vec<f64> = (0..6).map(|_| rng.next_f64() + 0.05).collect();
            let sum: f64 = raw.iter().sum();
            let masses: Vec<f64> = raw.iter().map(|x| x / sum).collect();
            let mut perturbed = masses.clone();
            perturbed[0] += 5e-7;
            perturbed[3] -= 5e-7;

            let mk = |mass: Vec<f64>| {
                let mut pairs = Vec::new();
                let mut i = 0;
                for x in space.agent_states() {
                    for &u in space.actions() {
                        pairs.push(((x.clone(), u), mass[i]));
                        i += 1;
                    }
                }
                QueueStateActionDist::from_joint(FiniteDist::new(pairs).unwrap())
            };
            let g = mk(masses);
            let gp = mk(perturbed);
            assert!(g.l1_distance(&gp).unwrap() <= 1e-6 + 1e-12);

            let dr = (model.reward(&x0, &g).unwrap() - model.reward(&x0, &gp).unwrap()).abs();
            assert!(dr <= 1e-3, "reward jump {dr} for a 1e-6 perturbation");

            let row = model.transition(&x0, &g).unwrap();
            let rowp = model.transition(&x0, &gp).unwrap();
            assert!(row.l1_distance(&rowp).unwrap() <= 1e-3);
        }
    }

    #[test]
    fn transition_rows_are_simplex_valid_on_random_inputs() {
        let model = default_model();
        let space = model.space();
        let mut rng = RngStream::new(31, 0);
        for trial in 0..100 {
            let raw: Vec<f64> = (0..6).map(|_| rng.next_f64() + 0.01).collect();
            let sum: f64 = raw.iter().sum();
            let mut i = 0;
            let mut pairs = Vec::new();
            for x in space.agent_states() {
                for &u in space.actions() {
                    pairs.push(((x.clone(), u), raw[i] / sum));
                    i += 1;
                }
            }
            let g = QueueStateActionDist::from_joint(FiniteDist::new(pairs).unwrap());
            let k = (trial * 7) % model.num_env_states();
            let x0 = space.env_states()[k].clone();
            let row = model.transition(&x0, &g).unwrap();
            let s: f64 = row.masses().iter().sum();
            assert!((s - 1.0).abs() <= 1e-9, "row sum {s} at {x0}");
            assert!(row.masses().iter().all(|&m| m >= 0.0));
        }
    }
}
