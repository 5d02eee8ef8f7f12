//! Monte Carlo simulation of the N-scheduler system.
//!
//! Each slot, every scheduler is handed a fresh access set drawn i.i.d.
//! from μ₀ and targets a queue through its policy; the empirical
//! state-action distribution of the N schedulers then drives the queues
//! exactly as the infinite-population kernel does, except that the thinning
//! weights are the random empirical frequencies instead of their mean.
//!
//! Reproducibility contract: episode e of a run seeded with s draws from
//! the dedicated stream (s, e), and within a step the draw order is fixed
//! (each agent's state then action, agents in order, then each queue's
//! departures then arrivals). Results are therefore identical no matter
//! how episodes are scheduled across threads.

use crate::error::Error;
use crate::model::StateActionDist;
use crate::prob::RngStream;
use crate::queue::{
    EnvState, QueueModel, QueuePolicyTuple, QueueRule, QueueSpace, QueueStateActionDist,
};
use crate::Result;
use rayon::prelude::*;

/// Episode layout of a Monte Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSpec {
    pub n_agents: usize,
    pub episodes: usize,
    /// Steps simulated per episode; see [`horizon_for`].
    pub horizon: usize,
    pub seed: u64,
}

/// Smallest horizon T with γ^T R/(1-γ) ≤ tail_eps, so truncating the
/// discounted sum changes the objective by at most tail_eps.
pub fn horizon_for(gamma: f64, reward_bound: f64, tail_eps: f64) -> usize {
    assert!(
        gamma > 0.0 && gamma < 1.0 && tail_eps > 0.0 && reward_bound >= 0.0,
        "horizon_for needs γ in (0,1), positive tail_eps and nonnegative bound"
    );
    let ratio = tail_eps * (1.0 - gamma) / reward_bound;
    if reward_bound == 0.0 || ratio >= 1.0 {
        return 1;
    }
    (ratio.ln() / gamma.ln()).ceil().max(1.0) as usize
}

/// One simulated slot.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub env_before: EnvState,
    pub env_after: EnvState,
    /// Empirical state-action distribution of the N schedulers this slot.
    pub mean_field: QueueStateActionDist,
    /// Expected-drop reward of the slot given the empirical distribution.
    pub reward: f64,
    /// Packets actually dropped in the realized slot.
    pub dropped: u64,
}

/// Aggregate of a Monte Carlo run.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub mean_return: f64,
    /// Standard error of the episode returns (0 for a single episode).
    pub std_error: f64,
    pub episodes: usize,
    pub horizon: usize,
    pub n_agents: usize,
    pub mean_drops_per_step: f64,
    pub seed: u64,
}

/// A policy tuple flattened into cumulative lookup tables for sampling.
#[derive(Debug, Clone)]
pub struct CompiledTuple {
    n_agents: usize,
    num_agent_states: usize,
    num_actions: usize,
    /// Per member, per (environment state, agent state): cumulative action
    /// masses, laid out as (x0 · |X| + x) · |U| + u.
    cum: Vec<Vec<f64>>,
}

impl CompiledTuple {
    pub fn new(model: &QueueModel, tuple: &QueuePolicyTuple) -> Result<Self> {
        let space = model.space();
        let nx = space.agent_states().len();
        let nu = space.actions().len();
        let mut cum = Vec::with_capacity(tuple.len());
        for member in tuple.members() {
            member.validate_on(space)?;
            let mut table = Vec::with_capacity(space.env_states().len() * nx * nu);
            for x0 in space.env_states() {
                let rule = member.rule(x0).expect("validated policy covers every state");
                for x in space.agent_states() {
                    let dist = rule.dist(x).expect("validated rule covers every agent state");
                    let mut acc = 0.0;
                    for &m in dist.masses() {
                        acc += m;
                        table.push(acc);
                    }
                }
            }
            cum.push(table);
        }
        Ok(Self {
            n_agents: tuple.len(),
            num_agent_states: nx,
            num_actions: nu,
            cum,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    /// Draws every scheduler's (state, action) pair and accumulates counts
    /// per canonical cell. `mu0_cum` is the shared cumulative access-set
    /// distribution.
    fn sample_counts(
        &self,
        x0_idx: usize,
        mu0_cum: &[f64],
        rng: &mut RngStream,
        counts: &mut [u64],
    ) {
        counts.iter_mut().for_each(|c| *c = 0);
        for member in &self.cum {
            let x = draw_index(mu0_cum, rng.next_f64());
            let base = (x0_idx * self.num_agent_states + x) * self.num_actions;
            let u = draw_index(&member[base..base + self.num_actions], rng.next_f64());
            counts[x * self.num_actions + u] += 1;
        }
    }
}

/// Inverse-CDF draw: first index whose cumulative mass exceeds r. Zero-mass
/// cells are never selected; numerically short tables fall back to the last
/// cell that carries mass.
fn draw_index(cum: &[f64], r: f64) -> usize {
    for (i, &c) in cum.iter().enumerate() {
        if r < c {
            return i;
        }
    }
    let last = *cum.last().expect("cumulative table must be nonempty");
    cum.iter()
        .rposition(|&c| c < last)
        .map_or(0, |i| i + 1)
        .min(cum.len() - 1)
}

struct InnerStep {
    reward: f64,
    next_idx: usize,
    dropped: u64,
}

/// One slot of the N-agent system; both the trajectory API and the
/// estimator run through here so they consume the stream identically.
fn step_inner(
    model: &QueueModel,
    compiled: &CompiledTuple,
    x0_idx: usize,
    rng: &mut RngStream,
    counts: &mut [u64],
    cells: &mut [f64],
) -> InnerStep {
    compiled.sample_counts(x0_idx, model.mu0_cum(), rng, counts);
    let n = compiled.n_agents as f64;
    for (cell, &c) in cells.iter_mut().zip(counts.iter()) {
        *cell = c as f64 / n;
    }
    let reward = model
        .reward_cells(x0_idx, cells)
        .expect("empirical cells stay within the validated rate range");
    let (next_idx, dropped) = model.sample_cells(x0_idx, cells, rng);
    InnerStep {
        reward,
        next_idx,
        dropped,
    }
}

/// Simulates one slot from `x0`, advancing `rng` exactly as one step of an
/// [`estimate_jn`] episode does.
pub fn simulate_step(
    model: &QueueModel,
    compiled: &CompiledTuple,
    x0: &EnvState,
    rng: &mut RngStream,
) -> Result<StepRecord> {
    let space = model.space();
    let x0_idx = model.env_index(x0)?;
    let mut counts = vec![0u64; model.num_cells()];
    let mut cells = vec![0.0; model.num_cells()];
    let step = step_inner(model, compiled, x0_idx, rng, &mut counts, &mut cells);

    let mut pairs = Vec::with_capacity(model.num_cells());
    let mut i = 0;
    for x in space.agent_states() {
        for &u in space.actions() {
            pairs.push(((x.clone(), u), cells[i]));
            i += 1;
        }
    }
    Ok(StepRecord {
        env_before: x0.clone(),
        env_after: space.env_states()[step.next_idx].clone(),
        mean_field: StateActionDist::from_joint(crate::prob::FiniteDist::new(pairs)?),
        reward: step.reward,
        dropped: step.dropped,
    })
}

/// Monte Carlo estimate of the tuple's discounted objective in the
/// N-agent system, averaged over independent episodes.
pub fn estimate_jn(
    model: &QueueModel,
    tuple: &QueuePolicyTuple,
    spec: &EpisodeSpec,
) -> Result<EstimateReport> {
    if spec.n_agents == 0 || spec.episodes == 0 || spec.horizon == 0 {
        return Err(Error::InvalidParameter(
            "episode spec needs at least one agent, episode and step".into(),
        ));
    }
    if tuple.len() != spec.n_agents {
        return Err(Error::InvalidParameter(format!(
            "tuple has {} members for a population of {} agents",
            tuple.len(),
            spec.n_agents
        )));
    }
    let compiled = CompiledTuple::new(model, tuple)?;
    let gamma = model.gamma();

    let per_episode: Vec<(f64, u64)> = (0..spec.episodes)
        .into_par_iter()
        .map(|episode| {
            let mut rng = RngStream::new(spec.seed, episode as u64);
            let mut counts = vec![0u64; model.num_cells()];
            let mut cells = vec![0.0; model.num_cells()];
            let mut x0_idx = draw_index(model.mu0_env_cum(), rng.next_f64());
            let mut ret = 0.0;
            let mut discount = 1.0;
            let mut dropped = 0u64;
            for _ in 0..spec.horizon {
                let step = step_inner(model, &compiled, x0_idx, &mut rng, &mut counts, &mut cells);
                ret += discount * step.reward;
                discount *= gamma;
                dropped += step.dropped;
                x0_idx = step.next_idx;
            }
            (ret, dropped)
        })
        .collect();

    let n = spec.episodes as f64;
    let mean_return = per_episode.iter().map(|(r, _)| r).sum::<f64>() / n;
    let std_error = if spec.episodes > 1 {
        let ss: f64 = per_episode
            .iter()
            .map(|(r, _)| (r - mean_return) * (r - mean_return))
            .sum();
        (ss / (n * (n - 1.0))).sqrt()
    } else {
        0.0
    };
    let total_drops: u64 = per_episode.iter().map(|(_, d)| d).sum();
    Ok(EstimateReport {
        mean_return,
        std_error,
        episodes: spec.episodes,
        horizon: spec.horizon,
        n_agents: spec.n_agents,
        mean_drops_per_step: total_drops as f64 / (n * spec.horizon as f64),
        seed: spec.seed,
    })
}

/// Tail entry of a concentration experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct TailEntry {
    pub eps: f64,
    /// Fraction of trials with ‖G^N - E G^N‖₁ > eps.
    pub freq: f64,
    /// Chebyshev bound |𝒳|²|𝒰|² / (4 ε² N), clipped to 1.
    pub bound: f64,
}

/// Result of repeatedly sampling the one-slot empirical distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationReport {
    pub n_agents: usize,
    pub trials: usize,
    /// Monte Carlo estimate of E‖G^N - E G^N‖₁².
    pub mean_sq_l1: f64,
    /// Moment bound |𝒳|²|𝒰|² / (4N).
    pub mean_sq_bound: f64,
    pub tails: Vec<TailEntry>,
    pub seed: u64,
}

/// Samples N schedulers i.i.d. from μ₀ acting through `rule`, `trials`
/// times, and measures how far the empirical joint distribution strays
/// from its mean.
pub fn concentration_trial(
    space: &QueueSpace,
    rule: &QueueRule,
    n_agents: usize,
    trials: usize,
    eps_list: &[f64],
    seed: u64,
) -> Result<ConcentrationReport> {
    if n_agents == 0 || trials == 0 {
        return Err(Error::InvalidParameter(
            "concentration needs at least one agent and one trial".into(),
        ));
    }
    if eps_list.iter().any(|&e| e <= 0.0 || e.is_nan()) {
        return Err(Error::InvalidParameter(
            "tail thresholds must be positive".into(),
        ));
    }
    rule.validate_on(space)?;
    let expected = StateActionDist::mean_field_joint(space, space.mu0(), rule)?;
    let expected_cells = expected.joint().masses();
    let nu = space.actions().len();

    let mu0_cum: Vec<f64> = {
        let mut acc = 0.0;
        space
            .mu0()
            .masses()
            .iter()
            .map(|m| {
                acc += m;
                acc
            })
            .collect()
    };
    let rule_cum: Vec<Vec<f64>> = space
        .agent_states()
        .iter()
        .map(|x| {
            let mut acc = 0.0;
            rule.dist(x)
                .expect("validated rule covers every agent state")
                .masses()
                .iter()
                .map(|m| {
                    acc += m;
                    acc
                })
                .collect()
        })
        .collect();

    let l1s: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = RngStream::new(seed, trial as u64);
            let mut counts = vec![0u64; expected_cells.len()];
            for _ in 0..n_agents {
                let x = draw_index(&mu0_cum, rng.next_f64());
                let u = draw_index(&rule_cum[x], rng.next_f64());
                counts[x * nu + u] += 1;
            }
            counts
                .iter()
                .zip(expected_cells)
                .map(|(&c, &e)| (c as f64 / n_agents as f64 - e).abs())
                .sum()
        })
        .collect();

    let nx = space.agent_states().len() as f64;
    let scale = (nx * nu as f64) * (nx * nu as f64);
    let mean_sq_l1 = l1s.iter().map(|d| d * d).sum::<f64>() / trials as f64;
    let tails = eps_list
        .iter()
        .map(|&eps| TailEntry {
            eps,
            freq: l1s.iter().filter(|&&d| d > eps).count() as f64 / trials as f64,
            bound: (scale / (4.0 * eps * eps * n_agents as f64)).min(1.0),
        })
        .collect();
    Ok(ConcentrationReport {
        n_agents,
        trials,
        mean_sq_l1,
        mean_sq_bound: scale / (4.0 * n_agents as f64),
        tails,
        seed,
    })
}
