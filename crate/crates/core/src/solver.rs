//! Dynamic programming on the environment-state decision problem.
//!
//! With infinitely many schedulers the per-slot population behaviour is a
//! deterministic function of the chosen decision rule, so the control
//! problem collapses to a finite MDP whose states are buffer fillings and
//! whose actions are decision rules. We discretize the rules onto a simplex
//! grid and run value iteration over Q(x⁰, rule), which is a γ-contraction
//! in the sup norm with values bounded by R/(1-γ).

use crate::error::Error;
use crate::model::StateActionDist;
use crate::queue::{QueueModel, QueuePolicy, QueueRule, QueueSpace, QueueStateActionDist};
use crate::prob::FiniteDist;
use crate::Result;
use std::collections::BTreeMap;

/// Finite menu of decision rules: per agent state with s accessible queues,
/// all weight vectors (k₁/K, ..., k_s/K) with Σkᵢ = K over the access set;
/// single-access states are pinned to their only queue. The menu is the
/// Cartesian product across agent states, enumerated with the first agent
/// state most significant.
#[derive(Debug, Clone)]
pub struct DecisionGrid {
    rules: Vec<QueueRule>,
    resolution: u32,
}

impl DecisionGrid {
    pub fn build(space: &QueueSpace, resolution: u32, max_rules: usize) -> Result<Self> {
        if resolution < 1 {
            return Err(Error::InvalidParameter(
                "grid resolution must be at least 1".into(),
            ));
        }
        let m = space.actions().len();
        if space.actions() != (0..m).collect::<Vec<_>>().as_slice() {
            return Err(Error::SpaceMismatch {
                what: "actions",
                detail: "grid construction expects actions 0..num_queues".into(),
            });
        }

        // Count before materializing anything.
        let mut count: u128 = 1;
        for x in space.agent_states() {
            let s = x.access().len() as u64;
            if s > 1 {
                let per_state = binomial(resolution as u64 + s - 1, s - 1).ok_or(
                    Error::GridTooLarge {
                        rules: u128::MAX,
                        cap: max_rules,
                    },
                )?;
                count = count.checked_mul(per_state).ok_or(Error::GridTooLarge {
                    rules: u128::MAX,
                    cap: max_rules,
                })?;
            }
        }
        if count > max_rules as u128 {
            return Err(Error::GridTooLarge {
                rules: count,
                cap: max_rules,
            });
        }

        // Per-state menus of dense action distributions.
        let mut menus: Vec<Vec<FiniteDist<usize>>> = Vec::new();
        for x in space.agent_states() {
            let access = x.access();
            let menu = if access.len() == 1 {
                let mut mass = vec![0.0; m];
                mass[access[0]] = 1.0;
                vec![FiniteDist::from_sorted((0..m).collect(), mass)?]
            } else {
                compositions(resolution, access.len())
                    .into_iter()
                    .map(|parts| {
                        let mut mass = vec![0.0; m];
                        for (&q, &k) in access.iter().zip(&parts) {
                            mass[q] = k as f64 / resolution as f64;
                        }
                        FiniteDist::from_sorted((0..m).collect(), mass)
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            menus.push(menu);
        }

        // Odometer over the menus, first agent state most significant.
        let mut rules = Vec::with_capacity(count as usize);
        let mut idx = vec![0usize; menus.len()];
        loop {
            let mut table = BTreeMap::new();
            for (i, x) in space.agent_states().iter().enumerate() {
                table.insert(x.clone(), menus[i][idx[i]].clone());
            }
            rules.push(crate::model::DecisionRule::new(table)?);

            let mut pos = menus.len();
            loop {
                if pos == 0 {
                    debug_assert_eq!(rules.len() as u128, count, "odometer must cover the grid");
                    return Ok(Self { rules, resolution });
                }
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < menus[pos].len() {
                    break;
                }
                idx[pos] = 0;
            }
        }
    }

    pub fn rules(&self) -> &[QueueRule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    /// Index of a rule in the grid, if it is a grid point.
    pub fn position_of(&self, rule: &QueueRule) -> Option<usize> {
        self.rules.iter().position(|r| r == rule)
    }
}

/// All (k₁, ..., k_parts) with nonnegative entries summing to `total`,
/// in ascending lexicographic order.
pub fn compositions(total: u32, parts: usize) -> Vec<Vec<u32>> {
    assert!(parts >= 1, "a composition needs at least one part");
    if parts == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in 0..=total {
        for mut rest in compositions(total - first, parts - 1) {
            let mut c = Vec::with_capacity(parts);
            c.push(first);
            c.append(&mut rest);
            out.push(c);
        }
    }
    out
}

fn binomial(n: u64, r: u64) -> Option<u128> {
    let r = r.min(n - r.min(n));
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc.checked_mul((n - i) as u128)?;
        acc /= (i + 1) as u128;
    }
    Some(acc)
}

/// Action values indexed by (environment state, grid rule).
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    values: Vec<Vec<f64>>,
}

impl QTable {
    pub fn zeros(num_env_states: usize, num_rules: usize) -> Self {
        Self {
            values: vec![vec![0.0; num_rules]; num_env_states],
        }
    }

    pub fn from_values(values: Vec<Vec<f64>>) -> Result<Self> {
        if values.is_empty() || values[0].is_empty() {
            return Err(Error::InvalidParameter("empty Q table".into()));
        }
        let width = values[0].len();
        for row in &values {
            if row.len() != width || row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(
                    "Q table must be rectangular with finite entries".into(),
                ));
            }
        }
        Ok(Self { values })
    }

    pub fn num_env_states(&self) -> usize {
        self.values.len()
    }

    pub fn num_rules(&self) -> usize {
        self.values[0].len()
    }

    pub fn get(&self, x0: usize, rule: usize) -> f64 {
        self.values[x0][rule]
    }

    pub fn row(&self, x0: usize) -> &[f64] {
        &self.values[x0]
    }

    /// V(x⁰) = max over rules.
    pub fn state_value(&self, x0: usize) -> f64 {
        self.values[x0]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Argmax over rules; ties resolve to the lowest index.
    pub fn greedy_index(&self, x0: usize) -> usize {
        let mut best = (0usize, self.values[x0][0]);
        for (k, &v) in self.values[x0].iter().enumerate().skip(1) {
            if v > best.1 {
                best = (k, v);
            }
        }
        best.0
    }

    pub fn greedy_assignment(&self) -> Vec<usize> {
        (0..self.num_env_states()).map(|i| self.greedy_index(i)).collect()
    }

    pub fn linf_dist(&self, other: &Self) -> f64 {
        assert_eq!(
            (self.num_env_states(), self.num_rules()),
            (other.num_env_states(), other.num_rules()),
            "Q tables must share a shape to be compared"
        );
        let mut d: f64 = 0.0;
        for (ra, rb) in self.values.iter().zip(&other.values) {
            for (a, b) in ra.iter().zip(rb) {
                d = d.max((a - b).abs());
            }
        }
        d
    }
}

/// The compiled finite MDP: rewards[x⁰][k] and transitions[x⁰][k][x⁰'] for
/// every grid rule k. Rows are dense over environment-state indices.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    gamma: f64,
    rewards: Vec<Vec<f64>>,
    transitions: Vec<Vec<Vec<f64>>>,
}

impl TabularMdp {
    pub fn new(
        gamma: f64,
        rewards: Vec<Vec<f64>>,
        transitions: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "discount factor must lie strictly inside (0, 1), got {gamma}"
            )));
        }
        let n = rewards.len();
        if n == 0 || rewards[0].is_empty() {
            return Err(Error::InvalidParameter("empty MDP".into()));
        }
        let k = rewards[0].len();
        if transitions.len() != n {
            return Err(Error::InvalidParameter(
                "rewards and transitions disagree on the state count".into(),
            ));
        }
        for (x0, (r_row, t_row)) in rewards.iter().zip(&transitions).enumerate() {
            if r_row.len() != k || t_row.len() != k {
                return Err(Error::InvalidParameter(format!(
                    "state {x0} does not have one entry per rule"
                )));
            }
            if r_row.iter().any(|r| !r.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "non-finite reward at state {x0}"
                )));
            }
            for row in t_row {
                if row.len() != n {
                    return Err(Error::InvalidParameter(format!(
                        "transition row at state {x0} has wrong width"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0 || p.is_nan()) {
                    return Err(Error::Numerical(format!(
                        "transition row at state {x0} is not a distribution (sum {sum})"
                    )));
                }
            }
        }
        Ok(Self {
            gamma,
            rewards,
            transitions,
        })
    }

    /// Tabulates the model over a grid. The population joint distribution of
    /// a rule does not depend on the buffer state, so it is computed once
    /// per rule.
    pub fn compile(model: &QueueModel, grid: &DecisionGrid) -> Result<Self> {
        let space = model.space();
        let mut cell_sets = Vec::with_capacity(grid.len());
        for rule in grid.rules() {
            let g = StateActionDist::mean_field_joint(space, space.mu0(), rule)?;
            cell_sets.push(model.cells_of(&g)?.to_vec());
        }
        let n = model.num_env_states();
        let mut rewards = Vec::with_capacity(n);
        let mut transitions = Vec::with_capacity(n);
        for x0 in 0..n {
            let mut r_row = Vec::with_capacity(grid.len());
            let mut t_row = Vec::with_capacity(grid.len());
            for cells in &cell_sets {
                r_row.push(model.reward_cells(x0, cells)?);
                t_row.push(model.transition_row_cells(x0, cells)?);
            }
            rewards.push(r_row);
            transitions.push(t_row);
        }
        Self::new(model.gamma(), rewards, transitions)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn num_env_states(&self) -> usize {
        self.rewards.len()
    }

    pub fn num_rules(&self) -> usize {
        self.rewards[0].len()
    }

    pub fn reward(&self, x0: usize, rule: usize) -> f64 {
        self.rewards[x0][rule]
    }

    pub fn transition_row(&self, x0: usize, rule: usize) -> &[f64] {
        &self.transitions[x0][rule]
    }

    /// Largest reward magnitude; |Q| never exceeds this over (1 - γ).
    pub fn reward_bound(&self) -> f64 {
        self.rewards
            .iter()
            .flatten()
            .fold(0.0f64, |acc, r| acc.max(r.abs()))
    }

    /// One Bellman sweep: (BQ)(x⁰, k) = r(x⁰, k) + γ Σ P(x⁰'|x⁰, k) max_k' Q(x⁰', k').
    pub fn backup(&self, q: &QTable) -> QTable {
        assert_eq!(
            (q.num_env_states(), q.num_rules()),
            (self.num_env_states(), self.num_rules()),
            "Q table shape must match the MDP"
        );
        let v: Vec<f64> = (0..self.num_env_states())
            .map(|x0| q.state_value(x0))
            .collect();
        let values = self
            .rewards
            .iter()
            .zip(&self.transitions)
            .map(|(r_row, t_row)| {
                r_row
                    .iter()
                    .zip(t_row)
                    .map(|(r, row)| {
                        r + self.gamma * row.iter().zip(&v).map(|(p, val)| p * val).sum::<f64>()
                    })
                    .collect()
            })
            .collect();
        QTable { values }
    }
}

/// Result of value iteration.
#[derive(Debug, Clone)]
pub struct Solution {
    pub q: QTable,
    pub iterations: usize,
    /// Final sup-norm change between consecutive tables.
    pub residual: f64,
    /// Stopping threshold tol (1 - γ) / (2 γ) that the residual fell under.
    pub threshold: f64,
    pub residual_history: Vec<f64>,
    /// Greedy rule index per environment state.
    pub greedy: Vec<usize>,
}

/// Iterates B from Q ≡ 0 until the sup-norm residual falls below
/// tol (1 - γ) / (2 γ), which bounds the final value error by tol.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<Solution> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "tolerance must be positive and finite, got {tol}"
        )));
    }
    let gamma = mdp.gamma();
    let threshold = tol * (1.0 - gamma) / (2.0 * gamma);
    let mut q = QTable::zeros(mdp.num_env_states(), mdp.num_rules());
    let mut history = Vec::new();
    for iteration in 1..=1_000_000usize {
        let next = mdp.backup(&q);
        let residual = next.linf_dist(&q);
        history.push(residual);
        q = next;
        if residual <= threshold {
            let greedy = q.greedy_assignment();
            return Ok(Solution {
                q,
                iterations: iteration,
                residual,
                threshold,
                residual_history: history,
                greedy,
            });
        }
    }
    Err(Error::Numerical(format!(
        "value iteration did not reach residual {threshold} within 1e6 sweeps"
    )))
}

/// Q-value of an arbitrary rule (not necessarily on the grid) against the
/// continuation values of `q`.
pub fn rule_backup(
    model: &QueueModel,
    q: &QTable,
    x0: &crate::queue::EnvState,
    rule: &QueueRule,
) -> Result<f64> {
    let space = model.space();
    let g = StateActionDist::mean_field_joint(space, space.mu0(), rule)?;
    let cells = model.cells_of(&g)?;
    let idx = model.env_index(x0)?;
    let r = model.reward_cells(idx, cells)?;
    let row = model.transition_row_cells(idx, cells)?;
    let v: f64 = row
        .iter()
        .enumerate()
        .map(|(i, p)| p * q.state_value(i))
        .sum();
    Ok(r + model.gamma() * v)
}

/// The policy that plays the grid rule `assignment[x⁰]` in every state.
pub fn greedy_policy(
    model: &QueueModel,
    grid: &DecisionGrid,
    assignment: &[usize],
) -> Result<QueuePolicy> {
    let n = model.num_env_states();
    if assignment.len() != n || assignment.iter().any(|&k| k >= grid.len()) {
        return Err(Error::InvalidParameter(
            "assignment must pick one grid rule per environment state".into(),
        ));
    }
    let mut i = 0;
    crate::model::StationaryPolicy::from_fn(model.space().env_states(), |_| {
        let rule = grid.rules()[assignment[i]].clone();
        i += 1;
        Ok(rule)
    })
}

/// Discounted-reward chain induced by fixing one rule per state.
struct FixedChain {
    gamma: f64,
    r: Vec<f64>,
    p: Vec<Vec<f64>>,
}

fn chain_of_assignment(mdp: &TabularMdp, assignment: &[usize]) -> Result<FixedChain> {
    let n = mdp.num_env_states();
    if assignment.len() != n || assignment.iter().any(|&k| k >= mdp.num_rules()) {
        return Err(Error::InvalidParameter(
            "assignment must pick one rule per environment state".into(),
        ));
    }
    Ok(FixedChain {
        gamma: mdp.gamma(),
        r: assignment
            .iter()
            .enumerate()
            .map(|(x0, &k)| mdp.reward(x0, k))
            .collect(),
        p: assignment
            .iter()
            .enumerate()
            .map(|(x0, &k)| mdp.transition_row(x0, k).to_vec())
            .collect(),
    })
}

fn chain_of_policy(model: &QueueModel, policy: &QueuePolicy) -> Result<FixedChain> {
    policy.validate_on(model.space())?;
    let space = model.space();
    let mut r = Vec::with_capacity(model.num_env_states());
    let mut p = Vec::with_capacity(model.num_env_states());
    for (x0_idx, x0) in space.env_states().iter().enumerate() {
        let rule = policy.rule(x0).expect("validated policy covers every state");
        let g = StateActionDist::mean_field_joint(space, space.mu0(), rule)?;
        let cells = model.cells_of(&g)?;
        r.push(model.reward_cells(x0_idx, cells)?);
        p.push(model.transition_row_cells(x0_idx, cells)?);
    }
    Ok(FixedChain {
        gamma: model.gamma(),
        r,
        p,
    })
}

fn chain_values_iterative(chain: &FixedChain, tol: f64) -> Result<Vec<f64>> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "tolerance must be positive and finite, got {tol}"
        )));
    }
    let threshold = tol * (1.0 - chain.gamma) / (2.0 * chain.gamma);
    let mut v = vec![0.0; chain.r.len()];
    for _ in 0..1_000_000 {
        let mut next = chain.r.clone();
        for (nv, row) in next.iter_mut().zip(&chain.p) {
            *nv += chain.gamma * row.iter().zip(&v).map(|(p, val)| p * val).sum::<f64>();
        }
        let residual = next
            .iter()
            .zip(&v)
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        v = next;
        if residual <= threshold {
            return Ok(v);
        }
    }
    Err(Error::Numerical(
        "policy evaluation did not converge within 1e6 sweeps".into(),
    ))
}

fn chain_values_direct(chain: &FixedChain) -> Result<Vec<f64>> {
    let n = chain.r.len();
    let mut a = vec![vec![0.0; n]; n];
    for (i, row) in chain.p.iter().enumerate() {
        for (j, &pij) in row.iter().enumerate() {
            a[i][j] = if i == j { 1.0 } else { 0.0 } - chain.gamma * pij;
        }
    }
    solve_linear(a, chain.r.clone())
}

/// Values of the chain that plays grid rule `assignment[x⁰]`, by iteration.
pub fn policy_evaluation(mdp: &TabularMdp, assignment: &[usize], tol: f64) -> Result<Vec<f64>> {
    chain_values_iterative(&chain_of_assignment(mdp, assignment)?, tol)
}

/// Same values, by solving (I - γP)V = r exactly.
pub fn policy_evaluation_direct(mdp: &TabularMdp, assignment: &[usize]) -> Result<Vec<f64>> {
    chain_values_direct(&chain_of_assignment(mdp, assignment)?)
}

/// Values of an arbitrary stationary policy on the model, by iteration.
pub fn evaluate_policy(model: &QueueModel, policy: &QueuePolicy, tol: f64) -> Result<Vec<f64>> {
    chain_values_iterative(&chain_of_policy(model, policy)?, tol)
}

/// Same values, by linear solve.
pub fn evaluate_policy_direct(model: &QueueModel, policy: &QueuePolicy) -> Result<Vec<f64>> {
    chain_values_direct(&chain_of_policy(model, policy)?)
}

/// Start-weighted objective J = Σ μ⁰₀(x⁰) V(x⁰).
pub fn mf_objective(model: &QueueModel, values: &[f64]) -> f64 {
    assert_eq!(
        values.len(),
        model.num_env_states(),
        "one value per environment state"
    );
    model
        .space()
        .mu0_env()
        .masses()
        .iter()
        .zip(values)
        .map(|(m, v)| m * v)
        .sum()
}

/// Empirical smoothness of the converged Q table in its rule argument:
/// the largest |ΔQ| / ‖ΔG‖₁ over consecutive grid rules, an observed (not
/// proven) Lipschitz constant.
pub fn q_lipschitz_estimate(model: &QueueModel, grid: &DecisionGrid, q: &QTable) -> Result<f64> {
    let space = model.space();
    let joints: Vec<QueueStateActionDist> = grid
        .rules()
        .iter()
        .map(|rule| StateActionDist::mean_field_joint(space, space.mu0(), rule))
        .collect::<Result<_>>()?;
    let mut estimate = 0.0f64;
    for k in 1..grid.len() {
        let dg = joints[k].l1_distance(&joints[k - 1])?;
        if dg < 1e-12 {
            continue;
        }
        for x0 in 0..model.num_env_states() {
            let dq = (q.get(x0, k) - q.get(x0, k - 1)).abs();
            estimate = estimate.max(dq / dg);
        }
    }
    Ok(estimate)
}

/// Gaussian elimination with partial pivoting; fine at these sizes.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    assert!(a.len() == n && a.iter().all(|row| row.len() == n));
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("nonempty pivot range");
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::Numerical(
                "singular system in policy evaluation".into(),
            ));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        let pivot_row = a[col].clone();
        for row in col + 1..n {
            let f = a[row][col] / pivot_row[col];
            if f == 0.0 {
                continue;
            }
            for (entry, &p) in a[row][col..].iter_mut().zip(&pivot_row[col..]) {
                *entry -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Ok(x)
}
