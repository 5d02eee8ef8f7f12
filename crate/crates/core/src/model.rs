//! Mean field vocabulary shared by the exact solver and the finite-population
//! simulator.
//!
//! A decision rule h maps agent states to action distributions. Against a
//! population distribution mu it induces the joint G(mu, h)(x, u) =
//! h(x)(u) * mu(x); a finite population of N agents induces the empirical
//! joint G^N = (1/N) sum_i delta_{(x_i, u_i)}. Stationary policies pick one
//! rule per environment state; tuples hold one policy per agent.

use crate::error::Error;
use crate::prob::FiniteDist;
use crate::Result;
use std::collections::BTreeMap;

/// The finite spaces of a mean field control problem, in canonical order,
/// plus the initial distributions and the discount factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceSpec<X0, X, U> {
    env_states: Vec<X0>,
    agent_states: Vec<X>,
    actions: Vec<U>,
    mu0: FiniteDist<X>,
    mu0_env: FiniteDist<X0>,
    gamma: f64,
}

impl<X0: Ord + Clone, X: Ord + Clone, U: Ord + Clone> SpaceSpec<X0, X, U> {
    pub fn new(
        env_states: Vec<X0>,
        agent_states: Vec<X>,
        actions: Vec<U>,
        mu0: FiniteDist<X>,
        mu0_env: FiniteDist<X0>,
        gamma: f64,
    ) -> Result<Self> {
        for (name, sorted) in [
            ("env_states", is_sorted_unique(&env_states)),
            ("agent_states", is_sorted_unique(&agent_states)),
            ("actions", is_sorted_unique(&actions)),
        ] {
            if !sorted {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be nonempty, sorted and duplicate-free"
                )));
            }
        }
        if mu0.support() != agent_states.as_slice() {
            return Err(Error::SpaceMismatch {
                what: "mu0",
                detail: "support must equal the agent state list".into(),
            });
        }
        if mu0_env.support() != env_states.as_slice() {
            return Err(Error::SpaceMismatch {
                what: "mu0_env",
                detail: "support must equal the environment state list".into(),
            });
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "discount factor must lie strictly inside (0, 1), got {gamma}"
            )));
        }
        Ok(Self {
            env_states,
            agent_states,
            actions,
            mu0,
            mu0_env,
            gamma,
        })
    }

    pub fn env_states(&self) -> &[X0] {
        &self.env_states
    }

    pub fn agent_states(&self) -> &[X] {
        &self.agent_states
    }

    pub fn actions(&self) -> &[U] {
        &self.actions
    }

    pub fn mu0(&self) -> &FiniteDist<X> {
        &self.mu0
    }

    pub fn mu0_env(&self) -> &FiniteDist<X0> {
        &self.mu0_env
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn env_index(&self, x0: &X0) -> Option<usize> {
        self.env_states.binary_search(x0).ok()
    }

    pub fn agent_index(&self, x: &X) -> Option<usize> {
        self.agent_states.binary_search(x).ok()
    }
}

fn is_sorted_unique<T: Ord>(xs: &[T]) -> bool {
    !xs.is_empty() && xs.windows(2).all(|w| w[0] < w[1])
}

/// Decision rule: one action distribution per agent state. Distributions are
/// kept dense over the full action list (zero mass is allowed anywhere).
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRule<X, U> {
    table: BTreeMap<X, FiniteDist<U>>,
}

impl<X: Ord + Clone, U: Ord + Clone> DecisionRule<X, U> {
    pub fn new(table: BTreeMap<X, FiniteDist<U>>) -> Result<Self> {
        if table.is_empty() {
            return Err(Error::InvalidParameter(
                "a decision rule must cover at least one agent state".into(),
            ));
        }
        Ok(Self { table })
    }

    /// Builds a rule by evaluating `f` on every agent state.
    pub fn from_fn(
        agent_states: &[X],
        mut f: impl FnMut(&X) -> Result<FiniteDist<U>>,
    ) -> Result<Self> {
        let mut table = BTreeMap::new();
        for x in agent_states {
            table.insert(x.clone(), f(x)?);
        }
        Self::new(table)
    }

    pub fn dist(&self, x: &X) -> Option<&FiniteDist<U>> {
        self.table.get(x)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&X, &FiniteDist<U>)> {
        self.table.iter()
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Checks the rule covers exactly the space's agent states and that every
    /// distribution is dense over the space's action list.
    pub fn validate_on<X0: Ord + Clone>(&self, space: &SpaceSpec<X0, X, U>) -> Result<()> {
        if self.table.len() != space.agent_states().len()
            || !space.agent_states().iter().all(|x| self.table.contains_key(x))
        {
            return Err(Error::SpaceMismatch {
                what: "decision rule",
                detail: "must cover exactly the agent state list".into(),
            });
        }
        for dist in self.table.values() {
            if dist.support() != space.actions() {
                return Err(Error::SpaceMismatch {
                    what: "decision rule",
                    detail: "every action distribution must be dense over the action list".into(),
                });
            }
        }
        Ok(())
    }
}

/// Joint distribution over agent state-action pairs, dense over the full
/// product space in canonical (state-major) order.
#[derive(Debug, Clone, PartialEq)]
pub struct StateActionDist<X, U> {
    joint: FiniteDist<(X, U)>,
}

impl<X: Ord + Clone, U: Ord + Clone> StateActionDist<X, U> {
    /// The mean field joint G(mu, h)(x, u) = h(x)(u) * mu(x).
    pub fn mean_field_joint<X0: Ord + Clone>(
        space: &SpaceSpec<X0, X, U>,
        mu: &FiniteDist<X>,
        rule: &DecisionRule<X, U>,
    ) -> Result<Self> {
        if mu.support() != space.agent_states() {
            return Err(Error::SpaceMismatch {
                what: "mu",
                detail: "support must equal the agent state list".into(),
            });
        }
        rule.validate_on(space)?;
        let mut support = Vec::with_capacity(space.agent_states().len() * space.actions().len());
        let mut mass = Vec::with_capacity(support.capacity());
        for (x, mx) in mu.iter() {
            let dist = rule.dist(x).expect("validated above");
            for (u, hu) in dist.iter() {
                support.push((x.clone(), u.clone()));
                mass.push(hu * mx);
            }
        }
        Ok(Self {
            joint: FiniteDist::from_sorted(support, mass)?,
        })
    }

    /// Empirical joint of a finite population: entry (x, u) is the fraction
    /// of agents in state x that played u. Errors on an empty population.
    pub fn empirical<X0: Ord + Clone>(
        space: &SpaceSpec<X0, X, U>,
        pairs: &[(X, U)],
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyPopulation);
        }
        let nx = space.agent_states().len();
        let nu = space.actions().len();
        let mut counts = vec![0usize; nx * nu];
        for (x, u) in pairs {
            let xi = space.agent_index(x).ok_or(Error::SpaceMismatch {
                what: "population",
                detail: "agent state outside the space".into(),
            })?;
            let ui = space
                .actions()
                .binary_search(u)
                .map_err(|_| Error::SpaceMismatch {
                    what: "population",
                    detail: "action outside the space".into(),
                })?;
            counts[xi * nu + ui] += 1;
        }
        let n = pairs.len() as f64;
        let mut support = Vec::with_capacity(nx * nu);
        let mut mass = Vec::with_capacity(nx * nu);
        for (xi, x) in space.agent_states().iter().enumerate() {
            for (ui, u) in space.actions().iter().enumerate() {
                support.push((x.clone(), u.clone()));
                mass.push(counts[xi * nu + ui] as f64 / n);
            }
        }
        Ok(Self {
            joint: FiniteDist::from_sorted(support, mass)?,
        })
    }

    /// Wraps an already-dense joint distribution.
    pub fn from_joint(joint: FiniteDist<(X, U)>) -> Self {
        Self { joint }
    }

    pub fn joint(&self) -> &FiniteDist<(X, U)> {
        &self.joint
    }

    pub fn mass_of(&self, x: &X, u: &U) -> f64 {
        self.joint.mass_of(&(x.clone(), u.clone()))
    }

    /// Marginal mass of an agent state: sum over actions.
    pub fn agent_marginal(&self, x: &X) -> f64 {
        self.joint
            .iter()
            .filter(|((xs, _), _)| xs == x)
            .map(|(_, m)| m)
            .sum()
    }

    pub fn l1_distance(&self, other: &Self) -> Result<f64> {
        self.joint.l1_distance(&other.joint)
    }
}

/// Turns a per-agent reward r~(x, x0, G) into the population-average reward
/// r(x0, G) = sum_x r~(x, x0, G) * sum_u G(x, u).
pub fn per_agent_reward_adapter<X0, X, U>(
    r_tilde: impl Fn(&X, &X0, &StateActionDist<X, U>) -> f64,
) -> impl Fn(&X0, &StateActionDist<X, U>) -> f64
where
    X0: Ord + Clone,
    X: Ord + Clone,
    U: Ord + Clone,
{
    move |x0, g| {
        let mut total = 0.0;
        let mut current: Option<(&X, f64)> = None;
        for ((x, _), m) in g.joint().iter() {
            match &mut current {
                Some((cx, acc)) if *cx == x => *acc += m,
                _ => {
                    if let Some((cx, acc)) = current.take() {
                        if acc > 0.0 {
                            total += r_tilde(cx, x0, g) * acc;
                        }
                    }
                    current = Some((x, m));
                }
            }
        }
        if let Some((cx, acc)) = current {
            if acc > 0.0 {
                total += r_tilde(cx, x0, g) * acc;
            }
        }
        total
    }
}

/// Stationary policy: one decision rule per environment state.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryPolicy<X0, X, U> {
    table: BTreeMap<X0, DecisionRule<X, U>>,
}

impl<X0: Ord + Clone, X: Ord + Clone, U: Ord + Clone> StationaryPolicy<X0, X, U> {
    pub fn new(table: BTreeMap<X0, DecisionRule<X, U>>) -> Result<Self> {
        if table.is_empty() {
            return Err(Error::InvalidParameter(
                "a policy must cover at least one environment state".into(),
            ));
        }
        Ok(Self { table })
    }

    pub fn from_fn(
        env_states: &[X0],
        mut f: impl FnMut(&X0) -> Result<DecisionRule<X, U>>,
    ) -> Result<Self> {
        let mut table = BTreeMap::new();
        for x0 in env_states {
            table.insert(x0.clone(), f(x0)?);
        }
        Self::new(table)
    }

    pub fn rule(&self, x0: &X0) -> Option<&DecisionRule<X, U>> {
        self.table.get(x0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&X0, &DecisionRule<X, U>)> {
        self.table.iter()
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn validate_on(&self, space: &SpaceSpec<X0, X, U>) -> Result<()> {
        if self.table.len() != space.env_states().len()
            || !space.env_states().iter().all(|x0| self.table.contains_key(x0))
        {
            return Err(Error::SpaceMismatch {
                what: "policy",
                detail: "must cover exactly the environment state list".into(),
            });
        }
        for rule in self.table.values() {
            rule.validate_on(space)?;
        }
        Ok(())
    }
}

/// One policy per agent. Lifting repeats a single policy N times; averaging
/// collapses a tuple back to the mixture policy used by the exchangeability
/// argument.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTuple<X0, X, U> {
    members: Vec<StationaryPolicy<X0, X, U>>,
}

impl<X0: Ord + Clone, X: Ord + Clone, U: Ord + Clone> PolicyTuple<X0, X, U> {
    pub fn from_members(members: Vec<StationaryPolicy<X0, X, U>>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyPopulation);
        }
        Ok(Self { members })
    }

    /// N references to the same policy.
    pub fn lift(policy: StationaryPolicy<X0, X, U>, n: usize) -> Result<Self> {
        if n < 1 {
            return Err(Error::EmptyPopulation);
        }
        Ok(Self {
            members: vec![policy; n],
        })
    }

    pub fn members(&self) -> &[StationaryPolicy<X0, X, U>] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Entrywise average policy: at every (x0, x) the action distribution is
    /// the uniform mixture of the members' distributions.
    pub fn average(&self) -> Result<StationaryPolicy<X0, X, U>> {
        let first = &self.members[0];
        let n = self.members.len() as f64;
        let mut table = BTreeMap::new();
        for (x0, first_rule) in first.iter() {
            let mut rule_table = BTreeMap::new();
            for (x, first_dist) in first_rule.iter() {
                let mut mass = vec![0.0; first_dist.len()];
                for member in &self.members {
                    let dist = member
                        .rule(x0)
                        .and_then(|r| r.dist(x))
                        .ok_or(Error::SpaceMismatch {
                            what: "policy tuple",
                            detail: "members must be defined on the same spaces".into(),
                        })?;
                    if dist.support() != first_dist.support() {
                        return Err(Error::SupportMismatch);
                    }
                    for (slot, m) in mass.iter_mut().zip(dist.masses()) {
                        *slot += m;
                    }
                }
                for slot in &mut mass {
                    *slot /= n;
                }
                rule_table.insert(
                    x.clone(),
                    FiniteDist::from_sorted(first_dist.support().to_vec(), mass)?,
                );
            }
            table.insert(x0.clone(), DecisionRule::new(rule_table)?);
        }
        StationaryPolicy::new(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type S = SpaceSpec<u32, u32, u32>;

    fn small_space() -> S {
        SpaceSpec::new(
            vec![0, 1],
            vec![0, 1, 2],
            vec![0, 1],
            FiniteDist::new(vec![(0, 0.6), (1, 0.2), (2, 0.2)]).unwrap(),
            FiniteDist::new(vec![(0, 1.0), (1, 0.0)]).unwrap(),
            0.9,
        )
        .unwrap()
    }

    fn uniform_rule(space: &S) -> DecisionRule<u32, u32> {
        DecisionRule::from_fn(space.agent_states(), |_| {
            FiniteDist::uniform(space.actions().to_vec())
        })
        .unwrap()
    }

    #[test]
    fn space_spec_rejects_bad_input() {
        let mu0 = FiniteDist::new(vec![(0u32, 1.0)]).unwrap();
        let mu0_env = FiniteDist::point_mass(0u32);
        assert!(SpaceSpec::new(
            vec![0u32],
            vec![0u32],
            vec![0u32],
            mu0.clone(),
            mu0_env.clone(),
            1.0
        )
        .is_err());
        assert!(SpaceSpec::new(
            vec![0u32, 0],
            vec![0u32],
            vec![0u32],
            mu0.clone(),
            mu0_env.clone(),
            0.5
        )
        .is_err());
        // mu0 support mismatch
        assert!(SpaceSpec::new(
            vec![0u32],
            vec![0u32, 1],
            vec![0u32],
            mu0,
            mu0_env,
            0.5
        )
        .is_err());
    }

    #[test]
    fn mean_field_joint_point_masses() {
        let space = small_space();
        let mu = FiniteDist::new(vec![(0u32, 1.0), (1, 0.0), (2, 0.0)]).unwrap();
        let rule = DecisionRule::from_fn(space.agent_states(), |_| {
            Ok(FiniteDist::new(vec![(0u32, 0.0), (1, 1.0)]).unwrap())
        })
        .unwrap();
        let g = StateActionDist::mean_field_joint(&space, &mu, &rule).unwrap();
        assert_eq!(g.mass_of(&0, &1), 1.0);
        assert_eq!(g.mass_of(&0, &0), 0.0);
        assert_eq!(g.mass_of(&1, &1), 0.0);
    }

    #[test]
    fn mean_field_joint_matches_direct_product() {
        let space = small_space();
        let rule = uniform_rule(&space);
        let g = StateActionDist::mean_field_joint(&space, space.mu0(), &rule).unwrap();
        // Entry (first state, either action) = 0.6 * 0.5 = 0.3, exactly.
        assert_eq!(g.mass_of(&0, &0), 0.3);
        // Direct product oracle over all cells.
        for x in space.agent_states() {
            for u in space.actions() {
                let expect = space.mu0().mass_of(x) * rule.dist(x).unwrap().mass_of(u);
                assert!((g.mass_of(x, u) - expect).abs() < 1e-15);
            }
        }
        // Marginal identity: sum_u G(x, u) = mu(x).
        for x in space.agent_states() {
            assert!((g.agent_marginal(x) - space.mu0().mass_of(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_distribution_counts() {
        let space = small_space();
        let g = StateActionDist::empirical(&space, &[(0u32, 1u32)]).unwrap();
        assert_eq!(g.mass_of(&0, &1), 1.0);

        let g = StateActionDist::empirical(&space, &[(0, 0), (1, 1)]).unwrap();
        assert_eq!(g.mass_of(&0, &0), 0.5);
        assert_eq!(g.mass_of(&1, &1), 0.5);

        let g = StateActionDist::empirical(&space, &[(0, 0), (0, 0), (2, 1), (0, 1)]).unwrap();
        assert_eq!(g.mass_of(&0, &0), 0.5);
        assert_eq!(g.mass_of(&2, &1), 0.25);
        assert_eq!(g.mass_of(&0, &1), 0.25);

        assert!(matches!(
            StateActionDist::empirical(&space, &[]),
            Err(Error::EmptyPopulation)
        ));
        // All entries are multiples of 1/N.
        let n = 4.0;
        for (_, m) in g.joint().iter() {
            assert!((m * n - (m * n).round()).abs() < 1e-12);
        }
    }

    #[test]
    fn reward_adapter_examples() {
        let space = small_space();
        let rule = uniform_rule(&space);
        let g = StateActionDist::mean_field_joint(&space, space.mu0(), &rule).unwrap();

        let constant = per_agent_reward_adapter(|_: &u32, _: &u32, _| 2.5);
        assert!((constant(&0, &g) - 2.5).abs() < 1e-12);

        // Indicator of state 0 recovers its marginal 0.6.
        let indicator = per_agent_reward_adapter(|x: &u32, _: &u32, _| if *x == 0 { 1.0 } else { 0.0 });
        assert!((indicator(&0, &g) - 0.6).abs() < 1e-12);

        // Linear per-agent reward: direct-summation oracle.
        let linear = per_agent_reward_adapter(|x: &u32, x0: &u32, g| {
            *x as f64 + *x0 as f64 + g.mass_of(&0, &0)
        });
        let mut oracle = 0.0;
        for x in space.agent_states() {
            let marginal: f64 = space.actions().iter().map(|u| g.mass_of(x, u)).sum();
            oracle += (*x as f64 + 1.0 + g.mass_of(&0, &0)) * marginal;
        }
        assert!((linear(&1, &g) - oracle).abs() < 1e-12);

        // Population-average identity: the adapter equals the empirical mean
        // of per-agent rewards when G is the population's empirical joint.
        let pairs = vec![(0u32, 0u32), (0, 1), (1, 0), (2, 1)];
        let ge = StateActionDist::empirical(&space, &pairs).unwrap();
        let r_tilde = |x: &u32, x0: &u32, g: &StateActionDist<u32, u32>| {
            (*x as f64) * 2.0 - *x0 as f64 + g.mass_of(&1, &0)
        };
        let adapted = per_agent_reward_adapter(r_tilde);
        let mean: f64 = pairs.iter().map(|(x, _)| r_tilde(x, &1, &ge)).sum::<f64>() / 4.0;
        assert!((adapted(&1, &ge) - mean).abs() < 1e-12);
    }

    #[test]
    fn lift_and_average_identities() {
        let space = small_space();
        let uniform = StationaryPolicy::from_fn(space.env_states(), |_| Ok(uniform_rule(&space)))
            .unwrap();
        let det0 = StationaryPolicy::from_fn(space.env_states(), |_| {
            DecisionRule::from_fn(space.agent_states(), |_| {
                Ok(FiniteDist::new(vec![(0u32, 1.0), (1, 0.0)]).unwrap())
            })
        })
        .unwrap();
        let det1 = StationaryPolicy::from_fn(space.env_states(), |_| {
            DecisionRule::from_fn(space.agent_states(), |_| {
                Ok(FiniteDist::new(vec![(0u32, 0.0), (1, 1.0)]).unwrap())
            })
        })
        .unwrap();

        assert!(matches!(
            PolicyTuple::lift(uniform.clone(), 0),
            Err(Error::EmptyPopulation)
        ));

        // Averaging a lifted policy returns the policy itself.
        let lifted = PolicyTuple::lift(uniform.clone(), 5).unwrap();
        assert_eq!(lifted.len(), 5);
        assert_eq!(lifted.average().unwrap(), uniform);

        // Average of the two deterministic policies is the 50/50 mixture.
        let tuple = PolicyTuple::from_members(vec![det0.clone(), det1.clone()]).unwrap();
        let avg = tuple.average().unwrap();
        for (x0, rule) in avg.iter() {
            for (x, dist) in rule.iter() {
                assert!(
                    (dist.mass_of(&0) - 0.5).abs() < 1e-15,
                    "state ({x0:?}, {x:?})"
                );
            }
        }

        // Convexity: every averaged mass lies within the members' range.
        let tuple = PolicyTuple::from_members(vec![det0, uniform.clone(), det1]).unwrap();
        let avg = tuple.average().unwrap();
        for (x0, rule) in avg.iter() {
            for (x, dist) in rule.iter() {
                for (u, m) in dist.iter() {
                    let member_masses: Vec<f64> = tuple
                        .members()
                        .iter()
                        .map(|p| p.rule(x0).unwrap().dist(x).unwrap().mass_of(u))
                        .collect();
                    let lo = member_masses.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = member_masses
                        .iter()
                        .cloned()
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert!(m >= lo - 1e-15 && m <= hi + 1e-15);
                }
            }
        }
    }
}
