//! Reference policies the solved policy is compared against.

use crate::model::{DecisionRule, StationaryPolicy};
use crate::prob::FiniteDist;
use crate::queue::{QueuePolicy, QueuePolicyTuple, QueueSpace};
use crate::Result;

/// Join the shortest queue: every scheduler splits its packets uniformly
/// over the shortest queues it can access in the current buffer state.
pub fn jsq_policy(space: &QueueSpace) -> Result<QueuePolicy> {
    let m = space.actions().len();
    StationaryPolicy::from_fn(space.env_states(), |x0| {
        DecisionRule::from_fn(space.agent_states(), |x| {
            let shortest = x
                .access()
                .iter()
                .map(|&j| x0.0[j])
                .min()
                .expect("access sets are nonempty");
            let winners: Vec<usize> = x
                .access()
                .iter()
                .copied()
                .filter(|&j| x0.0[j] == shortest)
                .collect();
            let mut mass = vec![0.0; m];
            for &j in &winners {
                mass[j] = 1.0 / winners.len() as f64;
            }
            FiniteDist::from_sorted((0..m).collect(), mass)
        })
    })
}

/// Split uniformly over the accessible queues, ignoring buffer fillings.
pub fn uniform_policy(space: &QueueSpace) -> Result<QueuePolicy> {
    let m = space.actions().len();
    let rule = DecisionRule::from_fn(space.agent_states(), |x| {
        let mut mass = vec![0.0; m];
        let w = 1.0 / x.access().len() as f64;
        for &j in x.access() {
            mass[j] = w;
        }
        FiniteDist::from_sorted((0..m).collect(), mass)
    })?;
    StationaryPolicy::from_fn(space.env_states(), |_| Ok(rule.clone()))
}

/// A deliberately uncoordinated tuple: member i always targets queue
/// i mod 2 (just queue 0 when there is only one), regardless of state.
/// Its per-member behaviour differs sharply from the tuple's average,
/// which splits traffic evenly.
pub fn alternating_tuple(space: &QueueSpace, n: usize) -> Result<QueuePolicyTuple> {
    let m = space.actions().len();
    let members = (0..n)
        .map(|i| {
            let target = if m >= 2 { i % 2 } else { 0 };
            let rule = DecisionRule::from_fn(space.agent_states(), |_| {
                let mut mass = vec![0.0; m];
                mass[target] = 1.0;
                FiniteDist::from_sorted((0..m).collect(), mass)
            })?;
            StationaryPolicy::from_fn(space.env_states(), |_| Ok(rule.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    QueuePolicyTuple::from_members(members)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::queue::{AgentState, EnvState, QueueConfig, QueueModel};

    fn space() -> QueueSpace {
        QueueModel::from_config(QueueConfig::default(), 0.99)
            .unwrap()
            .space()
            .clone()
    }

    #[test]
    fn jsq_targets_the_shorter_queue() {
        let space = space();
        let jsq = jsq_policy(&space).unwrap();
        jsq.validate_on(&space).unwrap();
        let dual = AgentState::new(vec![0, 1]).unwrap();
        let only1 = AgentState::new(vec![1]).unwrap();

        let rule = jsq.rule(&EnvState(vec![2, 5])).unwrap();
        assert_eq!(rule.dist(&dual).unwrap().masses(), &[1.0, 0.0]);
        assert_eq!(rule.dist(&only1).unwrap().masses(), &[0.0, 1.0]);

        let rule = jsq.rule(&EnvState(vec![3, 3])).unwrap();
        assert_eq!(rule.dist(&dual).unwrap().masses(), &[0.5, 0.5]);

        let rule = jsq.rule(&EnvState(vec![5, 0])).unwrap();
        assert_eq!(rule.dist(&dual).unwrap().masses(), &[0.0, 1.0]);
    }

    #[test]
    fn uniform_splits_over_access_sets() {
        let space = space();
        let uni = uniform_policy(&space).unwrap();
        uni.validate_on(&space).unwrap();
        let dual = AgentState::new(vec![0, 1]).unwrap();
        let only0 = AgentState::new(vec![0]).unwrap();
        for (_, rule) in uni.iter() {
            assert_eq!(rule.dist(&dual).unwrap().masses(), &[0.5, 0.5]);
            assert_eq!(rule.dist(&only0).unwrap().masses(), &[1.0, 0.0]);
        }
    }

    #[test]
    fn alternating_members_disagree_but_average_splits() {
        let space = space();
        let tuple = alternating_tuple(&space, 4).unwrap();
        assert_eq!(tuple.len(), 4);
        let dual = AgentState::new(vec![0, 1]).unwrap();
        let x0 = EnvState(vec![0, 0]);
        for (i, member) in tuple.members().iter().enumerate() {
            let d = member.rule(&x0).unwrap().dist(&dual).unwrap();
            let expect = if i % 2 == 0 { [1.0, 0.0] } else { [0.0, 1.0] };
            assert_eq!(d.masses(), &expect);
        }
        let avg = tuple.average().unwrap();
        assert_eq!(avg.rule(&x0).unwrap().dist(&dual).unwrap().masses(), &[0.5, 0.5]);

        // Odd membership tilts the average.
        let tuple3 = alternating_tuple(&space, 3).unwrap();
        let avg3 = tuple3.average().unwrap();
        let masses = avg3.rule(&x0).unwrap().dist(&dual).unwrap().masses();
        assert!((masses[0] - 2.0 / 3.0).abs() < 1e-15);
    }
}
