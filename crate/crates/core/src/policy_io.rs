//! Plain-text serialization of stationary policies.
//!
//! The format is line oriented and versioned:
//!
//! ```text
//! format: mfsched-policy/1
//! queues: 2
//!
//! env [0,0]:
//!   [0]: 1 0
//!   [0,1]: 0.55 0.45
//!   [1]: 0 1
//! ```
//!
//! Every `env` section holds one decision rule; each indented row maps an
//! access set to a dense action distribution over the queues. Masses are
//! written with Rust's shortest round-trip float formatting, so a parse
//! followed by a write reproduces the file byte for byte.

use crate::error::Error;
use crate::model::{DecisionRule, StationaryPolicy};
use crate::prob::FiniteDist;
use crate::queue::{AgentState, EnvState, QueuePolicy};
use crate::Result;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

pub const FORMAT_HEADER: &str = "format: mfsched-policy/1";

/// Renders a policy in the canonical order (environment states ascending,
/// agent states ascending within each section).
pub fn policy_to_string(policy: &QueuePolicy, num_queues: usize) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(out, "{FORMAT_HEADER}");
    let _ = writeln!(out, "queues: {num_queues}");
    for (x0, rule) in policy.iter() {
        let _ = writeln!(out);
        let _ = writeln!(out, "env {x0}:");
        for (x, dist) in rule.iter() {
            if dist.support() != (0..num_queues).collect::<Vec<_>>().as_slice() {
                return Err(Error::SpaceMismatch {
                    what: "policy serialization",
                    detail: format!(
                        "rule at {x0}/{x} is not dense over {num_queues} queues"
                    ),
                });
            }
            let _ = write!(out, "  {x}:");
            for m in dist.masses() {
                let _ = write!(out, " {m}");
            }
            let _ = writeln!(out);
        }
    }
    Ok(out)
}

pub fn parse_policy(text: &str) -> Result<(QueuePolicy, usize)> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end()))
        .filter(|(_, l)| !l.trim().is_empty());

    let (line, header) = lines.next().ok_or(Error::PolicyFormat {
        line: 1,
        msg: "empty policy file".into(),
    })?;
    if header != FORMAT_HEADER {
        return Err(Error::PolicyFormat {
            line,
            msg: format!("expected {FORMAT_HEADER:?}, found {header:?}"),
        });
    }

    let (line, queues_line) = lines.next().ok_or(Error::PolicyFormat {
        line: line + 1,
        msg: "missing queues line".into(),
    })?;
    let num_queues: usize = queues_line
        .strip_prefix("queues: ")
        .and_then(|v| v.parse().ok())
        .filter(|&m| m >= 1)
        .ok_or(Error::PolicyFormat {
            line,
            msg: format!("expected \"queues: <positive count>\", found {queues_line:?}"),
        })?;

    let mut sections: BTreeMap<EnvState, BTreeMap<AgentState, FiniteDist<usize>>> =
        BTreeMap::new();
    let mut current: Option<EnvState> = None;
    for (line, raw) in lines {
        if let Some(rest) = raw.strip_prefix("env ") {
            let state_text = rest.strip_suffix(':').ok_or(Error::PolicyFormat {
                line,
                msg: "environment header must end with ':'".into(),
            })?;
            let x0: EnvState = state_text.trim().parse().map_err(|e| Error::PolicyFormat {
                line,
                msg: format!("{e}"),
            })?;
            if sections.contains_key(&x0) {
                return Err(Error::PolicyFormat {
                    line,
                    msg: format!("duplicate section for {x0}"),
                });
            }
            sections.insert(x0.clone(), BTreeMap::new());
            current = Some(x0);
        } else if raw.starts_with(' ') || raw.starts_with('\t') {
            let x0 = current.clone().ok_or(Error::PolicyFormat {
                line,
                msg: "distribution row before any env section".into(),
            })?;
            let body = raw.trim();
            let (state_text, masses_text) =
                body.split_once(':').ok_or(Error::PolicyFormat {
                    line,
                    msg: "row must look like \"[access]: m0 m1 ...\"".into(),
                })?;
            let x: AgentState = state_text.trim().parse().map_err(|e| Error::PolicyFormat {
                line,
                msg: format!("{e}"),
            })?;
            let mass: Vec<f64> = masses_text
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| Error::PolicyFormat {
                        line,
                        msg: format!("bad mass {tok:?}"),
                    })
                })
                .collect::<Result<_>>()?;
            if mass.len() != num_queues {
                return Err(Error::PolicyFormat {
                    line,
                    msg: format!(
                        "expected {num_queues} masses, found {}",
                        mass.len()
                    ),
                });
            }
            let dist = FiniteDist::from_sorted((0..num_queues).collect(), mass).map_err(|e| {
                Error::PolicyFormat {
                    line,
                    msg: format!("{e}"),
                }
            })?;
            let section = sections.get_mut(&x0).expect("current section exists");
            if section.insert(x, dist).is_some() {
                return Err(Error::PolicyFormat {
                    line,
                    msg: "duplicate access-set row in this section".into(),
                });
            }
        } else {
            return Err(Error::PolicyFormat {
                line,
                msg: format!("unrecognized line {raw:?}"),
            });
        }
    }

    if sections.is_empty() {
        return Err(Error::PolicyFormat {
            line: 0,
            msg: "policy has no env sections".into(),
        });
    }
    let mut table = BTreeMap::new();
    for (x0, rows) in sections {
        if rows.is_empty() {
            return Err(Error::PolicyFormat {
                line: 0,
                msg: format!("section {x0} has no rows"),
            });
        }
        table.insert(x0, DecisionRule::new(rows)?);
    }
    Ok((StationaryPolicy::new(table)?, num_queues))
}

pub fn write_policy_file(path: &Path, policy: &QueuePolicy, num_queues: usize) -> Result<()> {
    std::fs::write(path, policy_to_string(policy, num_queues)?)?;
    Ok(())
}

pub fn read_policy_file(path: &Path) -> Result<(QueuePolicy, usize)> {
    parse_policy(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::jsq_policy;
    use crate::prob::RngStream;
    use crate::queue::{QueueConfig, QueueModel};

    fn space() -> crate::queue::QueueSpace {
        QueueModel::from_config(QueueConfig::default(), 0.99)
            .unwrap()
            .space()
            .clone()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let space = space();
        let jsq = jsq_policy(&space).unwrap();
        let text = policy_to_string(&jsq, 2).unwrap();
        let (parsed, m) = parse_policy(&text).unwrap();
        assert_eq!(m, 2);
        assert_eq!(parsed, jsq);
        let text2 = policy_to_string(&parsed, 2).unwrap();
        assert_eq!(text, text2, "serialization must be a fixed point");
    }

    #[test]
    fn round_trip_preserves_messy_masses_bit_for_bit() {
        let space = space();
        let mut rng = RngStream::new(3, 0);
        let policy = StationaryPolicy::from_fn(space.env_states(), |_| {
            DecisionRule::from_fn(space.agent_states(), |x| {
                if x.access().len() == 1 {
                    let mut mass = vec![0.0; 2];
                    mass[x.access()[0]] = 1.0;
                    FiniteDist::from_sorted(vec![0usize, 1], mass)
                } else {
                    let a = rng.next_f64();
                    FiniteDist::from_sorted(vec![0usize, 1], vec![a, 1.0 - a])
                }
            })
        })
        .unwrap();
        let text = policy_to_string(&policy, 2).unwrap();
        let (parsed, _) = parse_policy(&text).unwrap();
        for ((_, rule_a), (_, rule_b)) in policy.iter().zip(parsed.iter()) {
            for ((_, da), (_, db)) in rule_a.iter().zip(rule_b.iter()) {
                for (a, b) in da.masses().iter().zip(db.masses()) {
                    assert_eq!(a.to_bits(), b.to_bits(), "masses must survive unchanged");
                }
            }
        }
        assert_eq!(text, policy_to_string(&parsed, 2).unwrap());
    }

    #[test]
    fn parsed_policy_validates_on_its_space() {
        let space = space();
        let jsq = jsq_policy(&space).unwrap();
        let (parsed, _) = parse_policy(&policy_to_string(&jsq, 2).unwrap()).unwrap();
        parsed.validate_on(&space).unwrap();
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let cases: &[(&str, usize)] = &[
            ("bogus\n", 1),
            ("format: mfsched-policy/1\nqueues: zero\n", 2),
            (
                "format: mfsched-policy/1\nqueues: 2\n  [0]: 1 0\n",
                3, // row before any env section
            ),
            (
                "format: mfsched-policy/1\nqueues: 2\nenv [0,0]:\n  [0]: 1\n",
                4, // wrong mass count
            ),
            (
                "format: mfsched-policy/1\nqueues: 2\nenv [0,0]:\n  [0]: one zero\n",
                4,
            ),
            (
                "format: mfsched-policy/1\nqueues: 2\nenv [0,0]:\n  [0]: 1 0\n  [0]: 1 0\n",
                5, // duplicate row
            ),
            (
                "format: mfsched-policy/1\nqueues: 2\nenv [0,0]:\n  [0]: 0.9 0.2\n",
                4, // masses far from a distribution
            ),
        ];
        for (text, expect_line) in cases {
            match parse_policy(text) {
                Err(Error::PolicyFormat { line, msg }) => {
                    assert_eq!(
                        line, *expect_line,
                        "wrong line for {text:?} (message: {msg})"
                    );
                }
                other => panic!("expected a format error for {text:?}, got {other:?}"),
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let space = space();
        let jsq = jsq_policy(&space).unwrap();
        let dir = std::env::temp_dir().join("mfsched-policy-io-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("policy.txt");
        write_policy_file(&path, &jsq, 2).unwrap();
        let (parsed, m) = read_policy_file(&path).unwrap();
        assert_eq!((parsed, m), (jsq, 2));
        std::fs::remove_dir_all(&dir).ok();
    }
}
