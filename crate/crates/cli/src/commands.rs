//! One function per subcommand. Every command writes its artifacts plus a
//! manifest into the output directory; nothing written depends on the
//! worker-thread count, so reruns are byte-identical.

use crate::config::Config;
use crate::CliError;
use mfsched::baselines::{alternating_tuple, jsq_policy, uniform_policy};
use mfsched::model::PolicyTuple;
use mfsched::prob::derive_seed;
use mfsched::queue::{AgentState, QueueModel, QueuePolicy};
use mfsched::sim::{concentration_trial, estimate_jn, horizon_for, EpisodeSpec};
use mfsched::solver::{
    evaluate_policy, evaluate_policy_direct, greedy_policy, mf_objective,
    policy_evaluation_direct, q_lipschitz_estimate, value_iteration, DecisionGrid, TabularMdp,
};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Tolerance for the iterative route answered by `evaluate`, and the
/// allowed disagreement between its two routes.
const EVAL_TOL: f64 = 1e-10;
const EVAL_AGREE: f64 = 1e-8;
/// Slack allowed over the Chebyshev tail bound before `concentration`
/// reports failure; the moment bound itself gets none.
const TAIL_SLACK: f64 = 0.01;

pub struct RunCtx {
    pub config: Config,
    pub model: QueueModel,
    pub out: PathBuf,
    pub seed: u64,
}

impl RunCtx {
    pub fn new(config: Config, out: PathBuf, seed: u64) -> Result<Self, CliError> {
        let model = config.build_model()?;
        std::fs::create_dir_all(&out)
            .map_err(|e| CliError::Other(format!("cannot create {}: {e}", out.display())))?;
        Ok(Self {
            config,
            model,
            out,
            seed,
        })
    }

    fn horizon(&self) -> usize {
        horizon_for(
            self.model.gamma(),
            self.model.reward_bound(),
            self.config.simulate.tail_eps,
        )
    }

    fn write(&self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.out.join(name);
        std::fs::write(&path, contents)
            .map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::Other(format!("cannot serialize {name}: {e}")))?;
        text.push('\n');
        self.write(name, &text)
    }

    fn finish(
        &self,
        command: &str,
        params: BTreeMap<String, String>,
    ) -> Result<(), CliError> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            command: &'a str,
            config_hash: String,
            seed: u64,
            version: &'a str,
            params: BTreeMap<String, String>,
        }
        self.write("config_used.toml", &self.config.canonical_toml())?;
        self.write_json(
            "manifest.json",
            &Manifest {
                command,
                config_hash: self.config.hash(),
                seed: self.seed,
                version: env!("CARGO_PKG_VERSION"),
                params,
            },
        )
    }
}

fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Every (label, population size) pair gets its own deterministic seed
/// derived from the base seed.
fn run_seed(base: u64, label: &str, n: usize) -> u64 {
    derive_seed(derive_seed(base, fnv1a64(label)), n as u64)
}

fn sanitize_label(raw: &str) -> String {
    let cleaned: String = raw
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-') {
                c
            } else {
                '-'
            }
        })
        .collect();
    if cleaned.is_empty() {
        "policy".into()
    } else {
        cleaned
    }
}

/// Resolves a `--policy` argument: the builtin names, or a policy file.
fn resolve_policy(ctx: &RunCtx, arg: &str) -> Result<(QueuePolicy, String), CliError> {
    let space = ctx.model.space();
    match arg {
        "jsq" => Ok((
            jsq_policy(space).map_err(|e| CliError::Other(e.to_string()))?,
            "jsq".into(),
        )),
        "uniform" => Ok((
            uniform_policy(space).map_err(|e| CliError::Other(e.to_string()))?,
            "uniform".into(),
        )),
        path => {
            let (policy, num_queues) = mfsched::policy_io::read_policy_file(Path::new(path))
                .map_err(|e| CliError::Config(format!("policy {path}: {e}")))?;
            if num_queues != ctx.model.config().num_queues {
                return Err(CliError::Config(format!(
                    "policy {path} is for {num_queues} queues, the model has {}",
                    ctx.model.config().num_queues
                )));
            }
            policy
                .validate_on(space)
                .map_err(|e| CliError::Config(format!("policy {path}: {e}")))?;
            let stem = Path::new(path)
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("policy");
            Ok((policy, sanitize_label(stem)))
        }
    }
}

fn quoted(field: &str) -> String {
    if field.contains(',') || field.contains('"') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn map_solver_err(e: mfsched::Error) -> CliError {
    match e {
        mfsched::Error::GridTooLarge { .. } | mfsched::Error::InvalidParameter(_) => {
            CliError::Config(e.to_string())
        }
        other => CliError::Other(other.to_string()),
    }
}

pub fn solve(ctx: &RunCtx) -> Result<(), CliError> {
    let grid = DecisionGrid::build(
        ctx.model.space(),
        ctx.config.solve.resolution,
        ctx.config.solve.max_rules,
    )
    .map_err(map_solver_err)?;
    let mdp = TabularMdp::compile(&ctx.model, &grid).map_err(map_solver_err)?;
    let sol = value_iteration(&mdp, ctx.config.solve.tol).map_err(map_solver_err)?;
    let policy = greedy_policy(&ctx.model, &grid, &sol.greedy).map_err(map_solver_err)?;
    let values = policy_evaluation_direct(&mdp, &sol.greedy).map_err(map_solver_err)?;
    let j_star = mf_objective(&ctx.model, &values);
    let lipschitz = q_lipschitz_estimate(&ctx.model, &grid, &sol.q).map_err(map_solver_err)?;

    ctx.write(
        "policy.txt",
        &mfsched::policy_io::policy_to_string(&policy, ctx.model.config().num_queues)
            .map_err(|e| CliError::Other(e.to_string()))?,
    )?;

    let mut csv = String::from("env_state,grid_index,q_value\n");
    for (i, x0) in ctx.model.space().env_states().iter().enumerate() {
        for k in 0..grid.len() {
            let _ = writeln!(csv, "{},{k},{}", quoted(&x0.to_string()), sol.q.get(i, k));
        }
    }
    ctx.write("q_values.csv", &csv)?;

    #[derive(Serialize)]
    struct Summary {
        resolution: u32,
        tol: f64,
        num_env_states: usize,
        num_rules: usize,
        iterations: usize,
        residual: f64,
        threshold: f64,
        j_star: f64,
        q_lipschitz_estimate: f64,
    }
    ctx.write_json(
        "solve_summary.json",
        &Summary {
            resolution: ctx.config.solve.resolution,
            tol: ctx.config.solve.tol,
            num_env_states: ctx.model.num_env_states(),
            num_rules: grid.len(),
            iterations: sol.iterations,
            residual: sol.residual,
            threshold: sol.threshold,
            j_star,
            q_lipschitz_estimate: lipschitz,
        },
    )?;

    ctx.finish(
        "solve",
        BTreeMap::from([
            ("resolution".into(), ctx.config.solve.resolution.to_string()),
            ("tol".into(), ctx.config.solve.tol.to_string()),
        ]),
    )
}

pub fn evaluate(ctx: &RunCtx, policy_arg: &str) -> Result<(), CliError> {
    let (policy, label) = resolve_policy(ctx, policy_arg)?;
    let iterative =
        evaluate_policy(&ctx.model, &policy, EVAL_TOL).map_err(|e| CliError::Other(e.to_string()))?;
    let direct =
        evaluate_policy_direct(&ctx.model, &policy).map_err(|e| CliError::Other(e.to_string()))?;
    let disagreement = iterative
        .iter()
        .zip(&direct)
        .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));

    #[derive(Serialize)]
    struct StateValue {
        env_state: String,
        value: f64,
    }
    #[derive(Serialize)]
    struct Evaluation {
        policy: String,
        mf_objective: f64,
        max_route_disagreement: f64,
        values: Vec<StateValue>,
    }
    ctx.write_json(
        "evaluate.json",
        &Evaluation {
            policy: label.clone(),
            mf_objective: mf_objective(&ctx.model, &direct),
            max_route_disagreement: disagreement,
            values: ctx
                .model
                .space()
                .env_states()
                .iter()
                .zip(&direct)
                .map(|(x0, &v)| StateValue {
                    env_state: x0.to_string(),
                    value: v,
                })
                .collect(),
        },
    )?;
    ctx.finish("evaluate", BTreeMap::from([("policy".into(), label)]))?;

    if disagreement > EVAL_AGREE {
        return Err(CliError::Assertion(format!(
            "iterative and direct evaluation disagree by {disagreement}"
        )));
    }
    Ok(())
}

const SIM_HEADER: &str =
    "policy_label,n_agents,episodes,mean_return,std_error,mean_drops_per_step,horizon,seed\n";

fn sim_rows(
    ctx: &RunCtx,
    policy: &QueuePolicy,
    label: &str,
    n_list: &[usize],
    episodes: usize,
    csv: &mut String,
    extra: impl Fn(usize) -> String,
) -> Result<(), CliError> {
    for &n in n_list {
        let tuple =
            PolicyTuple::lift(policy.clone(), n).map_err(|e| CliError::Config(e.to_string()))?;
        let spec = EpisodeSpec {
            n_agents: n,
            episodes,
            horizon: ctx.horizon(),
            seed: run_seed(ctx.seed, label, n),
        };
        let rep = estimate_jn(&ctx.model, &tuple, &spec)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let _ = writeln!(
            csv,
            "{label},{n},{},{},{},{},{},{}{}",
            rep.episodes,
            rep.mean_return,
            rep.std_error,
            rep.mean_drops_per_step,
            rep.horizon,
            rep.seed,
            extra(n)
        );
    }
    Ok(())
}

pub fn simulate(
    ctx: &RunCtx,
    policy_arg: &str,
    n_agents: Option<Vec<usize>>,
    episodes: Option<usize>,
    label: Option<String>,
) -> Result<(), CliError> {
    let (policy, default_label) = resolve_policy(ctx, policy_arg)?;
    let label = label.map_or(default_label, |l| sanitize_label(&l));
    let n_list = n_agents.unwrap_or_else(|| ctx.config.simulate.n_agents.clone());
    let episodes = episodes.unwrap_or(ctx.config.simulate.episodes);

    let mut csv = String::from(SIM_HEADER);
    sim_rows(ctx, &policy, &label, &n_list, episodes, &mut csv, |_| String::new())?;
    ctx.write("simulate.csv", &csv)?;

    ctx.finish(
        "simulate",
        BTreeMap::from([
            ("policy".into(), label),
            ("n_agents".into(), join_usize(&n_list)),
            ("episodes".into(), episodes.to_string()),
        ]),
    )
}

pub fn converge(
    ctx: &RunCtx,
    policies: Vec<String>,
    n_agents: Option<Vec<usize>>,
    episodes: Option<usize>,
) -> Result<(), CliError> {
    let policy_args = if policies.is_empty() {
        vec!["jsq".to_string()]
    } else {
        policies
    };
    let n_list = n_agents.unwrap_or_else(|| ctx.config.simulate.n_agents.clone());
    let episodes = episodes.unwrap_or(ctx.config.simulate.episodes);

    let mut csv = String::from(
        "policy_label,n_agents,episodes,mean_return,std_error,mean_drops_per_step,horizon,seed,mf_objective\n",
    );
    let mut labels = Vec::new();
    for arg in &policy_args {
        let (policy, label) = resolve_policy(ctx, arg)?;
        let values = evaluate_policy_direct(&ctx.model, &policy)
            .map_err(|e| CliError::Other(e.to_string()))?;
        let j = mf_objective(&ctx.model, &values);
        sim_rows(ctx, &policy, &label, &n_list, episodes, &mut csv, |_| {
            format!(",{j}")
        })?;
        labels.push(label);
    }
    ctx.write("converge.csv", &csv)?;

    ctx.finish(
        "converge",
        BTreeMap::from([
            ("policies".into(), labels.join(",")),
            ("n_agents".into(), join_usize(&n_list)),
            ("episodes".into(), episodes.to_string()),
        ]),
    )
}

pub fn concentration(
    ctx: &RunCtx,
    n_agents: Option<Vec<usize>>,
    trials: Option<usize>,
) -> Result<(), CliError> {
    let n_list = n_agents.unwrap_or_else(|| ctx.config.simulate.n_agents.clone());
    let trials = trials.unwrap_or(ctx.config.simulate.trials);
    let eps_list = ctx.config.simulate.concentration_eps.clone();
    let space = ctx.model.space();
    // The measurement rule splits uniformly over each access set; any fixed
    // rule gives the same bound, this one exercises every cell.
    let rule = uniform_policy(space)
        .map_err(|e| CliError::Other(e.to_string()))?
        .rule(&space.env_states()[0])
        .expect("uniform policy covers every state")
        .clone();

    let mut csv = String::from("n_agents,trials,mean_sq_l1,mean_sq_bound,seed\n");
    let mut tails_csv = String::from("n_agents,eps,freq,chebyshev_bound\n");
    let mut violation: Option<String> = None;
    for &n in &n_list {
        let seed = run_seed(ctx.seed, "concentration", n);
        let report = concentration_trial(space, &rule, n, trials, &eps_list, seed)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let _ = writeln!(
            csv,
            "{n},{},{},{},{seed}",
            report.trials, report.mean_sq_l1, report.mean_sq_bound
        );
        if report.mean_sq_l1 > report.mean_sq_bound {
            violation = Some(format!(
                "mean squared deviation {} exceeds the bound {} at N = {n}",
                report.mean_sq_l1, report.mean_sq_bound
            ));
        }
        for tail in &report.tails {
            let _ = writeln!(tails_csv, "{n},{},{},{}", tail.eps, tail.freq, tail.bound);
            if tail.freq > tail.bound + TAIL_SLACK {
                violation = Some(format!(
                    "tail frequency {} exceeds Chebyshev bound {} (+{TAIL_SLACK}) at N = {n}, eps = {}",
                    tail.freq, tail.bound, tail.eps
                ));
            }
        }
    }
    ctx.write("concentration.csv", &csv)?;
    ctx.write("concentration_tails.csv", &tails_csv)?;
    ctx.finish(
        "concentration",
        BTreeMap::from([
            ("n_agents".into(), join_usize(&n_list)),
            ("trials".into(), trials.to_string()),
        ]),
    )?;
    match violation {
        Some(msg) => Err(CliError::Assertion(msg)),
        None => Ok(()),
    }
}

pub fn heatmap(ctx: &RunCtx, policy_arg: &str) -> Result<(), CliError> {
    if ctx.model.config().num_queues != 2 {
        return Err(CliError::Config(
            "heatmap requires exactly two queues".into(),
        ));
    }
    let (policy, label) = resolve_policy(ctx, policy_arg)?;
    let dual = AgentState::new(vec![0, 1]).expect("two queues have a dual-access state");

    let mut csv = String::from("b0,b1,prob_queue0_for_dual_access_agents\n");
    for x0 in ctx.model.space().env_states() {
        let w = policy
            .rule(x0)
            .expect("validated policy covers every state")
            .dist(&dual)
            .expect("validated rule covers every access set")
            .masses()[0];
        let _ = writeln!(csv, "{},{},{w}", x0.0[0], x0.0[1]);
    }
    ctx.write("heatmap.csv", &csv)?;
    ctx.finish("heatmap", BTreeMap::from([("policy".into(), label)]))
}

pub fn averaging(
    ctx: &RunCtx,
    n_agents: Option<Vec<usize>>,
    episodes: Option<usize>,
) -> Result<(), CliError> {
    let n_list = n_agents.unwrap_or_else(|| ctx.config.simulate.n_agents.clone());
    let episodes = episodes.unwrap_or(ctx.config.simulate.episodes);
    let space = ctx.model.space();

    let mut csv = String::from(
        "n_agents,episodes,tuple_mean,tuple_se,avg_mean,avg_se,gap,combined_se,horizon,seed\n",
    );
    for &n in &n_list {
        let tuple =
            alternating_tuple(space, n).map_err(|e| CliError::Config(e.to_string()))?;
        let average = tuple.average().map_err(|e| CliError::Other(e.to_string()))?;
        let lifted =
            PolicyTuple::lift(average, n).map_err(|e| CliError::Other(e.to_string()))?;
        let seed = run_seed(ctx.seed, "averaging-tuple", n);
        let spec = EpisodeSpec {
            n_agents: n,
            episodes,
            horizon: ctx.horizon(),
            seed,
        };
        let a = estimate_jn(&ctx.model, &tuple, &spec)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let b_spec = EpisodeSpec {
            seed: run_seed(ctx.seed, "averaging-average", n),
            ..spec
        };
        let b = estimate_jn(&ctx.model, &lifted, &b_spec)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let gap = (a.mean_return - b.mean_return).abs();
        let combined = (a.std_error * a.std_error + b.std_error * b.std_error).sqrt();
        let _ = writeln!(
            csv,
            "{n},{episodes},{},{},{},{},{gap},{combined},{},{seed}",
            a.mean_return, a.std_error, b.mean_return, b.std_error, a.horizon
        );
    }
    ctx.write("averaging.csv", &csv)?;
    ctx.finish(
        "averaging",
        BTreeMap::from([
            ("n_agents".into(), join_usize(&n_list)),
            ("episodes".into(), episodes.to_string()),
        ]),
    )
}

fn join_usize(ns: &[usize]) -> String {
    ns.iter()
        .map(|n| n.to_string())
        .collect::<Vec<_>>()
        .join(",")
}
