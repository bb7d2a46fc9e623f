//! Fusion planning: a greedy APM rollout first, then one independent
//! episode per pool configuration that picks the APM's preferred action
//! among unconsumed pool members and regenerates the pool once its
//! selection budget is spent.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::apm::{Apm, EncoderInput};
use crate::decomposer::{make_pool, CandidatePool, IndexSolver, MultiScalePool};
use crate::effectmem::{EffectExtractor, FeatureMemory};
use crate::error::Result;
use crate::taskgen::{check_success, text_hash, TaskConstraint};
use crate::world::{GroundedAction, SceneGraph, Status, World};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub max_step: usize,
    pub family: MultiScalePool,
    pub regenerate: bool,
    /// Run the unrestricted rollout before any pool episode.
    pub use_apm_direct: bool,
    /// Also run the unrestricted rollout as a strand beside the pool
    /// episodes. Rollouts are deterministic, so this only matters when
    /// `use_apm_direct` is off.
    pub apm_strand: bool,
    /// Skip failed actions instead of ending the episode.
    pub lenient: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            max_step: 60,
            family: MultiScalePool::default(),
            regenerate: true,
            use_apm_direct: true,
            apm_strand: false,
            lenient: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpisodeStatus {
    Running,
    Success,
    FailedError,
    FailedBudget,
    /// Pool spent with regeneration disabled.
    FailedExhausted,
}

/// Which strand produced a plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strand {
    Apm,
    Pool(usize, usize),
}

impl fmt::Display for Strand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strand::Apm => write!(f, "apm"),
            Strand::Pool(k, s) => write!(f, "pool({k},{s})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub action: GroundedAction,
    pub outcome: Status,
    /// Hash of the available pool members at selection time.
    pub pool_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub strand: Strand,
    pub status: EpisodeStatus,
    /// Executed actions; a terminating failed action is included last.
    pub plan: Vec<GroundedAction>,
    pub steps: usize,
    pub trace: Vec<TraceRecord>,
    /// Every pool this episode used, in order.
    pub pools: Vec<CandidatePool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanResult {
    pub success: bool,
    pub plan: Vec<GroundedAction>,
    pub provenance: Option<Strand>,
    pub episodes: Vec<Episode>,
}

/// Frozen models shared by all episodes.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub apm: &'a Apm,
    pub extractor: &'a EffectExtractor,
    pub memory: &'a FeatureMemory,
    pub solver: &'a IndexSolver,
}

pub struct Task<'a> {
    pub start: &'a SceneGraph,
    pub goal: &'a SceneGraph,
    pub constraints: &'a [TaskConstraint],
}

fn pool_hash(actions: &[GroundedAction]) -> String {
    let text: Vec<String> = actions.iter().map(|a| a.to_string()).collect();
    text_hash(&text.join("\n"))[..16].to_string()
}

fn build_pool(
    models: &Models<'_>,
    state: &EncoderInput,
    goal: &EncoderInput,
    pair: (usize, usize),
) -> Result<CandidatePool> {
    let a_task = models.extractor.feature(state, goal)?;
    let weights = models.solver.solve(&a_task)?;
    make_pool(&weights, &models.memory.actions, pair.0, pair.1)
}

/// Runs one strand from `task.start` until success, failure, or budget.
pub fn run_episode(
    world: &World,
    task: &Task<'_>,
    models: &Models<'_>,
    strand: Strand,
    cfg: &PlannerConfig,
) -> Result<Episode> {
    let goal = EncoderInput::new(task.goal);
    let mut state = task.start.clone();
    let mut ep = Episode {
        strand,
        status: EpisodeStatus::Running,
        plan: Vec::new(),
        steps: 0,
        trace: Vec::new(),
        pools: Vec::new(),
    };
    if check_success(world, &state, task.constraints) {
        ep.status = EpisodeStatus::Success;
        return Ok(ep);
    }
    let mut pool: Option<CandidatePool> = None;
    // Failed picks in lenient mode; excluded for the current pool only.
    let mut skipped: BTreeSet<GroundedAction> = BTreeSet::new();
    while ep.steps < cfg.max_step {
        let here = EncoderInput::new(&state);
        let (action, hash) = match strand {
            Strand::Apm => {
                let dist = models.apm.predict_inputs(&here, &goal)?;
                (
                    dist.assemble(world, None).expect("unrestricted assembly"),
                    None,
                )
            }
            Strand::Pool(k, s) => {
                let mut available: Vec<GroundedAction> = pool
                    .as_ref()
                    .map(|p| {
                        p.available()
                            .into_iter()
                            .filter(|a| !skipped.contains(a))
                            .collect()
                    })
                    .unwrap_or_default();
                let spent = pool.as_ref().is_none_or(|p| p.spent());
                if spent || available.is_empty() {
                    if pool.is_some() && !cfg.regenerate {
                        ep.status = EpisodeStatus::FailedExhausted;
                        break;
                    }
                    let p = build_pool(models, &here, &goal, (k, s))?;
                    ep.pools.push(p.clone());
                    available = p.available();
                    pool = Some(p);
                    skipped.clear();
                }
                if available.is_empty() {
                    ep.status = EpisodeStatus::FailedExhausted;
                    break;
                }
                let dist = models.apm.predict_inputs(&here, &goal)?;
                let a = dist
                    .assemble(world, Some(&available))
                    .expect("nonempty restriction");
                (a, Some(pool_hash(&available)))
            }
        };
        ep.steps += 1;
        let out = world.step(&state, &action);
        ep.trace.push(TraceRecord {
            step: ep.steps,
            action,
            outcome: out.status,
            pool_hash: hash,
        });
        if out.status == Status::Success {
            state = out.next_state;
            ep.plan.push(action);
            if let Some(p) = pool.as_mut() {
                p.consume(action);
                if let Some(last) = ep.pools.last_mut() {
                    last.consumed = p.consumed.clone();
                }
            }
            if check_success(world, &state, task.constraints) {
                ep.status = EpisodeStatus::Success;
                break;
            }
        } else if cfg.lenient && matches!(strand, Strand::Pool(..)) {
            skipped.insert(action);
        } else {
            ep.plan.push(action);
            ep.status = EpisodeStatus::FailedError;
            break;
        }
    }
    if ep.status == EpisodeStatus::Running {
        ep.status = EpisodeStatus::FailedBudget;
    }
    Ok(ep)
}

/// Greedy unrestricted rollout.
pub fn plan_with_apm(
    world: &World,
    task: &Task<'_>,
    models: &Models<'_>,
    cfg: &PlannerConfig,
) -> Result<(bool, Vec<GroundedAction>)> {
    let ep = run_episode(world, task, models, Strand::Apm, cfg)?;
    Ok((ep.status == EpisodeStatus::Success, ep.plan))
}

/// Full fusion. Episodes are independent and run in family order; the
/// first successful one in that order wins.
pub fn plan_m3(
    world: &World,
    task: &Task<'_>,
    models: &Models<'_>,
    cfg: &PlannerConfig,
) -> Result<PlanResult> {
    let mut episodes = Vec::new();
    if cfg.use_apm_direct {
        let ep = run_episode(world, task, models, Strand::Apm, cfg)?;
        if ep.status == EpisodeStatus::Success {
            return Ok(PlanResult {
                success: true,
                plan: ep.plan.clone(),
                provenance: Some(Strand::Apm),
                episodes: vec![ep],
            });
        }
        episodes.push(ep);
    }
    let mut strands: Vec<Strand> = cfg
        .family
        .0
        .iter()
        .map(|&(k, s)| Strand::Pool(k, s))
        .collect();
    if cfg.apm_strand {
        strands.push(Strand::Apm);
    }
    let mut winner = None;
    for strand in strands {
        let ep = run_episode(world, task, models, strand, cfg)?;
        if winner.is_none() && ep.status == EpisodeStatus::Success {
            winner = Some(episodes.len());
        }
        episodes.push(ep);
    }
    Ok(match winner {
        Some(i) => PlanResult {
            success: true,
            plan: episodes[i].plan.clone(),
            provenance: Some(episodes[i].strand),
            episodes,
        },
        None => PlanResult {
            success: false,
            plan: Vec::new(),
            provenance: None,
            episodes,
        },
    })
}

pub use crate::taskgen::replay;

pub const TRACE_HEADER: &str = "m3-trace v1";

/// Tab-separated trace of every episode of one task.
pub fn trace_text(task_id: usize, result: &PlanResult) -> String {
    let mut s = format!("{TRACE_HEADER}\ntask\t{task_id}\n");
    for (i, ep) in result.episodes.iter().enumerate() {
        s.push_str(&format!("episode\t{i}\t{}\t{:?}\n", ep.strand, ep.status));
        for r in &ep.trace {
            s.push_str(&format!(
                "step\t{i}\t{}\t{}\t{}\t{}\n",
                r.step,
                r.action,
                r.outcome.as_str(),
                r.pool_hash.as_deref().unwrap_or("-")
            ));
        }
    }
    s
}
