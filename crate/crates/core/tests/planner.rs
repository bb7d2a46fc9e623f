use m3_core::apm::Apm;
use m3_core::decomposer::{memory_matrix, IndexSolver, MultiScalePool};
use m3_core::effectmem::{EffectExtractor, FeatureMemory};
use m3_core::planner::{
    plan_m3, plan_with_apm, replay, run_episode, trace_text, EpisodeStatus, Models, PlannerConfig,
    Strand, Task, TRACE_HEADER,
};
use m3_core::taskgen::{check_success, make_constraints, TaskConstraint};
use m3_core::world::{GroundedAction, SceneGraph, Status, World};

const D_UP: usize = 16;

fn act(s: &str) -> GroundedAction {
    s.parse().unwrap()
}

fn acts(list: &[&str]) -> Vec<GroundedAction> {
    list.iter().map(|s| act(s)).collect()
}

fn run(world: &World, list: &[&str]) -> SceneGraph {
    let mut s = world.initial_state();
    for a in acts(list) {
        let out = world.step(&s, &a);
        assert_eq!(out.status, Status::Success, "{a}");
        s = out.next_state;
    }
    s
}

/// Untrained networks over a hand-written memory. With the pool size equal
/// to the memory size every pool holds exactly the memory's actions.
struct Fixture {
    apm: Apm,
    ex: EffectExtractor,
    mem: FeatureMemory,
    solver: IndexSolver,
}

fn fixture(world: &World, memory: &[&str]) -> Fixture {
    let mut actions = acts(memory);
    actions.sort();
    let rows: Vec<Vec<f64>> = (0..actions.len())
        .map(|i| {
            (0..D_UP)
                .map(|c| if c % actions.len() == i { 1.0 } else { 0.1 })
                .collect()
        })
        .collect();
    let mem = FeatureMemory {
        d_up: D_UP,
        train_hash: String::new(),
        counts: vec![1; actions.len()],
        actions,
        rows,
    };
    let solver = IndexSolver::unreduced(&memory_matrix(&mem));
    Fixture {
        apm: Apm::init(world, 16, 0),
        ex: EffectExtractor::init(world, 16, D_UP, 0),
        mem,
        solver,
    }
}

impl Fixture {
    fn models(&self) -> Models<'_> {
        Models {
            apm: &self.apm,
            extractor: &self.ex,
            memory: &self.mem,
            solver: &self.solver,
        }
    }
}

fn pools_only(family: &[(usize, usize)]) -> PlannerConfig {
    PlannerConfig {
        family: MultiScalePool(family.to_vec()),
        use_apm_direct: false,
        ..PlannerConfig::default()
    }
}

#[test]
fn satisfied_start_needs_no_actions() {
    let world = World::desk();
    let f = fixture(&world, &["moveTo <table>"]);
    let s = run(&world, &["moveTo <table>"]);
    let c = make_constraints(&world, &acts(&["moveTo <table>"]));
    let task = Task {
        start: &s,
        goal: &s,
        constraints: &c,
    };
    let res = plan_m3(&world, &task, &f.models(), &PlannerConfig::default()).unwrap();
    assert!(res.success);
    assert!(res.plan.is_empty());
    assert_eq!(res.provenance, Some(Strand::Apm));
    assert_eq!(res.episodes[0].steps, 0);
}

#[test]
fn an_invalid_only_pool_fails_after_one_action() {
    let world = World::desk();
    let f = fixture(&world, &["drop <apple>"]);
    let start = world.initial_state();
    let goal = run(&world, &["moveTo <table>", "pick <apple>"]);
    let c = make_constraints(&world, &acts(&["moveTo <table>", "pick <apple>"]));
    let task = Task {
        start: &start,
        goal: &goal,
        constraints: &c,
    };
    let ep = run_episode(
        &world,
        &task,
        &f.models(),
        Strand::Pool(1, 1),
        &pools_only(&[(1, 1)]),
    )
    .unwrap();
    assert_eq!(ep.status, EpisodeStatus::FailedError);
    assert_eq!(ep.plan, acts(&["drop <apple>"]));
    assert_eq!(ep.steps, 1);
    assert_eq!(ep.trace[0].outcome, Status::PreconditionFailed);
    assert!(ep.trace[0].pool_hash.is_some());
}

fn grab_apple_task(world: &World) -> (SceneGraph, SceneGraph, Vec<TaskConstraint>) {
    let gt = acts(&["moveTo <table>", "pick <apple>"]);
    (
        world.initial_state(),
        run(world, &["moveTo <table>", "pick <apple>"]),
        make_constraints(world, &gt),
    )
}

#[test]
fn lenient_episodes_stop_at_the_step_budget() {
    let world = World::desk();
    let f = fixture(&world, &["moveTo <table>", "moveTo <shelf>"]);
    let (start, goal, c) = grab_apple_task(&world);
    let task = Task {
        start: &start,
        goal: &goal,
        constraints: &c,
    };
    let cfg = PlannerConfig {
        max_step: 9,
        lenient: true,
        ..pools_only(&[(2, 1)])
    };
    let ep = run_episode(&world, &task, &f.models(), Strand::Pool(2, 1), &cfg).unwrap();
    assert_eq!(ep.status, EpisodeStatus::FailedBudget);
    assert_eq!(ep.steps, 9);
    assert_eq!(ep.trace.len(), 9);
    // Failures spend steps but are left out of the plan.
    let ok = ep
        .trace
        .iter()
        .filter(|r| r.outcome == Status::Success)
        .count();
    assert_eq!(ep.plan.len(), ok);
    assert!(ep.plan.iter().all(|a| a.name.as_str() == "moveTo"));
    // One selection per pool: a new pool after every executed action.
    assert!(ep.pools.len() >= ok && ok > 0);
    for p in &ep.pools {
        assert!(p.consumed.len() <= p.select_count);
    }
}

#[test]
fn spent_pools_end_the_episode_without_regeneration() {
    let world = World::desk();
    let f = fixture(&world, &["moveTo <table>", "moveTo <shelf>"]);
    let (start, goal, c) = grab_apple_task(&world);
    let task = Task {
        start: &start,
        goal: &goal,
        constraints: &c,
    };
    let cfg = PlannerConfig {
        regenerate: false,
        ..pools_only(&[(2, 2)])
    };
    let ep = run_episode(&world, &task, &f.models(), Strand::Pool(2, 2), &cfg).unwrap();
    assert_eq!(ep.status, EpisodeStatus::FailedExhausted);
    assert_eq!(ep.plan.len(), 2);
    assert_eq!(ep.pools.len(), 1);
    assert_eq!(ep.pools[0].consumed.len(), 2);
    let mut used = ep.plan.clone();
    used.sort();
    assert_eq!(used, f.mem.actions);
}

#[test]
fn pool_strand_reaches_the_goal_and_replays() {
    let world = World::desk();
    let f = fixture(&world, &["moveTo <table>", "pick <apple>"]);
    let (start, goal, c) = grab_apple_task(&world);
    let task = Task {
        start: &start,
        goal: &goal,
        constraints: &c,
    };
    let cfg = PlannerConfig {
        lenient: true,
        ..pools_only(&[(2, 2)])
    };
    let res = plan_m3(&world, &task, &f.models(), &cfg).unwrap();
    assert!(res.success);
    assert_eq!(res.provenance, Some(Strand::Pool(2, 2)));
    assert_eq!(res.plan, acts(&["moveTo <table>", "pick <apple>"]));
    assert!(replay(&world, &start, &res.plan, &c));
    let ep = &res.episodes[0];
    assert!(ep.steps >= 2 && ep.steps <= cfg.max_step);

    let text = trace_text(7, &res);
    assert!(text.starts_with(TRACE_HEADER));
    assert!(text.contains("task\t7"));
    assert_eq!(
        text.lines().filter(|l| l.starts_with("step\t")).count(),
        ep.trace.len()
    );
}

#[test]
fn empty_family_is_the_plain_rollout() {
    let world = World::desk();
    let f = fixture(&world, &["moveTo <table>", "pick <apple>"]);
    let (start, goal, c) = grab_apple_task(&world);
    let task = Task {
        start: &start,
        goal: &goal,
        constraints: &c,
    };
    let cfg = PlannerConfig {
        family: MultiScalePool(vec![]),
        ..PlannerConfig::default()
    };
    let res = plan_m3(&world, &task, &f.models(), &cfg).unwrap();
    let (ok, plan) = plan_with_apm(&world, &task, &f.models(), &cfg).unwrap();
    assert_eq!(res.success, ok);
    assert_eq!(res.episodes.len(), 1);
    assert_eq!(res.episodes[0].plan, plan);
    assert_eq!(res.episodes[0].strand, Strand::Apm);
}

#[test]
fn fusion_runs_every_strand_in_order_and_is_deterministic() {
    let world = World::desk();
    let f = fixture(
        &world,
        &[
            "moveTo <table>",
            "moveTo <shelf>",
            "pick <apple>",
            "drop <apple>",
        ],
    );
    let (start, goal, c) = grab_apple_task(&world);
    let task = Task {
        start: &start,
        goal: &goal,
        constraints: &c,
    };
    let cfg = PlannerConfig {
        family: MultiScalePool(vec![(4, 1), (4, 2), (4, 4)]),
        apm_strand: true,
        ..PlannerConfig::default()
    };
    let a = plan_m3(&world, &task, &f.models(), &cfg).unwrap();
    let b = plan_m3(&world, &task, &f.models(), &cfg).unwrap();
    assert_eq!(a, b);
    if a.episodes[0].status != EpisodeStatus::Success {
        let strands: Vec<Strand> = a.episodes.iter().map(|e| e.strand).collect();
        assert_eq!(
            strands,
            vec![
                Strand::Apm,
                Strand::Pool(4, 1),
                Strand::Pool(4, 2),
                Strand::Pool(4, 4),
                Strand::Apm
            ]
        );
    }
    for ep in &a.episodes {
        assert!(ep.steps <= cfg.max_step);
        assert_ne!(ep.status, EpisodeStatus::Running);
        if ep.status == EpisodeStatus::Success {
            assert!(replay(&world, &start, &ep.plan, &c));
        }
    }
    if a.success {
        let winner = a
            .episodes
            .iter()
            .find(|e| e.status == EpisodeStatus::Success)
            .unwrap();
        assert_eq!(Some(winner.strand), a.provenance);
        assert_eq!(winner.plan, a.plan);
        let mut s = start.clone();
        for x in &a.plan {
            s = world.step(&s, x).next_state;
        }
        assert!(check_success(&world, &s, &c));
    } else {
        assert!(a.plan.is_empty());
        assert_eq!(a.provenance, None);
    }
}
