use std::collections::HashSet;

use m3_core::explorer::{
    audit, distinct_action_count, explore, weighted_sample, ActionStats, Edge, ExplorationConfig,
    KnowledgeGraph,
};
use m3_core::world::{StateKey, World};
use m3_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DRAWS: usize = 100_000;

fn frequencies(stats: &ActionStats, exclude: &HashSet<usize>, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = vec![0usize; stats.len()];
    for _ in 0..DRAWS {
        hits[weighted_sample(stats, exclude, &mut rng).unwrap()] += 1;
    }
    hits.iter().map(|&h| h as f64 / DRAWS as f64).collect()
}

#[test]
fn fresh_counts_sample_uniformly() {
    let f = frequencies(&ActionStats::new(3), &HashSet::new(), 1);
    for p in f {
        assert!((p - 1.0 / 3.0).abs() < 0.01, "{p}");
    }
}

#[test]
fn counts_nine_and_zero_give_one_in_eleven() {
    let mut stats = ActionStats::new(2);
    stats.counts = vec![9, 0];
    let f = frequencies(&stats, &HashSet::new(), 2);
    assert!((f[0] - 1.0 / 11.0).abs() < 0.005, "{f:?}");
    assert!((f[1] - 10.0 / 11.0).abs() < 0.005, "{f:?}");
}

#[test]
fn banned_and_excluded_actions_are_never_drawn() {
    let mut stats = ActionStats::new(4);
    stats.banned_at[1] = Some(3);
    let f = frequencies(&stats, &HashSet::from([2]), 3);
    assert_eq!(f[1], 0.0);
    assert_eq!(f[2], 0.0);
    assert!((f[0] - 0.5).abs() < 0.01);
}

#[test]
fn nothing_eligible_is_exhausted() {
    let mut stats = ActionStats::new(2);
    stats.banned_at[0] = Some(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = weighted_sample(&stats, &HashSet::from([1]), &mut rng);
    assert!(matches!(r, Err(Error::Exhausted)));
    let r = weighted_sample(&ActionStats::new(0), &HashSet::new(), &mut rng);
    assert!(matches!(r, Err(Error::Exhausted)));
}

#[test]
fn zero_budget_keeps_only_the_root() {
    let world = World::desk();
    let cfg = ExplorationConfig {
        initial_steps: 0,
        node_count: 0,
        steps_per_node: 5,
        max_wrong_per_node: 30,
        rng_seed: 0,
    };
    let kg = explore(&world, &cfg);
    assert_eq!(kg.node_count(), 1);
    assert!(kg.edges.is_empty());
    assert_eq!(kg.distinct_action_count(), 0);
    let root = world.canonical_state_id(&world.initial_state());
    assert_eq!(kg.root, root);
}

#[test]
fn distinct_actions_of_repeated_labels() {
    let a = "pick <apple>".parse().unwrap();
    let b = "pick <book>".parse().unwrap();
    let e = |action| Edge {
        src: StateKey([0; 16]),
        action,
        dst: StateKey([1; 16]),
        seq: 0,
    };
    assert_eq!(distinct_action_count(&[e(a), e(a), e(b)]), 2);
    assert_eq!(distinct_action_count(&[]), 0);
}

#[test]
fn exploration_is_deterministic_per_seed() {
    let world = World::desk();
    let cfg = ExplorationConfig::default();
    let a = explore(&world, &cfg).to_text();
    let b = explore(&world, &cfg).to_text();
    assert_eq!(a, b);
    let c = explore(&world, &ExplorationConfig { rng_seed: 9, ..cfg }).to_text();
    assert_ne!(a, c);
}

#[test]
fn desk_graph_invariants() {
    let world = World::desk();
    let cfg = ExplorationConfig::default();
    let kg = explore(&world, &cfg);

    let report = audit(&world, &kg);
    assert!(report.is_clean(), "{report:?}");
    assert_eq!(report.edges_checked, kg.edges.len());

    let bound = 1 + cfg.initial_steps + cfg.node_count * cfg.steps_per_node;
    assert!(kg.node_count() <= bound);
    assert!(kg.node_count() <= kg.successful_steps + 1);
    assert_eq!(kg.successful_steps, kg.edges.len());

    // Recount distinct labels from the serialized edge table.
    let text = kg.to_text();
    let labels: HashSet<String> = text
        .lines()
        .filter(|l| l.starts_with("edge "))
        .map(|l| l.splitn(5, ' ').nth(4).unwrap().to_string())
        .collect();
    assert_eq!(labels.len(), kg.distinct_action_count());

    // Only schema-invalid actions get banned, and bans never lift.
    for (i, a) in kg.actions.iter().enumerate() {
        if let Some(at) = kg.stats.banned_at[i] {
            assert!(!world.is_schema_valid(a), "{a}");
            assert!(kg.edges.iter().all(|e| e.action != *a || e.seq < at));
        }
    }
    let total: u64 = kg.stats.counts.iter().sum();
    assert_eq!(total, kg.attempts);
}

#[test]
fn graph_round_trips_through_text() {
    let world = World::desk();
    let kg = explore(&world, &ExplorationConfig::default());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("kg.txt");
    kg.save(&path).unwrap();
    let back = KnowledgeGraph::load(&path, &world).unwrap();
    assert_eq!(back.to_text(), kg.to_text());
    for key in kg.nodes() {
        assert_eq!(
            back.canonical_text(key).unwrap(),
            kg.canonical_text(key).unwrap()
        );
    }
    assert!(audit(&world, &back).is_clean());
}

#[test]
fn tampered_edges_are_caught() {
    let world = World::desk();
    let kg = explore(&world, &ExplorationConfig::default());
    let e = &kg.edges[3];
    let other = kg.nodes().iter().find(|k| **k != e.dst).unwrap();
    let line = format!("edge {} {} {} {}", e.seq, e.src, e.dst, e.action);
    let forged = format!("edge {} {} {} {}", e.seq, e.src, other, e.action);
    let text = kg.to_text().replace(&line, &forged);
    assert_ne!(text, kg.to_text());
    if let Ok(bad) = KnowledgeGraph::from_text(&text, &world) {
        assert!(!audit(&world, &bad).replay_failures.is_empty())
    }
    assert!(KnowledgeGraph::from_text("m3-kg v0\n", &world).is_err());
}

#[test]
fn record_skips_failures_and_duplicate_labels() {
    let world = World::desk();
    let mut kg = KnowledgeGraph::with_root(&world);
    let root = kg.root;
    let go = "moveTo <table>".parse().unwrap();
    let dst = kg.record(&world, &root, go).unwrap().unwrap();
    assert_ne!(dst, root);
    assert_eq!(kg.record(&world, &root, go).unwrap(), None);
    assert_eq!(
        kg.record(&world, &root, "drop <apple>".parse().unwrap())
            .unwrap(),
        None
    );
    assert_eq!(kg.node_count(), 2);
    assert_eq!(kg.edges.len(), 1);
}
