use std::collections::{HashMap, HashSet};

use m3_core::world::{GroundedAction, SceneGraph, SnapshotStore, Status, World};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random walk that only keeps successful transitions.
fn walk(world: &World, actions: &[GroundedAction], seed: u64, steps: usize) -> Vec<SceneGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = world.initial_state();
    let mut out = vec![state.clone()];
    let mut tries = 0;
    while out.len() <= steps && tries < steps * 400 {
        tries += 1;
        let a = actions.choose(&mut rng).unwrap();
        let o = world.step(&state, a);
        if o.status == Status::Success {
            state = o.next_state;
            out.push(state.clone());
        }
    }
    out
}

fn shuffled(state: &SceneGraph, rng: &mut ChaCha8Rng) -> SceneGraph {
    let mut s = state.clone();
    s.objects.shuffle(rng);
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reachable_states_satisfy_invariants(seed in any::<u64>()) {
        let world = World::desk();
        let actions = world.enumerate_actions();
        for s in walk(&world, &actions, seed, 40) {
            prop_assert_eq!(world.validate(&s), Ok(()));
        }
    }

    #[test]
    fn step_is_deterministic_and_failures_are_pure(seed in any::<u64>()) {
        let world = World::desk();
        let actions = world.enumerate_actions();
        let states = walk(&world, &actions, seed, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for s in &states {
            for _ in 0..40 {
                let a = actions[rng.gen_range(0..actions.len())];
                let o1 = world.step(s, &a);
                let o2 = world.step(s, &a);
                prop_assert_eq!(o1.status, o2.status);
                prop_assert_eq!(o1.next_state.canonical_text(&world), o2.next_state.canonical_text(&world));
                if o1.status != Status::Success {
                    prop_assert_eq!(o1.next_state.canonical_text(&world), s.canonical_text(&world));
                } else {
                    prop_assert_eq!(world.validate(&o1.next_state), Ok(()));
                }
            }
        }
    }

    #[test]
    fn key_ignores_object_order(seed in any::<u64>()) {
        let world = World::desk();
        let actions = world.enumerate_actions();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in walk(&world, &actions, seed, 10) {
            let t = shuffled(&s, &mut rng);
            prop_assert_eq!(world.canonical_state_id(&s), world.canonical_state_id(&t));
            prop_assert_eq!(s.canonical_text(&world), t.canonical_text(&world));
        }
    }
}

#[test]
fn invalid_actions_are_state_independent() {
    let world = World::desk();
    let actions = world.enumerate_actions();
    let states = walk(&world, &actions, 7, 30);
    for a in &actions {
        let invalid: HashSet<bool> = states
            .iter()
            .map(|s| world.step(s, a).status == Status::InvalidAction)
            .collect();
        assert_eq!(invalid.len(), 1, "{a}");
    }
}

#[test]
fn no_false_merges_under_permutation_fuzzing() {
    let world = World::desk();
    let actions = world.enumerate_actions();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut by_key: HashMap<_, String> = HashMap::new();
    let mut seen = 0;
    let mut seed = 0;
    while seen < 10_000 {
        for s in walk(&world, &actions, seed, 50) {
            let t = shuffled(&s, &mut rng);
            let key = world.canonical_state_id(&t);
            let text = s.canonical_text(&world);
            if let Some(prev) = by_key.insert(key, text.clone()) {
                assert_eq!(prev, text, "hash merged two different states");
            }
            seen += 1;
        }
        seed += 1;
    }
}

#[test]
fn distinct_states_get_distinct_snapshot_keys() {
    let world = World::desk();
    let actions = world.enumerate_actions();
    let mut store = SnapshotStore::new();
    let mut texts = HashSet::new();
    let mut keys = HashSet::new();
    let mut seed = 0;
    while texts.len() < 1000 {
        for s in walk(&world, &actions, seed, 60) {
            if texts.insert(s.canonical_text(&world)) {
                keys.insert(store.snapshot(&world, &s));
            }
        }
        seed += 1;
    }
    assert_eq!(keys.len(), texts.len());
    assert_eq!(store.len(), texts.len());
}

#[test]
fn snapshots_are_immutable() {
    let world = World::desk();
    let actions = world.enumerate_actions();
    let mut store = SnapshotStore::new();
    let s0 = world.initial_state();
    let key = store.snapshot(&world, &s0);
    let mut state = store.restore(&key).unwrap();
    let mut done = 0;
    for a in &actions {
        let o = world.step(&state, a);
        if o.status == Status::Success {
            state = o.next_state;
            done += 1;
            if done == 10 {
                break;
            }
        }
    }
    assert_eq!(done, 10);
    assert_eq!(
        store.restore(&key).unwrap().canonical_text(&world),
        s0.canonical_text(&world)
    );
}

#[test]
fn small_world_enumeration_matches_cross_product() {
    // Ten objects, six schemas: count by brute force over every
    // (name, p1, p2) triple with the schema's parameter kind.
    let text = m3_core::world::DESK_WORLD
        .lines()
        .filter(|l| {
            !["object light", "object glue", "object sponge"]
                .iter()
                .any(|p| l.starts_with(p))
                && ![
                    "schema clean",
                    "schema apply",
                    "schema stick",
                    "schema climbDown",
                    "schema drop",
                ]
                .iter()
                .any(|p| l.starts_with(p))
                && ![
                    "rule clean",
                    "rule apply",
                    "rule stick",
                    "rule climbDown",
                    "rule drop",
                ]
                .iter()
                .any(|p| l.starts_with(p))
        })
        .collect::<Vec<_>>()
        .join("\n");
    let world = World::parse(&text).unwrap();
    assert_eq!(world.objects().len(), 10);
    assert_eq!(world.schemas().len(), 6);
    let objects = world.object_names();
    let mut count = 0;
    for schema in world.schemas() {
        for _p1 in &objects {
            count += match schema.param2.label() {
                "none" => 1,
                "object" => objects.len(),
                "state" => 28,
                _ => unreachable!(),
            };
        }
    }
    assert_eq!(world.enumerate_actions().len(), count);
    let unique: HashSet<String> = world
        .enumerate_actions()
        .iter()
        .map(|a| a.to_string())
        .collect();
    assert_eq!(unique.len(), count);
}
