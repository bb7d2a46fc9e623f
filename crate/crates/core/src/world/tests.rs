use super::*;

fn act(s: &str) -> GroundedAction {
    s.parse().unwrap()
}

fn run(world: &World, actions: &[&str]) -> SceneGraph {
    let mut state = world.initial_state();
    for a in actions {
        let out = world.step(&state, &act(a));
        assert_eq!(out.status, Status::Success, "{a}");
        state = out.next_state;
    }
    state
}

#[test]
fn bundled_worlds_parse_and_validate() {
    for w in [World::desk(), World::full()] {
        w.validate(&w.initial_state()).unwrap();
        assert_eq!(w.schemas().len(), 11);
        assert_eq!(w.rules().len(), 11);
    }
    assert_eq!(World::full().objects().len(), 36);
}

#[test]
fn enumeration_counts() {
    let full = World::full();
    let n = 36;
    assert_eq!(full.enumerate_actions().len(), 6 * n + 4 * n * n + n * 28);
    let desk = World::desk();
    let n = desk.objects().len();
    assert_eq!(desk.enumerate_actions().len(), 6 * n + 4 * n * n + n * 28);
}

#[test]
fn enumeration_is_sorted_and_unique() {
    let acts = World::desk().enumerate_actions();
    assert!(acts.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn place_into_open_fridge() {
    let w = World::desk();
    let s = run(
        &w,
        &[
            "moveTo <table>",
            "pick <apple>",
            "moveTo <fridge>",
            "changeState <fridge> <open>",
        ],
    );
    let out = w.step(&s, &act("pickNplaceAonB <apple> <fridge>"));
    assert_eq!(out.status, Status::Success);
    let apple = w.object_id(ObjectName::named("apple")).unwrap();
    let fridge = w.object_id(ObjectName::named("fridge")).unwrap();
    assert!(out.next_state.has_relation(apple, Relation::INSIDE, fridge));
    w.validate(&out.next_state).unwrap();
}

#[test]
fn place_into_closed_fridge_fails() {
    let w = World::desk();
    let s = run(&w, &["moveTo <table>", "pick <apple>", "moveTo <fridge>"]);
    let out = w.step(&s, &act("pickNplaceAonB <apple> <fridge>"));
    assert_eq!(out.status, Status::PreconditionFailed);
    assert_eq!(out.next_state, s);
}

#[test]
fn state_change_on_object_without_property_is_invalid() {
    let w = World::desk();
    let s = w.initial_state();
    let out = w.step(&s, &act("changeState <apple> <open>"));
    assert_eq!(out.status, Status::InvalidAction);
    assert_eq!(
        w.step(&s, &act("pick <table>")).status,
        Status::InvalidAction
    );
    assert_eq!(
        w.step(&s, &act("pushTo <chair> <chair>")).status,
        Status::InvalidAction
    );
    assert_eq!(
        w.step(&s, &act("pick <apple> <book>")).status,
        Status::InvalidAction
    );
}

#[test]
fn no_op_counts_as_failure() {
    let w = World::desk();
    let s = w.initial_state();
    assert_eq!(
        w.step(&s, &act("moveTo <floor>")).status,
        Status::PreconditionFailed
    );
    assert_eq!(
        w.step(&s, &act("moveTo <door>")).status,
        Status::PreconditionFailed
    );
}

#[test]
fn light_needs_climbing() {
    let w = World::desk();
    let s = run(&w, &["moveTo <chair>", "pushTo <chair> <door>"]);
    assert_eq!(
        w.step(&s, &act("changeState <light> <on>")).status,
        Status::PreconditionFailed
    );
    let s = run(
        &w,
        &[
            "moveTo <chair>",
            "pushTo <chair> <door>",
            "climbUp <chair>",
            "changeState <light> <on>",
            "climbDown <chair>",
        ],
    );
    let light = w.object_id(ObjectName::named("light")).unwrap();
    assert!(s.obj(light).states.contains(StateSym::named("On")));
}

#[test]
fn push_carries_load() {
    let w = World::desk();
    let s = run(
        &w,
        &[
            "moveTo <shelf>",
            "pickNplaceAonB <book> <stool>",
            "pushTo <stool> <table>",
        ],
    );
    let book = w.object_id(ObjectName::named("book")).unwrap();
    let table = w.object_id(ObjectName::named("table")).unwrap();
    assert_eq!(s.obj(book).zone, s.obj(table).zone);
    assert!(s.has_relation(book, Relation::CLOSE, table));
    w.validate(&s).unwrap();
}

#[test]
fn uneven_objects_support_nothing() {
    let text = DESK_WORLD.replace(
        "object apple zone=near-table props=movable,uneven",
        "object apple zone=near-table props=movable,uneven,surface",
    );
    let w = World::parse(&text).unwrap();
    let s = run(&w, &["moveTo <shelf>", "pick <book>", "moveTo <table>"]);
    assert_eq!(
        w.step(&s, &act("pickNplaceAonB <book> <apple>")).status,
        Status::PreconditionFailed
    );
}

#[test]
fn snapshot_round_trip() {
    let w = World::desk();
    let mut store = SnapshotStore::new();
    let s0 = w.initial_state();
    let k = store.snapshot(&w, &s0);
    let s1 = run(&w, &["moveTo <table>", "pick <apple>"]);
    store.snapshot(&w, &s1);
    let back = store.restore(&k).unwrap();
    assert_eq!(back.canonical_text(&w), s0.canonical_text(&w));
    assert!(matches!(
        store.restore(&StateKey([7; 16])),
        Err(Error::UnknownKey(_))
    ));
}

#[test]
fn canonical_text_round_trip() {
    let w = World::desk();
    let s = run(&w, &["moveTo <table>", "pick <apple>", "moveTo <fridge>"]);
    let text = s.canonical_text(&w);
    let back = SceneGraph::from_canonical(&text, &w).unwrap();
    assert_eq!(back, s);
}

#[test]
fn rejects_malformed_world_files() {
    assert!(World::parse("").is_err());
    assert!(World::parse("m3-world v2\n").is_err());
    let missing_zone = DESK_WORLD.replace("zone everywhere\n", "");
    assert!(World::parse(&missing_zone).is_err());
    let bad_state = DESK_WORLD.replace("states=Dirty", "states=Dirty,Clean");
    assert!(World::parse(&bad_state).is_err());
}

#[test]
fn zero_object_vocabulary_enumerates_nothing() {
    assert!(enumerate(World::desk().schemas(), &[]).is_empty());
}
