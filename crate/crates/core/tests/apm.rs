use m3_core::apm::{
    target_vector, train_apm, ActionDistribution, Apm, ApmConfig, EncoderInput, N_ACT, N_LABELS,
    N_OBJ, N_STATE,
};
use m3_core::explorer::{explore, ExplorationConfig, KnowledgeGraph};
use m3_core::learncore::{train_step, Adam, Graph};
use m3_core::taskgen::{sample_paths, split, Dataset, DatasetSplit, TaskSample};
use m3_core::world::{GroundedAction, SceneGraph, Status, World};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const WIDTH: usize = 16;

fn act(s: &str) -> GroundedAction {
    s.parse().unwrap()
}

fn walk(world: &World, list: &[&str]) -> Vec<SceneGraph> {
    let mut states = vec![world.initial_state()];
    for a in list {
        let out = world.step(states.last().unwrap(), &act(a));
        assert_eq!(out.status, Status::Success, "{a}");
        states.push(out.next_state);
    }
    states
}

fn sums_to_one(v: &[f64]) -> bool {
    (v.iter().sum::<f64>() - 1.0).abs() < 1e-6
}

#[test]
fn encoding_ignores_object_order_and_has_model_width() {
    let world = World::desk();
    let apm = Apm::init(&world, WIDTH, 3);
    let s = walk(&world, &["moveTo <table>", "pick <apple>"])
        .pop()
        .unwrap();
    let base = apm.encode(&s).unwrap();
    assert_eq!(base.len(), WIDTH);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..5 {
        let mut t = s.clone();
        t.objects.shuffle(&mut rng);
        let e = apm.encode(&t).unwrap();
        for (a, b) in base.iter().zip(&e) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn one_state_change_moves_the_encoding() {
    let world = World::desk();
    let apm = Apm::init(&world, WIDTH, 3);
    let s = world.initial_state();
    let mut t = s.clone();
    let apple = world.object_id("apple".parse().unwrap()).unwrap();
    t.obj_mut(apple).states.insert("Dirty".parse().unwrap());
    assert_ne!(apm.encode(&s).unwrap(), apm.encode(&t).unwrap());
}

#[test]
fn identical_state_and_goal_give_one_distribution() {
    let world = World::desk();
    let apm = Apm::init(&world, WIDTH, 5);
    let states = walk(
        &world,
        &["moveTo <table>", "pick <apple>", "moveTo <shelf>"],
    );
    let first = apm.predict(&states[0], &states[0]).unwrap();
    for s in &states[1..] {
        assert_eq!(apm.predict(s, s).unwrap(), first);
    }
    let other = apm.predict(&states[0], &states[3]).unwrap();
    assert_ne!(other, first);
}

#[test]
fn every_head_is_normalized() {
    let world = World::desk();
    let apm = Apm::init(&world, WIDTH, 7);
    let states = walk(&world, &["moveTo <table>", "pick <apple>"]);
    let d = apm.predict(&states[0], &states[2]).unwrap();
    assert_eq!(d.name.len(), N_ACT);
    assert!(sums_to_one(&d.name));
    for n in 0..N_ACT {
        assert_eq!(d.o1[n].len(), N_OBJ);
        assert_eq!(d.state[n].len(), N_STATE);
        assert!(sums_to_one(&d.o1[n]));
        assert!(sums_to_one(&d.o2[n]));
        assert!(sums_to_one(&d.state[n]));
    }
}

#[test]
fn targets_are_one_hot_per_component() {
    let t = target_vector(&act("pick <apple>"));
    assert_eq!(t.cols, N_LABELS);
    assert_eq!(t.data.iter().sum::<f64>(), 2.0);
    let t = target_vector(&act("pickNplaceAonB <apple> <book>"));
    assert_eq!(t.data.iter().sum::<f64>(), 3.0);
    let t = target_vector(&act("changeState <light> <on>"));
    assert_eq!(t.data.iter().sum::<f64>(), 3.0);
    assert_eq!(N_LABELS, 111);
}

fn uniform() -> ActionDistribution {
    ActionDistribution {
        name: vec![1.0 / N_ACT as f64; N_ACT],
        o1: vec![vec![1.0 / N_OBJ as f64; N_OBJ]; N_ACT],
        o2: vec![vec![1.0 / N_OBJ as f64; N_OBJ]; N_ACT],
        state: vec![vec![1.0 / N_STATE as f64; N_STATE]; N_ACT],
    }
}

#[test]
fn unary_scores_ignore_the_second_object_head() {
    let a = act("pick <apple>");
    let mut d = uniform();
    let before = d.score(&a);
    d.o2[a.name.index()] = (0..N_OBJ).map(|i| i as f64).collect();
    assert_eq!(d.score(&a), before);
}

#[test]
fn restricted_assembly_maximizes_the_product() {
    let world = World::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let set = [
        act("pick <apple>"),
        act("pickNplaceAonB <apple> <book>"),
        act("moveTo <shelf>"),
    ];
    for _ in 0..50 {
        let mut d = uniform();
        use rand::Rng;
        for v in d.name.iter_mut() {
            *v = rng.gen();
        }
        for row in
            d.o1.iter_mut()
                .chain(d.o2.iter_mut())
                .chain(d.state.iter_mut())
        {
            for v in row.iter_mut() {
                *v = rng.gen();
            }
        }
        let mut best = set[0];
        let mut best_p = -1.0;
        for a in &set {
            let n = a.name.index();
            let mut p = d.name[n] * d.o1[n][a.param1.index()];
            if let Some(o) = a.object2() {
                p *= d.o2[n][o.index()];
            }
            if p > best_p {
                best_p = p;
                best = *a;
            }
        }
        assert_eq!(d.assemble(&world, Some(&set)), Some(best));

        // Scaling a head does not move the argmax.
        let picked = d.assemble(&world, None);
        for v in d.name.iter_mut() {
            *v *= 3.0;
        }
        assert_eq!(d.assemble(&world, None), picked);
    }
    let d = uniform();
    assert_eq!(d.assemble(&world, Some(&set[2..])), Some(set[2]));
    assert_eq!(d.assemble(&world, Some(&[])), None);
}

#[test]
fn unrestricted_ties_break_lexicographically() {
    let world = World::desk();
    let a = uniform().assemble(&world, None).unwrap();
    // Smallest name is `apply`; its first object slot is the smallest name.
    assert_eq!(a.name.as_str(), "apply");
    let mut names: Vec<&str> = m3_core::world::vocab::OBJECT_NAMES.to_vec();
    names.sort_unstable();
    assert_eq!(a.param1.as_str(), names[0]);
}

#[test]
fn one_transition_can_be_memorized() {
    let world = World::desk();
    let states = walk(&world, &["moveTo <table>", "pick <apple>"]);
    let target = act("pick <apple>");
    let (s, goal) = (EncoderInput::new(&states[1]), EncoderInput::new(&states[2]));
    let mut apm = Apm::init(&world, WIDTH, 1);
    let mut opt = Adam::new(&apm.params, 0.01);
    let (enc, heads) = (apm.encoder.clone(), apm.heads.clone());
    for step in 0..500 {
        train_step(
            &mut apm.params,
            &mut opt,
            step,
            Some(5.0),
            |g: &mut Graph<'_>| {
                let a = enc.forward(g, &s)?;
                let b = enc.forward(g, &goal)?;
                let psi = g.absdiff(a, b)?;
                let y = heads.forward_train(g, psi, target.name)?;
                g.bce(y, target_vector(&target))
            },
        )
        .unwrap();
    }
    let d = apm.predict_inputs(&s, &goal).unwrap();
    assert_eq!(d.assemble(&world, None), Some(target));
}

fn desk() -> (World, KnowledgeGraph) {
    let world = World::desk();
    let kg = explore(&world, &ExplorationConfig::default());
    (world, kg)
}

#[test]
fn a_single_trajectory_is_learned_exactly() {
    let (world, kg) = desk();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (samples, _) = sample_paths(&world, &kg, 3, 3..=3, &mut rng).unwrap();
    let one = TaskSample {
        id: 0,
        ..samples[0].clone()
    };
    let ds = Dataset {
        kg_hash: String::new(),
        samples: vec![one],
    };
    let sp = DatasetSplit {
        train: vec![0],
        val: vec![0],
        test: vec![],
    };
    let cfg = ApmConfig {
        width: WIDTH,
        epochs: 150,
        lr: 0.01,
        batch_size: 1,
        ..ApmConfig::default()
    };
    let (_, log) = train_apm(&world, &kg, &ds, &sp, &cfg, 0).unwrap();
    assert_eq!(log.last().unwrap().val_accuracy, 1.0, "{log:?}");
}

#[test]
fn training_loss_falls_and_weights_round_trip() {
    let (world, kg) = desk();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (samples, _) = sample_paths(&world, &kg, 10, 1..=4, &mut rng).unwrap();
    let sp = split(&samples, &mut rng);
    let ds = Dataset {
        kg_hash: String::new(),
        samples,
    };
    let cfg = ApmConfig {
        width: WIDTH,
        epochs: 5,
        lr: 0.01,
        ..ApmConfig::default()
    };
    let (apm, log) = train_apm(&world, &kg, &ds, &sp, &cfg, 2).unwrap();
    assert_eq!(log.len(), 5);
    assert!(log[4].train_loss < log[0].train_loss, "{log:?}");

    let (again, log2) = train_apm(&world, &kg, &ds, &sp, &cfg, 2).unwrap();
    assert_eq!(log, log2);
    assert_eq!(again.params.to_text(), apm.params.to_text());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("apm.wts");
    apm.save(&path).unwrap();
    let back = Apm::load(&path, &world).unwrap();
    let s = kg.state(&ds.samples[0].start()).unwrap();
    let goal = kg.state(&ds.samples[0].goal()).unwrap();
    assert_eq!(
        back.predict(&s, &goal).unwrap(),
        apm.predict(&s, &goal).unwrap()
    );

    let empty = DatasetSplit::default();
    assert!(train_apm(&world, &kg, &ds, &empty, &cfg, 2).is_err());
}
