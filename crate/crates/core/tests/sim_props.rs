use widescale::ensemble::{derive_seed, execute_specs, CandidateSpec, ExecutionOptions};
use widescale::sim::scripted::{plan, ScriptedProfile};
use widescale::sim::taskpack::{run_script, Family, TaskPack, DEFAULT_PACK_SEED};
use widescale::sim::{oracle_reward, replay, SimRig, StateLedger};

fn spec(policy: &str, index: u32) -> CandidateSpec {
    CandidateSpec {
        policy_id: policy.to_string(),
        model_id: String::new(),
        sample_index: index,
        seed: derive_seed(11, policy, index),
        temperature_bits: None,
    }
}

#[test]
fn bundled_pack_shape() {
    let pack = TaskPack::bundled();
    assert_eq!(pack.seed, DEFAULT_PACK_SEED);
    for family in [Family::FormFill, Family::MultiPath, Family::BulkEdit] {
        assert!(pack.family(family).count() >= 60, "{family:?}");
    }
    for t in &pack.tasks {
        assert!(t.violations().is_empty(), "{}: {:?}", t.task.id, t.violations());
        for s in &t.solutions {
            assert_eq!(oracle_reward(t, &run_script(&t.initial, s)), 1, "{}", t.task.id);
        }
        for s in &t.distractors {
            assert_eq!(oracle_reward(t, &run_script(&t.initial, s)), 0, "{}", t.task.id);
        }
        assert_eq!(oracle_reward(t, &t.initial), 0, "{} starts solved", t.task.id);
    }
    assert_eq!(TaskPack::from_json(&pack.to_json()).unwrap(), pack);
}

#[test]
fn certain_agents_always_or_never_succeed() {
    let pack = TaskPack::bundled();
    let rig = SimRig::new(
        &pack.tasks,
        &[ScriptedProfile::new("always", 1.0), ScriptedProfile::new("never", 0.0)],
    );
    let specs = [spec("always", 0), spec("never", 0)];
    for t in &rig.tasks {
        let rollouts = execute_specs(&specs, &t.task, &rig.environments, &rig.policies, &ExecutionOptions::default());
        assert_eq!(rig.reward(&t.task, &rollouts[0]), 1, "{}", t.task.id);
        assert_eq!(rig.reward(&t.task, &rollouts[1]), 0, "{}", t.task.id);
        for r in &rollouts {
            let fresh = StateLedger::new();
            let end = replay(t, r, fresh).unwrap_or_else(|e| panic!("{}: {e}", t.task.id));
            assert_eq!(oracle_reward(t, &end), rig.reward(&t.task, r));
        }
    }
}

#[test]
fn half_agents_succeed_about_half_the_time() {
    let pack = TaskPack::bundled();
    let profile = ScriptedProfile::new("half", 0.5);
    for t in pack.tasks.iter().step_by(30) {
        let hits = (0..1000u32)
            .filter(|&i| plan(t, &profile, derive_seed(3, &t.task.id, i)).follows_solution)
            .count();
        let rate = hits as f64 / 1000.0;
        assert!((0.45..=0.55).contains(&rate), "{}: {rate}", t.task.id);
    }
}

#[test]
fn rollouts_are_reproducible() {
    let pack = TaskPack::bundled();
    let profiles = [ScriptedProfile::new("p", 0.5)];
    let specs: Vec<_> = (0..4).map(|i| spec("p", i)).collect();
    let task = &pack.tasks[125];
    let a = {
        let rig = SimRig::new(&pack.tasks, &profiles);
        execute_specs(&specs, &task.task, &rig.environments, &rig.policies, &ExecutionOptions::default())
    };
    let b = {
        let rig = SimRig::new(&pack.tasks, &profiles);
        let options = ExecutionOptions {
            workers: 1,
            ..ExecutionOptions::default()
        };
        execute_specs(&specs, &task.task, &rig.environments, &rig.policies, &options)
    };
    assert_eq!(a, b);
}
