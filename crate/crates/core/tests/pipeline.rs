use hitgeo_core::diffkit::{read_checkpoint, write_checkpoint};
use hitgeo_core::env::{make_one_way_gridworld, sample_trajectories, Dataset, TabularPolicy};
use hitgeo_core::par::Exec;
use hitgeo_core::planner::{dpp_greedy_coreset, evaluate, EvalSpec, LatentTable, PlannerKind};
use hitgeo_core::train::{feature_matrix, train_all, ActMode, FeatureKind, IelModel, TrainConfig};

fn two_state_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        latent_dim: 4,
        hidden: vec![32, 32],
        batch: 64,
        phase_steps: [50, 1000, 2000],
        seed,
        ..TrainConfig::default()
    }
}

fn trained_two_state(seed: u64) -> (hitgeo_core::env::FiniteCmp, IelModel) {
    let env = make_one_way_gridworld(2, 1, &[], 0.0).unwrap();
    let data = sample_trajectories(&env, &TabularPolicy::uniform(2, 4), 20, 30, seed).unwrap();
    let cfg = two_state_cfg(seed);
    let mut m = IelModel::new(feature_matrix(&env, FeatureKind::OneHot).unwrap(), 4, &cfg).unwrap();
    train_all(&mut m, &data, &cfg).unwrap();
    (env, m)
}

#[test]
fn direct_pursuit_solves_two_states() {
    let (env, m) = trained_two_state(0);
    let table = LatentTable::from_model(&m).unwrap();
    let core = dpp_greedy_coreset(&table.phi, &[0, 1], 2, 1.0).unwrap();
    let spec = EvalSpec {
        goals: vec![0, 1],
        episodes: 20,
        max_steps: 5,
        k: 1,
        beta: 0.1,
        rec_mid_depth: 3,
        act_mode: ActMode::Greedy,
        seed: 0,
    };
    let rep = evaluate(
        &env,
        &m,
        &core,
        &[PlannerKind::Direct],
        &spec,
        Exec::Parallel,
    )
    .unwrap();
    assert_eq!(rep.success_rate(PlannerKind::Direct), Some(1.0));
}

#[test]
fn checkpoints_and_datasets_round_trip() {
    let env = make_one_way_gridworld(3, 2, &[((0, 0), (1, 0))], 0.1).unwrap();
    let data = sample_trajectories(&env, &TabularPolicy::uniform(6, 4), 5, 9, 3).unwrap();
    let mut bin = Vec::new();
    data.write_binary(&mut bin).unwrap();
    assert_eq!(Dataset::read_binary(&mut bin.as_slice()).unwrap(), data);
    let mut text = Vec::new();
    data.write_text(&mut text).unwrap();
    assert_eq!(Dataset::read_text(&mut text.as_slice()).unwrap(), data);

    let cfg = TrainConfig {
        latent_dim: 3,
        hidden: vec![8],
        batch: 8,
        h_max: 4,
        phase_steps: [3, 3, 3],
        ..TrainConfig::default()
    };
    let mut m = IelModel::new(feature_matrix(&env, FeatureKind::OneHot).unwrap(), 4, &cfg).unwrap();
    train_all(&mut m, &data, &cfg).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &m.records()).unwrap();
    let back = IelModel::from_records(
        m.features.clone(),
        read_checkpoint(&mut buf.as_slice()).unwrap(),
        3,
    )
    .unwrap();
    assert_eq!(back.embed_all().unwrap(), m.embed_all().unwrap());
    assert_eq!(back.task_all().unwrap(), m.task_all().unwrap());
}

#[test]
fn evaluation_does_not_depend_on_exec() {
    let env = make_one_way_gridworld(3, 3, &[((1, 1), (2, 1))], 0.0).unwrap();
    let data = sample_trajectories(&env, &TabularPolicy::uniform(9, 4), 30, 20, 1).unwrap();
    let cfg = TrainConfig {
        latent_dim: 4,
        hidden: vec![16],
        batch: 32,
        h_max: 4,
        phase_steps: [10, 50, 50],
        ..TrainConfig::default()
    };
    let mut m = IelModel::new(feature_matrix(&env, FeatureKind::OneHot).unwrap(), 4, &cfg).unwrap();
    train_all(&mut m, &data, &cfg).unwrap();
    let table = LatentTable::from_model(&m).unwrap();
    let ids: Vec<usize> = (0..9).collect();
    let core = dpp_greedy_coreset(&table.phi, &ids, 6, 0.5).unwrap();
    let spec = EvalSpec {
        goals: vec![0, 4, 8],
        episodes: 6,
        max_steps: 15,
        k: 2,
        beta: 0.1,
        rec_mid_depth: 2,
        act_mode: ActMode::Sample,
        seed: 5,
    };
    let a = evaluate(&env, &m, &core, &PlannerKind::ALL, &spec, Exec::Sequential).unwrap();
    let b = evaluate(&env, &m, &core, &PlannerKind::ALL, &spec, Exec::Parallel).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 12);
}
