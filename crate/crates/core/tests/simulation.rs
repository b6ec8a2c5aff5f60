use geogrouse::eval::*;
use geogrouse::simulator::*;
use geogrouse::{EnvironmentSpec, RunConfig};

fn small_run(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.env = EnvironmentSpec {
        n_items: 40,
        candidates: 6,
        n_users: 80,
        aoi4_per_group: 2,
        aoi5_per_aoi4: 2,
        cells_per_aoi5: 2,
        session_len: 3,
        seed,
        ..Default::default()
    };
    cfg.train.batch_size = 20;
    cfg.train.em_rounds = 4;
    cfg.train.m_steps_per_round = 3;
    cfg.train.init_sample = 64;
    cfg.train.seed = seed;
    cfg.eval.seeds = vec![1, 2, 3];
    cfg.eval.sessions_per_seed = 60;
    cfg
}

fn total_clicks(episodes: &[Episode]) -> f64 {
    episodes.iter().flat_map(|e| e.rewards()).sum()
}

#[test]
fn group_oracle_beats_uniform_logging() {
    for seed in 0..5 {
        let env = generate_environment(&EnvironmentSpec {
            n_users: 500,
            seed,
            ..Default::default()
        })
        .unwrap();
        let uniform = simulate_batch(&env, &UniformLogger, seed, 0, 1000, false).unwrap();
        let oracle = simulate_batch(&env, &GroupOracle(&env), seed, 0, 1000, false).unwrap();
        let (u, o) = (total_clicks(&uniform), total_clicks(&oracle));
        assert!(o > u, "seed {seed}: oracle {o} uniform {u}");
    }
}

#[test]
fn random_scores_sit_at_chance() {
    let env = generate_environment(&EnvironmentSpec::default()).unwrap();
    let cfg = EvalConfig::default();
    let tests = generate_test_sets(&env, &cfg).unwrap();
    let report = offline_eval(&RandomScorer { seed: 3 }, &tests, &cfg.ndcg_ks, cfg.hit_k).unwrap();
    assert!((report.auc() - 0.5).abs() < 0.02, "auc {}", report.auc());
    assert_eq!(report.n_seeds, 10);
    assert_eq!(report.n_sessions, 300);
}

#[test]
fn oracle_dominates_trained_model() {
    let cfg = small_run(2);
    let exp = train_and_evaluate(&cfg).unwrap();
    let tests = generate_test_sets(&exp.env, &cfg.eval).unwrap();
    let oracle = offline_eval(&OracleScorer(&exp.env), &tests, &cfg.eval.ndcg_ks, cfg.eval.hit_k).unwrap();
    for m in &exp.report.metrics {
        let o = oracle.get(&m.name).unwrap().mean;
        assert!(o >= m.mean - 1e-9, "{}: oracle {o} model {}", m.name, m.mean);
    }
}

#[test]
fn same_seed_gives_identical_report() {
    let cfg = small_run(3);
    let a = train_and_evaluate(&cfg).unwrap();
    let b = train_and_evaluate(&cfg).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
    assert_eq!(a.history, b.history);
}

#[test]
fn sweep_rows_follow_requested_levels() {
    let cfg = small_run(4);
    let single = sensitivity_sweep(&cfg, &[3]).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(single[0].aoi_level, 3);
    let again = sensitivity_sweep(&cfg, &[3]).unwrap();
    assert_eq!(single, again);
    assert!(sensitivity_sweep(&cfg, &[]).is_err());
    assert!(sensitivity_sweep(&cfg, &[6]).is_err());
    let csv = sweep_csv(&single).unwrap();
    assert!(csv.starts_with("aoi_level,auc_mean,auc_std\n3,"));
}

#[test]
fn best_level_prefers_lower_on_ties() {
    let row = |aoi_level, auc_mean| SweepRow {
        aoi_level,
        auc_mean,
        auc_std: 0.0,
    };
    assert_eq!(best_level(&[row(1, 0.6), row(2, 0.7), row(3, 0.7)]), Some(2));
    assert_eq!(best_level(&[]), None);
}

#[test]
fn session_logs_round_trip() {
    let env = generate_environment(&EnvironmentSpec {
        n_users: 200,
        ..Default::default()
    })
    .unwrap();
    let mut episodes = simulate_batch(&env, &UniformLogger, 5, 0, 50, false).unwrap();
    episodes.extend(simulate_batch(&env, &GroupOracle(&env), 5, 50, 50, true).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    write_sessions(&episodes, &path).unwrap();
    assert_eq!(read_sessions(&path).unwrap(), episodes);

    std::fs::write(&path, "{}\nnot json\n").unwrap();
    let err = read_sessions(&path).unwrap_err().to_string();
    assert!(err.contains("line 1"), "{err}");
}

#[test]
fn logged_choices_lie_in_their_candidate_sets() {
    let env = generate_environment(&EnvironmentSpec {
        n_users: 200,
        ..Default::default()
    })
    .unwrap();
    for ep in simulate_batch(&env, &UniformLogger, 6, 0, 100, true).unwrap() {
        assert!(!ep.steps.is_empty() && ep.steps.len() <= env.spec.session_len);
        for step in &ep.steps {
            let idx = step.chosen_index().unwrap();
            let labels = step.candidate_labels.as_ref().unwrap();
            assert_eq!(labels[idx], step.reward);
            assert_eq!(labels.len(), step.candidate_set.len());
        }
    }
}
