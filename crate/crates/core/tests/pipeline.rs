use sppo_core::exact_solver::{duality_gap, freund_schapire_check, run_mwu, SolverConfig};
use sppo_core::games::{random_bt_game, random_matrix_game, rock_paper_scissors};
use sppo_core::losses::TargetMode;
use sppo_core::partition_lab::{regime_baseline, Regime};
use sppo_core::selfplay::{run_selfplay, Estimation, RunConfig, RunSettings, SplitPlan};
use sppo_core::{GameSpec, PromptWeights, TabularPolicy};

fn scratch(name: &str) -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("sppo-pipeline-{name}-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn rock_paper_scissors_mixture_approaches_uniform() {
    let o = rock_paper_scissors();
    let w = PromptWeights::uniform(1);
    let pi_1 = TabularPolicy::from_probs(vec![vec![0.7, 0.2, 0.1]]).unwrap();
    let run = run_mwu(&pi_1, &o, &w, &SolverConfig::inv_sqrt(1.0, 2000)).unwrap();
    let mixture = run.mixture.materialize();
    assert!(duality_gap(&mixture, &o, &w).unwrap() < 0.1);
    assert!(duality_gap(&mixture, &o, &w).unwrap() < duality_gap(&pi_1, &o, &w).unwrap());
    assert!(run.trace.min_residual() >= -1e-9);
}

#[test]
fn standalone_regret_check_matches_solver() {
    let game = random_matrix_game(3, 5, 17);
    let pi_1 = TabularPolicy::uniform(&game.oracle.counts()).unwrap();
    let run = run_mwu(&pi_1, &game.oracle, &game.weights, &SolverConfig::fixed(0.3, 40)).unwrap();
    let fs = freund_schapire_check(&run.policies, &game.oracle, &game.weights, 0.3).unwrap();
    for (r, rec) in fs.iter().zip(&run.trace.records) {
        assert!(r.residual_pure() >= r.residual_exact() - 1e-12);
        assert!((r.residual_exact() - rec.fs_residual).abs() < 1e-12);
    }
}

#[test]
fn game_and_policy_files_round_trip_through_a_run() {
    let dir = scratch("files");
    let game = random_bt_game(3, 4, 1.0, 2);
    game.save(dir.join("game.json")).unwrap();
    std::fs::write(
        dir.join("run.json"),
        r#"{"game": "game.json", "k": 4, "eta": 1.0, "iterations": 2, "split": "none", "seed": 9}"#,
    )
    .unwrap();
    let config = RunConfig::load(dir.join("run.json")).unwrap();
    assert_eq!(config.game, GameSpec::load(dir.join("game.json")).unwrap());
    let run = run_selfplay(&config).unwrap();
    run.final_policy().save(dir.join("final.txt")).unwrap();
    let back = TabularPolicy::load(dir.join("final.txt")).unwrap();
    assert_eq!(back.to_snapshot_string(), run.final_policy().to_snapshot_string());
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn exact_harness_matches_solver_on_random_games() {
    for seed in 0..5 {
        let game = random_matrix_game(2, 6, 40 + seed);
        let mut s = RunSettings::new(1, 1.0, 3);
        s.split = SplitPlan::None;
        s.estimation = Estimation::Exact;
        s.target.mode = Some(TargetMode::ExactLogZ);
        let run = run_selfplay(&RunConfig::new(game.clone(), s).unwrap()).unwrap();
        let pi_1 = TabularPolicy::uniform(&game.oracle.counts()).unwrap();
        let mwu = run_mwu(&pi_1, &game.oracle, &game.weights, &SolverConfig::fixed(1.0, 3)).unwrap();
        assert!(run.final_policy().max_total_variation(&mwu.next) < 1e-3);
    }
}

#[test]
fn ordered_baseline_also_drives_improvement() {
    let game = random_bt_game(3, 5, 1.0, 12);
    let mut s = RunSettings::new(8, 1.0, 2);
    s.split = SplitPlan::None;
    s.target.baseline = Some(regime_baseline(1.0, Regime::Ordered).unwrap());
    let run = run_selfplay(&RunConfig::new(game, s).unwrap()).unwrap();
    assert!(run.reports.iter().all(|r| r.win_rate_vs_prev > 0.5));
}
