use maze_core::config::ExperimentConfig;
use maze_core::pipeline::*;
use maze_core::records::read_jsonl;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 4,
        ..Default::default()
    };
    cfg.learning.episodes_per_stage = 2;
    cfg.learning.gp_stages = 1;
    cfg.learning.eval_episodes = 2;
    cfg.episode.time_limit_s = 20.0;
    cfg
}

#[test]
fn small_run_has_the_protocol_shape_and_writes_its_artifacts() {
    let cfg = small_config();
    let mut seen = Vec::new();
    let run = run_learning(&cfg, |s| seen.push(s.label.clone())).unwrap();
    assert_eq!(seen, ["CMA-ES", "CMA-ES+GP1"]);
    assert_eq!(run.calibration_episodes.len(), 2);
    assert!(run.calibration.objective_star <= run.calibration.objective_init);

    let (first, last) = (&run.stages[0], &run.stages[1]);
    assert_eq!(first.evaluation.len(), 2);
    assert_eq!(first.collected.len(), 2);
    assert!(last.collected.is_empty());
    assert!(first.model.rings.iter().all(Option::is_none));
    assert!(last.model.rings.iter().any(Option::is_some));
    assert_eq!(last.summary.training_episodes, 2);
    // stages are compared on the same evaluation starts
    let seeds = |s: &StageResult| s.evaluation.iter().map(|r| r.seed).collect::<Vec<_>>();
    assert_eq!(seeds(first), seeds(last));

    let dir = tempfile::tempdir().unwrap();
    run.write(dir.path()).unwrap();
    for f in [
        "manifest.json",
        "config.toml",
        "per_ring.txt",
        "stages.txt",
        "model.json",
    ] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let rows: Vec<PerRingRow> = read_jsonl(dir.path().join("per_ring.jsonl")).unwrap();
    assert_eq!(rows.len(), 2 * cfg.geometry.ring_radii.len());
    let table = per_ring_table(&rows);
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["stage", "ring", "mean_s", "std_s", "n"]);
    for stage in 0..2 {
        let sdir = dir.path().join(stage_dir(stage));
        let episodes: Vec<EpisodeRecord> = read_jsonl(sdir.join("episodes.jsonl")).unwrap();
        assert_eq!(episodes.len(), 2);
        assert!(sdir.join("episode00.csv").is_file());
    }

    let again = run_learning(&cfg, |_| {}).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    again.write(dir2.path()).unwrap();
    for f in ["per_ring.txt", "stages.txt", "manifest.json"] {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(dir2.path().join(f)).unwrap(),
            "{f}"
        );
    }
}
