use maze_core::config::ExperimentConfig;
use maze_core::pipeline::{per_ring_times, rollout_episode, AgentController, EpisodeOptions};
use maze_core::residual::HybridModel;
use maze_server::*;

fn run_to_end(s: &mut Session) -> SummaryFrame {
    loop {
        for f in s.step() {
            if let ServerFrame::Summary(sum) = f {
                return sum;
            }
        }
    }
}

#[test]
fn agent_session_matches_an_offline_episode_on_the_same_seed() {
    let cfg = ExperimentConfig::default();
    let setup = AgentSetup::new(
        &cfg,
        HybridModel::engine_only(cfg.friction.real, cfg.agent_sim()),
    );
    let (mut s, _) = Session::open(1, Mode::Agent, 9, &cfg, Some(&setup), None).unwrap();
    let summary = run_to_end(&mut s);

    let mut agent = AgentController::new(setup.model.clone(), setup.arx, setup.config.clone());
    let opts = EpisodeOptions {
        episode: 0,
        time_limit: cfg.time_limit_ticks(),
        spin0: cfg.episode.initial_spin,
        noise: cfg.episode.noise,
        exploration: None,
        record_trajectory: false,
    };
    let record = rollout_episode(&cfg.real_sim(), &cfg.friction.real, &mut agent, 9, &opts);
    assert_eq!(summary.solved, record.solved);
    assert_eq!(summary.per_ring_s, per_ring_times(&record));
    assert_eq!(summary.total_s, record.total_s());
}

#[test]
fn human_and_agent_summaries_share_a_schema() {
    let mut cfg = ExperimentConfig::default();
    cfg.episode.time_limit_s = 2.0;
    let setup = AgentSetup::new(
        &cfg,
        HybridModel::engine_only(cfg.friction.real, cfg.agent_sim()),
    );
    let (mut h, _) = Session::open(1, Mode::Human, 4, &cfg, None, None).unwrap();
    let (mut a, _) = Session::open(2, Mode::Agent, 4, &cfg, Some(&setup), None).unwrap();
    let keys = |f: SummaryFrame| {
        let v = serde_json::to_value(ServerFrame::Summary(f)).unwrap();
        let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
        k.sort();
        k
    };
    let (hs, as_) = (run_to_end(&mut h), run_to_end(&mut a));
    assert_eq!(hs.per_ring_s.len(), as_.per_ring_s.len());
    assert_eq!(keys(hs), keys(as_));
    // both worlds started from the same placement
    assert_eq!(h.seed, a.seed);
}

#[test]
fn human_sessions_replay_from_their_log() {
    let cfg = ExperimentConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    {
        let log = maze_core::records::JsonlAppender::open(&path).unwrap();
        let (mut s, _) = Session::open(3, Mode::Human, 2, &cfg, None, Some(log)).unwrap();
        for k in 0..90 {
            if k % 15 == 0 {
                let ux = (k as f64 / 30.0).sin();
                s.handle(ClientFrame::Tilt { ux, uy: 0.4 });
            }
            if k == 60 {
                s.handle(ClientFrame::Reset);
                s.handle_text("garbage");
            }
            s.step();
        }
    }
    let log: Vec<LogRecord> = maze_core::records::read_jsonl(&path).unwrap();
    let frames = logged_frames(&log);
    // opened and initial state, 90 states, 6 tilt acks, the reset ack, one error
    assert_eq!(frames.len(), 2 + 90 + 6 + 1 + 1);
    assert_eq!(replay(&log, &cfg, None).unwrap(), frames);
}
