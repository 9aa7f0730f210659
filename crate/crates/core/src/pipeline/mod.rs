//! Episodes against the stand-in real system and the staged learning run.

mod agent;
mod calibration;
mod episode;
mod learning;
mod world;

pub use agent::{
    transit_action, transit_ready, AgentConfig, AgentController, ControlMode, Decision,
};
pub use calibration::{
    calibration_study, identify_motor, open_loop_comparison, random_policy_data,
    rings_with_at_least, CalibrationStudy, ComparisonRow, MotorReport,
};
pub use episode::{
    per_ring_times, rollout_episode, EpisodeOptions, EpisodeRecord, Exploration, TickLog,
};
pub use learning::{
    eval_seed, evaluate, mean_std, per_ring_rows, per_ring_table, run_episodes, run_learning,
    stage_dir, stage_label, stage_table, train_seed, LearningRun, PerRingRow, StageResult,
    StageSummary,
};
pub use world::{random_reset, random_start_in, ticks_to_seconds, EpisodeStatus, World};
