use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use maze_core::config::ExperimentConfig;
use maze_core::dynamics::{save_trajectory, TrajectoryRow, CONTROL_DT};
use maze_core::estimation::Generation;
use maze_core::pipeline::{
    calibration_study, evaluate, identify_motor, per_ring_rows, per_ring_table, run_learning,
    stage_dir, stage_label, stage_table, PerRingRow, StageSummary,
};
use maze_core::records::{read_jsonl, write_jsonl};
use maze_core::residual::HybridModel;
use maze_server::{AgentSetup, App, Mode, ServerFrame, Session};

use crate::{Cli, Command, EXIT_FAILURE, EXIT_USAGE};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] maze_core::Error),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = cfg.out_dir.clone();
    match &cli.command {
        Command::Calibrate => calibrate(cli, &cfg, &out),
        Command::Learn => learn(cli, &cfg, &out),
        Command::Eval => eval(cli, &cfg, &out),
        Command::PlayAgent => play_agent(cli, &cfg, &out),
        Command::Serve { address } => serve(cli, &cfg, &out, address.as_deref()),
        Command::Export => export(cli, &out),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| maze_core::Error::io(path, e).into())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| maze_core::Error::io(path, e).into())
}

fn dry_run(what: &str, paths: &[PathBuf]) -> Result<()> {
    println!("dry run: configuration is valid; {what} would write:");
    for p in paths {
        println!("  {}", p.display());
    }
    Ok(())
}

fn calibrate(cli: &Cli, cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let dir = out.join("calibration");
    if cli.dry_run {
        return dry_run("calibrate", &[dir]);
    }
    let study = calibration_study(cfg, cfg.estimation.min_per_ring, cfg.learning.eval_episodes)?;
    create_dir(&dir)?;
    let e = &study.estimation;
    write_text(
        &dir.join("calibration.json"),
        &serde_json::to_string_pretty(&study).map_err(runtime)?,
    )?;
    write_jsonl(dir.join("history.jsonl"), &e.optimizer.history)?;
    write_csv(&dir.join("comparison.csv"), &study.comparison)?;
    let report = format!(
        "mu_initial     {:?}\nmu_calibrated  {:?}\nevaluations    {}\ntrain rmse     {:.4e} -> {:.4e} rad ({} transitions)\nheld-out rmse  {:.4e} -> {:.4e} rad ({} transitions)\n",
        e.mu_init.to_array(),
        e.mu_star.to_array(),
        e.optimizer.evals,
        e.rmse_init,
        e.rmse_star,
        study.train_transitions,
        study.heldout_rmse_default,
        study.heldout_rmse_calibrated,
        study.heldout_transitions,
    );
    write_text(&dir.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn learn(cli: &Cli, cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    if cli.dry_run {
        let mut paths = vec![out.join("manifest.json"), out.join("per_ring.txt")];
        paths.extend((0..=cfg.learning.gp_stages).map(|s| out.join(stage_dir(s))));
        return dry_run("learn", &paths);
    }
    let start = Instant::now();
    let run = run_learning(cfg, |s| {
        eprintln!(
            "{:<12} solved {}/{}  mean {:.2} s  ({:.0} s elapsed)",
            s.label,
            s.solved,
            s.episodes,
            s.mean_total_s,
            start.elapsed().as_secs_f64()
        )
    })?;
    run.write(out)?;
    let summaries = run.summaries();
    print!("{}", stage_table(&summaries));
    println!();
    print!("{}", per_ring_table(&per_ring_rows(&summaries)));
    Ok(())
}

/// Index of the stage named by `label`: a stage label such as `CMA-ES+GP2`,
/// `gp2`, `cmaes`, or the stage number.
fn parse_stage(label: &str, stages: usize) -> Result<usize> {
    let l = label.to_ascii_lowercase().replace(['-', '+', '_'], "");
    let stage = if let Ok(k) = l.parse::<usize>() {
        Some(k)
    } else if l == "cmaes" {
        Some(0)
    } else {
        l.strip_prefix("cmaes")
            .unwrap_or(&l)
            .strip_prefix("gp")
            .and_then(|k| k.parse().ok())
    };
    match stage {
        Some(k) if k <= stages => Ok(k),
        _ => Err(CliError::Usage(format!(
            "unknown stage {label:?}; expected one of {}",
            (0..=stages).map(stage_label).collect::<Vec<_>>().join(", ")
        ))),
    }
}

/// The snapshot selected by `--stage`, or the final model of the run.
fn model_path(cli: &Cli, cfg: &ExperimentConfig, out: &Path) -> Result<(PathBuf, String)> {
    match &cli.stage {
        Some(label) => {
            let k = parse_stage(label, cfg.learning.gp_stages)?;
            Ok((out.join(stage_dir(k)).join("model.json"), stage_dir(k)))
        }
        None => Ok((out.join("model.json"), "final".into())),
    }
}

fn load_model(path: &Path) -> Result<HybridModel> {
    if !path.is_file() {
        return Err(CliError::Runtime(format!(
            "model snapshot {} not found; run `maze learn` first",
            path.display()
        )));
    }
    Ok(HybridModel::load(path)?)
}

fn eval(cli: &Cli, cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (path, name) = model_path(cli, cfg, out)?;
    let dir = out.join(format!("eval-{name}"));
    if cli.dry_run {
        return dry_run("eval", &[dir]);
    }
    let model = load_model(&path)?;
    let motor = identify_motor(cfg)?;
    let records = evaluate(cfg, &model, &motor.arx);
    let label = match &cli.stage {
        Some(l) => stage_label(parse_stage(l, cfg.learning.gp_stages)?),
        None => "final".into(),
    };
    let mut summary = StageSummary::from_records(0, &Default::default(), 0, &records);
    summary.label = label;
    create_dir(&dir)?;
    write_jsonl(dir.join("episodes.jsonl"), &records)?;
    let rows = per_ring_rows(std::slice::from_ref(&summary));
    write_jsonl(dir.join("per_ring.jsonl"), &rows)?;
    let table = per_ring_table(&rows);
    write_text(&dir.join("per_ring.txt"), &table)?;
    println!(
        "{}: solved {}/{}, mean total {:.2} s",
        summary.label, summary.solved, summary.episodes, summary.mean_total_s
    );
    print!("{table}");
    Ok(())
}

fn play_agent(cli: &Cli, cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (path, name) = model_path(cli, cfg, out)?;
    let dir = out.join("play");
    let stem = format!("{name}-seed{}", cfg.seed);
    let csv = dir.join(format!("{stem}.csv"));
    let summary_path = dir.join(format!("{stem}.json"));
    if cli.dry_run {
        return dry_run("play-agent", &[csv, summary_path]);
    }
    let setup = AgentSetup::new(cfg, load_model(&path)?);
    let (mut session, frames) =
        Session::open(0, Mode::Agent, cfg.seed, cfg, Some(&setup), None).map_err(runtime)?;
    let stdout = std::io::stdout();
    let mut live = (!cli.headless).then(|| stdout.lock());
    let mut emit = |frames: &[ServerFrame]| -> Result<()> {
        if let Some(w) = &mut live {
            for f in frames {
                serde_json::to_writer(&mut *w, f).map_err(runtime)?;
                writeln!(w).map_err(runtime)?;
            }
            w.flush().map_err(runtime)?;
        }
        Ok(())
    };
    emit(&frames)?;

    let period = Duration::from_secs_f64(CONTROL_DT);
    let start = Instant::now();
    let mut rows = vec![TrajectoryRow::full(0.0, &session.world().state)];
    let mut summary = None;
    while session.is_running() {
        if !cli.headless {
            // real-time pace: tick k is due at k periods after the start
            let due = start + period * (session.tick() as u32 + 1);
            std::thread::sleep(due.saturating_duration_since(Instant::now()));
        }
        let frames = session.step();
        emit(&frames)?;
        for f in frames {
            match f {
                ServerFrame::Summary(s) => summary = Some(s),
                ServerFrame::Fault { message } => return Err(CliError::Runtime(message)),
                _ => {}
            }
        }
        let w = session.world();
        rows.push(TrajectoryRow::full(w.elapsed_s(), &w.state));
    }
    let summary = summary.unwrap_or_else(|| session.summary());
    create_dir(&dir)?;
    save_trajectory(&csv, &rows)?;
    write_text(
        &summary_path,
        &serde_json::to_string_pretty(&summary).map_err(runtime)?,
    )?;
    eprintln!(
        "solved {} in {:.2} s; trajectory {}",
        summary.solved,
        summary.total_s,
        csv.display()
    );
    Ok(())
}

fn serve(cli: &Cli, cfg: &ExperimentConfig, out: &Path, address: Option<&str>) -> Result<()> {
    let address = address.unwrap_or(&cfg.server.address).to_string();
    let log_dir = out.join(&cfg.server.log_dir);
    let snapshot = match (&cli.stage, &cfg.server.agent_model) {
        (None, Some(p)) => Some(p.clone()),
        _ => {
            let (p, _) = model_path(cli, cfg, out)?;
            (cli.stage.is_some() || p.is_file()).then_some(p)
        }
    };
    if cli.dry_run {
        println!("dry run: configuration is valid; serve would listen on {address}");
        if let Some(p) = &snapshot {
            println!("  agent model {}", p.display());
        }
        return dry_run("serve", &[log_dir]);
    }
    let agent = match &snapshot {
        Some(p) => Some(AgentSetup::new(cfg, load_model(p)?)),
        None => None,
    };
    let app = Arc::new(App::new(cfg.clone(), agent, Some(log_dir)));
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&address)
            .await
            .map_err(|e| CliError::Runtime(format!("cannot listen on {address}: {e}")))?;
        let local = listener.local_addr().map_err(runtime)?;
        eprintln!(
            "serving ws://{local}/ws (agent sessions {})",
            if app.agent.is_some() {
                "enabled"
            } else {
                "disabled"
            }
        );
        maze_server::serve(listener, app).await.map_err(runtime)
    })
}

fn write_csv<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(runtime)?;
    for r in rows {
        w.serialize(r).map_err(runtime)?;
    }
    w.flush().map_err(|e| maze_core::Error::io(path, e).into())
}

#[derive(serde::Serialize)]
struct HistoryRow {
    generation: usize,
    evals: usize,
    f_best: f64,
    f_gen: f64,
    sigma: f64,
}

#[derive(serde::Serialize)]
struct StageRow<'a> {
    stage: &'a str,
    episodes: usize,
    solved: usize,
    mean_total_s: f64,
    std_total_s: f64,
}

fn export(cli: &Cli, out: &Path) -> Result<()> {
    let dir = out.join("export");
    let files = ["per_ring.csv", "stages.csv", "calibration_history.csv"];
    if cli.dry_run {
        return dry_run("export", &files.map(|f| dir.join(f)));
    }
    let per_ring = out.join("per_ring.jsonl");
    if !per_ring.is_file() {
        return Err(CliError::Runtime(format!(
            "{} not found; run `maze learn` first",
            per_ring.display()
        )));
    }
    let rows: Vec<PerRingRow> = read_jsonl(&per_ring)?;
    let stages: Vec<StageSummary> = read_jsonl(out.join("stages.jsonl"))?;
    create_dir(&dir)?;
    write_csv(&dir.join(files[0]), &rows)?;
    let stage_rows: Vec<StageRow> = stages
        .iter()
        .map(|s| StageRow {
            stage: &s.label,
            episodes: s.episodes,
            solved: s.solved,
            mean_total_s: s.mean_total_s,
            std_total_s: s.std_total_s,
        })
        .collect();
    write_csv(&dir.join(files[1]), &stage_rows)?;

    let calibration: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("calibration.json"))
            .map_err(|e| maze_core::Error::io(out.join("calibration.json"), e))?,
    )
    .map_err(runtime)?;
    let history: Vec<Generation> =
        serde_json::from_value(calibration["optimizer"]["history"].clone()).map_err(runtime)?;
    let history: Vec<HistoryRow> = history
        .into_iter()
        .map(|g| HistoryRow {
            generation: g.generation,
            evals: g.evals,
            f_best: g.f_best,
            f_gen: g.f_gen,
            sigma: g.sigma,
        })
        .collect();
    write_csv(&dir.join(files[2]), &history)?;
    for f in files {
        println!("{}", dir.join(f).display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_labels_parse() {
        assert_eq!(parse_stage("CMA-ES", 3).unwrap(), 0);
        assert_eq!(parse_stage("cmaes", 3).unwrap(), 0);
        assert_eq!(parse_stage("CMA-ES+GP2", 3).unwrap(), 2);
        assert_eq!(parse_stage("gp3", 3).unwrap(), 3);
        assert_eq!(parse_stage("1", 3).unwrap(), 1);
        assert!(matches!(parse_stage("gp4", 3), Err(CliError::Usage(_))));
        assert!(matches!(parse_stage("best", 3), Err(CliError::Usage(_))));
    }
}
