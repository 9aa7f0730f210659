//! One play session: a seeded world driven either by held client tilts or by
//! the agent, advanced one control tick at a time. Sessions know nothing
//! about the network, so they can be driven and replayed directly.

use maze_core::config::ExperimentConfig;
use maze_core::dynamics::{inject_noise_with, observe, Action, NoiseSigma};
use maze_core::motor::ArxModel;
use maze_core::pipeline::{AgentConfig, AgentController, EpisodeStatus, World};
use maze_core::records::JsonlAppender;
use maze_core::residual::HybridModel;
use maze_core::rng::{derive_seed, stream};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::protocol::{ClientFrame, Mode, ServerFrame, StateFrame, SummaryFrame};

/// Everything needed to build the controller of an agent session.
#[derive(Clone, Debug)]
pub struct AgentSetup {
    pub model: HybridModel,
    pub arx: ArxModel,
    pub config: AgentConfig,
    /// Observation noise seen by the agent.
    pub noise: NoiseSigma,
}

impl AgentSetup {
    /// Agent running `model` with the experiment's servo and controller settings.
    pub fn new(cfg: &ExperimentConfig, model: HybridModel) -> Self {
        AgentSetup {
            model,
            arx: cfg.servo.lag_arx(maze_core::dynamics::CONTROL_DT),
            config: AgentConfig::from(cfg),
            noise: cfg.episode.noise,
        }
    }
}

struct Agent {
    controller: AgentController,
    noise: NoiseSigma,
    rng: ChaCha8Rng,
}

/// One line of a session log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dir", rename_all = "snake_case")]
pub enum LogRecord {
    /// A client frame, received before the step of `tick`.
    In {
        tick: u64,
        frame: ClientFrame,
    },
    /// Text that did not parse as a client frame.
    Malformed {
        tick: u64,
        text: String,
    },
    Out {
        tick: u64,
        frame: ServerFrame,
    },
}

pub struct Session {
    pub id: u64,
    pub mode: Mode,
    pub seed: u64,
    world: World,
    agent: Option<Agent>,
    held: Action,
    /// Frame counter; it does not restart on reset.
    tick: u64,
    resets: u64,
    closed: bool,
    log: Option<JsonlAppender>,
}

impl Session {
    /// Opens a session and returns it with its `opened` and initial state
    /// frames. Agent sessions need an agent setup.
    pub fn open(
        id: u64,
        mode: Mode,
        seed: u64,
        cfg: &ExperimentConfig,
        agent: Option<&AgentSetup>,
        log: Option<JsonlAppender>,
    ) -> Result<(Self, Vec<ServerFrame>), String> {
        let agent = match (mode, agent) {
            (Mode::Human, _) => None,
            (Mode::Agent, Some(a)) => Some(Agent {
                controller: AgentController::new(a.model.clone(), a.arx, a.config.clone()),
                noise: a.noise,
                rng: stream(seed, &[1]),
            }),
            (Mode::Agent, None) => return Err("no agent model is loaded".into()),
        };
        let world = World::new(
            cfg.real_sim(),
            cfg.friction.real,
            cfg.time_limit_ticks(),
            cfg.episode.initial_spin,
            seed,
        );
        let mut s = Session {
            id,
            mode,
            seed,
            world,
            agent,
            held: Action::default(),
            tick: 0,
            resets: 0,
            closed: false,
            log,
        };
        s.log_in(&ClientFrame::Open { mode, seed });
        let frames = vec![
            ServerFrame::Opened {
                session: id,
                mode,
                seed,
            },
            s.state_frame(),
        ];
        s.log_out(&frames);
        Ok((s, frames))
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    /// True while the episode is running and the session has not faulted.
    pub fn is_running(&self) -> bool {
        !self.closed && self.world.status == EpisodeStatus::Running
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Applies a client frame at the next tick boundary and returns the
    /// acknowledgment or error.
    pub fn handle(&mut self, frame: ClientFrame) -> Vec<ServerFrame> {
        self.log_in(&frame);
        let reply = self.reply(&frame);
        self.log_out(std::slice::from_ref(&reply));
        vec![reply]
    }

    /// Parses and handles a text frame. A malformed frame gets an error and
    /// leaves the session untouched.
    pub fn handle_text(&mut self, text: &str) -> Vec<ServerFrame> {
        match ClientFrame::parse(text) {
            Ok(frame) => self.handle(frame),
            Err(message) => {
                let record = LogRecord::Malformed {
                    tick: self.tick,
                    text: text.to_string(),
                };
                self.write_log(&record);
                let reply = ServerFrame::Error { message };
                self.log_out(std::slice::from_ref(&reply));
                vec![reply]
            }
        }
    }

    fn reply(&mut self, frame: &ClientFrame) -> ServerFrame {
        if self.closed {
            return ServerFrame::Error {
                message: "session is closed".into(),
            };
        }
        let ack = |tick, frame: &ClientFrame, clamped| ServerFrame::Ack {
            tick,
            command: frame.kind().into(),
            clamped,
        };
        match *frame {
            ClientFrame::Open { .. } => ServerFrame::Error {
                message: format!("session {} is already open", self.id),
            },
            ClientFrame::Tilt { .. } if self.mode == Mode::Agent => ServerFrame::Error {
                message: "tilt rejected: the agent controls this session".into(),
            },
            ClientFrame::Tilt { ux, uy } => {
                if !(ux.is_finite() && uy.is_finite()) {
                    return ServerFrame::Error {
                        message: format!("tilt must be finite, got ({ux}, {uy})"),
                    };
                }
                let raw = Action::new(ux, uy);
                self.held = raw.clamped();
                ack(self.tick, frame, self.held != raw)
            }
            ClientFrame::Reset => {
                self.resets += 1;
                let seed = derive_seed(self.seed, &[self.resets]);
                self.world.reset(seed);
                self.held = Action::default();
                if let Some(a) = &mut self.agent {
                    a.controller.reset();
                    a.rng = stream(seed, &[1]);
                }
                ack(self.tick, frame, false)
            }
        }
    }

    /// Advances one control tick. Returns the state frame, followed by the
    /// summary when the episode ends, or a fault if the simulation fails.
    /// A finished or closed session does not tick.
    pub fn step(&mut self) -> Vec<ServerFrame> {
        if !self.is_running() {
            return Vec::new();
        }
        let frames = match self.command().and_then(|u| {
            self.world
                .step(u)
                .map_err(|e| format!("simulation failed: {e}"))
        }) {
            Ok(()) => {
                self.tick += 1;
                let mut frames = vec![self.state_frame()];
                if self.world.status != EpisodeStatus::Running {
                    frames.push(ServerFrame::Summary(self.summary()));
                }
                frames
            }
            Err(message) => {
                self.closed = true;
                vec![ServerFrame::Fault { message }]
            }
        };
        self.log_out(&frames);
        frames
    }

    fn command(&mut self) -> Result<Action, String> {
        let Some(a) = &mut self.agent else {
            return Ok(self.held);
        };
        let obs = inject_noise_with(&observe(&self.world.state), &a.noise, &mut a.rng);
        let decision = a
            .controller
            .act(&obs)
            .map_err(|e| format!("controller failed: {e}"))?;
        a.controller
            .command(&obs, decision.desired.clamped())
            .map_err(|e| format!("inverse motor model failed: {e}"))
    }

    pub fn state_frame(&self) -> ServerFrame {
        ServerFrame::State(StateFrame::new(
            self.tick,
            self.world.elapsed_s(),
            &self.world.state,
            self.world.status,
        ))
    }

    pub fn summary(&self) -> SummaryFrame {
        SummaryFrame {
            per_ring_s: self.world.per_ring_seconds(),
            solved: self.world.status == EpisodeStatus::Solved,
            total_s: self.world.elapsed_s(),
        }
    }

    fn log_in(&mut self, frame: &ClientFrame) {
        let record = LogRecord::In {
            tick: self.tick,
            frame: frame.clone(),
        };
        self.write_log(&record);
    }

    fn log_out(&mut self, frames: &[ServerFrame]) {
        for f in frames {
            let record = LogRecord::Out {
                tick: self.tick,
                frame: f.clone(),
            };
            self.write_log(&record);
        }
    }

    fn write_log(&mut self, record: &LogRecord) {
        if let Some(log) = &mut self.log {
            if let Err(e) = log.append(record) {
                tracing::warn!(session = self.id, "session log disabled: {e}");
                self.log = None;
            }
        }
    }

    /// Flushes the session log.
    pub fn flush_log(&mut self) {
        if let Some(log) = &mut self.log {
            if let Err(e) = log.flush() {
                tracing::warn!(session = self.id, "flushing session log failed: {e}");
            }
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.flush_log();
    }
}

/// Re-runs a session from its log and returns the server frames it
/// produces, which equal the logged ones for an intact log. Client frames
/// are applied at their logged ticks.
pub fn replay(
    records: &[LogRecord],
    cfg: &ExperimentConfig,
    agent: Option<&AgentSetup>,
) -> Result<Vec<ServerFrame>, String> {
    let mut session: Option<Session> = None;
    let mut out = Vec::new();
    for r in records {
        match r {
            LogRecord::In {
                frame: ClientFrame::Open { mode, seed },
                ..
            } if session.is_none() => {
                let (s, frames) = Session::open(0, *mode, *seed, cfg, agent, None)?;
                out.extend(frames.into_iter().map(|f| match f {
                    ServerFrame::Opened { mode, seed, .. } => ServerFrame::Opened {
                        session: opened_id(records),
                        mode,
                        seed,
                    },
                    f => f,
                }));
                session = Some(s);
            }
            LogRecord::In { frame, .. } => {
                let s = session
                    .as_mut()
                    .ok_or("log starts before the session opens")?;
                out.extend(s.handle(frame.clone()));
            }
            LogRecord::Malformed { text, .. } => {
                let s = session
                    .as_mut()
                    .ok_or("log starts before the session opens")?;
                out.extend(s.handle_text(text));
            }
            LogRecord::Out {
                frame: ServerFrame::State(state),
                ..
            } => {
                let s = session
                    .as_mut()
                    .ok_or("log starts before the session opens")?;
                while s.tick() < state.tick && s.is_running() {
                    out.extend(s.step());
                }
            }
            LogRecord::Out {
                frame: ServerFrame::Fault { .. },
                ..
            } => {
                if let Some(s) = session.as_mut() {
                    out.extend(s.step());
                }
            }
            LogRecord::Out { .. } => {}
        }
    }
    Ok(out)
}

fn opened_id(records: &[LogRecord]) -> u64 {
    records
        .iter()
        .find_map(|r| match r {
            LogRecord::Out {
                frame: ServerFrame::Opened { session, .. },
                ..
            } => Some(*session),
            _ => None,
        })
        .unwrap_or(0)
}

/// Server frames of a log, in order.
pub fn logged_frames(records: &[LogRecord]) -> Vec<ServerFrame> {
    records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Out { frame, .. } => Some(frame.clone()),
            LogRecord::In { .. } | LogRecord::Malformed { .. } => None,
        })
        .collect()
}
