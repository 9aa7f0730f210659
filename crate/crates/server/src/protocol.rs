//! Wire frames exchanged with clients. Every frame is a JSON object tagged by
//! its `type` field.

use maze_core::dynamics::FullState;
use maze_core::pipeline::EpisodeStatus;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Human,
    Agent,
}

/// Frames sent by a client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientFrame {
    Open {
        mode: Mode,
        seed: u64,
    },
    /// Platform deflection in `[-1, 1]²`, held until replaced.
    Tilt {
        ux: f64,
        uy: f64,
    },
    Reset,
}

impl ClientFrame {
    pub fn parse(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| format!("malformed frame: {e}"))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ClientFrame::Open { .. } => "open",
            ClientFrame::Tilt { .. } => "tilt",
            ClientFrame::Reset => "reset",
        }
    }
}

/// Frames sent by the server.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerFrame {
    Opened {
        session: u64,
        mode: Mode,
        seed: u64,
    },
    State(StateFrame),
    Summary(SummaryFrame),
    /// `tick` is the tick whose step first uses the command, so its effect
    /// shows in the state frame numbered `tick + 1`.
    Ack {
        tick: u64,
        command: String,
        clamped: bool,
    },
    Error {
        message: String,
    },
    /// The simulation failed; the session is closed.
    Fault {
        message: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    /// Session-wide frame counter; it keeps counting across resets.
    pub tick: u64,
    /// Time since the start of the current episode.
    pub t_s: f64,
    pub beta: f64,
    pub gamma: f64,
    pub theta: f64,
    pub theta_dot: f64,
    /// Ring index, 0 for the outermost; the ring count means the goal.
    pub ring: usize,
    pub x: f64,
    pub y: f64,
    pub status: EpisodeStatus,
}

impl StateFrame {
    pub fn new(tick: u64, t_s: f64, s: &FullState, status: EpisodeStatus) -> Self {
        StateFrame {
            tick,
            t_s,
            beta: s.beta,
            gamma: s.gamma,
            theta: s.theta,
            theta_dot: s.theta_dot,
            ring: s.ring.0,
            x: s.rho * s.theta.cos(),
            y: s.rho * s.theta.sin(),
            status,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryFrame {
    /// Seconds per ring, outermost first.
    pub per_ring_s: Vec<f64>,
    pub solved: bool,
    pub total_s: f64,
}
