//! Real-time play sessions over a websocket. A client opens a human or agent
//! session on a seeded maze, streams tilt commands in human mode, and
//! receives one state frame per 30 Hz control tick plus a summary with
//! per-ring times when the episode ends. Every frame is logged per session
//! as line-delimited JSON.

pub mod protocol;
pub mod service;
pub mod session;

pub use protocol::{ClientFrame, Mode, ServerFrame, StateFrame, SummaryFrame};
pub use service::{router, serve, App, ServerError};
pub use session::{logged_frames, replay, AgentSetup, LogRecord, Session};
