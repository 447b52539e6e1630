//! Session service for live active measurement: one suspended run per
//! session, one pending sample at a time, every accepted operation logged.

pub mod error;
pub mod events;
pub mod http;
pub mod session;
pub mod store;

pub use error::{ServiceError, ServiceResult};
pub use events::{parse_log, read_log, render_log, Event, SessionConfig, UnitSpec};
pub use http::{router, serve, serve_on, AppState};
pub use session::{replay, simulate_log, CreateParams, PendingSample, Session, SessionSummary, Status};
pub use store::{Next, SessionStore};
