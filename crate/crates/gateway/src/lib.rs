//! Websocket gateway exposing reflection sessions to chat clients.

pub mod server;
pub mod session;
pub mod wire;

pub use server::{router, serve};
pub use session::{CloseReason, Connection, Gateway, DEFAULT_IDLE_TIMEOUT};
pub use wire::{ErrorCode, LearnerMessage, WireMessage};
