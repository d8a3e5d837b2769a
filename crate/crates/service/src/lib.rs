//! Game backend: a human plays the answerer, a trained questioner asks and
//! guesses, and finished games are rated and logged.

mod api;
pub mod session;
pub mod store;

pub use api::{router, serve, AppState, ServiceConfig};
pub use session::{Model, Rating, Session, SessionError, Status};
