//! Minimal numeric stack: tape autodiff, parameter storage, optimizer.

pub mod optim;
pub mod params;
pub mod tape;

pub use optim::{cosine_lr, AdamW};
pub use params::{normal_init, xavier, ParamBinding, ParamStore};
pub use tape::{Tape, Var};
