//! Coordinated atomic actions: definitions, the instance manager and the
//! concurrency classifier.

pub mod classify;
pub mod def;
pub mod instance;

pub use classify::{classify_concurrency, Concurrency};
pub use def::{AcceptanceTest, CAActionDef, CmpOp, DefError, Expr, Library, Mode, Role, Step};
pub use instance::{
    AbortCause, AbortReport, ActionManager, CAActionInstance, EnterError, InstanceId, InstanceStatus, ThreadId,
};
