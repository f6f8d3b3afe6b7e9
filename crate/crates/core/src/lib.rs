//! Task-space sensor observability for articulated serial robots.
//!
//! Distributed single-axis sensors (load cells, joint torque sensors, ...)
//! are mapped into the end-effector task frame to tell, at any joint
//! configuration, which task axes the robot can measure at all.

pub mod config;
pub mod control;
pub mod error;
pub mod kinematics;
pub mod observability;
pub mod scenarios;
pub mod sensing;
pub mod trajectory;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/kinematics.md")]
    mod kinematics {}
    #[doc = include_str!("../../../book/src/sensing.md")]
    mod sensing {}
    #[doc = include_str!("../../../book/src/observability.md")]
    mod observability {}
    #[doc = include_str!("../../../book/src/control.md")]
    mod control {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
