//! Neuro-adaptive virtual decomposition control of a 7-DoF upper-limb
//! exoskeleton worn by a human arm.
//!
//! The crate covers the spatial algebra, rigid-body and chain dynamics, the
//! actuator clamp, online estimators, the control law with its PD baseline,
//! scenario files and a closed-loop simulator with stability diagnostics.
//!
//! ```
//! use vdc_core::scenario::default_scenario;
//! use vdc_core::sim::{run, SimOptions};
//!
//! let mut config = default_scenario();
//! config.run.duration = 0.02;
//! let log = run(&config, &SimOptions::default()).unwrap();
//! assert_eq!(log.len(), 21);
//! ```

pub mod actuator;
pub mod body;
pub mod chain;
pub mod controller;
pub mod estimator;
pub mod scenario;
pub mod sim;
pub mod spatial;

// Code blocks in the guide run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/spatial.md")]
    mod spatial {}
    #[doc = include_str!("../../../book/src/bodies.md")]
    mod bodies {}
    #[doc = include_str!("../../../book/src/chain.md")]
    mod chain {}
    #[doc = include_str!("../../../book/src/actuator.md")]
    mod actuator {}
    #[doc = include_str!("../../../book/src/estimators.md")]
    mod estimators {}
    #[doc = include_str!("../../../book/src/controller.md")]
    mod controller {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
