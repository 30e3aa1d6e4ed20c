//! Container-aware workflow management: catalogs, abstract workflows,
//! planning, job wrappers, data staging and a discrete-event simulator of
//! container image staging.

pub mod catalog;
pub mod dag;
pub mod planner;
pub mod transfer;
pub mod workflow;
pub mod launcher;
pub mod simulator;
pub mod fixtures;
pub mod cli;
