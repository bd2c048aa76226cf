//! Deterministic simulator of a layered IoT platform.

pub mod app;
pub mod broker;
pub mod device;
pub mod edge;
pub mod gateway;
pub mod kernel;
pub mod orchestration;
pub mod readmodel;
pub mod run;
pub mod scenario;
pub mod sim;
