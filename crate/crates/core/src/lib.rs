//! Closed-loop laboratory for measuring the gap between offline validation
//! loss and closed-loop driving success of end-to-end driving networks.

pub mod tensor;
pub mod zoo;
pub mod frame;
pub mod sim;
pub mod datapipe;
pub mod trainer;
pub mod evalproto;
pub mod analysis;
pub mod gateway;
pub mod demo;
