pub mod baseline;
pub mod controller;
pub mod expert;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod network;
pub mod simulator;
