pub mod calibration;
pub mod config;
pub mod datapipe;
pub mod evalprobe;
pub mod heads;
pub mod model;
pub mod seed;
pub mod trainer;
pub mod viewgeom;
