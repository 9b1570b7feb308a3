pub mod bench;
pub mod broker;
pub mod classifiers;
pub mod collectors;
pub mod dedup;
pub mod geo;
pub mod model;
pub mod pipeline;
pub mod storage;
pub mod synth;
