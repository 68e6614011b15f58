pub mod bn;
pub mod bp;
pub mod cli;
pub mod coupling;
pub mod gcn;
pub mod learn;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tape;
pub mod train;
