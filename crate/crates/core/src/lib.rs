pub mod blend;
pub mod error;
pub mod image;
pub mod inverse;
pub mod codec;
pub mod seed;
pub mod synth;
pub mod model;
pub mod flow;
pub mod metrics;
pub mod sampler;
pub mod bench;
pub mod pipeline;
