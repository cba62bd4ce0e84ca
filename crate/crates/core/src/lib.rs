pub mod error;
pub mod tape;
pub mod tensor;
pub mod gradcheck;
pub mod schema;
pub mod vocab;
pub mod instruction;
pub mod codec;
pub mod params;
pub mod model;
pub mod metrics;
pub mod optim;
pub mod gate;
pub mod synth;
pub mod scheduler;
pub mod trainer;
pub mod checkpoint;
pub mod config;
pub mod pipeline;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/codec.md")]
    struct Codec;
    #[doc = include_str!("../../../book/src/model.md")]
    struct Model;
    #[doc = include_str!("../../../book/src/gate.md")]
    struct Gate;
    #[doc = include_str!("../../../book/src/scheduler.md")]
    struct Scheduler;
    #[doc = include_str!("../../../book/src/metrics.md")]
    struct Metrics;
}
