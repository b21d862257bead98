pub mod geom;
pub mod prior;
pub mod sdf;
pub mod render;
pub mod energy;
pub mod scene;
pub mod fit;
pub mod metrics;
pub mod synth;
