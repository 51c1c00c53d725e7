//! Coordinate network `(x, t) -> (psi, u, p)` with hand-written reverse
//! mode and finite-difference spacetime derivatives.

mod checkpoint;
mod derivatives;
mod model;
mod sampler;

pub use checkpoint::{BlobEntry, Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC};
pub use derivatives::{derivatives_from_stencil, spacetime_derivatives, stencil_points, Derivatives, SpacetimeField, STENCIL};
pub use model::{
    init_parameters, Architecture, FieldModel, FieldOutput, ForwardCache, GradientTape, LayoutEntry, OUTPUTS,
};
pub use sampler::ModelSampler;
