//! Phantoms, the parallel-beam system model, and Poisson data simulation.

pub mod io;
mod phantom;
mod system;

pub use phantom::{make_phantom, Ellipse, PhantomSpec};
pub use system::{
    back_project, build_system_model, forward_project, simulate_counts, GeometryConfig,
    SparseMatrix, SystemModel,
};
