pub mod geom;
pub mod kernels;
pub mod plan;
pub mod sparsela;
pub mod dag;
pub mod inference;
