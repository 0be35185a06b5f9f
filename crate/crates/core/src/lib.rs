pub mod ad;
pub mod baseline_lcsvd;
pub mod diffusion;
pub mod experiment;
pub mod gnn;
pub mod mesh;
pub mod metrics;
pub mod sensors;
pub mod synthdata;
