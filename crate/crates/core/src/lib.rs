pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod training;
pub mod variational;

pub use error::{Error, Result};
pub use model::{BayesModel, DrawPlan, Family, ModelSpec};
pub use tensor::{Graph, Tensor, Var};
pub use variational::{InitSpec, IsotropicPrior, MfgPosterior, PsePosterior};
