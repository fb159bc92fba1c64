//! Shipped bilevel problems and the data they run on.

pub mod data;
pub mod hyperclean;
pub mod hyperrepr;
pub mod quadratic;
pub mod ridge;
pub mod synthetic;

pub use data::{ClassificationData, RegressionData};
pub use hyperclean::{hyperclean_problem, HyperCleanSpec};
pub use hyperrepr::{hyperrepr_problem, HyperReprSpec, MetaDataset, MetaProblem};
pub use quadratic::{learned_rate_problem, quadratic_problem, scalar_toy};
pub use ridge::{ridge_problem, RidgeSpec};
