//! Problem data, noise, and the forward simulators: the state equation in
//! mild form, cost evaluation and the variational equations.

pub mod family;
pub mod field;
pub mod noise;
pub mod problem;
pub mod simulate;
pub mod variation;

pub use family::{BilinearFamily, CoefficientFamily, Jet1, Jet2, LqFamily, LqParams, Tensor3};
pub use field::{AdaptedField, Estimate, FieldShape};
pub use noise::{GaussianStream, NoiseEnsemble};
pub use problem::{Metadata, ProblemSpec};
pub use simulate::{
    evaluate_cost, path_costs, simulate, simulate_state, AffineFeedback, ControlPolicy, FeedbackLaw,
    ProjectedFeedback, Trajectory,
};
pub use variation::{
    expansion_residuals, halving_check, perturbed_control, simulate_first_variation, simulate_second_variation, ExpansionRow,
};
