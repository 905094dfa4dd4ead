//! Environments, interventions, experts, and expert datasets.

pub mod cartpole;
pub mod clinical;
mod dataset;
mod expert;
mod intervention;
mod normalize;
pub mod tabular;

pub use clinical::{offline_clinical_dataset, ClinicalConfig};
pub use dataset::{
    cartpole_test_env, cartpole_train_family, generate_dataset, validate_family, ActionCopies, BaseTask, Batch,
    Dataset, DatasetHeader, EnvironmentSpec, Step, Trajectory, Transitions, CARTPOLE_NOISE_SOURCES,
};
pub use expert::{Expert, ScriptedExpert};
pub use intervention::{InterventionSpec, MIN_SAMPLED_FACTOR};
pub use normalize::Normalizer;
pub use tabular::{tabular_mdp, TabularMdp};
