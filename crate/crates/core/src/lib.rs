//! Contrastive learning with a learnable dissimilarity: synthetic latent
//! data, encoders and scalar networks, contrastive losses, training,
//! identifiability metrics and closed-form optimality oracles.

pub mod diffmath;
pub mod latentspaces;
pub mod losses;
pub mod metrics;
pub mod mixer;
pub mod netmodels;
pub mod oracle;
pub mod trainer;
