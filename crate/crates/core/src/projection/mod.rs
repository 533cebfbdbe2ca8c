//! PCA projections around normalization sites and inside attention heads.

mod pca;
mod set;

pub use pca::{
    group_pca, hidden_projection, inject, qk_projection, stream_basis, v_projection, HiddenProjection, QkProjection,
};
pub use set::{HeadProj, LayerProj, ProjTree, ProjectionSet, SiteProj};
