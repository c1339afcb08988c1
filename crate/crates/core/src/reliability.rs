//! Per-voxel reliability: cross-MPI reprojection of sample points, softmax
//! confidence, and the reverse pass into the logit grids.

use crate::error::Result;
use crate::geometry::Vec3;
use crate::grids::Trilinear;
use crate::model::MpiField;
use crate::optim::ParamStore;

/// Logits of one sample under every participating MPI.
#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilitySet {
    /// Position of the owning MPI inside `members`.
    pub owner: usize,
    /// Indices of the participating MPIs.
    pub members: Vec<usize>,
    pub logits: Vec<f64>,
    pub stencils: Vec<Trilinear>,
}

impl ReliabilitySet {
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

/// Collects the logits of a sample owned by MPI `owner`.
///
/// `ndc` is the sample's position in the owner's NDC cube. `(x, w)` is the same
/// point in homogeneous world coordinates, with `w = 0` for points at infinity.
/// Every other MPI is queried at the border-clamped reprojection of that point.
pub fn gather_logits(
    mpis: &[MpiField],
    store: &ParamStore,
    members: &[usize],
    owner: usize,
    ndc: &Vec3,
    x: &Vec3,
    w: f64,
) -> ReliabilitySet {
    let mut logits = Vec::with_capacity(members.len());
    let mut stencils = Vec::with_capacity(members.len());
    let mut owner_pos = 0;
    for (k, &j) in members.iter().enumerate() {
        let mpi = &mpis[j];
        let q = if j == owner {
            owner_pos = k;
            ndc.map(|c| c.clamp(-1.0, 1.0))
        } else {
            mpi.frustum.project_homogeneous_clamped(x, w)
        };
        let stencil = mpi.reliability_layout.locate(&q);
        let values = store.values(mpi.reliability);
        logits.push(
            stencil
                .offsets
                .iter()
                .zip(&stencil.weights)
                .map(|(&i, &wt)| wt * values[i])
                .sum(),
        );
        stencils.push(stencil);
    }
    debug_assert!(members.contains(&owner));
    ReliabilitySet {
        owner: owner_pos,
        members: members.to_vec(),
        logits,
        stencils,
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Blend weight of the owning MPI.
pub fn softmax_confidence(set: &ReliabilitySet) -> f64 {
    softmax(&set.logits)[set.owner]
}

/// Gradient of the owner's weight with respect to each logit:
/// `∂P_i/∂ℛ_j = P_i (δ_ij - P_j)`.
pub fn confidence_logit_grads(set: &ReliabilitySet, upstream: f64) -> Vec<f64> {
    let p = softmax(&set.logits);
    let pi = p[set.owner];
    p.iter()
        .enumerate()
        .map(|(j, &pj)| upstream * pi * ((j == set.owner) as u8 as f64 - pj))
        .collect()
}

/// Chains `dL/dP` through the softmax and interpolation into every touched grid.
pub fn reliability_backward(
    mpis: &[MpiField],
    store: &mut ParamStore,
    set: &ReliabilitySet,
    upstream: f64,
) -> Result<()> {
    if upstream == 0.0 {
        return Ok(());
    }
    for ((&j, stencil), g) in set
        .members
        .iter()
        .zip(&set.stencils)
        .zip(confidence_logit_grads(set, upstream))
    {
        let mpi = &mpis[j];
        mpi.reliability_layout
            .grid
            .scatter(store.grad_mut(mpi.reliability), stencil, &[g])?;
    }
    Ok(())
}
