//! End-to-end layout estimation from view bundles.

use crate::align::{align, canonical_bundles, AlignError, AlignOptions, AlignReport, AlignmentState};
use crate::geom::PoseSE3;
use crate::merge::{merge_views, MergeError, MergeOutput, MergeParams, ViewTransform};
use crate::scene::ViewBundle;
use crate::single_view::{build_partial_layout, G1Error, G1Params, PartialLayout};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("single-view layout of image {image_id}: {source}")]
    SingleView { image_id: usize, source: G1Error },
    #[error("alignment: {0}")]
    Align(#[from] AlignError),
    #[error("merge: {0}")]
    Merge(#[from] MergeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PipelineParams {
    pub g1: G1Params,
    pub merge: MergeParams,
    pub align: AlignOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub partials: Vec<PartialLayout>,
    pub state: AlignmentState,
    pub report: AlignReport,
    pub transforms: Vec<ViewTransform>,
    /// Predicted camera-to-world pose per image id; the world is the frame of
    /// the lowest image id.
    pub camera_poses: BTreeMap<usize, PoseSE3>,
    pub merge: MergeOutput,
}

/// Single-view layouts of every view's first reference bundle, in image-id
/// order.
pub fn partial_layouts(bundles: &[ViewBundle], params: &G1Params) -> Result<Vec<PartialLayout>, PipelineError> {
    let canon: Vec<(usize, usize)> = canonical_bundles(bundles).into_iter().collect();
    canon
        .par_iter()
        .map(|&(image_id, e)| {
            build_partial_layout(&bundles[e], params).map_err(|source| PipelineError::SingleView { image_id, source })
        })
        .collect()
}

/// Per-view world similarity implied by an alignment state.
pub fn view_transforms(bundles: &[ViewBundle], state: &AlignmentState) -> Vec<ViewTransform> {
    canonical_bundles(bundles)
        .into_iter()
        .filter_map(|(image_id, e)| {
            let (scale, pose) = state.bundle_to_world(e, image_id)?;
            Some(ViewTransform { image_id, scale, pose })
        })
        .collect()
}

pub fn run_pipeline(bundles: &[ViewBundle], params: &PipelineParams) -> Result<PipelineOutput, PipelineError> {
    let partials = partial_layouts(bundles, &params.g1)?;
    let (state, report) = align(bundles, &params.align)?;
    let transforms = view_transforms(bundles, &state);
    let camera_poses = canonical_bundles(bundles)
        .into_iter()
        .filter_map(|(v, e)| state.camera_pose(v, e).map(|p| (v, p)))
        .collect();
    let merge = merge_views(&partials, &transforms, &params.merge)?;
    Ok(PipelineOutput {
        partials,
        state,
        report,
        transforms,
        camera_poses,
        merge,
    })
}
