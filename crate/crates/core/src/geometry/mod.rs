//! Pose algebra, candidate offset grids and projection of map geometry into
//! the (possibly tilted) BEV plane.

mod candidates;
mod pose;
mod projection;

pub use candidates::{sample_candidate_offsets, CandidateGrid};
pub use pose::{compose, load_poses, parse_poses, relative_offset, save_poses, wrap_yaw, write_poses, Pose6, PoseOffset3};
pub use projection::{
    project_elements, project_endpoint_to_bev, sample_segment, BevProjector, GridSpec, SegmentSampling,
};
