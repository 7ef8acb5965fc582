//! Procedural head sequences with exact ground truth: template mesh,
//! rasterizer, animation, track sampling, augmentation and file IO.

pub mod augment;
pub mod camera;
pub mod io;
pub mod raster;
pub mod sequence;
pub mod template;

pub use augment::{augment, Affine2, AugmentParams, FrameBundle};
pub use camera::Camera;
pub use io::SequenceData;
pub use raster::{rasterize, render_uvw, Raster};
pub use sequence::{
    generate_sequence, render_frame, sample_track_pairs, sequence_from_poses, texture, Frame, FramePose, MotionParams, Sequence,
    TrackPairs, DEFAULT_TRACK_BUDGET, MAX_TRACKS, MIN_TRACKS,
};
pub use template::{HeadTemplate, Region, LANDMARK_COUNT, REGION_COUNT};
