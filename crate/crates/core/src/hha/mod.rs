//! Depth to HHA conversion.

pub mod camera;
pub mod encode;
pub mod gravity;
pub mod ground;
pub mod normals;

pub use camera::{backproject, DepthImage, Intrinsics, PointCloud};
pub use encode::{
    angle_byte, disparity_byte, disparity_level, encode_frame, encode_hha, height_byte, valid_cloud, validity_mask,
    HhaConfig, HhaImage, HhaSidecar,
};
pub use gravity::{angle_deg, estimate_gravity, infer_gravity, GravityConfig, GravityEstimate, CAMERA_UP};
pub use ground::{estimate_ground, GroundEstimate, MAX_GROUND_DEPTH_M};
pub use normals::{estimate_normals, Normals};
