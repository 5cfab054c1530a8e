//! Cameras, rays and analytic scenes used both as ground truth and as the
//! edit target.

mod camera;
mod scene;

pub use camera::{camera_ring, is_rotation, ring_camera, Camera, Mat3, Ray, Vec3};
pub use scene::{
    axis_angle, density_profile, random_points, silhouette_mask, EditSpec, FourierFeatures, Mask,
    Primitive, RigidTransform, Shape, SyntheticScene, SILHOUETTE_SAMPLES,
};
