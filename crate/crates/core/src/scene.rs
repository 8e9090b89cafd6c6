//! In-memory scene bundle: everything needed to distill and solve one target
//! view.

use crate::ensemble::TeacherHypothesis;
use crate::error::{ensure_dims, Error, Result};
use crate::geometry::{CameraIntrinsics, RigidPose};
use crate::grid::{DepthGrid, ImageGrid};

/// An adjacent view: its image and the pose taking target-camera
/// coordinates into this view's camera.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: ImageGrid,
    pub pose: RigidPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub intrinsics: CameraIntrinsics,
    pub target: ImageGrid,
    pub views: Vec<View>,
    pub sparse: DepthGrid,
    pub ground_truth: Option<DepthGrid>,
    pub teachers: Vec<TeacherHypothesis>,
}

impl SceneBundle {
    pub fn dims(&self) -> (usize, usize) {
        self.target.dims()
    }

    /// Checks that every grid matches the camera and that teachers are dense.
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let dims = self.intrinsics.dims();
        ensure_dims(dims, self.target.dims())?;
        if self.views.is_empty() {
            return Err(Error::invalid("bundle has no adjacent views"));
        }
        for view in &self.views {
            ensure_dims(dims, view.image.dims())?;
            if view.image.channels() != self.target.channels() {
                return Err(Error::invalid("view channel count differs from target"));
            }
        }
        ensure_dims(dims, self.sparse.dims())?;
        if let Some(gt) = &self.ground_truth {
            ensure_dims(dims, gt.dims())?;
        }
        for t in &self.teachers {
            ensure_dims(dims, t.depth.dims())?;
            if t.depth.data().iter().any(|&d| !(d > 0.0)) {
                return Err(Error::invalid(format!(
                    "teacher {} has non-positive depth",
                    t.id
                )));
            }
        }
        Ok(())
    }

    pub fn poses(&self) -> impl Iterator<Item = &RigidPose> {
        self.views.iter().map(|v| &v.pose)
    }
}
