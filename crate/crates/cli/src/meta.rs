//! Frame metadata JSON: one schema for dataset frames, reconstruction
//! inputs, and render track files.

use gsaf_core::avatar::{Camera, ExpressionPose};
use gsaf_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraMeta {
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
    /// World-to-camera quaternion [w,x,y,z].
    pub rotation: [f32; 4],
    pub translation: [f32; 3],
    pub width: usize,
    pub height: usize,
    pub near: f32,
    pub far: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameMeta {
    pub camera: CameraMeta,
    pub exp: Vec<f32>,
    pub joint_rotations: Vec<[f32; 4]>,
    pub translation: [f32; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<Vec<[f32; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
}

impl FrameMeta {
    pub fn from_core(cam: &Camera<f32>, ep: &ExpressionPose<f32>, landmarks: Option<&[[f32; 2]]>) -> Self {
        FrameMeta {
            camera: CameraMeta {
                fx: cam.fx,
                fy: cam.fy,
                cx: cam.cx,
                cy: cam.cy,
                rotation: cam.rotation,
                translation: cam.translation,
                width: cam.width,
                height: cam.height,
                near: cam.near,
                far: cam.far,
            },
            exp: ep.exp.clone(),
            joint_rotations: ep.joint_rotations.clone(),
            translation: ep.translation,
            landmarks: landmarks.map(|l| l.to_vec()),
            mode: None,
        }
    }

    pub fn camera(&self) -> Camera<f32> {
        Camera {
            fx: self.camera.fx,
            fy: self.camera.fy,
            cx: self.camera.cx,
            cy: self.camera.cy,
            rotation: self.camera.rotation,
            translation: self.camera.translation,
            width: self.camera.width,
            height: self.camera.height,
            near: self.camera.near,
            far: self.camera.far,
        }
    }

    pub fn expression_pose(&self) -> ExpressionPose<f32> {
        ExpressionPose {
            exp: self.exp.clone(),
            joint_rotations: self.joint_rotations.clone(),
            translation: self.translation,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(path.display(), format!("frame metadata: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        gsaf_core::formats::atomic_write(
            path,
            &serde_json::to_vec_pretty(self).expect("metadata serializes"),
        )?;
        Ok(())
    }
}

/// Parse a JSON-lines track file (one FrameMeta per line). Malformed lines
/// report their 1-based line number.
pub fn load_track(path: &Path) -> Result<Vec<FrameMeta>> {
    let text = std::fs::read_to_string(path)?;
    let mut frames = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let meta: FrameMeta = serde_json::from_str(line).map_err(|e| {
            Error::format(path.display(), format!("line {}: {e}", i + 1))
        })?;
        frames.push(meta);
    }
    if frames.is_empty() {
        return Err(Error::contract("track", "no frames in track file"));
    }
    Ok(frames)
}
