//! On-disk multi-view, multi-pose dataset.
//!
//! ```text
//! <dir>/template.json   skinned template
//! <dir>/cameras.json    one camera per frame
//! <dir>/poses.json      one pose per frame
//! <dir>/split.json      {"train": [...], "heldout": [...]}
//! <dir>/frames/NNNN.png RGB
//! <dir>/masks/NNNN.png  foreground mask
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::articulation::PoseParams;
use crate::error::{Error, Result};
use crate::render::{Camera, Image};
use crate::template::SkinnedTemplate;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: Image,
    pub mask: Image,
    pub camera: Camera,
    pub pose: PoseParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub template: SkinnedTemplate,
    pub frames: Vec<Frame>,
    pub split: Split,
}

fn frame_name(i: usize) -> String {
    format!("{i:04}.png")
}

impl Dataset {
    pub fn train_frames(&self) -> impl Iterator<Item = &Frame> {
        self.split.train.iter().map(|&i| &self.frames[i])
    }

    pub fn train_poses(&self) -> Vec<PoseParams> {
        self.train_frames().map(|f| f.pose.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if self.split.train.is_empty() {
            return Err(Error::Dataset("split has no training frames".into()));
        }
        if let Some(bad) = self
            .split
            .train
            .iter()
            .chain(&self.split.heldout)
            .find(|&&i| i >= n)
        {
            return Err(Error::Dataset(format!(
                "split references frame {bad} of {n}"
            )));
        }
        let joints = self.template.num_joints();
        for (i, f) in self.frames.iter().enumerate() {
            if f.image.channels != 3 || f.mask.channels != 1 {
                return Err(Error::Dataset(format!(
                    "frame {i}: expected RGB image and 1-channel mask"
                )));
            }
            if (f.image.width, f.image.height) != (f.camera.width, f.camera.height)
                || (f.mask.width, f.mask.height) != (f.camera.width, f.camera.height)
            {
                return Err(Error::Dataset(format!(
                    "frame {i}: image size disagrees with camera"
                )));
            }
            if f.pose.num_joints() != joints {
                return Err(Error::Dataset(format!(
                    "frame {i}: pose has {} joints, template {joints}",
                    f.pose.num_joints()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("frames"))?;
        fs::create_dir_all(dir.join("masks"))?;
        self.template.save(&dir.join("template.json"))?;
        let cams: Vec<&Camera> = self.frames.iter().map(|f| &f.camera).collect();
        fs::write(
            dir.join("cameras.json"),
            serde_json::to_string_pretty(&cams)?,
        )?;
        let poses: Vec<&PoseParams> = self.frames.iter().map(|f| &f.pose).collect();
        fs::write(
            dir.join("poses.json"),
            serde_json::to_string_pretty(&poses)?,
        )?;
        fs::write(
            dir.join("split.json"),
            serde_json::to_string_pretty(&self.split)?,
        )?;
        for (i, f) in self.frames.iter().enumerate() {
            f.image.save_png(&dir.join("frames").join(frame_name(i)))?;
            f.mask.save_png(&dir.join("masks").join(frame_name(i)))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            fs::read_to_string(dir.join(name))
                .map_err(|e| Error::Dataset(format!("{}: {e}", dir.join(name).display())))
        };
        let template = SkinnedTemplate::from_json_str(&read("template.json")?)?;
        let cams: Vec<Camera> = serde_json::from_str(&read("cameras.json")?)?;
        let poses: Vec<PoseParams> = serde_json::from_str(&read("poses.json")?)?;
        let split: Split = serde_json::from_str(&read("split.json")?)?;
        if cams.len() != poses.len() {
            return Err(Error::Dataset(format!(
                "{} cameras but {} poses",
                cams.len(),
                poses.len()
            )));
        }
        let frames = cams
            .into_iter()
            .zip(poses)
            .enumerate()
            .map(|(i, (camera, pose))| {
                Ok(Frame {
                    image: Image::load_png(&dir.join("frames").join(frame_name(i)), 3)?,
                    mask: Image::load_png(&dir.join("masks").join(frame_name(i)), 1)?,
                    camera,
                    pose,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Self {
            template,
            frames,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }
}
