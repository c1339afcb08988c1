//! Posed image datasets: JSON manifest, PNG images and camera construction.
//!
//! Manifest layout:
//!
//! ```json
//! {
//!   "intrinsics": {"width": 64, "height": 48, "fx": 50.0, "fy": 50.0, "cx": 32.0, "cy": 24.0},
//!   "depth_hint": 4.0,
//!   "frames": [
//!     {"file_path": "images/000.png", "split": "train",
//!      "transform_matrix": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]}
//!   ]
//! }
//! ```
//!
//! `transform_matrix` is camera-to-world with rows listed first; the camera
//! looks down `-z` with `+x` right and `+y` up. Paths are relative to the
//! manifest's directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Pose};

/// Rotation blocks may deviate from orthonormal by this much before a pose is rejected.
pub const POSE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Val,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "val" => Ok(Split::Val),
            other => Err(Error::Input(format!("unknown split '{other}' (train, test or val)"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Val => "val",
        })
    }
}

/// Linear RGB image with values in `[0, 1]`, row-major from the top row.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}×{height} image",
                pixels.len()
            )));
        }
        Ok(RgbImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: [f64; 3]) -> Self {
        RgbImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    /// Rounds to 8 bits per channel, as stored in a PNG.
    pub fn quantized(&self) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            pixels: self
                .pixels
                .iter()
                .map(|p| p.map(|v| to_u8(v) as f64 / 255.0))
                .collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.pixels.iter().flat_map(|p| p.map(to_u8)).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Shape("image buffer size mismatch".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::load(path, format!("cannot write PNG: {e}")))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| Error::load(path, format!("cannot decode image: {e}")))?;
        let rgb = match img {
            image::DynamicImage::ImageRgb8(b) => b,
            image::DynamicImage::ImageRgba8(b) => image::DynamicImage::ImageRgba8(b).to_rgb8(),
            other => {
                return Err(Error::load(
                    path,
                    format!("expected an 8-bit RGB PNG, found {:?}", other.color()),
                ))
            }
        };
        let (w, h) = rgb.dimensions();
        let pixels = rgb
            .pixels()
            .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
            .collect();
        Ok(RgbImage {
            width: w as usize,
            height: h as usize,
            pixels,
        })
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub file_path: String,
    pub transform_matrix: [[f64; 4]; 4],
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub intrinsics: Intrinsics,
    /// Typical distance from the cameras to the scene; sets the MPI near planes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_hint: Option<f64>,
    pub frames: Vec<ManifestFrame>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub file_path: PathBuf,
    pub camera: Camera,
    pub split: Split,
    pub image: Option<RgbImage>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub intrinsics: Intrinsics,
    pub depth_hint: Option<f64>,
    pub frames: Vec<Frame>,
}

pub fn pose_from_rows(rows: &[[f64; 4]; 4], tol: f64) -> Result<Pose> {
    let m = Matrix4::from_fn(|r, c| rows[r][c]);
    let pose = Pose::from_matrix(&m, tol)?;
    Pose::orthonormalized(pose.rotation(), pose.position())
}

pub fn pose_to_rows(pose: &Pose) -> [[f64; 4]; 4] {
    let m = pose.to_matrix();
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

impl SceneDataset {
    /// Reads a manifest and decodes every referenced image.
    pub fn load(path: &Path) -> Result<Self> {
        Self::read(path, true)
    }

    /// Reads a manifest without touching the images, e.g. to render its poses.
    pub fn load_poses(path: &Path) -> Result<Self> {
        Self::read(path, false)
    }

    fn read(path: &Path, with_images: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::load(path, format!("invalid manifest: {e}")))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_manifest(&manifest, base, with_images).map_err(|e| match e {
            Error::Load { .. } | Error::Io { .. } => e,
            other => Error::load(path, other.to_string()),
        })
    }

    pub fn from_manifest(manifest: &Manifest, base: &Path, with_images: bool) -> Result<Self> {
        let k = manifest.intrinsics;
        if let Some(d) = manifest.depth_hint {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Input(format!("depth_hint must be positive, got {d}")));
            }
        }
        let mut frames = Vec::with_capacity(manifest.frames.len());
        for (i, f) in manifest.frames.iter().enumerate() {
            let pose = pose_from_rows(&f.transform_matrix, POSE_TOLERANCE)
                .map_err(|e| Error::Input(format!("frame {i} ({}): {e}", f.file_path)))?;
            let camera = Camera::new(k.width, k.height, k.fx, k.fy, k.cx, k.cy, pose)?;
            let file_path = base.join(&f.file_path);
            let image = if with_images {
                let img = RgbImage::load_png(&file_path)?;
                if img.width != k.width || img.height != k.height {
                    return Err(Error::load(
                        &file_path,
                        format!(
                            "image is {}×{} but the intrinsics say {}×{}",
                            img.width, img.height, k.width, k.height
                        ),
                    ));
                }
                Some(img)
            } else {
                None
            };
            frames.push(Frame {
                file_path,
                camera,
                split: f.split,
                image,
            });
        }
        Ok(SceneDataset {
            intrinsics: k,
            depth_hint: manifest.depth_hint,
            frames,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(move |f| f.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Writes `manifest.json` and one PNG per frame into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let mut frames = Vec::with_capacity(self.frames.len());
        for (i, f) in self.frames.iter().enumerate() {
            let rel = format!("images/{i:03}.png");
            if let Some(img) = &f.image {
                img.save_png(&dir.join(&rel))?;
            }
            frames.push(ManifestFrame {
                file_path: rel,
                transform_matrix: pose_to_rows(&f.camera.cam_to_world),
                split: f.split,
            });
        }
        let manifest = Manifest {
            intrinsics: self.intrinsics,
            depth_hint: self.depth_hint,
            frames,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
