//! On-disk multi-view scene container.
//!
//! ```text
//! <root>/scene_0000/manifest.json
//! <root>/scene_0000/poses.json
//! <root>/scene_0000/view_0.png ...
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{scale3, PoseRecord};
use crate::imaging::{Image, PosedImage};
use crate::rng;
use crate::synthworld::{self, OrbitConfig, OrbitParams, Splits};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub scene_seed: u64,
    pub num_views: usize,
    pub resolution: (usize, usize),
    pub splits: Splits,
    /// Per-view orbit placement; empty for ingested external data.
    #[serde(default)]
    pub orbit: Vec<OrbitParams>,
    /// World-space shift applied to every camera so the camera centroid sits
    /// at the origin.
    #[serde(default)]
    pub translation: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneData {
    pub manifest: SceneManifest,
    pub views: Vec<PosedImage>,
}

impl SceneData {
    pub fn view(&self, i: usize) -> Result<&PosedImage> {
        self.views
            .get(i)
            .ok_or_else(|| Error::Domain(format!("view {i} out of range ({} views)", self.views.len())))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Interp,
    Extra,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interp" => Ok(Split::Interp),
            "extra" => Ok(Split::Extra),
            other => Err(Error::Usage(format!("unknown split {other:?} (expected interp or extra)"))),
        }
    }
}

impl Splits {
    pub fn targets(&self, split: Split) -> &[usize] {
        match split {
            Split::Interp => &self.interp,
            Split::Extra => &self.extra,
        }
    }
}

/// Render one scene's orbit, normalised so the camera centroid is the origin.
pub fn build_scene(scene_seed: u64, views: usize, resolution: (usize, usize), orbit: &OrbitConfig) -> Result<SceneData> {
    if views == 0 || resolution.0 == 0 || resolution.1 == 0 {
        return Err(Error::Domain(format!("need views > 0 and a non-empty resolution, got {views} views at {resolution:?}")));
    }
    let scene = synthworld::generate_scene(scene_seed)?;
    let params = orbit.sample(views, &mut rng::stream(scene_seed, &[rng::tag::CAMERA]));
    let poses = params.iter().map(|o| orbit.pose(o, resolution)).collect::<Result<Vec<_>>>()?;
    let images = poses
        .iter()
        .map(|p| synthworld::render_view(&scene, p))
        .collect::<Result<Vec<_>>>()?;
    let shift = scale3(synthworld::camera_centroid(&poses), -1.0);
    let views = poses
        .iter()
        .zip(images)
        .map(|(p, image)| PosedImage {
            image,
            pose: p.translated(shift),
        })
        .collect();
    Ok(SceneData {
        manifest: SceneManifest {
            scene_seed,
            num_views: params.len(),
            resolution,
            splits: synthworld::orbit_splits(params.len()),
            orbit: params,
            translation: shift,
        },
        views,
    })
}

pub fn scene_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("scene_{index:04}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

pub fn write_scene(dir: &Path, data: &SceneData) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("manifest.json"), &data.manifest)?;
    let poses: Vec<PoseRecord> = data.views.iter().map(|v| PoseRecord::from_pose(&v.pose)).collect();
    write_json(&dir.join("poses.json"), &poses)?;
    for (i, v) in data.views.iter().enumerate() {
        v.image.save_png(&dir.join(format!("view_{i}.png")))?;
    }
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<SceneData> {
    let manifest: SceneManifest = read_json(&dir.join("manifest.json"))?;
    let poses_path = dir.join("poses.json");
    let poses: Vec<PoseRecord> = read_json(&poses_path)?;
    if poses.len() != manifest.num_views {
        return Err(Error::format(
            &poses_path,
            format!("{} pose records for {} views", poses.len(), manifest.num_views),
        ));
    }
    let mut views = Vec::with_capacity(poses.len());
    for (i, rec) in poses.iter().enumerate() {
        let pose = rec.to_pose()?;
        let path = dir.join(format!("view_{i}.png"));
        let image = Image::load_png(&path)?;
        if (image.width, image.height) != pose.resolution {
            return Err(Error::format(
                &path,
                format!("image is {}x{}, pose expects {:?}", image.width, image.height, pose.resolution),
            ));
        }
        views.push(PosedImage { image, pose });
    }
    Ok(SceneData { manifest, views })
}

/// Dataset-level record written next to the scene directories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub num_scenes: usize,
    pub views_per_scene: usize,
    pub resolution: (usize, usize),
    pub seed: u64,
}

/// Generate and write `n_scenes` scenes under `root`.
pub fn make_dataset(
    root: &Path,
    n_scenes: usize,
    views_per_scene: usize,
    resolution: (usize, usize),
    seed: u64,
    orbit: &OrbitConfig,
) -> Result<DatasetInfo> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for i in 0..n_scenes {
        let scene_seed = rng::derive_seed(seed, &[rng::tag::SCENE, i as u64]);
        let data = build_scene(scene_seed, views_per_scene, resolution, orbit)?;
        write_scene(&scene_dir(root, i), &data)?;
        log::debug!("wrote scene {i} (seed {scene_seed})");
    }
    let info = DatasetInfo {
        num_scenes: n_scenes,
        views_per_scene,
        resolution,
        seed,
    };
    write_json(&root.join("dataset.json"), &info)?;
    Ok(info)
}

/// Load every `scene_*` directory under `root`, in name order.
pub fn load_dataset(root: &Path) -> Result<Vec<SceneData>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(root, e))?;
        let path = e.path();
        if path.is_dir() && e.file_name().to_string_lossy().starts_with("scene_") {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::format(root, "no scene_* directories"));
    }
    dirs.iter().map(|d| load_scene(d)).collect()
}
