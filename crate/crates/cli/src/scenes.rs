//! Scene discovery and loading for commands that consume simulator output.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use ocbev::simulator::{load_scene, Scene};
use rayon::prelude::*;

use crate::context::MANIFEST_FILE;

/// Scene JSON files under `path`, sorted by file name. A file path is
/// returned as is. The run manifest is skipped.
pub fn scene_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        bail!(ocbev::Error::InvalidArgument(format!("scene path {} does not exist", path.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("listing {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.file_name().is_some_and(|n| n != MANIFEST_FILE))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!(ocbev::Error::InvalidArgument(format!("no scene files in {}", path.display())));
    }
    Ok(files)
}

/// Loads every scene under `path` on `pool`, keeping file-name order.
pub fn load_scenes(path: &Path, pool: &rayon::ThreadPool) -> Result<Vec<Scene>> {
    let files = scene_files(path)?;
    let scenes = pool.install(|| {
        files
            .par_iter()
            .map(|f| load_scene(f).with_context(|| format!("loading scene {}", f.display())))
            .collect::<Result<Vec<_>>>()
    })?;
    let first = &scenes[0].spec;
    for (s, f) in scenes.iter().zip(&files).skip(1) {
        if s.spec.rig != first.rig || s.spec.grid_cells != first.grid_cells || s.spec.grid_half_extent != first.grid_half_extent || s.spec.classes.len() != first.classes.len() {
            bail!(ocbev::Error::InvalidArgument(format!(
                "scene {} has a different grid, rig or class count than {}",
                f.display(),
                files[0].display()
            )));
        }
    }
    Ok(scenes)
}

/// Loads scenes only when a path was given.
pub fn load_optional(path: Option<&Path>, pool: &rayon::ThreadPool) -> Result<Vec<Scene>> {
    path.map_or(Ok(Vec::new()), |p| load_scenes(p, pool))
}
