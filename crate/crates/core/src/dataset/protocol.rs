//! Cross-view split protocol: pretrain and probe-train on 0 degree renders of
//! training scenes; test on 0, 45 and 90 degree renders of held-out scenes.

use std::collections::HashSet;
use std::path::Path;

use super::io::{clip_file_name, write_manifest, write_vclip, ManifestEntry, MANIFEST_NAME};
use super::render::render_view;
use super::scene::{generate_scene, CLASS_NAMES};
use super::{Split, VideoClip};
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub num_classes: usize,
    pub train_scenes_per_class: usize,
    pub test_scenes_per_class: usize,
    /// Rendered frames per clip (augmentation crops to the model's length).
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_classes: 5,
            train_scenes_per_class: 100,
            test_scenes_per_class: 30,
            frames: 20,
            height: 32,
            width: 32,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > CLASS_NAMES.len() {
            return Err(Error::invalid(format!(
                "data.num_classes must be in 1..={}, got {}",
                CLASS_NAMES.len(),
                self.num_classes
            )));
        }
        if self.train_scenes_per_class == 0 || self.test_scenes_per_class == 0 {
            return Err(Error::invalid(
                "data.train_scenes_per_class and data.test_scenes_per_class must be positive",
            ));
        }
        if self.frames == 0 || self.height < 4 || self.width < 4 {
            return Err(Error::invalid("data.frames must be positive and data.height/width at least 4"));
        }
        Ok(())
    }

    pub fn scene_seed(&self, scene_id: u64) -> u64 {
        seeding::derive(&[self.seed, scene_id])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitName {
    Pretrain,
    ProbeTrain,
    Cvs1,
    Cvs2,
    Cvs3,
}

impl SplitName {
    pub const ALL: [SplitName; 5] = [
        SplitName::Pretrain,
        SplitName::ProbeTrain,
        SplitName::Cvs1,
        SplitName::Cvs2,
        SplitName::Cvs3,
    ];

    pub fn dir(self) -> &'static str {
        match self {
            SplitName::Pretrain => "pretrain",
            SplitName::ProbeTrain => "probe_train",
            SplitName::Cvs1 => "cvs1",
            SplitName::Cvs2 => "cvs2",
            SplitName::Cvs3 => "cvs3",
        }
    }

    /// Test protocols in order with their viewpoints.
    pub fn test_protocols() -> [(SplitName, u32); 3] {
        [(SplitName::Cvs1, 0), (SplitName::Cvs2, 45), (SplitName::Cvs3, 90)]
    }

    pub fn manifest_path(self, root: &Path) -> std::path::PathBuf {
        root.join(self.dir()).join(MANIFEST_NAME)
    }
}

#[derive(Clone, Debug)]
pub struct Protocol {
    pub config: DataConfig,
    pub splits: Vec<(SplitName, Vec<ManifestEntry>)>,
}

/// Errors when a scene id appears on both sides.
pub fn check_disjoint(train: &[ManifestEntry], test: &[ManifestEntry]) -> Result<()> {
    let ids: HashSet<u64> = train.iter().map(|e| e.scene_id).collect();
    if let Some(e) = test.iter().find(|e| ids.contains(&e.scene_id)) {
        return Err(Error::invalid(format!("scene {} appears in both train and test splits", e.scene_id)));
    }
    Ok(())
}

pub fn build_protocol(cfg: &DataConfig) -> Result<Protocol> {
    cfg.validate()?;
    let k = cfg.num_classes as u64;
    let n_train = cfg.train_scenes_per_class as u64 * k;
    let n_test = cfg.test_scenes_per_class as u64 * k;
    let entry = |dir: &str, id: u64, view: u32, split: Split| ManifestEntry {
        clip_path: format!("{dir}/{}", clip_file_name(id, view)),
        class_id: (id % k) as usize,
        viewpoint_deg: view,
        scene_id: id,
        split,
    };
    let pretrain: Vec<_> = (0..n_train).map(|id| entry("pretrain", id, 0, Split::Train)).collect();
    let probe_train = pretrain.clone();
    let mut splits = vec![(SplitName::Pretrain, pretrain), (SplitName::ProbeTrain, probe_train)];
    for (name, view) in SplitName::test_protocols() {
        let rows: Vec<_> = (n_train..n_train + n_test)
            .map(|id| entry(name.dir(), id, view, Split::Test))
            .collect();
        check_disjoint(&splits[0].1, &rows)?;
        splits.push((name, rows));
    }
    Ok(Protocol {
        config: cfg.clone(),
        splits,
    })
}

impl Protocol {
    pub fn split(&self, name: SplitName) -> &[ManifestEntry] {
        &self.splits.iter().find(|(n, _)| *n == name).expect("all splits built").1
    }

    /// Renders the clip an entry refers to.
    pub fn render(&self, e: &ManifestEntry) -> Result<VideoClip> {
        let c = &self.config;
        let scene = generate_scene(e.class_id, c.scene_seed(e.scene_id), c.num_classes)?;
        render_view(&scene, e.viewpoint_deg, [c.frames, c.height, c.width], e.scene_id, e.split)
    }

    pub fn render_split(&self, name: SplitName) -> Result<Vec<VideoClip>> {
        self.split(name).iter().map(|e| self.render(e)).collect()
    }

    /// Writes every clip and manifest under `root`; returns per-split counts.
    pub fn write(&self, root: &Path) -> Result<Vec<(SplitName, usize)>> {
        let mut written = HashSet::new();
        let mut counts = Vec::new();
        for (name, rows) in &self.splits {
            let dir = root.join(name.dir());
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for e in rows {
                if written.insert(e.clip_path.clone()) {
                    write_vclip(&root.join(&e.clip_path), &self.render(e)?)?;
                }
            }
            write_manifest(&dir.join(MANIFEST_NAME), rows)?;
            counts.push((*name, rows.len()));
        }
        Ok(counts)
    }
}
