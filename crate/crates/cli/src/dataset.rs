//! On-disk datasets: a directory holding `dataset.jsonl` plus the files its entries point to.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use deepssm_core::shape::{read_correspondences, write_particles};
use deepssm_core::synthbench::{Label, SampleParams};
use deepssm_core::volume::{read_volume, sidecar_path, write_volume};
use deepssm_core::{CorrespondenceSet, Volume};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "dataset.jsonl";

/// One sample; paths are relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume: Option<String>,
    pub particles: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    /// Source sample of an augmented pair and the shape-model scores it was drawn at.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    /// Generating parameters of synthetic samples, used for surface distances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<SampleParams>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<Entry>,
}

impl Dataset {
    pub fn load(root: &Path) -> anyhow::Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("cannot read dataset manifest {}", path.display()))?;
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
            .collect::<anyhow::Result<Vec<Entry>>>()?;
        if entries.is_empty() {
            bail!("dataset {} is empty", root.display());
        }
        Ok(Self { root: root.to_path_buf(), entries })
    }

    pub fn path(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn shape(&self, e: &Entry) -> anyhow::Result<CorrespondenceSet> {
        let mut c = read_correspondences(&self.path(&e.particles))?;
        c.sample_id = e.id.clone();
        Ok(c)
    }

    pub fn shapes(&self) -> anyhow::Result<Vec<CorrespondenceSet>> {
        self.entries.iter().map(|e| self.shape(e)).collect()
    }

    pub fn volume(&self, e: &Entry) -> anyhow::Result<Volume> {
        let Some(v) = &e.volume else { bail!("dataset entry {} has no volume", e.id) };
        Ok(read_volume(&self.path(v))?)
    }

    pub fn volumes(&self) -> anyhow::Result<Vec<Volume>> {
        self.entries.iter().map(|e| self.volume(e)).collect()
    }

    pub fn descriptor(&self, e: &Entry) -> anyhow::Result<Vec<f64>> {
        let Some(d) = &e.descriptor else { bail!("dataset entry {} has no descriptor", e.id) };
        read_vector(&self.path(d))
    }

    /// Subset whose labels satisfy `keep`; unlabelled entries count as controls.
    pub fn filter_label(&self, keep: impl Fn(Label) -> bool) -> Self {
        let entries = self.entries.iter().filter(|e| keep(e.label.unwrap_or(Label::Control))).cloned().collect();
        Self { root: self.root.clone(), entries }
    }
}

/// Incrementally writes a dataset directory.
pub struct Writer {
    root: PathBuf,
    entries: Vec<Entry>,
    pub files: Vec<PathBuf>,
}

impl Writer {
    pub fn create(root: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(root.join("particles")).with_context(|| format!("cannot create {}", root.display()))?;
        Ok(Self { root: root.to_path_buf(), entries: Vec::new(), files: Vec::new() })
    }

    pub fn add(
        &mut self,
        shape: &CorrespondenceSet,
        volume: Option<&Volume>,
        label: Option<Label>,
        params: Option<SampleParams>,
    ) -> anyhow::Result<&mut Entry> {
        let id = shape.sample_id.clone();
        let particles = format!("particles/{id}.particles");
        write_particles(&self.root.join(&particles), &shape.points)?;
        self.files.push(self.root.join(&particles));
        let volume = match volume {
            Some(v) => {
                let rel = format!("volumes/{id}.raw");
                let path = self.root.join(&rel);
                fs::create_dir_all(self.root.join("volumes"))?;
                write_volume(&path, v)?;
                self.files.push(sidecar_path(&path));
                self.files.push(path);
                Some(rel)
            }
            None => None,
        };
        self.entries.push(Entry { id, volume, particles, descriptor: None, label, parent: None, scores: None, params });
        Ok(self.entries.last_mut().expect("just pushed"))
    }

    pub fn add_descriptor(&mut self, values: &[f64]) -> anyhow::Result<()> {
        let entry = self.entries.last_mut().context("no entry to attach a descriptor to")?;
        let rel = format!("descriptors/{}.txt", entry.id);
        let path = self.root.join(&rel);
        fs::create_dir_all(path.parent().expect("has parent"))?;
        write_vector(&path, values)?;
        self.files.push(path);
        entry.descriptor = Some(rel);
        Ok(())
    }

    pub fn finish(mut self) -> anyhow::Result<Vec<PathBuf>> {
        let path = self.root.join(MANIFEST);
        let mut f = fs::File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
        for e in &self.entries {
            writeln!(f, "{}", serde_json::to_string(e)?)?;
        }
        self.files.push(path);
        Ok(self.files)
    }
}

/// One value per line, shortest round-trip representation.
pub fn write_vector(path: &Path, values: &[f64]) -> anyhow::Result<()> {
    let text: String = values.iter().map(|v| format!("{v}\n")).collect();
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_vector(path: &Path) -> anyhow::Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| l.trim().parse::<f64>().with_context(|| format!("{}:{}: not a number", path.display(), i + 1)))
        .collect()
}
