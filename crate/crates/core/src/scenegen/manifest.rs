//! Single-source benchmark generation and the line-delimited manifest.
//!
//! Manifest layout (tab separated):
//!
//! ```text
//! #dgseg-manifest	K=5	spec_hash=<sha256 hex>
//! train	source	images/source/train_0000.png	labels/source/train_0000.png
//! val	dusk	images/dusk/val_0000.png	labels/dusk/val_0000.png
//! ```

#![allow(clippy::tabs_in_doc_comments)]

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use super::{read_label_png, read_rgb_png, render_scene_in_domain, write_label_png, write_rgb_png};
use super::{DomainStyle, LabeledImage, Layout, SceneSpec};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "manifest.tsv";
const HEADER_TAG: &str = "#dgseg-manifest";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            _ => None,
        }
    }
}

/// Generator of [`SceneSpec`]s: layouts cycle through bands, blobs, mixed.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneFamily {
    pub base_seed: u64,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl Default for SceneFamily {
    fn default() -> Self {
        SceneFamily {
            base_seed: 0,
            num_classes: 5,
            height: 64,
            width: 64,
            patch: 8,
        }
    }
}

impl SceneFamily {
    pub fn spec(&self, split: Split, domain_id: &str, index: usize) -> SceneSpec {
        let tag = match split {
            Split::Train => format!("train:{index}"),
            Split::Val => format!("val:{domain_id}:{index}"),
        };
        SceneSpec {
            seed: derive_seed(self.base_seed, &tag),
            layout: Layout::ALL[index % Layout::ALL.len()],
            num_classes: self.num_classes,
            height: self.height,
            width: self.width,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetCounts {
    pub train: usize,
    pub val: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub split: Split,
    pub domain_id: String,
    /// Relative to the manifest root.
    pub image: PathBuf,
    pub label: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub num_classes: usize,
    pub spec_hash: String,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER_TAG}\tK={}\tspec_hash={}\n", self.num_classes, self.spec_hash);
        for r in &self.records {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.split.as_str(),
                r.domain_id,
                r.image.display(),
                r.label.display()
            ));
        }
        s
    }

    /// SHA-256 of the serialized manifest.
    pub fn manifest_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Domains of a split in order of first appearance.
    pub fn domains(&self, split: Split) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in self.records.iter().filter(|r| r.split == split) {
            if !out.contains(&r.domain_id) {
                out.push(r.domain_id.clone());
            }
        }
        out
    }

    pub fn train_domain(&self) -> Result<String> {
        let d = self.domains(Split::Train);
        match d.as_slice() {
            [one] => Ok(one.clone()),
            _ => Err(Error::invalid("manifest", format!("train split must hold exactly one domain, found {d:?}"))),
        }
    }

    pub fn records(&self, split: Split, domain_id: &str) -> Vec<&ManifestRecord> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.domain_id == domain_id)
            .collect()
    }

    pub fn load_record<T: Scalar>(&self, rec: &ManifestRecord) -> Result<LabeledImage<T>> {
        let ipath = self.root.join(&rec.image);
        let lpath = self.root.join(&rec.label);
        let (image, h, w) = read_rgb_png(&ipath)?;
        let label = read_label_png(&lpath)?;
        if (label.height, label.width) != (h, w) {
            return Err(Error::format(
                &lpath,
                format!("label is {}x{} but image is {h}x{w}", label.height, label.width),
            ));
        }
        label
            .validate(self.num_classes)
            .map_err(|e| Error::format(&lpath, e.to_string()))?;
        Ok(LabeledImage {
            image,
            label,
            domain_id: rec.domain_id.clone(),
        })
    }

    /// Images of one split/domain; order is file order, or a deterministic
    /// shuffle when `shuffle_seed` is given.
    pub fn iter<T: Scalar>(
        &self,
        split: Split,
        domain_id: &str,
        shuffle_seed: Option<u64>,
    ) -> impl Iterator<Item = Result<LabeledImage<T>>> + '_ {
        let mut recs = self.records(split, domain_id);
        if let Some(seed) = shuffle_seed {
            recs.shuffle(&mut stream(seed, "manifest-shuffle"));
        }
        recs.into_iter().map(move |r| self.load_record(r))
    }

    /// Every image of one split/domain; an empty split is an error.
    pub fn load_split<T: Scalar>(&self, split: Split, domain_id: &str) -> Result<Vec<LabeledImage<T>>> {
        let out = self.iter(split, domain_id, None).collect::<Result<Vec<_>>>()?;
        if out.is_empty() {
            return Err(Error::invalid(
                "domain",
                format!("{} split of domain {domain_id:?} is empty", split.as_str()),
            ));
        }
        Ok(out)
    }
}

fn spec_hash(family: &SceneFamily, source: &DomainStyle, targets: &[DomainStyle], counts: DatasetCounts) -> String {
    let canon = format!("{family:?}|{source:?}|{targets:?}|{counts:?}");
    hex::encode(Sha256::digest(canon.as_bytes()))
}

/// Renders a single-source benchmark into `out_dir` and writes its manifest.
pub fn generate_dataset(
    family: &SceneFamily,
    source: &DomainStyle,
    targets: &[DomainStyle],
    counts: DatasetCounts,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if counts.train == 0 {
        return Err(Error::invalid("counts.train", "must be > 0"));
    }
    if counts.val == 0 {
        return Err(Error::invalid("counts.val", "must be > 0"));
    }
    family.spec(Split::Train, "", 0).validate_for_patch(family.patch)?;
    let mut seen = HashSet::new();
    for style in std::iter::once(source).chain(targets) {
        style.validate()?;
        if style.palette.len() != family.num_classes {
            return Err(Error::invalid(
                "palette",
                format!("domain {} has {} colors for {} classes", style.domain_id, style.palette.len(), family.num_classes),
            ));
        }
        if !seen.insert(style.domain_id.as_str()) {
            return Err(Error::invalid("domain_id", format!("duplicate domain {:?}", style.domain_id)));
        }
    }

    let mut records = Vec::new();
    let mut jobs: Vec<(Split, &DomainStyle, usize)> = (0..counts.train).map(|i| (Split::Train, source, i)).collect();
    for t in std::iter::once(source).chain(targets) {
        jobs.extend((0..counts.val).map(|i| (Split::Val, t, i)));
    }
    for (split, style, i) in jobs {
        let dom = &style.domain_id;
        let image_rel = PathBuf::from("images").join(dom).join(format!("{}_{i:04}.png", split.as_str()));
        let label_rel = PathBuf::from("labels").join(dom).join(format!("{}_{i:04}.png", split.as_str()));
        for rel in [&image_rel, &label_rel] {
            let dir = out_dir.join(rel.parent().expect("relative path has a parent"));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let scene = render_scene_in_domain::<f64>(&family.spec(split, dom, i), style)?;
        write_rgb_png(&out_dir.join(&image_rel), &scene.image, scene.height(), scene.width())?;
        write_label_png(&out_dir.join(&label_rel), &scene.label)?;
        records.push(ManifestRecord {
            split,
            domain_id: dom.clone(),
            image: image_rel,
            label: label_rel,
        });
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        num_classes: family.num_classes,
        spec_hash: spec_hash(family, source, targets, counts),
        records,
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Parses a manifest and checks that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(path, "empty manifest"))?;
    let fields: Vec<&str> = header.split('\t').collect();
    let (num_classes, spec_hash) = match fields.as_slice() {
        [tag, k, h] if *tag == HEADER_TAG => {
            let k = k
                .strip_prefix("K=")
                .and_then(|v| v.parse::<usize>().ok())
                .ok_or_else(|| Error::format(path, format!("bad class-count field {k:?}")))?;
            let h = h
                .strip_prefix("spec_hash=")
                .ok_or_else(|| Error::format(path, format!("bad hash field {h:?}")))?;
            (k, h.to_string())
        }
        _ => return Err(Error::format(path, format!("bad header line {header:?}"))),
    };
    let mut records = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let [split, dom, img, lab] = f.as_slice() else {
            return Err(Error::format(path, format!("line {}: expected 4 tab-separated fields", n + 2)));
        };
        let split = Split::parse(split)
            .ok_or_else(|| Error::format(path, format!("line {}: unknown split {split:?}", n + 2)))?;
        let rec = ManifestRecord {
            split,
            domain_id: dom.to_string(),
            image: PathBuf::from(img),
            label: PathBuf::from(lab),
        };
        for rel in [&rec.image, &rec.label] {
            let p = root.join(rel);
            if !p.is_file() {
                return Err(Error::format(&p, "referenced by the manifest but missing"));
            }
        }
        records.push(rec);
    }
    let manifest = DatasetManifest {
        root,
        num_classes,
        spec_hash,
        records,
    };
    manifest.train_domain()?;
    Ok(manifest)
}
