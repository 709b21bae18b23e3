use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::synth::{image_rng, synth_panel, DefectSpec};
use super::voc::{parse_voc_xml, write_voc_string, VocAnnotation};
use super::AnnotatedImage;
use crate::error::{spec_err, Error, Result};

pub const IMAGES_DIR: &str = "images";
pub const ANNOTATIONS_DIR: &str = "annotations";
pub const SPLITS_DIR: &str = "splits";
pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Image ids of the training and validation subsets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        let train: HashSet<&String> = self.train.iter().collect();
        if let Some(id) = self.val.iter().find(|id| train.contains(id)) {
            return Err(spec_err(format!("image {id} is in both train and val")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which subset to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    Train,
    Val,
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Subset::Train),
            "val" => Ok(Subset::Val),
            _ => Err(Error::Config(format!("unknown split `{s}` (expected train or val)"))),
        }
    }
}

fn split_path(root: &Path, subset: Subset) -> PathBuf {
    root.join(SPLITS_DIR).join(match subset {
        Subset::Train => "train.txt",
        Subset::Val => "val.txt",
    })
}

fn read_ids(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn load_split(root: &Path) -> Result<DatasetSplit> {
    let split = DatasetSplit {
        train: read_ids(&split_path(root, Subset::Train))?,
        val: read_ids(&split_path(root, Subset::Val))?,
    };
    split.validate()?;
    Ok(split)
}

pub fn write_split(root: &Path, split: &DatasetSplit) -> Result<()> {
    split.validate()?;
    fs::create_dir_all(root.join(SPLITS_DIR))?;
    for (subset, ids) in [(Subset::Train, &split.train), (Subset::Val, &split.val)] {
        let mut text = ids.join("\n");
        if !ids.is_empty() {
            text.push('\n');
        }
        fs::write(split_path(root, subset), text)?;
    }
    Ok(())
}

/// Path of the image file for `id`, whichever supported extension it has.
pub fn image_path(root: &Path, id: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| root.join(IMAGES_DIR).join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

pub fn annotation_path(root: &Path, id: &str) -> PathBuf {
    root.join(ANNOTATIONS_DIR).join(format!("{id}.xml"))
}

/// Ids of all images under `root/images`, sorted.
pub fn list_image_ids(root: &Path) -> Result<Vec<String>> {
    let dir = root.join(IMAGES_DIR);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(&dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    ids.dedup();
    Ok(ids)
}

/// Decode an image file to single-channel 8-bit.
pub fn load_gray(path: &Path) -> Result<image::GrayImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(img.into_luma8())
}

/// Read one image and its annotation; the annotation's declared size must
/// match the decoded pixels.
pub fn load_sample(root: &Path, id: &str) -> Result<AnnotatedImage> {
    let path = image_path(root, id).ok_or_else(|| Error::Image {
        path: root.join(IMAGES_DIR).join(id),
        msg: "no png/jpg image with this id".into(),
    })?;
    let image = load_gray(&path)?;
    let ann = parse_voc_xml(&annotation_path(root, id))?;
    if (ann.width, ann.height) != image.dimensions() {
        return Err(Error::Image {
            path,
            msg: format!(
                "image is {}x{} but its annotation says {}x{}",
                image.width(),
                image.height(),
                ann.width,
                ann.height
            ),
        });
    }
    let sample = AnnotatedImage {
        id: id.to_string(),
        image,
        boxes: ann.boxes,
    };
    sample.validate()?;
    Ok(sample)
}

pub fn load_subset(root: &Path, subset: Subset) -> Result<Vec<AnnotatedImage>> {
    let split = load_split(root)?;
    let ids = match subset {
        Subset::Train => &split.train,
        Subset::Val => &split.val,
    };
    ids.iter().map(|id| load_sample(root, id)).collect()
}

/// Write `images/<id>.png` and `annotations/<id>.xml`.
pub fn write_sample(root: &Path, sample: &AnnotatedImage) -> Result<()> {
    if sample.id.is_empty() || sample.id.contains(['/', '\\']) {
        return Err(spec_err(format!("`{}` is not a usable image id", sample.id)));
    }
    sample.validate()?;
    fs::create_dir_all(root.join(IMAGES_DIR))?;
    fs::create_dir_all(root.join(ANNOTATIONS_DIR))?;
    let path = root.join(IMAGES_DIR).join(format!("{}.png", sample.id));
    sample.image.save(&path).map_err(|e| Error::Image {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    let ann = VocAnnotation {
        filename: format!("{}.png", sample.id),
        width: sample.width(),
        height: sample.height(),
        depth: 1,
        boxes: sample.boxes.clone(),
    };
    fs::write(annotation_path(root, &sample.id), write_voc_string(&ann))?;
    Ok(())
}

/// Write both subsets and the split files.
pub fn write_dataset(root: &Path, train: &[AnnotatedImage], val: &[AnnotatedImage]) -> Result<DatasetSplit> {
    for s in train.iter().chain(val) {
        write_sample(root, s)?;
    }
    let split = DatasetSplit {
        train: train.iter().map(|s| s.id.clone()).collect(),
        val: val.iter().map(|s| s.id.clone()).collect(),
    };
    write_split(root, &split)?;
    Ok(split)
}

/// `count` synthetic panels named `{prefix}{index:04}`. Image `i` draws its
/// spec and pixels from its own stream `image_rng(seed, first + i)`, so a
/// corpus does not depend on how it is chunked or parallelised.
pub fn synth_corpus(
    seed: u64,
    prefix: &str,
    first: usize,
    count: usize,
    size: u32,
    spec_for: impl Fn(&mut ChaCha8Rng) -> DefectSpec,
) -> Result<Vec<AnnotatedImage>> {
    (first..first + count)
        .map(|i| {
            let mut rng = image_rng(seed, i as u64);
            let spec = spec_for(&mut rng);
            let mut panel = synth_panel(&mut rng, size, &spec)?;
            panel.id = format!("{prefix}{i:04}");
            Ok(panel)
        })
        .collect()
}

/// One to three defects of random classes, the two very large classes
/// (broken, no_electricity) at most once each.
pub fn mixed_spec<R: Rng>(rng: &mut R, scale: f64) -> DefectSpec {
    let mut spec = DefectSpec::none().with_scale(scale);
    let n = rng.gen_range(1..=3);
    for _ in 0..n {
        let class = rng.gen_range(0..5);
        if (class == super::NO_ELECTRICITY || class == super::BROKEN) && spec.counts[class] > 0 {
            continue;
        }
        spec.counts[class] += 1;
    }
    spec
}

/// Three scratches plus one broken, hot_spot or black_border defect: a
/// corpus in which three quarters of the boxes are scratches.
pub fn scratch_heavy_spec<R: Rng>(rng: &mut R, scale: f64) -> DefectSpec {
    let mut spec = DefectSpec::only(super::SCRATCH, 3).with_scale(scale);
    let other = [super::BROKEN, super::HOT_SPOT, super::BLACK_BORDER][rng.gen_range(0..3)];
    spec.counts[other] += 1;
    spec
}
