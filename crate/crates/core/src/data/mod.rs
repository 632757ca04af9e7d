//! Samples, synthetic generation, augmentation, and on-disk datasets.
//!
//! A dataset directory holds `images/NNNNNN.ppm`, `masks/NNNNNN.pgm`, and a
//! `manifest.csv` with columns `id,split,foreground_fraction`.

pub mod augment;
pub mod pnm;
pub mod synth;

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::maps::BinaryMask;
use crate::tensor::{Element, Tensor};

pub use augment::{augment, AugmentPlan};
pub use synth::generate;

/// An RGB image (3×H×W, values in `[0, 1]`) with its ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f64>,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    /// Total number of scenes; the last `test_count` form the test split.
    pub count: usize,
    pub test_count: usize,
    pub base_size: usize,
    pub crop_size: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            count: 600,
            test_count: 100,
            base_size: 72,
            crop_size: 64,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Dataset("count must be at least 1".into()));
        }
        if self.test_count > self.count {
            return Err(Error::Dataset(format!(
                "test count {} exceeds count {}",
                self.test_count, self.count
            )));
        }
        if self.crop_size == 0 || self.crop_size > self.base_size {
            return Err(Error::Dataset(format!(
                "crop size {} must be in 1..={}",
                self.crop_size, self.base_size
            )));
        }
        if self.base_size < 16 {
            return Err(Error::Dataset(format!("base size {} is below 16", self.base_size)));
        }
        Ok(())
    }

    pub fn train_count(&self) -> usize {
        self.count - self.test_count
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// Generates every scene and splits by index.
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        let mut all = generate(spec)?;
        let test = all.split_off(spec.train_count());
        Ok(Dataset { train: all, test })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("images"))?;
        std::fs::create_dir_all(dir.join("masks"))?;
        let mut manifest = String::from("id,split,foreground_fraction\n");
        let rows = self
            .train
            .iter()
            .map(|s| (s, Split::Train))
            .chain(self.test.iter().map(|s| (s, Split::Test)));
        for (id, (s, split)) in rows.enumerate() {
            pnm::write_rgb(&dir.join(format!("images/{id:06}.ppm")), &s.image)?;
            pnm::write_mask(&dir.join(format!("masks/{id:06}.pgm")), &s.mask)?;
            writeln!(manifest, "{id:06},{},{:.6}", split.as_str(), s.mask.foreground_fraction())
                .expect("string write");
        }
        std::fs::write(dir.join("manifest.csv"), manifest)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest = std::fs::read_to_string(dir.join("manifest.csv"))?;
        let mut out = Dataset::default();
        for (n, line) in manifest.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let [id, split, _] = fields[..] else {
                return Err(Error::Dataset(format!("manifest line {}: expected 3 fields", n + 1)));
            };
            let sample = Sample {
                image: pnm::read_rgb(&dir.join(format!("images/{id}.ppm")))?,
                mask: pnm::read_mask(&dir.join(format!("masks/{id}.pgm")))?,
            };
            if sample.image.shape()[1..] != [sample.mask.height(), sample.mask.width()] {
                return Err(Error::Dataset(format!("sample {id}: image and mask sizes differ")));
            }
            match split {
                "train" => out.train.push(sample),
                "test" => out.test.push(sample),
                other => {
                    return Err(Error::Dataset(format!("manifest line {}: unknown split `{other}`", n + 1)))
                }
            }
        }
        Ok(out)
    }
}

/// Stacks sample images into an N×3×H×W batch.
pub fn batch_images<E: Element>(samples: &[&Sample]) -> Result<Tensor<E>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("batch", "empty batch"))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::shape("batch", &shape, s.image.shape()));
        }
        data.extend(s.image.data().iter().map(|&v| E::from_f64(v)));
    }
    Tensor::new([samples.len(), shape[0], shape[1], shape[2]], data)
}
