//! Training corpus: a set of [3,H,W] images and a seeded patch sampler.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SicError};
use crate::io::ppm;
use crate::synth;
use crate::tensor::Tensor;

pub struct Corpus {
    images: Vec<Tensor<f32>>,
    names: Vec<String>,
}

impl Corpus {
    pub fn from_images(images: Vec<Tensor<f32>>) -> Result<Corpus> {
        if images.is_empty() {
            return Err(SicError::data("corpus is empty"));
        }
        for (i, img) in images.iter().enumerate() {
            let s = img.shape();
            if s.len() != 3 || s[0] != 3 {
                return Err(SicError::data(format!(
                    "corpus image {i} has shape {s:?}, want [3,H,W]"
                )));
            }
        }
        let names = (0..images.len()).map(|i| format!("image-{i}")).collect();
        Ok(Corpus { images, names })
    }

    /// Load every `.ppm` in a directory, sorted by file name.
    pub fn load_dir(dir: &Path) -> Result<Corpus> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| SicError::data(format!("cannot read {}: {e}", dir.display())))?
            .filter_map(|ent| ent.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("ppm"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(SicError::data(format!(
                "no .ppm images in {}",
                dir.display()
            )));
        }
        let mut images = Vec::with_capacity(paths.len());
        let mut names = Vec::with_capacity(paths.len());
        for p in &paths {
            images.push(ppm::load_image(p)?);
            names.push(
                p.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            );
        }
        Ok(Corpus { images, names })
    }

    /// Procedural corpus — smooth DC + sinusoids + blobs + grain, snapped to
    /// the 8-bit grid. Fully determined by the seed.
    pub fn synthetic(seed: u64, count: usize, h: usize, w: usize) -> Corpus {
        let images = synth::synth_corpus(seed, count, h, w);
        let names = (0..count).map(|i| format!("synth-{seed}-{i}")).collect();
        Corpus { images, names }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &Tensor<f32> {
        &self.images[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    /// Smallest height and width over the corpus.
    pub fn min_hw(&self) -> (usize, usize) {
        let h = self.images.iter().map(|t| t.shape()[1]).min().unwrap_or(0);
        let w = self.images.iter().map(|t| t.shape()[2]).min().unwrap_or(0);
        (h, w)
    }

    /// Draw a [B,3,P,P] batch: image index then top-left corner, both
    /// uniform, two `rng` draws per element in that order.
    pub fn sample_batch(
        &self,
        rng: &mut ChaCha8Rng,
        batch: usize,
        patch: usize,
    ) -> Result<Tensor<f32>> {
        let (mh, mw) = self.min_hw();
        if patch == 0 || batch == 0 {
            return Err(SicError::usage("batch and patch must be positive"));
        }
        if mh < patch || mw < patch {
            return Err(SicError::data(format!(
                "corpus has an image of {mw}x{mh}, smaller than the {patch}x{patch} patch"
            )));
        }
        let mut out = Vec::with_capacity(batch * 3 * patch * patch);
        for _ in 0..batch {
            let idx = rng.gen_range(0..self.images.len());
            let img = &self.images[idx];
            let (h, w) = (img.shape()[1], img.shape()[2]);
            let oy = rng.gen_range(0..=h - patch);
            let ox = rng.gen_range(0..=w - patch);
            let d = img.data();
            for c in 0..3 {
                for y in 0..patch {
                    let row = (c * h + oy + y) * w + ox;
                    out.extend_from_slice(&d[row..row + patch]);
                }
            }
        }
        Tensor::new(vec![batch, 3, patch, patch], out)
    }
}
