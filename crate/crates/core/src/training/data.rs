//! Training sample stream and image rendering for street/cell pairs.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{make_training_pair, sample_batch, DedupPartition, ImageRef, PhotoRecord, TrainingPair};
use crate::error::{Error, Result};
use crate::geodesy::{GeoPoint, RegionLayout};
use crate::model::ModelConfig;
use crate::raster::{
    extract_patch_with_coverage, patch_specs_at, synth_street_view, GeoRaster, Image, LodConfig,
    SyntheticWorld,
};

/// A posed training pair plus the seed of its photometric noise, so the
/// same sample renders identically when scanned and when trained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub pair: TrainingPair,
    pub noise_seed: u64,
}

/// Endless stream of samples drawn batch-wise with dedup sampling and pose
/// augmentation. An optional limit turns it into a finite stream.
pub struct SampleStream<'a> {
    photos: &'a [PhotoRecord],
    partition: &'a DedupPartition,
    b: usize,
    cell_size: f64,
    l_delta: f64,
    earth_radius: f64,
    rng: ChaCha8Rng,
    buffer: VecDeque<Sample>,
    remaining: Option<usize>,
}

impl<'a> SampleStream<'a> {
    pub fn new(
        photos: &'a [PhotoRecord],
        partition: &'a DedupPartition,
        b: usize,
        layout: &RegionLayout,
        l_delta: f64,
        seed: u64,
    ) -> Result<Self> {
        if partition.len() < b {
            return Err(Error::InsufficientData {
                needed: b,
                available: partition.len(),
            });
        }
        Ok(Self {
            photos,
            partition,
            b,
            cell_size: layout.cell_size(),
            l_delta,
            earth_radius: layout.earth_radius(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            buffer: VecDeque::new(),
            remaining: None,
        })
    }

    /// Caps the total number of samples the stream yields.
    pub fn with_limit(mut self, limit: usize) -> Self {
        self.remaining = Some(limit);
        self
    }

    pub fn remaining(&self) -> Option<usize> {
        self.remaining
    }

    pub fn next_sample(&mut self) -> Result<Sample> {
        if self.remaining == Some(0) {
            return Err(Error::EndOfData);
        }
        if self.buffer.is_empty() {
            for photo in sample_batch(&mut self.rng, self.partition, self.b)? {
                let pair = make_training_pair(
                    photo,
                    self.photos[photo].location,
                    &mut self.rng,
                    self.cell_size,
                    self.l_delta,
                    self.earth_radius,
                )?;
                let noise_seed = self.rng.random();
                self.buffer.push_back(Sample { pair, noise_seed });
            }
        }
        if let Some(r) = &mut self.remaining {
            *r -= 1;
        }
        Ok(self.buffer.pop_front().expect("buffer was refilled"))
    }

    /// Exactly `n` samples, or end-of-data if fewer remain.
    pub fn take_samples(&mut self, n: usize) -> Result<Vec<Sample>> {
        if let Some(r) = self.remaining {
            if r < n {
                return Err(Error::EndOfData);
            }
        }
        (0..n).map(|_| self.next_sample()).collect()
    }
}

/// Everything needed to turn samples into model inputs.
#[derive(Clone, Copy)]
pub struct Renderer<'a> {
    pub photos: &'a [PhotoRecord],
    pub aerial: &'a GeoRaster,
    /// Required for photos with synthetic image references.
    pub world: Option<&'a SyntheticWorld>,
    pub lod: LodConfig,
    pub model: ModelConfig,
}

/// Street image and LOD images of one sample.
#[derive(Clone, Debug)]
pub struct RenderedSample {
    pub street: Image,
    pub cell: Vec<Image>,
}

impl<'a> Renderer<'a> {
    pub fn street_image(&self, photo: usize, noise_seed: u64) -> Result<Image> {
        let record = self
            .photos
            .get(photo)
            .ok_or_else(|| Error::Validation(format!("photo index {photo} out of range")))?;
        let img = match &record.image {
            ImageRef::Synthetic { position, heading } => {
                let world = self.world.ok_or_else(|| {
                    Error::Validation(format!("photo `{}` is synthetic but no world is loaded", record.id))
                })?;
                synth_street_view(world, self.aerial, *position, *heading, noise_seed)?
            }
            ImageRef::Path(path) => Image::load_ppm(path)?,
        };
        let size = self.model.street_image_size;
        Ok(if img.width() == size && img.height() == size {
            img
        } else {
            img.resize(size, size)
        })
    }

    /// LOD patches around `center` rotated by `theta`, finest first.
    /// Also returns the coverage of the coarsest patch.
    pub fn cell_images(&self, center: GeoPoint, theta: f64) -> (Vec<Image>, f64) {
        let size = self.model.aerial_image_size;
        let mut coverage = 1.0;
        let images = patch_specs_at(center, theta, &self.lod)
            .iter()
            .map(|spec| {
                let (img, cov) = extract_patch_with_coverage(self.aerial, spec);
                coverage = cov;
                if img.width() == size {
                    img
                } else {
                    img.resize(size, size)
                }
            })
            .collect();
        (images, coverage)
    }

    pub fn render(&self, sample: &Sample) -> Result<RenderedSample> {
        let street = self.street_image(sample.pair.photo, sample.noise_seed)?;
        let (cell, _) = self.cell_images(sample.pair.cell_center, sample.pair.cell_theta);
        Ok(RenderedSample { street, cell })
    }

    /// Renders a batch in parallel; output order follows `samples`.
    pub fn render_batch(&self, samples: &[Sample]) -> Result<(Vec<Image>, Vec<Vec<Image>>)> {
        let rendered: Vec<RenderedSample> = samples
            .par_iter()
            .map(|s| self.render(s))
            .collect::<Result<_>>()?;
        Ok(rendered.into_iter().map(|r| (r.street, r.cell)).unzip())
    }
}
