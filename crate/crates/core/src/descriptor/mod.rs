//! Local binary descriptors, keypoints and global image descriptors.

mod matching;
mod vocabulary;

pub use matching::{match_ratio, DescriptorMatch, MatchParams};
pub use vocabulary::{train_vocabulary, GlobalBackend, TrainingTrace, Vocabulary, PROJECTED_DIMS};

use thiserror::Error;

use crate::geometry::Pixel;

/// Scale step between consecutive pyramid octaves.
pub const OCTAVE_SCALE: f64 = 1.2;

/// 256-bit binary descriptor compared by Hamming distance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Descriptor([u64; 4]);

impl Descriptor {
    pub const BITS: usize = 256;

    pub fn from_words(words: [u64; 4]) -> Self {
        Self(words)
    }

    pub fn words(&self) -> &[u64; 4] {
        &self.0
    }

    #[inline]
    pub fn hamming(&self, other: &Descriptor) -> u32 {
        (self.0[0] ^ other.0[0]).count_ones()
            + (self.0[1] ^ other.0[1]).count_ones()
            + (self.0[2] ^ other.0[2]).count_ones()
            + (self.0[3] ^ other.0[3]).count_ones()
    }

    pub fn bit(&self, i: usize) -> bool {
        (self.0[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn flip_bit(&mut self, i: usize) {
        self.0[i / 64] ^= 1 << (i % 64);
    }

    pub fn xor(&self, other: &Descriptor) -> Descriptor {
        Descriptor([
            self.0[0] ^ other.0[0],
            self.0[1] ^ other.0[1],
            self.0[2] ^ other.0[2],
            self.0[3] ^ other.0[3],
        ])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub position: Pixel,
    /// Scale radius in pixels.
    pub size: f64,
    pub octave: u8,
}

impl Keypoint {
    /// `1.2^octave`.
    pub fn scale(&self) -> f64 {
        octave_scale(self.octave)
    }
}

pub fn octave_scale(octave: u8) -> f64 {
    OCTAVE_SCALE.powi(octave as i32)
}

#[derive(Debug, Error, PartialEq)]
pub enum DescriptorError {
    #[error("keypoint/descriptor count mismatch ({keypoints} vs {descriptors})")]
    LengthMismatch { keypoints: usize, descriptors: usize },
    #[error("no descriptors to aggregate")]
    EmptyInput,
    #[error("aggregated descriptor is zero")]
    Degenerate,
    #[error("vocabulary sample has {sample} descriptors, fewer than {vocab_size} words")]
    SampleTooSmall { sample: usize, vocab_size: usize },
    #[error("global descriptor dimension {found} does not match {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("global descriptor is not unit length")]
    NotNormalized,
}

/// Keypoints with their parallel descriptors, as produced by a local extractor.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LocalFeatures {
    keypoints: Vec<Keypoint>,
    descriptors: Vec<Descriptor>,
}

impl LocalFeatures {
    pub fn new(keypoints: Vec<Keypoint>, descriptors: Vec<Descriptor>) -> Result<Self, DescriptorError> {
        if keypoints.len() != descriptors.len() {
            return Err(DescriptorError::LengthMismatch {
                keypoints: keypoints.len(),
                descriptors: descriptors.len(),
            });
        }
        Ok(Self { keypoints, descriptors })
    }

    pub fn keypoints(&self) -> &[Keypoint] {
        &self.keypoints
    }

    pub fn descriptors(&self) -> &[Descriptor] {
        &self.descriptors
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

/// L2-normalized image-level descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDescriptor(Vec<f64>);

impl GlobalDescriptor {
    /// Normalizes `v`; a zero vector is rejected.
    pub fn from_unnormalized(mut v: Vec<f64>) -> Result<Self, DescriptorError> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 1e-12) || !norm.is_finite() {
            return Err(DescriptorError::Degenerate);
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(Self(v))
    }

    /// Accepts an already normalized vector (within 1e-6).
    pub fn from_normalized(v: Vec<f64>) -> Result<Self, DescriptorError> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(DescriptorError::NotNormalized);
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Cosine similarity in `[-1, 1]`.
    pub fn similarity(&self, other: &GlobalDescriptor) -> f64 {
        let s: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        s.clamp(-1.0, 1.0)
    }
}

/// Local features plus the global descriptor of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures {
    pub local: LocalFeatures,
    pub global: GlobalDescriptor,
}

impl FrameFeatures {
    pub fn new(local: LocalFeatures, global: GlobalDescriptor) -> Self {
        Self { local, global }
    }

    /// Computes the global descriptor with `vocabulary`.
    pub fn describe(local: LocalFeatures, vocabulary: &Vocabulary, backend: GlobalBackend) -> Result<Self, DescriptorError> {
        let global = vocabulary.describe_global(local.descriptors(), backend)?;
        Ok(Self { local, global })
    }

    pub fn keypoints(&self) -> &[Keypoint] {
        self.local.keypoints()
    }

    pub fn descriptors(&self) -> &[Descriptor] {
        self.local.descriptors()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hamming_basics() {
        let a = Descriptor::from_words([0, 0, 0, 0]);
        let mut b = a;
        b.flip_bit(0);
        b.flip_bit(255);
        b.flip_bit(100);
        assert_eq!(a.hamming(&b), 3);
        assert!(b.bit(255) && b.bit(100) && !b.bit(99));
        assert_eq!(b.hamming(&b), 0);
        assert_eq!(Descriptor::from_words([u64::MAX; 4]).hamming(&a), 256);
    }

    #[test]
    fn local_features_length_check() {
        let kp = Keypoint { position: Pixel::new(1.0, 1.0), size: 3.0, octave: 0 };
        assert!(LocalFeatures::new(vec![kp], vec![]).is_err());
        assert_eq!(LocalFeatures::new(vec![kp], vec![Descriptor::default()]).unwrap().len(), 1);
    }

    #[test]
    fn global_normalization() {
        assert_eq!(GlobalDescriptor::from_unnormalized(vec![0.0; 4]), Err(DescriptorError::Degenerate));
        let g = GlobalDescriptor::from_unnormalized(vec![3.0, 4.0]).unwrap();
        assert!((g.similarity(&g) - 1.0).abs() < 1e-12);
        assert!(GlobalDescriptor::from_normalized(vec![1.0, 1.0]).is_err());
    }
}
