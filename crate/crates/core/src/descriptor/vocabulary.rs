//! Binary visual vocabulary (k-medoids over Hamming distance) and the VLAD /
//! bag-of-words aggregators built on it.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Descriptor, DescriptorError, GlobalDescriptor};
use crate::binio::{self, FormatError};

/// Dimensions each word's residual is projected to.
pub const PROJECTED_DIMS: usize = 8;
const MAX_ITERATIONS: usize = 25;
const MAGIC: &[u8; 4] = b"VOCB";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GlobalBackend {
    /// Signed bit residuals against the assigned word, randomly projected.
    #[default]
    Vlad,
    /// tf-idf weighted word histogram.
    BagOfWords,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<Descriptor>,
    idf: Vec<f64>,
    projection_seed: u64,
    projection: Vec<[f64; Descriptor::BITS]>,
}

/// Objective after initialization and after each k-medoids iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingTrace {
    pub objective: Vec<u64>,
}

fn projection_matrix(seed: u64) -> Vec<[f64; Descriptor::BITS]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (Descriptor::BITS as f64).sqrt();
    (0..PROJECTED_DIMS)
        .map(|_| {
            let mut row = [0.0; Descriptor::BITS];
            for v in row.iter_mut() {
                *v = if rng.random::<bool>() { scale } else { -scale };
            }
            row
        })
        .collect()
}

fn nearest(words: &[Descriptor], d: &Descriptor) -> (usize, u32) {
    let mut best = (0, u32::MAX);
    for (i, w) in words.iter().enumerate() {
        let dist = w.hamming(d);
        if dist < best.1 {
            best = (i, dist);
        }
    }
    best
}

impl Vocabulary {
    pub fn from_parts(words: Vec<Descriptor>, idf: Vec<f64>, projection_seed: u64) -> Result<Self, FormatError> {
        if words.is_empty() {
            return Err(FormatError::corrupt("vocabulary has no words"));
        }
        if idf.len() != words.len() || idf.iter().any(|w| !w.is_finite()) {
            return Err(FormatError::corrupt("idf table does not match words"));
        }
        Ok(Self {
            words,
            idf,
            projection_seed,
            projection: projection_matrix(projection_seed),
        })
    }

    pub fn words(&self) -> &[Descriptor] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn projection_seed(&self) -> u64 {
        self.projection_seed
    }

    pub fn dim(&self, backend: GlobalBackend) -> usize {
        match backend {
            GlobalBackend::Vlad => self.words.len() * PROJECTED_DIMS,
            GlobalBackend::BagOfWords => self.words.len(),
        }
    }

    /// Index of the nearest word (ties to the lower index).
    pub fn assign(&self, d: &Descriptor) -> usize {
        nearest(&self.words, d).0
    }

    /// Aggregates local descriptors into a unit-length global descriptor.
    pub fn describe_global(&self, descriptors: &[Descriptor], backend: GlobalBackend) -> Result<GlobalDescriptor, DescriptorError> {
        if descriptors.is_empty() {
            return Err(DescriptorError::EmptyInput);
        }
        match backend {
            GlobalBackend::Vlad => {
                let mut acc = vec![0.0; self.dim(backend)];
                for d in descriptors {
                    let w = self.assign(d);
                    let word = &self.words[w];
                    let diff = d.xor(word);
                    let slot = &mut acc[w * PROJECTED_DIMS..(w + 1) * PROJECTED_DIMS];
                    for (block, &bits) in diff.words().iter().enumerate() {
                        let mut bits = bits;
                        while bits != 0 {
                            let i = block * 64 + bits.trailing_zeros() as usize;
                            bits &= bits - 1;
                            let sign = if d.bit(i) { 1.0 } else { -1.0 };
                            for (k, row) in self.projection.iter().enumerate() {
                                slot[k] += sign * row[i];
                            }
                        }
                    }
                }
                GlobalDescriptor::from_unnormalized(acc)
            }
            GlobalBackend::BagOfWords => {
                let mut acc = vec![0.0; self.words.len()];
                for d in descriptors {
                    acc[self.assign(d)] += 1.0;
                }
                let n = descriptors.len() as f64;
                for (v, idf) in acc.iter_mut().zip(&self.idf) {
                    *v = *v / n * idf;
                }
                GlobalDescriptor::from_unnormalized(acc)
            }
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        binio::write_header(w, MAGIC, VERSION)?;
        w.write_u32::<LittleEndian>(self.words.len() as u32)?;
        w.write_u64::<LittleEndian>(self.projection_seed)?;
        for word in &self.words {
            binio::write_descriptor(w, word)?;
        }
        for idf in &self.idf {
            w.write_f64::<LittleEndian>(*idf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, FormatError> {
        binio::read_header(r, MAGIC, "VOCB", VERSION)?;
        let n = r.read_u32::<LittleEndian>()? as usize;
        if n == 0 || n > 1 << 20 {
            return Err(FormatError::corrupt(format!("vocabulary size {n}")));
        }
        let seed = r.read_u64::<LittleEndian>()?;
        let words = (0..n).map(|_| binio::read_descriptor(r)).collect::<Result<Vec<_>, _>>()?;
        let idf = (0..n).map(|_| r.read_f64::<LittleEndian>()).collect::<Result<Vec<_>, _>>()?;
        Self::from_parts(words, idf, seed)
    }
}

/// Chooses `k` distinct sample indices, k-means++ style with squared Hamming
/// weights; uniform among unchosen indices when all weights vanish.
fn init_medoids(sample: &[Descriptor], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut chosen = vec![rng.random_range(0..sample.len())];
    let mut taken = vec![false; sample.len()];
    taken[chosen[0]] = true;
    let mut dist: Vec<u64> = sample.iter().map(|d| d.hamming(&sample[chosen[0]]) as u64).collect();
    while chosen.len() < k {
        let total: u64 = dist.iter().zip(&taken).filter(|(_, &t)| !t).map(|(d, _)| d * d).sum();
        let next = if total == 0 {
            let free: Vec<usize> = (0..sample.len()).filter(|&i| !taken[i]).collect();
            free[rng.random_range(0..free.len())]
        } else {
            let mut target = rng.random_range(0..total);
            let mut pick = None;
            for (i, d) in dist.iter().enumerate() {
                if taken[i] {
                    continue;
                }
                let w = d * d;
                if target < w {
                    pick = Some(i);
                    break;
                }
                target -= w;
            }
            pick.expect("weighted pick within total")
        };
        taken[next] = true;
        chosen.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = (*d).min(sample[i].hamming(&sample[next]) as u64);
        }
    }
    chosen
}

/// Trains a vocabulary by k-medoids (Voronoi iteration) over Hamming distance.
pub fn train_vocabulary(sample: &[Descriptor], vocab_size: usize, seed: u64) -> Result<(Vocabulary, TrainingTrace), DescriptorError> {
    if vocab_size == 0 || sample.len() < vocab_size {
        return Err(DescriptorError::SampleTooSmall { sample: sample.len(), vocab_size });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut medoids = init_medoids(sample, vocab_size, &mut rng);
    let mut trace = TrainingTrace::default();
    let mut assignment = vec![usize::MAX; sample.len()];

    for iteration in 0..=MAX_ITERATIONS {
        let words: Vec<Descriptor> = medoids.iter().map(|&i| sample[i]).collect();
        let mut objective = 0u64;
        let mut changed = false;
        for (i, d) in sample.iter().enumerate() {
            let (w, dist) = nearest(&words, d);
            objective += dist as u64;
            if assignment[i] != w {
                assignment[i] = w;
                changed = true;
            }
        }
        trace.objective.push(objective);
        if iteration == MAX_ITERATIONS || (iteration > 0 && !changed) {
            break;
        }
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); vocab_size];
        for (i, &w) in assignment.iter().enumerate() {
            members[w].push(i);
        }
        let mut moved = false;
        for (w, group) in members.iter().enumerate() {
            let cost = |c: usize| -> u64 { group.iter().map(|&j| sample[c].hamming(&sample[j]) as u64).sum() };
            let mut best = (medoids[w], cost(medoids[w]));
            for &c in group {
                let cst = cost(c);
                if cst < best.1 {
                    best = (c, cst);
                }
            }
            if best.0 != medoids[w] {
                medoids[w] = best.0;
                moved = true;
            }
        }
        if !moved && !changed {
            break;
        }
    }

    let words: Vec<Descriptor> = medoids.iter().map(|&i| sample[i]).collect();
    let mut counts = vec![0usize; vocab_size];
    for d in sample {
        counts[nearest(&words, d).0] += 1;
    }
    let n = sample.len() as f64;
    let idf = counts.iter().map(|&c| (n / (1.0 + c as f64)).ln().max(0.0) + 1e-3).collect();
    let projection_seed = seed ^ 0x9e37_79b9_7f4a_7c15;
    let vocab = Vocabulary::from_parts(words, idf, projection_seed).expect("non-empty words");
    Ok((vocab, trace))
}
