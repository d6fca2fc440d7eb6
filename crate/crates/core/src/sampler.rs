//! P×K identity sampling for triplet batches.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::rng;
use crate::{Error, Result};

/// Draws batches of `p` identities with `k` images each.
///
/// An epoch shuffles every identity's images into chunks of `k` (identities
/// with fewer than `k` images contribute one chunk drawn with replacement) and
/// keeps forming batches from `p` distinct identities that still have chunks.
#[derive(Debug, Clone)]
pub struct PkSampler {
    by_identity: Vec<Vec<usize>>,
    p: usize,
    k: usize,
    seed: u64,
}

impl PkSampler {
    /// `labels[i]` is the identity of sample `i`.
    pub fn new(labels: &[usize], p: usize, k: usize, seed: u64) -> Result<Self> {
        if p == 0 || k == 0 {
            return Err(Error::Sampler("P and K must be positive".into()));
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            groups.entry(l).or_default().push(i);
        }
        if groups.len() < p {
            return Err(Error::Sampler(format!("{} identities cannot fill batches of {p}", groups.len())));
        }
        Ok(Self { by_identity: groups.into_values().collect(), p, k, seed })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    /// Index batches of one epoch; identical for identical `(seed, epoch)`.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = rng::rng_for(self.seed, &[0x5a3d, epoch as u64]);
        let mut chunks: Vec<Vec<Vec<usize>>> = self
            .by_identity
            .iter()
            .map(|imgs| {
                if imgs.len() < self.k {
                    let drawn = (0..self.k).map(|_| imgs[rng.gen_range(0..imgs.len())]).collect();
                    alloc::vec![drawn]
                } else {
                    let mut shuffled = imgs.clone();
                    shuffled.shuffle(&mut rng);
                    shuffled.chunks_exact(self.k).map(<[usize]>::to_vec).collect()
                }
            })
            .collect();
        let mut batches = Vec::new();
        loop {
            let mut open: Vec<usize> = (0..chunks.len()).filter(|&i| !chunks[i].is_empty()).collect();
            if open.len() < self.p {
                break;
            }
            // Favour identities with the most chunks left so an epoch uses them all.
            open.shuffle(&mut rng);
            open.sort_by_key(|&i| core::cmp::Reverse(chunks[i].len()));
            let picked = &open[..self.p];
            let mut batch = Vec::with_capacity(self.batch_size());
            for &id in picked {
                batch.extend(chunks[id].pop().expect("open identity has a chunk"));
            }
            batches.push(batch);
        }
        batches
    }
}
