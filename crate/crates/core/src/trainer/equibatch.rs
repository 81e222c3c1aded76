//! Batches stratified by tree-cover decile.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evaluate::cover_decile;
use crate::network::mix_seed;

pub const DECILES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Equibatch {
    batch_size: usize,
    members: Vec<Vec<usize>>,
    /// Decile each decile's slots draw from.
    source: [usize; DECILES],
    len: usize,
}

impl Equibatch {
    pub fn new(covers: &[f64], batch_size: usize) -> Result<Self> {
        if covers.is_empty() {
            return Err(Error::Empty("training set".into()));
        }
        if batch_size == 0 || batch_size % DECILES != 0 {
            return Err(Error::invalid("batch_size", format!("{batch_size} is not a positive multiple of {DECILES}")));
        }
        let mut members = vec![Vec::new(); DECILES];
        for (i, &c) in covers.iter().enumerate() {
            members[cover_decile(c)].push(i);
        }
        let mut source = [0; DECILES];
        for (d, s) in source.iter_mut().enumerate() {
            // min_by_key keeps the first minimum, so ties go to the lower decile
            *s = (0..DECILES)
                .filter(|&e| !members[e].is_empty())
                .min_by_key(|&e| e.abs_diff(d))
                .expect("at least one populated decile");
        }
        Ok(Self {
            batch_size,
            members,
            source,
            len: covers.len(),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    pub fn source(&self, decile: usize) -> usize {
        self.source[decile]
    }

    /// Batch order for one epoch; a pure function of `(seed, epoch)`.
    pub fn epoch(&self, seed: u64, epoch: u32) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::from(epoch)));
        let mut queues: Vec<Vec<usize>> = self.members.clone();
        for q in queues.iter_mut() {
            q.shuffle(&mut rng);
        }
        let mut cursor = [0usize; DECILES];
        let per = self.batch_size / DECILES;
        (0..self.batches_per_epoch())
            .map(|_| {
                let mut batch = Vec::with_capacity(self.batch_size);
                for d in 0..DECILES {
                    let s = self.source[d];
                    for _ in 0..per {
                        if cursor[s] == queues[s].len() {
                            queues[s].shuffle(&mut rng);
                            cursor[s] = 0;
                        }
                        batch.push(queues[s][cursor[s]]);
                        cursor[s] += 1;
                    }
                }
                batch
            })
            .collect()
    }
}
