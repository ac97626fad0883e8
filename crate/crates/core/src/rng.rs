//! Seeded random streams.

use std::collections::VecDeque;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Deterministic random stream. Identical seed and call sequence give
/// identical draws; the full position can be saved and restored.
#[derive(Clone, Debug)]
pub struct RandomSource {
    seed: u64,
    rng: ChaCha8Rng,
}

/// Serializable position of a [`RandomSource`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub key: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            key: self.rng.get_seed(),
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut rng = ChaCha8Rng::from_seed(state.key);
        rng.set_stream(state.stream);
        rng.set_word_pos(state.word_pos);
        Self { seed: state.seed, rng }
    }

    /// Derives `n` independent child streams; advances `self` by one word.
    pub fn split(&mut self, n: usize) -> Vec<RandomSource> {
        let base = self.rng.next_u64();
        (0..n as u64).map(|i| Self::stream(base, i)).collect()
    }

    /// Child stream `index` of the family keyed by `base`.
    pub fn stream(base: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(base);
        rng.set_stream(index + 1);
        Self { seed: base, rng }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal_tensor<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::c(self.standard_normal())).collect();
        Tensor::new(shape.to_vec(), data).expect("shape product matches")
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.rng.random_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }
}

enum Source<'a> {
    Streams { streams: &'a mut [RandomSource], block_rows: usize },
    Script { rows: usize, draws: VecDeque<Vec<f64>>, fallback: RandomSource },
}

/// Noise supply for a forward pass over a batch made of equally sized row
/// blocks, each block drawing from its own stream.
///
/// With a single block this is just one stream; with several blocks every
/// block sees the same draws regardless of how blocks are grouped into
/// passes, which makes chunked importance sampling reproduce a single pass.
///
/// A scripted supply replays previously recorded draws in order, which lets
/// callers pin or replace individual draws of a pass.
pub struct Noise<'a> {
    source: Source<'a>,
    record: Option<Vec<Vec<f64>>>,
}

impl<'a> Noise<'a> {
    pub fn new(streams: &'a mut [RandomSource], block_rows: usize) -> Self {
        assert!(!streams.is_empty());
        Self { source: Source::Streams { streams, block_rows }, record: None }
    }

    pub fn single(rng: &'a mut RandomSource, rows: usize) -> Self {
        Self::new(std::slice::from_mut(rng), rows)
    }

    /// Replays `draws` in order; once exhausted, continues from `fallback_seed`.
    pub fn scripted(rows: usize, draws: Vec<Vec<f64>>, fallback_seed: u64) -> Noise<'static> {
        Noise {
            source: Source::Script { rows, draws: draws.into(), fallback: RandomSource::new(fallback_seed) },
            record: None,
        }
    }

    /// Keeps a copy of every draw; see [`Noise::take_record`].
    pub fn recording(mut self) -> Self {
        self.record = Some(Vec::new());
        self
    }

    pub fn take_record(&mut self) -> Vec<Vec<f64>> {
        self.record.take().unwrap_or_default()
    }

    pub fn rows(&self) -> usize {
        match &self.source {
            Source::Streams { streams, block_rows } => streams.len() * block_rows,
            Source::Script { rows, .. } => *rows,
        }
    }

    fn draw(&mut self, per_row: usize, normal: bool) -> Vec<f64> {
        let total = self.rows() * per_row;
        let data = match &mut self.source {
            Source::Streams { streams, block_rows } => {
                let mut data = Vec::with_capacity(total);
                for s in streams.iter_mut() {
                    for _ in 0..*block_rows * per_row {
                        data.push(if normal { s.standard_normal() } else { s.uniform() });
                    }
                }
                data
            }
            Source::Script { draws, fallback, .. } => match draws.pop_front() {
                Some(d) => {
                    assert_eq!(d.len(), total, "scripted draw has the wrong size");
                    d
                }
                None => (0..total)
                    .map(|_| if normal { fallback.standard_normal() } else { fallback.uniform() })
                    .collect(),
            },
        };
        if let Some(r) = self.record.as_mut() {
            r.push(data.clone());
        }
        data
    }

    /// Standard normal draws for `[rows, rest...]`.
    pub fn normal<T: Scalar>(&mut self, rest: &[usize]) -> Tensor<T> {
        let per_row: usize = rest.iter().product();
        let data = self.draw(per_row, true).into_iter().map(T::c).collect();
        let mut shape = vec![self.rows()];
        shape.extend_from_slice(rest);
        Tensor::new(shape, data).expect("noise shape")
    }

    /// Uniform `[0,1)` draws for `[rows, rest...]`.
    pub fn uniform(&mut self, rest: &[usize]) -> Vec<f64> {
        let per_row: usize = rest.iter().product();
        self.draw(per_row, false)
    }
}
