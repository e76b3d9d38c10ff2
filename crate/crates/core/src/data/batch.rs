use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::dataset::SampleSource;
use super::labels::LabelTriple;
use crate::error::{Error, Result};
use crate::model::{INPUT_CHANNELS, INPUT_HW};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A stacked mini-batch.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `(n, 3, 48, 48)`
    pub images: Tensor<T>,
    pub labels: Vec<LabelTriple>,
    /// Source indices, in batch order.
    pub indices: Vec<usize>,
}

/// Sample order for one epoch split into batches; the last partial batch is kept.
pub fn batch_order(len: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument {
            op: "batch_iter",
            reason: "batch size must be at least 1".into(),
        });
    }
    if len == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Per-epoch shuffle seed derived from a run seed.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((epoch as u64).wrapping_mul(0xd1b5_4a32_d192_ed03))
}

/// Stacks the given samples. Images are loaded in parallel but assembled in `indices` order.
pub fn gather_batch<T: Scalar, S: SampleSource + ?Sized>(source: &S, indices: &[usize]) -> Result<Batch<T>> {
    let images: Vec<Tensor<f32>> = indices
        .par_iter()
        .map(|&i| source.image(i))
        .collect::<Result<_>>()?;
    let per = INPUT_CHANNELS * INPUT_HW * INPUT_HW;
    let mut data = Vec::with_capacity(indices.len() * per);
    for img in &images {
        if img.len() != per {
            return Err(Error::ShapeMismatch {
                op: "gather_batch",
                lhs: img.shape().to_vec(),
                rhs: vec![INPUT_CHANNELS, INPUT_HW, INPUT_HW],
            });
        }
        data.extend(img.data().iter().map(|&v| T::from_f32(v).expect("f32 converts")));
    }
    Ok(Batch {
        images: Tensor::from_vec([indices.len(), INPUT_CHANNELS, INPUT_HW, INPUT_HW], data)?,
        labels: indices.iter().map(|&i| source.label(i)).collect(),
        indices: indices.to_vec(),
    })
}

/// Lazily yields the batches of one epoch.
pub struct BatchIter<'a, T, S: ?Sized> {
    source: &'a S,
    order: std::vec::IntoIter<Vec<usize>>,
    _scalar: std::marker::PhantomData<T>,
}

impl<'a, T: Scalar, S: SampleSource + ?Sized> Iterator for BatchIter<'a, T, S> {
    type Item = Result<Batch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        self.order.next().map(|idx| gather_batch(self.source, &idx))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.order.size_hint()
    }
}

/// One epoch of batches; shuffled with a seeded Fisher-Yates permutation when `shuffle`.
pub fn batch_iter<T: Scalar, S: SampleSource + ?Sized>(
    source: &S,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<BatchIter<'_, T, S>> {
    let order = batch_order(source.len(), batch_size, seed, shuffle)?;
    Ok(BatchIter {
        source,
        order: order.into_iter(),
        _scalar: std::marker::PhantomData,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_partial_batch() {
        let sizes: Vec<usize> = batch_order(65, 32, 0, true).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![32, 32, 1]);
    }

    #[test]
    fn unshuffled_is_in_order() {
        let order: Vec<usize> = batch_order(10, 3, 9, false).unwrap().concat();
        assert_eq!(order, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_batches() {
        assert_eq!(batch_order(50, 8, 4, true).unwrap(), batch_order(50, 8, 4, true).unwrap());
        assert_ne!(batch_order(50, 8, 4, true).unwrap(), batch_order(50, 8, 5, true).unwrap());
    }

    #[test]
    fn errors() {
        assert!(batch_order(10, 0, 0, true).is_err());
        assert!(matches!(batch_order(0, 4, 0, true), Err(Error::EmptyDataset)));
    }
}
