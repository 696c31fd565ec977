use super::ImageDataset;
use crate::error::{Error, Result};
use crate::tensor::{Prng, Tensor};

/// Iterator over `(images, labels)` mini-batches; the last one may be short.
pub struct Batches<'a> {
    ds: &'a ImageDataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

/// With `shuffle` the order is a permutation drawn from `prng`; otherwise
/// storage order and `prng` is left untouched.
pub fn batches<'a>(ds: &'a ImageDataset, batch_size: usize, prng: &mut Prng, shuffle: bool) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        prng.shuffle(&mut order);
    }
    Ok(Batches {
        ds,
        order,
        batch_size,
        pos: 0,
    })
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.ds.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numbered(n: usize) -> ImageDataset {
        let x = Tensor::new(vec![n, 1, 1, 1], (0..n).map(|i| i as f64 / n as f64).collect()).unwrap();
        ImageDataset::new(x, (0..n).collect(), n, "numbered").unwrap()
    }

    #[test]
    fn sizes_include_partial_tail() {
        let ds = numbered(10);
        let sizes: Vec<usize> = batches(&ds, 4, &mut Prng::new(0), true).unwrap().map(|(_, l)| l.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn storage_order_without_shuffle() {
        let ds = numbered(7);
        let labels: Vec<usize> = batches(&ds, 3, &mut Prng::new(0), false).unwrap().flat_map(|(_, l)| l).collect();
        assert_eq!(labels, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn shuffle_is_a_seeded_permutation() {
        let ds = numbered(50);
        let run = |seed| -> Vec<usize> {
            batches(&ds, 8, &mut Prng::new(seed), true).unwrap().flat_map(|(_, l)| l).collect()
        };
        let a = run(3);
        assert_eq!(a, run(3));
        assert_ne!(a, run(4));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn images_follow_labels() {
        let ds = numbered(9);
        for (x, l) in batches(&ds, 4, &mut Prng::new(1), true).unwrap() {
            for (v, &i) in x.data().iter().zip(&l) {
                assert_eq!(*v, i as f64 / 9.0);
            }
        }
    }

    #[test]
    fn zero_batch_rejected() {
        assert!(batches(&numbered(3), 0, &mut Prng::new(0), false).is_err());
    }
}
