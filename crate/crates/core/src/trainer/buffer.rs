use rand::Rng;

use crate::error::Result;
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Bounded history of generated images shown to a discriminator.
///
/// Until full, every push is stored and returned. Afterwards a push returns
/// itself with probability 0.5; otherwise a uniformly chosen stored image is
/// returned and replaced by the new one.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    capacity: usize,
    slots: Vec<Tensor<f32>>,
    rng: RngState,
}

impl ImageBuffer {
    pub fn new(capacity: usize, rng: RngState) -> Self {
        assert!(capacity >= 1, "buffer capacity must be >= 1");
        ImageBuffer {
            capacity,
            slots: Vec::with_capacity(capacity),
            rng,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[Tensor<f32>] {
        &self.slots
    }

    pub fn rng(&self) -> RngState {
        self.rng
    }

    /// Rebuilds a buffer from checkpointed contents.
    pub fn restore(capacity: usize, slots: Vec<Tensor<f32>>, rng: RngState) -> Self {
        assert!(slots.len() <= capacity);
        ImageBuffer { capacity, slots, rng }
    }

    pub fn push_sample(&mut self, img: Tensor<f32>) -> Tensor<f32> {
        if self.slots.len() < self.capacity {
            self.slots.push(img.clone());
            return img;
        }
        if self.rng.gen_bool(0.5) {
            let i = self.rng.gen_range(0..self.capacity);
            std::mem::replace(&mut self.slots[i], img)
        } else {
            img
        }
    }

    /// [`ImageBuffer::push_sample`] for every image of an `[n, c, h, w]` batch.
    pub fn query(&mut self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let out: Vec<Tensor<f32>> = (0..batch.shape()[0])
            .map(|i| self.push_sample(batch.index_outer(i)))
            .collect();
        Tensor::stack(&out.iter().collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: f32) -> Tensor<f32> {
        Tensor::full(&[1, 2, 2], v)
    }

    #[test]
    fn first_push_is_returned_and_stored() {
        let mut b = ImageBuffer::new(50, RngState::new(0));
        assert_eq!(b.push_sample(img(1.0)), img(1.0));
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn capacity_holds() {
        let mut b = ImageBuffer::new(50, RngState::new(1));
        for i in 0..1000 {
            b.push_sample(img(i as f32));
            assert_eq!(b.len(), (i + 1).min(50));
        }
    }

    #[test]
    fn query_keeps_batch_shape() {
        let mut b = ImageBuffer::new(3, RngState::new(2));
        let batch = Tensor::stack(&[&img(1.0), &img(2.0)]).unwrap();
        assert_eq!(b.query(&batch).unwrap(), batch);
        assert_eq!(b.query(&batch).unwrap().shape(), &[2, 1, 2, 2]);
    }
}
