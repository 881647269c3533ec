//! Channel-major binary spike tensors.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub const fn unravel(&self, idx: usize) -> (usize, usize, usize) {
        let plane = self.height * self.width;
        (idx / plane, (idx % plane) / self.width, idx % self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeTensor {
    pub shape: Shape,
    pub data: Vec<u8>,
}

impl SpikeTensor {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0; shape.len()],
        }
    }

    pub fn from_bits(shape: Shape, data: Vec<u8>) -> Self {
        assert_eq!(shape.len(), data.len());
        debug_assert!(data.iter().all(|&b| b <= 1));
        Self { shape, data }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> bool {
        self.data[self.shape.index(c, y, x)] != 0
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: bool) {
        let i = self.shape.index(c, y, x);
        self.data[i] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&b| b as usize).sum()
    }

    /// Flat indices of the set elements, ascending.
    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| (b != 0).then_some(i))
    }
}
