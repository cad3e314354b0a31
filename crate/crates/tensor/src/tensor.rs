use std::fmt;

/// `[n, c, h, w]`
pub type Shape = [usize; 4];

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; numel(shape)],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(numel(shape), data.len(), "data length does not match shape {shape:?}");
        Self { shape, data }
    }

    /// A shape-only placeholder with no backing storage, used by dry tapes.
    pub(crate) fn phantom(shape: Shape) -> Self {
        Self {
            shape,
            data: Vec::new(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec([1, 1, 1, 1], vec![value])
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn numel(&self) -> usize {
        numel(self.shape)
    }

    pub fn is_phantom(&self) -> bool {
        self.data.is_empty() && self.numel() > 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + h) * ws + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Contiguous `[c, h, w]` slab of sample `n`.
    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Stacks single-sample tensors along the batch axis.
    pub fn stack(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "cannot stack zero tensors");
        let [_, c, h, w] = parts[0].shape;
        let mut data = Vec::with_capacity(parts.len() * c * h * w);
        let mut n = 0;
        for p in parts {
            assert_eq!([p.shape[1], p.shape[2], p.shape[3]], [c, h, w]);
            data.extend_from_slice(&p.data);
            n += p.shape[0];
        }
        Tensor::from_vec([n, c, h, w], data)
    }

    /// Sample `n` as a batch of one.
    pub fn select(&self, n: usize) -> Tensor {
        let [_, c, h, w] = self.shape;
        Tensor::from_vec([1, c, h, w], self.sample(n).to_vec())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub(crate) fn numel(shape: Shape) -> usize {
    shape.iter().product()
}
