use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
///
/// The first axis is the batch, the second the channel, the rest spatial
/// whenever a tensor flows through the network ops.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(
                "tensor",
                format!("zero extent in shape {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", "element count", numel, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of elements per channel for a `[B, C, spatial...]` tensor.
    pub fn spatial_len(&self) -> usize {
        self.shape[2..].iter().product()
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// Sub-tensor `[index, ...]` along the first axis.
    pub fn select_first(&self, index: usize) -> Tensor {
        let stride: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.data[index * stride..(index + 1) * stride].to_vec(),
        }
    }

    /// Stacks tensors along the first axis; all must share the trailing shape.
    pub fn stack_first(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors to stack"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.numel()).sum());
        let mut lead = 0;
        for t in parts {
            if &t.shape[1..] != tail {
                return Err(Error::invalid(
                    "stack",
                    format!("trailing shape {:?} differs from {:?}", &t.shape[1..], tail),
                ));
            }
            lead += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Tensor { shape, data })
    }

    /// Removes index `index` along `axis`, shrinking that extent by one.
    pub fn remove_index(&mut self, axis: usize, index: usize) -> Result<()> {
        let extent = self.shape[axis];
        if index >= extent {
            return Err(Error::invalid(
                "remove_index",
                format!("index {index} out of range for axis {axis} of extent {extent}"),
            ));
        }
        if extent == 1 {
            return Err(Error::invalid(
                "remove_index",
                "cannot remove the only slice",
            ));
        }
        self.data = remove_slice(&self.data, &self.shape, axis, index);
        self.shape[axis] -= 1;
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shapes differ");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Drops one slice of a row-major buffer along `axis`.
pub(crate) fn remove_slice(data: &[f64], shape: &[usize], axis: usize, index: usize) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(data.len() - outer * inner);
    for o in 0..outer {
        let base = o * extent * inner;
        out.extend_from_slice(&data[base..base + index * inner]);
        out.extend_from_slice(&data[base + (index + 1) * inner..base + extent * inner]);
    }
    out
}
