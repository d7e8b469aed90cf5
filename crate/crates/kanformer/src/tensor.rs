//! Dense N-dimensional tensors: 64-bit values in row-major order.

use crate::error::{Error, Result};

/// A dense tensor. The shape is fixed at construction; `reshape` produces a
/// new tensor with the same element count and the same flat data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Dim(format!("zero extent in shape {:?}", shape)));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Element at a multi-index (row-major). Intended for tests and oracles.
    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, &ix) in idx.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            flat = flat * self.shape[i] + ix;
        }
        self.data[flat]
    }

    /// Same data, new shape. Element count must match.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        let n: usize = new_shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dim(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, new_shape
            )));
        }
        Ok(Tensor {
            shape: new_shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Consuming reshape; moves the data without copying.
    pub fn into_reshaped(self, new_shape: &[usize]) -> Result<Tensor> {
        let n: usize = new_shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dim(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, new_shape
            )));
        }
        Ok(Tensor {
            shape: new_shape.to_vec(),
            data: self.data,
        })
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Result shape of a right-aligned broadcast: extents must match or one of
/// them be 1 (a shorter shape is padded with leading 1s).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let ea = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let eb = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if ea == eb || ea == 1 || eb == 1 {
            out[i] = ea.max(eb);
        } else {
            return Err(Error::Dim(format!(
                "shapes {:?} and {:?} are not broadcastable",
                a, b
            )));
        }
    }
    Ok(out)
}

/// Strides into a tensor of shape `shape` as seen from broadcast shape
/// `full` (stride 0 on broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], full: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = full.len() - shape.len();
    let mut out = vec![0usize; full.len()];
    for i in 0..full.len() {
        if i >= offset && shape[i - offset] != 1 {
            out[i] = own[i - offset];
        }
    }
    out
}

/// Sum `grad` (laid out for shape `full`) down to shape `target`, for the
/// backward pass of broadcast operations.
pub(crate) fn reduce_to_shape(grad: &[f64], full: &[usize], target: &[usize]) -> Vec<f64> {
    if full == target {
        return grad.to_vec();
    }
    let tn: usize = target.iter().product();
    let mut out = vec![0.0; tn];
    let bstr = broadcast_strides(target, full);
    let fstr = strides(full);
    for (flat, &g) in grad.iter().enumerate() {
        let mut ti = 0;
        let mut rem = flat;
        for ax in 0..full.len() {
            let coord = rem / fstr[ax];
            rem %= fstr[ax];
            ti += coord * bstr[ax];
        }
        out[ti] += g;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn reshape_preserves_values_under_index_remapping() {
        let t = Tensor::from_fn(&[2, 6], |i| i as f64);
        let r = t.reshape(&[3, 4]).unwrap();
        assert_eq!(t.data(), r.data());
        // flat index 7 = [1,1] in 2x6 = [1,3] in 3x4
        assert_eq!(t.at(&[1, 1]), r.at(&[1, 3]));
        assert!(t.reshape(&[5, 2]).is_err());
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]).unwrap(), vec![4, 3]);
        assert_eq!(broadcast_shape(&[2, 3, 5], &[3, 1]).unwrap(), vec![2, 3, 5]);
        assert!(broadcast_shape(&[4, 3], &[2]).is_err());
    }

    #[test]
    fn reduce_sums_broadcast_axes() {
        // full [2,3], target [3]: column sums
        let g = [1.0, 2.0, 3.0, 10.0, 20.0, 30.0];
        let r = reduce_to_shape(&g, &[2, 3], &[3]);
        assert_eq!(r, vec![11.0, 22.0, 33.0]);
        // target [2,1]: row sums
        let r = reduce_to_shape(&g, &[2, 3], &[2, 1]);
        assert_eq!(r, vec![6.0, 60.0]);
    }
}
