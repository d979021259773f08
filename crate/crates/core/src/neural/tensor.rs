use crate::error::{Error, Result};
use crate::voxel::ScalarField;

/// Contiguous row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Single-channel volume `[1, nz, ny, nx]`; voxel order is unchanged.
    pub fn from_field(field: &ScalarField) -> Self {
        let [nx, ny, nz] = field.meta().shape;
        Self {
            shape: vec![1, nz, ny, nx],
            data: field.data().to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn scaled(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Mean squared error and its gradient with respect to `a`.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<(f64, Tensor)> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!(
            "mse of {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let n = a.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = x - y;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((
        loss / n,
        Tensor {
            shape: a.shape.clone(),
            data: grad,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_cases() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (l, g) = mse(&a, &a).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
        let (l, g) = mse(&Tensor::scalar(3.0), &Tensor::scalar(1.0)).unwrap();
        assert_eq!(l, 4.0);
        assert_eq!(g.data(), &[4.0]);
        assert!(mse(&a, &Tensor::zeros(vec![4])).is_err());
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let a = Tensor::new(vec![5], vec![0.3, -1.2, 2.0, 0.0, 0.7]).unwrap();
        let b = Tensor::new(vec![5], vec![1.0, 0.5, -0.4, 0.2, 0.7]).unwrap();
        let (_, g) = mse(&a, &b).unwrap();
        let h = 1e-6;
        for i in 0..5 {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap.data_mut()[i] += h;
            am.data_mut()[i] -= h;
            let fd = (mse(&ap, &b).unwrap().0 - mse(&am, &b).unwrap().0) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn shape_checks() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::zeros(vec![2, 3]);
        assert!(t.clone().reshaped(vec![6]).is_ok());
        assert!(t.reshaped(vec![7]).is_err());
    }
}
