//! Mapping between complex matrices/vectors and the 2-channel real images
//! the networks operate on.
//!
//! A complex N×M matrix becomes a `[2, N, M]` tensor: channel 0 holds the
//! real part, channel 1 the imaginary part, rows index BS antennas and
//! columns RIS elements. The vector form follows the column-major `vec`
//! convention, so `h_vec[m·N + n] = H[n, m]`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Complex matrix → `[2, rows, cols]` image.
pub fn matrix_to_image(h: &DMatrix<Complex64>) -> Tensor {
    let (n, m) = (h.nrows(), h.ncols());
    let mut data = vec![0.0; 2 * n * m];
    for col in 0..m {
        for row in 0..n {
            let v = h[(row, col)];
            data[row * m + col] = v.re;
            data[n * m + row * m + col] = v.im;
        }
    }
    Tensor::new(vec![2, n, m], data).expect("shape consistent")
}

/// Column-major complex vector → `[2, rows, cols]` image.
pub fn vec_to_image(v: &DVector<Complex64>, rows: usize, cols: usize) -> Result<Tensor> {
    if v.len() != rows * cols {
        return Err(Error::dim(
            "vec_to_image",
            format!("vector length {} != {rows}×{cols}", v.len()),
        ));
    }
    Ok(matrix_to_image(&DMatrix::from_column_slice(rows, cols, v.as_slice())))
}

/// `[2, rows, cols]` image → column-major complex vector.
pub fn image_to_vec(t: &Tensor) -> Result<DVector<Complex64>> {
    let [two, n, m] = *t.shape() else {
        return Err(Error::dim("image_to_vec", format!("expected [2,N,M], got {:?}", t.shape())));
    };
    if two != 2 {
        return Err(Error::dim("image_to_vec", format!("leading axis must be 2, got {two}")));
    }
    let d = t.data();
    let mut out = Vec::with_capacity(n * m);
    for col in 0..m {
        for row in 0..n {
            out.push(Complex64::new(d[row * m + col], d[n * m + row * m + col]));
        }
    }
    Ok(DVector::from_vec(out))
}
