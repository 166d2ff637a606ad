//! Small dense kernels shared by the forward and backward passes.

use super::Matrix;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = z.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in z.iter_mut() {
        *v *= inv;
    }
}

/// Vector-Jacobian product of softmax: given p = softmax(z) and dL/dp,
/// returns dL/dz.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, di)| pi * (di - dot)).collect()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `x · w` for x: n × k, w: k × m.
pub fn matmul(x: &Matrix, w: &Matrix) -> Matrix {
    debug_assert_eq!(x.cols, w.rows);
    let mut out = Matrix::zeros(x.rows, w.cols);
    for i in 0..x.rows {
        let xi = x.row(i);
        let oi = &mut out.data[i * w.cols..(i + 1) * w.cols];
        for (kk, &a) in xi.iter().enumerate() {
            if a != 0.0 {
                axpy(a, w.row(kk), oi);
            }
        }
    }
    out
}

/// `x · w + b` with b broadcast over rows.
pub fn affine(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut out = matmul(x, w);
    for i in 0..out.rows {
        for (o, bb) in out.row_mut(i).iter_mut().zip(&b.data) {
            *o += bb;
        }
    }
    out
}

/// `g · wᵀ` for g: n × m, w: k × m.
pub fn matmul_transposed(g: &Matrix, w: &Matrix) -> Matrix {
    debug_assert_eq!(g.cols, w.cols);
    let mut out = Matrix::zeros(g.rows, w.rows);
    for i in 0..g.rows {
        let gi = g.row(i);
        for kk in 0..w.rows {
            out.data[i * w.rows + kk] = dot(gi, w.row(kk));
        }
    }
    out
}

/// `acc += xᵀ · g` for x: n × k, g: n × m, acc: k × m.
pub fn accumulate_xt_g(x: &Matrix, g: &Matrix, acc: &mut Matrix) {
    debug_assert_eq!(x.rows, g.rows);
    for i in 0..x.rows {
        let gi = g.row(i);
        for (kk, &a) in x.row(i).iter().enumerate() {
            if a != 0.0 {
                axpy(a, gi, acc.row_mut(kk));
            }
        }
    }
}

/// `acc += Σ_rows g`.
pub fn accumulate_rows(g: &Matrix, acc: &mut Matrix) {
    for i in 0..g.rows {
        for (a, v) in acc.data.iter_mut().zip(g.row(i)) {
            *a += v;
        }
    }
}

pub fn add_in_place(a: &mut Matrix, b: &Matrix) {
    for (x, y) in a.data.iter_mut().zip(&b.data) {
        *x += y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_fixed_point_and_grad() {
        assert_eq!(gelu(0.0), 0.0);
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softmax_sums_to_one_and_backward_matches_fd() {
        let z = [0.3, -1.2, 2.0, 0.0];
        let p = softmax(&z);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let dp = [0.5, -0.25, 1.0, 2.0];
        let dz = softmax_backward(&p, &dp);
        for i in 0..4 {
            let h = 1e-6;
            let mut zp = z;
            zp[i] += h;
            let mut zm = z;
            zm[i] -= h;
            let f = |zz: &[f64]| dot(&softmax(zz), &dp);
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            assert!((fd - dz[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let x = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(matmul(&x, &w).data, vec![4.0, 5.0, 10.0, 11.0]);
        let wt = Matrix::from_vec(2, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        assert_eq!(matmul_transposed(&x, &wt).data, vec![4.0, 5.0, 10.0, 11.0]);
        let mut acc = Matrix::zeros(3, 2);
        let g = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        accumulate_xt_g(&x, &g, &mut acc);
        assert_eq!(acc.data, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
