use super::Matrix;
use crate::error::{Error, Result};

/// Regression slope along time (columns) over a `width`-frame window,
/// with edge frames replicated. `order = 2` applies the operator twice.
pub fn delta(features: &Matrix, width: usize, order: usize) -> Result<Matrix> {
    if width < 3 || width % 2 == 0 {
        return Err(Error::invalid(format!("delta width must be odd and ≥ 3, got {width}")));
    }
    if !(1..=2).contains(&order) {
        return Err(Error::invalid(format!("delta order must be 1 or 2, got {order}")));
    }
    let mut out = slope(features, width / 2);
    if order == 2 {
        out = slope(&out, width / 2);
    }
    Ok(out)
}

fn slope(f: &Matrix, half: usize) -> Matrix {
    let n = half as isize;
    let denom: f64 = (1..=n).map(|i| 2.0 * (i * i) as f64).sum();
    let last = f.cols as isize - 1;
    let mut out = Matrix::zeros(f.rows, f.cols);
    for r in 0..f.rows {
        let row = f.row(r);
        for t in 0..f.cols as isize {
            let mut acc = 0.0;
            for i in 1..=n {
                let fwd = row[(t + i).min(last) as usize];
                let back = row[(t - i).max(0) as usize];
                acc += i as f64 * (fwd - back);
            }
            out.set(r, t as usize, acc / denom);
        }
    }
    out
}
