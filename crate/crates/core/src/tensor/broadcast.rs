use crate::error::{Error, Result};

/// Numpy-style broadcast of two shapes, aligned on trailing axes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!(
                    "cannot broadcast {a:?} with {b:?}"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` laid out against `out` (0 along broadcast axes).
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// For every flat index of `out`, the flat index into an operand of `shape`.
pub(crate) fn broadcast_index(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    let len: usize = shape.iter().product();
    if shape == out {
        return (0..n).collect();
    }
    if len == 1 {
        return vec![0; n];
    }
    // operand equal to a trailing block of the output
    let suffix = shape.len() <= out.len()
        && shape.iter().zip(&out[out.len() - shape.len()..]).all(|(a, b)| a == b);
    if suffix {
        return (0..n).map(|i| i % len).collect();
    }
    let strides = aligned_strides(shape, out);
    let mut idx = vec![0usize; out.len()];
    let mut res = Vec::with_capacity(n);
    let mut flat = 0usize;
    for _ in 0..n {
        res.push(flat);
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            flat += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            flat -= strides[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    res
}
