//! Small index helpers shared by the op kernels.

use crate::error::{Error, Result};

/// Panics unless a `rows x cols` matrix with the given strides fits in `len`.
pub(crate) fn check_extent(len: usize, rows: usize, cols: usize, strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(strides.0 >= 0 && strides.1 >= 0, "negative strides are not supported");
    let last = (rows - 1) * strides.0 as usize + (cols - 1) * strides.1 as usize;
    assert!(last < len, "gemm operand of {rows}x{cols} does not fit in {len} values");
}

/// How a right-hand operand is broadcast against a left-hand shape.
#[derive(Clone, Debug)]
pub(crate) enum Broadcast {
    Same,
    /// rhs covers the trailing dims: `rhs[i % len]`.
    Inner(usize),
    /// rhs covers the leading dims, trailing dims are 1: `rhs[i / inner]`.
    Outer(usize),
    /// Arbitrary right-aligned broadcast; per-dim rhs strides (0 where broadcast).
    General { out_shape: Vec<usize>, strides: Vec<usize> },
}

impl Broadcast {
    pub(crate) fn plan(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Self> {
        if lhs == rhs {
            return Ok(Self::Same);
        }
        let mismatch = || Error::Shape { op, detail: format!("cannot broadcast {rhs:?} onto {lhs:?}") };
        if rhs.len() > lhs.len() {
            // allow leading unit dims on the rhs
            let extra = rhs.len() - lhs.len();
            if rhs[..extra].iter().any(|&d| d != 1) {
                return Err(mismatch());
            }
            return Self::plan(op, lhs, &rhs[extra..]);
        }
        let offset = lhs.len() - rhs.len();
        let aligned: Vec<usize> = std::iter::repeat(1).take(offset).chain(rhs.iter().copied()).collect();
        for (&l, &r) in lhs.iter().zip(&aligned) {
            if r != l && r != 1 {
                return Err(mismatch());
            }
        }
        let rhs_len: usize = rhs.iter().product();
        // trailing block of lhs equal to rhs (ignoring leading ones of rhs)
        let first_real = aligned.iter().position(|&d| d != 1).unwrap_or(aligned.len());
        if aligned[first_real..] == lhs[first_real..] {
            return Ok(Self::Inner(rhs_len.max(1)));
        }
        // leading block equal, trailing ones
        let last_real = aligned.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
        if aligned[..last_real] == lhs[..last_real] {
            let inner: usize = lhs[last_real..].iter().product();
            return Ok(Self::Outer(inner.max(1)));
        }
        let mut strides = vec![0; lhs.len()];
        let mut acc = 1;
        for d in (0..lhs.len()).rev() {
            if aligned[d] != 1 {
                strides[d] = acc;
            }
            acc *= aligned[d];
        }
        Ok(Self::General { out_shape: lhs.to_vec(), strides })
    }

    /// rhs index for every lhs linear index.
    pub(crate) fn indices(&self, lhs_len: usize) -> Vec<usize> {
        match self {
            Self::Same => (0..lhs_len).collect(),
            Self::Inner(len) => (0..lhs_len).map(|i| i % len).collect(),
            Self::Outer(inner) => (0..lhs_len).map(|i| i / inner).collect(),
            Self::General { out_shape, strides } => {
                let mut out = Vec::with_capacity(lhs_len);
                let mut counter = vec![0usize; out_shape.len()];
                for _ in 0..lhs_len {
                    out.push(counter.iter().zip(strides).map(|(c, s)| c * s).sum());
                    for d in (0..counter.len()).rev() {
                        counter[d] += 1;
                        if counter[d] < out_shape[d] {
                            break;
                        }
                        counter[d] = 0;
                    }
                }
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_patterns() {
        assert!(matches!(Broadcast::plan("t", &[4, 3], &[3]).unwrap(), Broadcast::Inner(3)));
        assert!(matches!(Broadcast::plan("t", &[4, 3], &[4, 1]).unwrap(), Broadcast::Outer(3)));
        assert!(matches!(Broadcast::plan("t", &[2, 2, 3, 3], &[1, 1, 3, 3]).unwrap(), Broadcast::Inner(9)));
        assert!(matches!(Broadcast::plan("t", &[4, 3], &[1]).unwrap(), Broadcast::Inner(1)));
        let g = Broadcast::plan("t", &[2, 3, 2], &[2, 1, 2]).unwrap();
        assert_eq!(g.indices(12), vec![0, 1, 0, 1, 0, 1, 2, 3, 2, 3, 2, 3]);
        assert!(Broadcast::plan("t", &[4, 3], &[2]).is_err());
    }
}
