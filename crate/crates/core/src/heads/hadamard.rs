//! Sylvester-construction Hadamard matrices.

use crate::error::{Error, Result};

/// Square `+1/-1` matrix of order `2^k`, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HadamardMatrix {
    order: usize,
    data: Vec<i8>,
}

impl HadamardMatrix {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.data[i * self.order + j]
    }

    pub fn row(&self, i: usize) -> &[i8] {
        &self.data[i * self.order..(i + 1) * self.order]
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.data
    }
}

/// `H_1 = [1]`, `H_2m = [[H_m, H_m], [H_m, -H_m]]`.
pub fn hadamard_matrix(order: usize) -> Result<HadamardMatrix> {
    if !order.is_power_of_two() {
        return Err(Error::InvalidOrder(order));
    }
    let mut data = vec![1i8];
    let mut m = 1;
    while m < order {
        let n = 2 * m;
        let mut next = vec![0i8; n * n];
        for i in 0..m {
            for j in 0..m {
                let v = data[i * m + j];
                next[i * n + j] = v;
                next[i * n + j + m] = v;
                next[(i + m) * n + j] = v;
                next[(i + m) * n + j + m] = -v;
            }
        }
        data = next;
        m = n;
    }
    Ok(HadamardMatrix { order, data })
}

/// Exponent `k = ceil(log2(max(n_c, classes)))` of the smallest Sylvester
/// order that covers both head dimensions.
pub fn sylvester_exponent(in_features: usize, classes: usize) -> u32 {
    let m = in_features.max(classes).max(1);
    m.next_power_of_two().trailing_zeros()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_orders() {
        assert_eq!(hadamard_matrix(1).unwrap().as_slice(), &[1]);
        assert_eq!(hadamard_matrix(2).unwrap().as_slice(), &[1, 1, 1, -1]);
        let h4 = hadamard_matrix(4).unwrap();
        assert_eq!(h4.row(3), &[1, -1, -1, 1]);
    }

    #[test]
    fn first_row_and_column_are_ones() {
        let h = hadamard_matrix(64).unwrap();
        for i in 0..64 {
            assert_eq!(h.get(0, i), 1);
            assert_eq!(h.get(i, 0), 1);
        }
    }

    #[test]
    fn non_power_of_two_rejected() {
        for bad in [0, 3, 6, 12, 1000] {
            assert!(matches!(hadamard_matrix(bad), Err(Error::InvalidOrder(o)) if o == bad));
        }
    }

    #[test]
    fn exponent_rule() {
        assert_eq!(sylvester_exponent(512, 1000), 10);
        assert_eq!(sylvester_exponent(512, 512), 9);
        assert_eq!(sylvester_exponent(64, 10), 6);
        assert_eq!(sylvester_exponent(1, 1), 0);
        assert_eq!(sylvester_exponent(3, 2), 2);
    }
}
