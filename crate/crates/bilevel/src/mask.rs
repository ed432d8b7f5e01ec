//! Dense bitset over joint grid points.
//!
//! Trusted-set membership needs O(1) tests and fast intersection over grids of
//! up to ~10^7 points; a `u64`-word bitset keeps that at ~1.2 MB per mask.

/// Fixed-length bitset indexed by joint grid index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    words: Vec<u64>,
    len: usize,
}

impl Mask {
    pub fn new_false(len: usize) -> Self {
        Mask {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn new_true(len: usize) -> Self {
        let mut m = Mask {
            words: vec![u64::MAX; len.div_ceil(64)],
            len,
        };
        m.clear_tail();
        m
    }

    // Bits past `len` in the last word must stay zero so count/iteration are exact.
    fn clear_tail(&mut self) {
        let tail = self.len % 64;
        if tail != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << tail) - 1;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        debug_assert!(i < self.len);
        let bit = 1u64 << (i % 64);
        if value {
            self.words[i / 64] |= bit;
        } else {
            self.words[i / 64] &= !bit;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Elementwise AND; both masks must have equal length.
    pub fn and(&self, other: &Mask) -> Mask {
        assert_eq!(self.len, other.len, "mask length mismatch");
        Mask {
            words: self
                .words
                .iter()
                .zip(&other.words)
                .map(|(a, b)| a & b)
                .collect(),
            len: self.len,
        }
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        assert_eq!(self.len, other.len, "mask length mismatch");
        self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    /// Indices of set bits in increasing order.
    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut rem = w;
            std::iter::from_fn(move || {
                if rem == 0 {
                    None
                } else {
                    let bit = rem.trailing_zeros() as usize;
                    rem &= rem - 1;
                    Some(wi * 64 + bit)
                }
            })
        })
    }

    /// Index of the `k`-th set bit (0-based); `None` when fewer than `k+1` bits are set.
    pub fn select(&self, mut k: usize) -> Option<usize> {
        for (wi, &w) in self.words.iter().enumerate() {
            let ones = w.count_ones() as usize;
            if k < ones {
                let mut rem = w;
                for _ in 0..k {
                    rem &= rem - 1;
                }
                return Some(wi * 64 + rem.trailing_zeros() as usize);
            }
            k -= ones;
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_get_count() {
        let mut m = Mask::new_false(130);
        assert!(m.is_empty());
        m.set(0, true);
        m.set(64, true);
        m.set(129, true);
        assert_eq!(m.count_ones(), 3);
        assert!(m.get(64) && !m.get(63));
        m.set(64, false);
        assert_eq!(m.count_ones(), 2);
    }

    #[test]
    fn new_true_has_exact_len_ones() {
        let m = Mask::new_true(70);
        assert_eq!(m.count_ones(), 70);
        assert_eq!(m.iter_ones().count(), 70);
    }

    #[test]
    fn and_and_subset() {
        let mut a = Mask::new_false(100);
        let mut b = Mask::new_false(100);
        for i in (0..100).step_by(3) {
            a.set(i, true);
        }
        for i in (0..100).step_by(6) {
            b.set(i, true);
        }
        let both = a.and(&b);
        assert_eq!(both, b);
        assert!(b.is_subset_of(&a));
        assert!(!a.is_subset_of(&b));
    }

    #[test]
    fn iter_ones_matches_get() {
        let mut m = Mask::new_false(200);
        let idx = [0usize, 1, 63, 64, 65, 127, 128, 199];
        for &i in &idx {
            m.set(i, true);
        }
        let got: Vec<_> = m.iter_ones().collect();
        assert_eq!(got, idx);
    }

    #[test]
    fn select_kth_one() {
        let mut m = Mask::new_false(300);
        for &i in &[5usize, 70, 71, 250] {
            m.set(i, true);
        }
        assert_eq!(m.select(0), Some(5));
        assert_eq!(m.select(2), Some(71));
        assert_eq!(m.select(3), Some(250));
        assert_eq!(m.select(4), None);
    }
}
