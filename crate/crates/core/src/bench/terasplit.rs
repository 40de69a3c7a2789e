//! Best single entropy split over key-sorted records.
//!
//! The feature is the 10-byte key read as a big-endian integer; the class
//! label is the parity of the first payload byte. A candidate threshold sits
//! between each pair of distinct adjacent keys (the floor of their
//! midpoint), and records with `key <= threshold` go left.

use super::{BenchError, KEY_LEN};

/// Shannon entropy in bits, with `0 log 0 = 0`.
pub fn entropy(counts: &[u64]) -> Result<f64, BenchError> {
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return Err(BenchError::EmptyCounts);
    }
    let n = n as f64;
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / n;
            h -= p * p.log2();
        }
    }
    Ok(h.max(0.0))
}

/// Information gain of splitting `parent` into `left` and the remainder.
/// Both sides must be non-empty.
pub fn split_gain(parent: [u64; 2], left: [u64; 2]) -> f64 {
    let right = [parent[0] - left[0], parent[1] - left[1]];
    let n = (parent[0] + parent[1]) as f64;
    let nl = (left[0] + left[1]) as f64;
    let nr = (right[0] + right[1]) as f64;
    let h = entropy(&parent).expect("non-empty parent");
    let hl = entropy(&left).expect("non-empty left side");
    let hr = entropy(&right).expect("non-empty right side");
    (h - (nl / n) * hl - (nr / n) * hr).max(0.0)
}

pub fn key_value(record: &[u8]) -> u128 {
    let mut b = [0u8; 16];
    b[16 - KEY_LEN..].copy_from_slice(&record[..KEY_LEN]);
    u128::from_be_bytes(b)
}

pub fn label_of(record: &[u8]) -> usize {
    (record[KEY_LEN] & 1) as usize
}

pub fn midpoint(lo: u128, hi: u128) -> u128 {
    lo + (hi - lo) / 2
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    /// `None` when no split separates anything.
    pub threshold: Option<u128>,
    pub gain: f64,
    pub parent_entropy: f64,
    pub left: [u64; 2],
    pub right: [u64; 2],
}

impl SplitResult {
    /// One-line summary, e.g. for the command line.
    pub fn to_line(&self) -> String {
        let th = match self.threshold {
            Some(t) => format!("\"{t:020x}\""),
            None => "null".into(),
        };
        format!(
            "{{\"threshold\": {th}, \"gain\": {:.9}, \"parent_entropy\": {:.9}, \"left\": [{}, {}], \"right\": [{}, {}]}}",
            self.gain, self.parent_entropy, self.left[0], self.left[1], self.right[0], self.right[1]
        )
    }
}

/// Push records in key order, then ask for the split. Each record is looked
/// at once; the class counts at every key boundary are kept until the totals
/// are known.
#[derive(Debug, Default)]
pub struct SplitScanner {
    seen: [u64; 2],
    prev: Option<u128>,
    /// (threshold, class counts at or below it)
    candidates: Vec<(u128, [u64; 2])>,
}

impl SplitScanner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: u128, label: usize) -> Result<(), BenchError> {
        if let Some(p) = self.prev {
            if key < p {
                return Err(BenchError::NotSorted { at: self.seen[0] + self.seen[1] });
            }
            if key > p {
                self.candidates.push((midpoint(p, key), self.seen));
            }
        }
        self.seen[label & 1] += 1;
        self.prev = Some(key);
        Ok(())
    }

    pub fn push_record(&mut self, record: &[u8]) -> Result<(), BenchError> {
        if record.len() <= KEY_LEN {
            return Err(BenchError::BadRecord(record.len()));
        }
        self.push(key_value(record), label_of(record))
    }

    pub fn records(&self) -> u64 {
        self.seen[0] + self.seen[1]
    }

    pub fn finish(self) -> Result<SplitResult, BenchError> {
        let parent = self.seen;
        let parent_entropy = entropy(&parent)?;
        let mut best: Option<(u128, f64, [u64; 2])> = None;
        for (t, left) in self.candidates {
            let g = split_gain(parent, left);
            if g > 0.0 && best.is_none_or(|b| g > b.1) {
                best = Some((t, g, left));
            }
        }
        Ok(match best {
            Some((t, gain, left)) => SplitResult {
                threshold: Some(t),
                gain,
                parent_entropy,
                left,
                right: [parent[0] - left[0], parent[1] - left[1]],
            },
            None => SplitResult { threshold: None, gain: 0.0, parent_entropy, left: parent, right: [0, 0] },
        })
    }
}

/// Split over `(key, label)` pairs given in key order.
pub fn terasplit(records: impl IntoIterator<Item = (u128, usize)>) -> Result<SplitResult, BenchError> {
    let mut s = SplitScanner::new();
    for (k, l) in records {
        s.push(k, l)?;
    }
    s.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn entropy_values() {
        assert_eq!(entropy(&[5, 5]).unwrap(), 1.0);
        assert_eq!(entropy(&[10, 0]).unwrap(), 0.0);
        assert!((entropy(&[2, 6]).unwrap() - 0.811278).abs() < 1e-6);
        assert!(matches!(entropy(&[0, 0]), Err(BenchError::EmptyCounts)));
    }

    #[test]
    fn perfect_split_between_three_and_four() {
        let r = terasplit([(1, 0), (2, 0), (3, 0), (4, 1), (5, 1), (6, 1)]).unwrap();
        assert_eq!(r.threshold, Some(3));
        assert_eq!(r.gain, 1.0);
        assert_eq!((r.left, r.right), ([3, 0], [0, 3]));
    }

    #[test]
    fn uniform_labels_do_not_split() {
        let r = terasplit((1..=8).map(|k| (k, 1))).unwrap();
        assert_eq!(r.threshold, None);
        assert_eq!(r.gain, 0.0);
    }

    #[test]
    fn unsorted_input_rejected() {
        assert!(matches!(terasplit([(5, 0), (4, 1)]), Err(BenchError::NotSorted { at: 1 })));
    }

    #[test]
    fn left_side_is_everything_at_or_below_threshold() {
        let data = [(1, 0), (2, 0), (2, 0), (2, 1), (9, 1), (9, 1)];
        let r = terasplit(data).unwrap();
        let t = r.threshold.unwrap();
        let mut left = [0u64; 2];
        for (k, l) in data {
            if k <= t {
                left[l] += 1;
            }
        }
        assert_eq!(r.left, left);
        assert_eq!(t, 5);
    }

    proptest! {
        #[test]
        fn entropy_symmetric_and_bounded(a in 0u64..1000, b in 0u64..1000, c in 0u64..1000) {
            prop_assume!(a + b + c > 0);
            let h = entropy(&[a, b, c]).unwrap();
            prop_assert!((h - entropy(&[c, a, b]).unwrap()).abs() < 1e-12);
            prop_assert!(h <= 3f64.log2() + 1e-12);
            if a == b && b == c {
                prop_assert!((h - 3f64.log2()).abs() < 1e-12);
            }
        }

        #[test]
        fn gain_between_zero_and_parent(pairs in proptest::collection::vec((0u128..50, 0usize..2), 1..200)) {
            let mut pairs = pairs;
            pairs.sort();
            let r = terasplit(pairs).unwrap();
            prop_assert!(r.gain >= 0.0 && r.gain <= r.parent_entropy + 1e-12);
            prop_assert!(r.parent_entropy <= 1.0 + 1e-12);
        }
    }
}
