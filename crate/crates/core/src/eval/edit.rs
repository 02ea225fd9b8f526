//! Levenshtein distance and symbol error rate.

/// Minimum number of insertions, deletions and substitutions turning `a`
/// into `b`.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance over reference length, capped at 1.
pub fn symbol_error_rate(hypothesis: &[usize], reference: &[usize]) -> f64 {
    if reference.is_empty() {
        return if hypothesis.is_empty() { 0.0 } else { 1.0 };
    }
    (edit_distance(hypothesis, reference) as f64 / reference.len() as f64).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    /// Plain recursion over suffixes with memoization.
    fn oracle(a: &[u8], b: &[u8], memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        if let Some(&v) = memo.get(&(a.len(), b.len())) {
            return v;
        }
        let v = (oracle(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]))
            .min(oracle(&a[1..], b, memo) + 1)
            .min(oracle(a, &b[1..], memo) + 1);
        memo.insert((a.len(), b.len()), v);
        v
    }

    #[test]
    fn known_values() {
        assert_eq!(edit_distance(b"kitten", b"sitting"), 3);
        assert_eq!(edit_distance::<u8>(b"", b"abc"), 3);
        assert_eq!(edit_distance(b"abc", b"abc"), 0);
        assert_eq!(symbol_error_rate(&[1, 2, 3, 4], &[1, 3, 4]), 1.0 / 3.0);
        assert_eq!(symbol_error_rate(&[], &[]), 0.0);
        assert_eq!(symbol_error_rate(&[0; 9], &[1]), 1.0);
    }

    #[test]
    fn exhaustive_short_binary_sequences() {
        let all = |n: usize| -> Vec<Vec<u8>> {
            (0..1u32 << n)
                .map(|m| (0..n).map(|i| ((m >> i) & 1) as u8).collect())
                .collect()
        };
        for la in 0..=4 {
            for lb in 0..=4 {
                for a in all(la) {
                    for b in all(lb) {
                        assert_eq!(edit_distance(&a, &b), oracle(&a, &b, &mut HashMap::new()));
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn matches_recursive_oracle(
            a in proptest::collection::vec(0u8..4, 0..=10),
            b in proptest::collection::vec(0u8..4, 0..=10),
        ) {
            prop_assert_eq!(edit_distance(&a, &b), oracle(&a, &b, &mut HashMap::new()));
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert!(edit_distance(&a, &b) <= a.len().max(b.len()));
        }
    }
}
