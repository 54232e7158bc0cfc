use crate::error::{invalid, Result};
use crate::numerics::RngStream;

/// Masked-count curve `m(k) = ceil(n cos(pi k / 2K))`, `k = 0..=K`.
pub fn cosine_masked_counts(n: usize, k: usize) -> Vec<usize> {
    (0..=k).map(|i| masked_count(n, k, i)).collect()
}

fn masked_count(n: usize, k: usize, i: usize) -> usize {
    if i == 0 {
        return n;
    }
    if i == k {
        return 0;
    }
    let c = (std::f64::consts::FRAC_PI_2 * i as f64 / k as f64).cos();
    // guard against n*cos landing a hair above an integer
    // v >= 0, so truncating casts stand in for round and ceil
    let v = n as f64 * c;
    let r = (v + 0.5) as usize;
    if (v - r as f64).abs() < 1e-9 {
        r
    } else {
        let f = v as usize;
        f + usize::from((f as f64) < v)
    }
}

/// Set sizes `n_k = m(k-1) - m(k)` of the cosine schedule. Empty buckets
/// are filled one token at a time from the currently largest bucket, so
/// every size is at least 1 and the sizes still sum to `n`.
pub fn cosine_set_sizes(n: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return invalid(format!("need 1 <= K <= n, got K={k}, n={n}"));
    }
    let mut sizes = Vec::with_capacity(k);
    let mut prev = n;
    let mut empty = 0;
    for i in 1..=k {
        let m = masked_count(n, k, i);
        sizes.push(prev - m);
        empty += usize::from(prev == m);
        prev = m;
    }
    if empty > 0 {
        // Largest bucket gives first, ties to the lowest index. A donor
        // drops to the next level down, so sweeping levels in index order
        // replays that sequence without a heap.
        let mut level = sizes.iter().copied().max().unwrap_or(0);
        let mut left = empty;
        while left > 0 && level >= 2 {
            for s in sizes.iter_mut().filter(|s| **s == level) {
                *s -= 1;
                left -= 1;
                if left == 0 {
                    break;
                }
            }
            level -= 1;
        }
        for s in sizes.iter_mut().filter(|s| **s == 0) {
            *s = 1;
        }
    }
    Ok(sizes)
}

/// Fisher-Yates shuffle of `0..n`.
pub fn sample_permutation(n: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        p.swap(i, j);
    }
    p
}

/// Decoding order for one frame: positions `perm[s[k]..s[k+1]]` are
/// revealed at step `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub perm: Vec<usize>,
    pub sizes: Vec<usize>,
    pub cumulative: Vec<usize>,
}

impl MaskPlan {
    pub fn new(n: usize, k: usize, rng: &mut RngStream) -> Result<Self> {
        let sizes = cosine_set_sizes(n, k)?;
        Self::from_parts(sample_permutation(n, rng), sizes)
    }

    pub fn from_parts(perm: Vec<usize>, sizes: Vec<usize>) -> Result<Self> {
        let n = perm.len();
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return invalid("mask plan order is not a permutation");
            }
        }
        if sizes.iter().sum::<usize>() != n || sizes.contains(&0) {
            return invalid(format!("set sizes {sizes:?} do not partition {n} tokens"));
        }
        let mut cumulative = vec![0];
        for s in &sizes {
            cumulative.push(cumulative.last().unwrap() + s);
        }
        Ok(Self {
            perm,
            sizes,
            cumulative,
        })
    }

    pub fn steps(&self) -> usize {
        self.sizes.len()
    }

    pub fn set(&self, k: usize) -> &[usize] {
        &self.perm[self.cumulative[k]..self.cumulative[k + 1]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Fills empty buckets one at a time from a max-heap.
    fn heap_sizes(n: usize, k: usize) -> Vec<usize> {
        use std::cmp::Reverse;
        use std::collections::BinaryHeap;
        let m = cosine_masked_counts(n, k);
        let mut sizes: Vec<usize> = m.windows(2).map(|w| w[0] - w[1]).collect();
        let mut heap: BinaryHeap<(usize, Reverse<usize>)> =
            sizes.iter().enumerate().map(|(i, &s)| (s, Reverse(i))).collect();
        for e in 0..k {
            if sizes[e] == 0 {
                let (s, Reverse(i)) = heap.pop().unwrap();
                sizes[i] = s - 1;
                sizes[e] = 1;
                heap.push((s - 1, Reverse(i)));
            }
        }
        sizes
    }

    #[test]
    fn level_sweep_matches_heap_filling() {
        for n in 1..=300 {
            for k in 1..=n {
                assert_eq!(cosine_set_sizes(n, k).unwrap(), heap_sizes(n, k), "n={n} K={k}");
            }
        }
    }

    #[test]
    fn worked_examples() {
        assert_eq!(cosine_set_sizes(16, 1).unwrap(), vec![16]);
        assert_eq!(cosine_set_sizes(16, 2).unwrap(), vec![4, 12]);
        assert!(cosine_set_sizes(4, 5).is_err());
        assert!(cosine_set_sizes(4, 0).is_err());
        assert_eq!(cosine_set_sizes(5, 5).unwrap(), vec![1; 5]);
    }

    #[test]
    fn permutation_of_one() {
        assert_eq!(sample_permutation(1, &mut RngStream::new(0)), vec![0]);
    }

    #[test]
    fn permutations_of_three_are_uniform() {
        let mut rng = RngStream::new(17);
        let mut counts = std::collections::HashMap::new();
        let draws = 60_000;
        for _ in 0..draws {
            *counts.entry(sample_permutation(3, &mut rng)).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        for (p, c) in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 1.0 / 6.0).abs() < 0.03 / 6.0, "{p:?}: {f}");
        }
    }

    #[test]
    fn plan_sets_cover_everything_once() {
        let plan = MaskPlan::new(16, 6, &mut RngStream::new(3)).unwrap();
        let mut all: Vec<usize> = (0..plan.steps()).flat_map(|k| plan.set(k).to_vec()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
        assert!(MaskPlan::from_parts(vec![0, 0], vec![2]).is_err());
    }

    proptest! {
        #[test]
        fn permutation_is_bijection(n in 1usize..200, seed in any::<u64>()) {
            let mut p = sample_permutation(n, &mut RngStream::new(seed));
            p.sort_unstable();
            prop_assert_eq!(p, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn sizes_partition(n in 1usize..300, frac in 0.0f64..1.0) {
            let k = 1 + ((n - 1) as f64 * frac) as usize;
            let s = cosine_set_sizes(n, k).unwrap();
            prop_assert_eq!(s.len(), k);
            prop_assert_eq!(s.iter().sum::<usize>(), n);
            prop_assert!(s.iter().all(|&x| x >= 1));
        }
    }
}
