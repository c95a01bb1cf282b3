//! Complete binary sum tree over a fixed number of non-negative weights.

#[derive(Debug, Clone)]
pub struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(leaves: usize) -> Self {
        let cap = leaves.max(1).next_power_of_two();
        Self {
            leaves,
            nodes: vec![0.0; 2 * cap],
        }
    }

    fn cap(&self) -> usize {
        self.nodes.len() / 2
    }

    pub fn len(&self) -> usize {
        self.leaves
    }

    pub fn is_empty(&self) -> bool {
        self.leaves == 0
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.cap() + i]
    }

    /// Sets leaf `i`; ancestors are recomputed as `left + right` so the
    /// tree never accumulates rounding drift.
    pub fn set(&mut self, i: usize, w: f64) {
        debug_assert!(w >= 0.0 && i < self.leaves);
        let mut pos = self.cap() + i;
        self.nodes[pos] = w;
        while pos > 1 {
            pos /= 2;
            self.nodes[pos] = self.nodes[2 * pos] + self.nodes[2 * pos + 1];
        }
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    /// Leaf `i` with `prefix(i) <= target < prefix(i) + w_i`. Ties go to
    /// the lowest index; zero-weight leaves are never returned.
    pub fn find(&self, mut target: f64) -> Option<usize> {
        if self.total() <= 0.0 {
            return None;
        }
        let mut pos = 1;
        while pos < self.cap() {
            let left = self.nodes[2 * pos];
            if target < left || self.nodes[2 * pos + 1] <= 0.0 {
                pos *= 2;
            } else {
                target -= left;
                pos = 2 * pos + 1;
            }
        }
        let mut i = pos - self.cap();
        // rounding can land on an empty leaf; step to the nearest occupied one
        if self.get(i) <= 0.0 {
            i = (0..self.leaves)
                .rev()
                .find(|&j| j < i && self.get(j) > 0.0)
                .or_else(|| (i..self.leaves).find(|&j| self.get(j) > 0.0))?;
        }
        Some(i)
    }

    /// Sum of all leaves recomputed from scratch.
    pub fn recomputed_total(&self) -> f64 {
        let mut level: Vec<f64> = self.nodes[self.cap()..].to_vec();
        while level.len() > 1 {
            level = level.chunks(2).map(|c| c[0] + c[1]).collect();
        }
        level[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn picks_by_prefix() {
        let mut t = SumTree::new(5);
        t.set(0, 1.0);
        t.set(2, 2.0);
        t.set(4, 0.5);
        assert_eq!(t.total(), 3.5);
        assert_eq!(t.find(0.0), Some(0));
        assert_eq!(t.find(0.999), Some(0));
        assert_eq!(t.find(1.0), Some(2));
        assert_eq!(t.find(3.2), Some(4));
        assert_eq!(t.find(10.0), Some(4));
        t.set(4, 0.0);
        assert_eq!(t.find(3.2), Some(2));
        assert_eq!(SumTree::new(3).find(0.0), None);
    }

    proptest! {
        #[test]
        fn total_matches_scratch(ws in proptest::collection::vec(0.0f64..10.0, 1..40), updates in proptest::collection::vec((0usize..40, 0.0f64..5.0), 0..50)) {
            let mut t = SumTree::new(ws.len());
            for (i, &w) in ws.iter().enumerate() { t.set(i, w); }
            for (i, w) in updates { t.set(i % ws.len(), w); }
            prop_assert_eq!(t.total(), t.recomputed_total());
            if t.total() > 0.0 {
                let i = t.find(t.total() * 0.5).unwrap();
                prop_assert!(t.get(i) > 0.0);
            }
        }
    }
}
