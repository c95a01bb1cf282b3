use std::fmt;

/// Ulam-Harris label: a root index followed by child indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UlamHarris {
    pub root: u64,
    pub path: Vec<u32>,
}

impl UlamHarris {
    pub fn root(root: u64) -> Self {
        Self {
            root,
            path: Vec::new(),
        }
    }

    pub fn child(&self, j: u32) -> Self {
        let mut path = self.path.clone();
        path.push(j);
        Self {
            root: self.root,
            path,
        }
    }

    /// `|u|`: the sum of the child indices (0 for a root).
    pub fn weight(&self) -> u64 {
        self.path.iter().map(|&j| j as u64).sum()
    }

    pub fn depth(&self) -> usize {
        self.path.len()
    }

    /// `u|_i` for `i <= depth`.
    pub fn ancestor(&self, i: usize) -> UlamHarris {
        Self {
            root: self.root,
            path: self.path[..i].to_vec(),
        }
    }

    pub fn is_ancestor_of(&self, other: &UlamHarris) -> bool {
        self.root == other.root && other.path.starts_with(&self.path)
    }
}

impl fmt::Display for UlamHarris {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.root)?;
        for j in &self.path {
            write!(f, ".{j}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_and_ancestry() {
        let u = UlamHarris::root(3).child(2).child(5);
        assert_eq!(u.weight(), 7);
        assert_eq!(u.to_string(), "3.2.5");
        assert!(u.ancestor(1).is_ancestor_of(&u));
        assert!(!UlamHarris::root(4).is_ancestor_of(&u));
        assert_eq!(UlamHarris::root(1).weight(), 0);
    }
}
