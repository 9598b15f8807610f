//! Subsets of the state space with a canonical (sorted) member order.

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SubsetMask {
    n: usize,
    members: Vec<usize>,
    flags: Vec<bool>,
}

impl SubsetMask {
    pub fn new<I: IntoIterator<Item = usize>>(n: usize, members: I) -> Result<Self> {
        let mut flags = vec![false; n];
        for x in members {
            if x >= n {
                return Err(Error::Argument(format!("state {x} out of range 0..{n}")));
            }
            flags[x] = true;
        }
        Ok(Self::from_flags(flags))
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        let members = flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect();
        Self { n: flags.len(), members, flags }
    }

    pub fn empty(n: usize) -> Self {
        Self::from_flags(vec![false; n])
    }

    pub fn full(n: usize) -> Self {
        Self::from_flags(vec![true; n])
    }

    pub fn singleton(n: usize, x: usize) -> Result<Self> {
        Self::new(n, [x])
    }

    /// Size of the ambient state space.
    pub fn universe(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.members.len() == self.n
    }

    pub fn contains(&self, x: usize) -> bool {
        self.flags.get(x).copied().unwrap_or(false)
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().copied()
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn complement(&self) -> Self {
        Self::from_flags(self.flags.iter().map(|f| !f).collect())
    }

    fn zip_with(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Self {
        assert_eq!(self.n, other.n, "subsets of different state spaces");
        Self::from_flags(
            self.flags
                .iter()
                .zip(&other.flags)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn union(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn difference(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn with(&self, x: usize) -> Self {
        let mut flags = self.flags.clone();
        flags[x] = true;
        Self::from_flags(flags)
    }

    pub fn without(&self, x: usize) -> Self {
        let mut flags = self.flags.clone();
        flags[x] = false;
        Self::from_flags(flags)
    }

    pub fn is_subset(&self, other: &Self) -> bool {
        self.iter().all(|x| other.contains(x))
    }

    pub fn is_disjoint(&self, other: &Self) -> bool {
        self.iter().all(|x| !other.contains(x))
    }
}

impl Serialize for SubsetMask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.members.serialize(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_algebra() {
        let a = SubsetMask::new(6, [4, 1, 1]).unwrap();
        let b = SubsetMask::new(6, [1, 2]).unwrap();
        assert_eq!(a.members(), &[1, 4]);
        assert_eq!(a.union(&b).members(), &[1, 2, 4]);
        assert_eq!(a.intersection(&b).members(), &[1]);
        assert_eq!(a.difference(&b).members(), &[4]);
        assert_eq!(a.complement().members(), &[0, 2, 3, 5]);
        assert!(SubsetMask::new(3, [3]).is_err());
    }
}
