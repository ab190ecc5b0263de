//! Partition of the penalized weight block into disjoint groups.

use alloc::vec::Vec;

use crate::error::{check_len, invalid, Result};

/// Default zero threshold for the linear experiments.
pub const EPS_TINY_LINEAR: f64 = 1e-6;
/// Single-precision machine epsilon, used as zero threshold for networks.
pub const EPS_TINY_F32: f64 = 1.192_092_9e-7;

/// Disjoint, nonempty index groups that together cover `0..p`.
///
/// Groups are explicit index lists so strided layouts (e.g. columns of a
/// row-major weight matrix) work the same way as contiguous blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(into = "PartitionRepr", try_from = "PartitionRepr")
)]
pub struct GroupPartition {
    groups: Vec<Vec<usize>>,
    p: usize,
}

impl GroupPartition {
    /// Consecutive blocks `[0, s1), [s1, s1 + s2), ...`.
    pub fn contiguous(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() {
            return Err(invalid("partition needs at least one group"));
        }
        if sizes.contains(&0) {
            return Err(invalid("group sizes must be at least 1"));
        }
        let mut start = 0;
        let groups = sizes
            .iter()
            .map(|&s| {
                let g: Vec<usize> = (start..start + s).collect();
                start += s;
                g
            })
            .collect();
        Ok(Self { groups, p: start })
    }

    /// Arbitrary groups; they must be nonempty, disjoint and cover `0..p`.
    pub fn from_groups(groups: Vec<Vec<usize>>) -> Result<Self> {
        if groups.is_empty() {
            return Err(invalid("partition needs at least one group"));
        }
        let p: usize = groups.iter().map(Vec::len).sum();
        let mut seen = alloc::vec![false; p];
        for g in &groups {
            if g.is_empty() {
                return Err(invalid("groups must be nonempty"));
            }
            for &i in g {
                if i >= p {
                    return Err(invalid(alloc::format!(
                        "index {i} outside 0..{p}: groups must cover the index range exactly"
                    )));
                }
                if seen[i] {
                    return Err(invalid(alloc::format!("index {i} appears in two groups")));
                }
                seen[i] = true;
            }
        }
        Ok(Self { groups, p })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Total number of penalized entries.
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group(&self, j: usize) -> &[usize] {
        &self.groups[j]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    /// True when group `j` is exactly the block following group `j - 1`.
    pub fn is_contiguous(&self) -> bool {
        let mut next = 0;
        for g in &self.groups {
            for &i in g {
                if i != next {
                    return false;
                }
                next += 1;
            }
        }
        true
    }

    pub fn group_norm_sq(&self, j: usize, w: &[f64]) -> f64 {
        self.groups[j].iter().map(|&i| w[i] * w[i]).sum()
    }

    /// `||w_{G_j}||_2` for every group.
    pub fn group_norms(&self, w: &[f64]) -> Result<Vec<f64>> {
        check_len("group_norms", self.p, w.len())?;
        Ok((0..self.len())
            .map(|j| libm::sqrt(self.group_norm_sq(j, w)))
            .collect())
    }

    /// Groups with `||w_j||_2 >= eps_tiny`, ascending.
    ///
    /// An exactly zero group is inactive even when `eps_tiny == 0`.
    pub fn active_groups(&self, w: &[f64], eps_tiny: f64) -> Result<Vec<usize>> {
        Ok(self
            .group_norms(w)?
            .into_iter()
            .enumerate()
            .filter(|&(_, n)| n > 0.0 && n >= eps_tiny)
            .map(|(j, _)| j)
            .collect())
    }

    /// Zeroes every group whose norm is below `eps_tiny`.
    pub fn prune(&self, w: &mut [f64], eps_tiny: f64) -> Result<()> {
        let norms = self.group_norms(w)?;
        for (g, n) in self.groups.iter().zip(norms) {
            if n < eps_tiny {
                g.iter().for_each(|&i| w[i] = 0.0);
            }
        }
        Ok(())
    }
}

#[cfg(feature = "serde")]
#[derive(serde::Serialize, serde::Deserialize)]
#[serde(untagged)]
enum PartitionRepr {
    Sizes { sizes: Vec<usize> },
    Groups { groups: Vec<Vec<usize>> },
}

#[cfg(feature = "serde")]
impl From<GroupPartition> for PartitionRepr {
    fn from(p: GroupPartition) -> Self {
        if p.is_contiguous() {
            PartitionRepr::Sizes { sizes: p.sizes() }
        } else {
            PartitionRepr::Groups { groups: p.groups }
        }
    }
}

#[cfg(feature = "serde")]
impl TryFrom<PartitionRepr> for GroupPartition {
    type Error = crate::Error;

    fn try_from(r: PartitionRepr) -> Result<Self> {
        match r {
            PartitionRepr::Sizes { sizes } => Self::contiguous(&sizes),
            PartitionRepr::Groups { groups } => Self::from_groups(groups),
        }
    }
}
