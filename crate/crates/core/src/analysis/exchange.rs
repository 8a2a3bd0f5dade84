use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusenet::FusedNet;
use crate::tensor::Scalar;

/// Which member's block sits in which chain: `assignment[b][k]` is the
/// original owner of the stage-`b` block in chain `k`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Grouping {
    pub assignment: Vec<Vec<usize>>,
}

impl Grouping {
    /// Every chain keeps its own blocks.
    pub fn identity(k: usize, b: usize) -> Self {
        Grouping {
            assignment: vec![(0..k).collect(); b],
        }
    }

    /// The current assignment of `net`.
    pub fn of<T: Scalar>(net: &FusedNet<T>) -> Self {
        let (k, b) = (net.member_count(), net.block_count());
        Grouping {
            assignment: (0..b)
                .map(|s| (0..k).map(|c| net.chains()[c][s].owner).collect())
                .collect(),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.assignment.iter().all(|row| {
            let mut seen = vec![false; row.len()];
            row.iter().all(|&o| o < row.len() && !std::mem::replace(&mut seen[o], true))
        })
    }
}

/// A copy of `net` with the stage-`b` blocks of chains `i` and `j` swapped
/// (0-based indices). The fused function is unchanged.
pub fn exchange_blocks<T: Scalar>(net: &FusedNet<T>, b: usize, i: usize, j: usize) -> Result<FusedNet<T>> {
    let mut out = net.clone();
    out.swap_blocks(b, i, j)?;
    Ok(out)
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out.sort();
    out
}

/// (K!)^(B−1).
pub fn grouping_bound(k: usize, b: usize) -> u128 {
    let fact: u128 = (1..=k as u128).product();
    fact.pow(b.saturating_sub(1) as u32)
}

/// All groupings up to relabeling whole chains: the first stage stays in
/// place and every later stage takes any permutation.
pub fn enumerate_groupings(k: usize, b: usize) -> Vec<Grouping> {
    if k == 0 || b == 0 {
        return Vec::new();
    }
    let perms = permutations(k);
    let mut out = vec![Grouping::identity(k, 1)];
    for _ in 1..b {
        out = out
            .into_iter()
            .flat_map(|g| {
                perms.iter().map(move |p| {
                    let mut a = g.assignment.clone();
                    a.push(p.clone());
                    Grouping { assignment: a }
                })
            })
            .collect();
    }
    out
}

/// Rearrange the blocks of `net` by repeated exchanges to realize `grouping`.
pub fn apply_grouping<T: Scalar>(net: &FusedNet<T>, grouping: &Grouping) -> Result<FusedNet<T>> {
    let (k, b) = (net.member_count(), net.block_count());
    if grouping.assignment.len() != b
        || grouping.assignment.iter().any(|r| r.len() != k)
        || !grouping.is_valid()
    {
        return Err(Error::InvalidArgument(format!(
            "grouping {:?} is not a {b}x{k} table of permutations",
            grouping.assignment
        )));
    }
    let mut out = net.clone();
    for (s, row) in grouping.assignment.iter().enumerate() {
        for (c, &owner) in row.iter().enumerate() {
            let at = (c..k)
                .find(|&j| out.chains()[j][s].owner == owner)
                .expect("valid permutation");
            if at != c {
                out.swap_blocks(s, c, at)?;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::builtin_spec;
    use crate::tensor::{Mode, Shape, Tensor};
    use std::collections::HashSet;

    #[test]
    fn grouping_counts() {
        assert_eq!(enumerate_groupings(2, 3).len(), 4);
        assert_eq!(grouping_bound(2, 3), 4);
        assert_eq!(enumerate_groupings(1, 5).len(), 1);
        assert_eq!(enumerate_groupings(2, 1).len(), 1);
        assert_eq!(enumerate_groupings(3, 3).len(), 36);
        for (k, b) in [(2, 3), (3, 2), (3, 3), (4, 2)] {
            let all = enumerate_groupings(k, b);
            assert!(all.len() as u128 <= grouping_bound(k, b));
            assert!(all.iter().all(Grouping::is_valid));
            let unique: HashSet<_> = all.iter().collect();
            assert_eq!(unique.len(), all.len());
        }
    }

    #[test]
    fn groupings_preserve_the_fused_function() {
        let spec = builtin_spec("N13N33").unwrap().with_widths(&[4, 6, 8], 6).unwrap().with_input(8, 8);
        let net = FusedNet::<f32>::build(&spec, 2).unwrap();
        let x = Tensor::from_fn(Shape::new(2, 3, 8, 8), |n, c, h, w| ((n * 7 + c * 5 + h * 3 + w) % 11) as f32 / 5.0 - 1.0);
        let base = net.clone().forward_deep(&x, Mode::Train).unwrap();
        for g in enumerate_groupings(2, 3) {
            let mut m = apply_grouping(&net, &g).unwrap();
            assert_eq!(Grouping::of(&m), g);
            assert_eq!(m.param_count(), net.param_count());
            let y = m.forward_deep(&x, Mode::Train).unwrap();
            assert!(y.max_abs_diff(&base).unwrap() <= 1e-5);
        }
        let swapped = exchange_blocks(&net, 1, 0, 1).unwrap();
        let back = exchange_blocks(&swapped, 1, 1, 0).unwrap();
        assert_eq!(Grouping::of(&back), Grouping::identity(2, 3));
        assert_eq!(Grouping::of(&swapped).assignment[1], vec![1, 0]);
        assert!(exchange_blocks(&net, 1, 0, 0).is_err());
        assert!(apply_grouping(&net, &Grouping { assignment: vec![vec![0, 0]; 3] }).is_err());
    }
}
