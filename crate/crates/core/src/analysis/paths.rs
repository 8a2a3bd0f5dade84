use serde::Serialize;

use crate::error::{Error, Result};
use crate::netspec::{validate, FusedNetSpec};

/// Path lengths in convolution layers. Index `b` refers to the
/// representation x̄_b, with x̄_0 the input and x̄_B the final one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PathMetrics {
    /// |G^k_b| as a K×B matrix.
    pub block_sizes: Vec<Vec<usize>>,
    pub shortest_to_output: Vec<usize>,
    pub longest_to_output: Vec<usize>,
    pub shortest_from_input: Vec<usize>,
    pub longest_from_input: Vec<usize>,
}

impl PathMetrics {
    /// Shortest path from input to the final representation.
    pub fn shortest(&self) -> usize {
        self.shortest_to_output[0]
    }

    pub fn longest(&self) -> usize {
        self.longest_to_output[0]
    }
}

/// Shortest and longest paths through the block graph: a path takes one
/// member's block at every stage.
pub fn path_metrics(spec: &FusedNetSpec) -> Result<PathMetrics> {
    let diags = validate(spec);
    if !diags.is_empty() {
        return Err(Error::Validation(diags));
    }
    let sizes = spec.block_sizes();
    let b_count = spec.block_count();
    let column = |t: usize| sizes.iter().map(move |row| row[t]);
    let mins: Vec<usize> = (0..b_count).map(|t| column(t).min().unwrap_or(0)).collect();
    let maxs: Vec<usize> = (0..b_count).map(|t| column(t).max().unwrap_or(0)).collect();
    let suffix = |v: &[usize]| (0..=b_count).map(|b| v[b..].iter().sum()).collect::<Vec<usize>>();
    let prefix = |v: &[usize]| (0..=b_count).map(|b| v[..b].iter().sum()).collect::<Vec<usize>>();
    Ok(PathMetrics {
        shortest_to_output: suffix(&mins),
        longest_to_output: suffix(&maxs),
        shortest_from_input: prefix(&mins),
        longest_from_input: prefix(&maxs),
        block_sizes: sizes,
    })
}
