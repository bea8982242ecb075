//! Random-projection tree forest.
//!
//! Each tree splits a node's rows by the hyperplane equidistant from two
//! randomly drawn member rows, until at most `leaf_size` rows remain. Queries
//! walk all trees at once through one priority queue keyed by the smallest
//! margin seen along the path, so the leaves nearest to the query's side of
//! every hyperplane are visited first.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::matrix::Matrix;

/// Retries before a degenerate split (all sampled pairs identical) falls back to a random halving.
const SPLIT_ATTEMPTS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split { normal: Vec<f32>, offset: f32, left: u32, right: u32 },
    Leaf(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub(crate) nodes: Vec<Node>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub(crate) rows: usize,
    pub(crate) leaf_size: usize,
    pub(crate) trees: Vec<Tree>,
}

fn margin(normal: &[f32], offset: f32, x: &[f32]) -> f32 {
    normal.iter().zip(x).map(|(a, b)| a * b).sum::<f32>() - offset
}

impl Tree {
    fn build(data: &Matrix, leaf_size: usize, rng: &mut ChaCha8Rng) -> Tree {
        let mut nodes = vec![Node::Leaf(Vec::new())];
        let mut stack: Vec<(usize, Vec<u32>)> = vec![(0, (0..data.rows() as u32).collect())];
        while let Some((slot, rows)) = stack.pop() {
            if rows.len() <= leaf_size {
                nodes[slot] = Node::Leaf(rows);
                continue;
            }
            let (normal, offset, left, right) = split(data, rows, rng);
            let l = nodes.len();
            nodes.push(Node::Leaf(Vec::new()));
            nodes.push(Node::Leaf(Vec::new()));
            nodes[slot] = Node::Split { normal, offset, left: l as u32, right: l as u32 + 1 };
            stack.push((l + 1, right));
            stack.push((l, left));
        }
        Tree { nodes }
    }
}

fn split(data: &Matrix, mut rows: Vec<u32>, rng: &mut ChaCha8Rng) -> (Vec<f32>, f32, Vec<u32>, Vec<u32>) {
    for _ in 0..SPLIT_ATTEMPTS {
        let i = rng.random_range(0..rows.len());
        let mut j = rng.random_range(0..rows.len() - 1);
        if j >= i {
            j += 1;
        }
        let (a, b) = (data.row(rows[i] as usize), data.row(rows[j] as usize));
        let normal: Vec<f32> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        if normal.iter().all(|&v| v == 0.0) {
            continue;
        }
        let offset: f32 = normal.iter().zip(a.iter().zip(b)).map(|(n, (x, y))| n * (x + y) * 0.5).sum();
        let (left, right): (Vec<u32>, Vec<u32>) = rows.iter().partition(|&&r| margin(&normal, offset, data.row(r as usize)) <= 0.0);
        if !left.is_empty() && !right.is_empty() {
            return (normal, offset, left, right);
        }
    }
    // Duplicates or a degenerate hyperplane: split in half at random behind a zero
    // normal. Queries then treat both children as equally close.
    rows.shuffle(rng);
    let right = rows.split_off(rows.len() / 2);
    (vec![0.0; data.cols()], 0.0, rows, right)
}

#[derive(Clone, Copy)]
struct Frontier {
    priority: f32,
    tree: u32,
    node: u32,
}

impl PartialEq for Frontier {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Frontier {}
impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority.total_cmp(&other.priority).then(other.tree.cmp(&self.tree)).then(other.node.cmp(&self.node))
    }
}

impl Forest {
    /// Trees are built in parallel; tree `t` draws from its own ChaCha stream, so
    /// the result depends only on `(data, trees, leaf_size, seed)`.
    pub fn build(data: &Matrix, trees: usize, leaf_size: usize, seed: u64) -> Forest {
        let built = (0..trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64);
                Tree::build(data, leaf_size, &mut rng)
            })
            .collect();
        Forest { rows: data.rows(), leaf_size, trees: built }
    }

    pub fn num_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    pub(crate) fn covers(&self, rows: usize) -> bool {
        self.rows == rows
    }

    /// Visits at least `leaf_budget` leaves (fewer only if the forest has fewer) and
    /// keeps going until `min_distinct` distinct rows are collected. May contain duplicates.
    pub fn candidates(&self, query: &[f32], min_distinct: usize, leaf_budget: usize) -> Vec<usize> {
        let mut seen = vec![0u64; self.rows.div_ceil(64)];
        let mut distinct = 0;
        let mut out = Vec::new();
        let mut heap = BinaryHeap::with_capacity(self.trees.len() * 4);
        for t in 0..self.trees.len() {
            heap.push(Frontier { priority: f32::INFINITY, tree: t as u32, node: 0 });
        }
        let mut leaves = 0;
        while let Some(Frontier { priority, tree, node }) = heap.pop() {
            if leaves >= leaf_budget && distinct >= min_distinct {
                break;
            }
            match &self.trees[tree as usize].nodes[node as usize] {
                Node::Leaf(rows) => {
                    leaves += 1;
                    for &r in rows {
                        let (w, b) = (r as usize / 64, r as usize % 64);
                        if seen[w] & (1 << b) == 0 {
                            seen[w] |= 1 << b;
                            distinct += 1;
                        }
                        out.push(r as usize);
                    }
                }
                Node::Split { normal, offset, left, right } => {
                    let m = margin(normal, *offset, query);
                    heap.push(Frontier { priority: priority.min(m), tree, node: *right });
                    heap.push(Frontier { priority: priority.min(-m), tree, node: *left });
                }
            }
        }
        out
    }
}
