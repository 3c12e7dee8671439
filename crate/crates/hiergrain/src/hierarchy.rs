//! Label-tree parsing and LCA distance matrices.
//!
//! A label tree assigns every class at level `h` (1-based, `1..=H`) a single
//! parent at level `h-1`, with a single implicit root at level 0. Trees are
//! described by a plain-text format: one slash-separated leaf path per line,
//! `#`-prefixed comment lines and blank lines ignored. Class indices at each
//! level are assigned by order of first appearance. Two classes with the same
//! segment name under different parents are distinct; only an exact duplicate
//! full path is an error.

use std::collections::HashMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Immutable class hierarchy of uniform depth `H >= 1`.
///
/// Levels are 1-based: level 1 holds the coarsest classes (children of the
/// implicit root), level `H` holds the leaves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTree {
    /// Number of classes at each level, `level_sizes[h-1] = C^h`.
    level_sizes: Vec<usize>,
    /// `parents[h-2][c]` is the parent index at level `h-1` of class `c` at
    /// level `h`, for `h in 2..=H`. Level-1 classes all descend from the root.
    parents: Vec<Vec<usize>>,
    /// Segment name of each class, `names[h-1][c]`.
    names: Vec<Vec<String>>,
}

impl LabelTree {
    /// Parses the plain-text tree format.
    ///
    /// The depth is fixed by the first leaf path; every other path must have
    /// the same number of segments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut depth = None;
        let mut level_sizes: Vec<usize> = Vec::new();
        let mut parents: Vec<Vec<usize>> = Vec::new();
        let mut names: Vec<Vec<String>> = Vec::new();
        // Class identity is the full path prefix: (parent index, segment).
        // Level-1 classes use parent index 0 for the implicit root.
        let mut index: Vec<HashMap<(usize, String), usize>> = Vec::new();

        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let segments: Vec<&str> = line.split('/').collect();
            if segments.iter().any(|s| s.trim().is_empty()) {
                return Err(Error::FormatViolation {
                    path: "<tree-spec>".to_string(),
                    line: line_no + 1,
                    detail: format!("empty segment in leaf path {line:?}"),
                });
            }
            let h = segments.len();
            let expected = *depth.get_or_insert(h);
            if h != expected {
                return Err(Error::InconsistentDepth {
                    path: line.to_string(),
                    line: line_no + 1,
                    depth: h,
                    expected,
                });
            }
            while level_sizes.len() < h {
                level_sizes.push(0);
                names.push(Vec::new());
                index.push(HashMap::new());
                if level_sizes.len() >= 2 {
                    parents.push(Vec::new());
                }
            }

            let mut parent = 0usize;
            for (lvl0, segment) in segments.iter().enumerate() {
                let segment = segment.trim();
                let key = (parent, segment.to_string());
                let next = level_sizes[lvl0];
                let idx = *index[lvl0].entry(key).or_insert_with(|| {
                    level_sizes[lvl0] += 1;
                    names[lvl0].push(segment.to_string());
                    if lvl0 >= 1 {
                        parents[lvl0 - 1].push(parent);
                    }
                    next
                });
                if lvl0 + 1 == h && idx != next {
                    return Err(Error::DuplicateLeaf {
                        path: line.to_string(),
                        line: line_no + 1,
                    });
                }
                parent = idx;
            }
        }

        if depth.is_none() {
            return Err(Error::EmptyTree);
        }
        Ok(LabelTree {
            level_sizes,
            parents,
            names,
        })
    }

    /// Tree depth `H`.
    pub fn depth(&self) -> usize {
        self.level_sizes.len()
    }

    /// Number of classes at each level, coarsest first.
    pub fn level_sizes(&self) -> &[usize] {
        &self.level_sizes
    }

    /// Number of classes `C^h` at a 1-based level.
    pub fn level_size(&self, level: usize) -> Result<usize> {
        self.check_level(level)?;
        Ok(self.level_sizes[level - 1])
    }

    /// Number of leaf classes `C^H`.
    pub fn leaf_count(&self) -> usize {
        *self.level_sizes.last().expect("tree is never empty")
    }

    /// Segment name of a class.
    pub fn name(&self, level: usize, cls: usize) -> Result<&str> {
        self.check_class(level, cls)?;
        Ok(&self.names[level - 1][cls])
    }

    /// Full slash-joined path of a class from level 1 down to `level`.
    pub fn path_name(&self, level: usize, cls: usize) -> Result<String> {
        self.check_class(level, cls)?;
        let mut segments = Vec::with_capacity(level);
        let mut c = cls;
        for h in (1..=level).rev() {
            segments.push(self.names[h - 1][c].as_str());
            if h > 1 {
                c = self.parents[h - 2][c];
            }
        }
        segments.reverse();
        Ok(segments.join("/"))
    }

    /// Parent index at level `level - 1` of a class at `level >= 2`.
    pub fn parent(&self, level: usize, cls: usize) -> Result<usize> {
        self.check_class(level, cls)?;
        if level < 2 {
            return Err(Error::IndexOutOfRange {
                what: "level",
                index: level,
                bound: 2,
            });
        }
        Ok(self.parents[level - 2][cls])
    }

    /// Ancestor of `cls` at a coarser (or equal) level.
    pub fn ancestor_label(&self, from_level: usize, to_level: usize, cls: usize) -> Result<usize> {
        self.check_class(from_level, cls)?;
        if to_level < 1 || to_level > from_level {
            return Err(Error::IndexOutOfRange {
                what: "level",
                index: to_level,
                bound: from_level,
            });
        }
        let mut c = cls;
        for h in ((to_level + 1)..=from_level).rev() {
            c = self.parents[h - 2][c];
        }
        Ok(c)
    }

    /// Number of upward steps from `level` to the deepest common ancestor of
    /// `i` and `j`. Zero iff `i == j`; equals `level` when the only common
    /// ancestor is the root.
    pub fn lca_height(&self, level: usize, i: usize, j: usize) -> Result<usize> {
        self.check_class(level, i)?;
        self.check_class(level, j)?;
        let (mut a, mut b) = (i, j);
        let mut h = level;
        let mut steps = 0;
        while a != b {
            // Classes at level 1 converge at the implicit root.
            if h == 1 {
                (a, b) = (0, 0);
            } else {
                a = self.parents[h - 2][a];
                b = self.parents[h - 2][b];
            }
            h -= 1;
            steps += 1;
        }
        Ok(steps)
    }

    /// LCA-height matrix over all class pairs at a level.
    pub fn distance_matrix(&self, level: usize) -> Result<DistanceMatrix> {
        self.check_level(level)?;
        let n = self.level_sizes[level - 1];
        let mut entries = vec![0u32; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = self.lca_height(level, i, j)? as u32;
                entries[i * n + j] = d;
                entries[j * n + i] = d;
            }
        }
        Ok(DistanceMatrix {
            level,
            size: n,
            entries,
        })
    }

    /// Distance matrices for every level, coarsest first.
    pub fn distance_matrices(&self) -> Vec<DistanceMatrix> {
        (1..=self.depth())
            .map(|h| self.distance_matrix(h).expect("level is valid"))
            .collect()
    }

    /// Canonical text form: leaf paths in leaf-index order, one per line.
    ///
    /// Reparsing the canonical text reproduces the tree exactly; comments,
    /// blank lines, and surrounding whitespace are normalized away.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for leaf in 0..self.leaf_count() {
            let path = self
                .path_name(self.depth(), leaf)
                .expect("leaf index is valid");
            writeln!(out, "{path}").expect("string write cannot fail");
        }
        out
    }

    /// Stable 16-hex-digit identifier derived from the canonical text.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        hex::encode(&digest[..8])
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level < 1 || level > self.depth() {
            return Err(Error::IndexOutOfRange {
                what: "level",
                index: level,
                bound: self.depth(),
            });
        }
        Ok(())
    }

    fn check_class(&self, level: usize, cls: usize) -> Result<()> {
        self.check_level(level)?;
        let bound = self.level_sizes[level - 1];
        if cls >= bound {
            return Err(Error::IndexOutOfRange {
                what: "class",
                index: cls,
                bound,
            });
        }
        Ok(())
    }
}

/// Symmetric LCA-height matrix for one level of a [`LabelTree`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceMatrix {
    level: usize,
    size: usize,
    /// Row-major `size x size` heights.
    entries: Vec<u32>,
}

impl DistanceMatrix {
    /// 1-based level this matrix belongs to.
    pub fn level(&self) -> usize {
        self.level
    }

    /// Number of classes (rows and columns).
    pub fn size(&self) -> usize {
        self.size
    }

    /// Height between classes `i` and `j`.
    pub fn get(&self, i: usize, j: usize) -> usize {
        assert!(i < self.size && j < self.size, "class index out of range");
        self.entries[i * self.size + j] as usize
    }

    /// Dense double-precision copy, for use in differentiable expressions.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.size, self.size],
            self.entries.iter().map(|&e| e as f64).collect(),
        )
        .expect("matrix dimensions are consistent")
    }

    /// CSV form: one row per class, integer entries, no header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.size {
            let row: Vec<String> = (0..self.size)
                .map(|j| self.entries[i * self.size + j].to_string())
                .collect();
            writeln!(out, "{}", row.join(",")).expect("string write cannot fail");
        }
        out
    }
}
