use std::fmt;

use super::{MDag, MdagError, Result};

/// Largest graph [`MDag::enumerate_paths`] accepts. Simple-path counts grow
/// factorially with the vertex count.
pub const MAX_ENUMERATION_VERTICES: usize = 12;

/// Orientation of one edge along a path, read left to right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arrow {
    /// `left -> right`
    Forward,
    /// `left <- right`
    Backward,
}

/// A simple path: `vertices[k]` and `vertices[k + 1]` are joined by an edge
/// oriented as `arrows[k]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Path {
    pub vertices: Vec<String>,
    pub arrows: Vec<Arrow>,
}

impl Path {
    /// Interior vertices where both adjacent edges point in.
    pub fn colliders(&self) -> Vec<&str> {
        (1..self.vertices.len().saturating_sub(1))
            .filter(|&k| self.arrows[k - 1] == Arrow::Forward && self.arrows[k] == Arrow::Backward)
            .map(|k| self.vertices[k].as_str())
            .collect()
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.vertices.iter().enumerate() {
            if k > 0 {
                f.write_str(match self.arrows[k - 1] {
                    Arrow::Forward => " -> ",
                    Arrow::Backward => " <- ",
                })?;
            }
            f.write_str(v)?;
        }
        Ok(())
    }
}

impl MDag {
    /// All simple paths between `a` and `b` in the skeleton, edge orientation
    /// recorded. Exhaustive; refuses graphs over [`MAX_ENUMERATION_VERTICES`].
    pub fn enumerate_paths(&self, a: &str, b: &str) -> Result<Vec<Path>> {
        let (from, to) = (self.id(a)?, self.id(b)?);
        if from == to {
            return Err(MdagError::SameEndpoint(a.to_string()));
        }
        if self.len() > MAX_ENUMERATION_VERTICES {
            return Err(MdagError::TooLarge { limit: MAX_ENUMERATION_VERTICES, actual: self.len() });
        }
        let mut found = Vec::new();
        let mut on_path = vec![false; self.len()];
        let mut stack = vec![from];
        let mut arrows = Vec::new();
        on_path[from] = true;
        self.extend_paths(to, &mut on_path, &mut stack, &mut arrows, &mut found);
        Ok(found)
    }

    fn extend_paths(
        &self,
        target: usize,
        on_path: &mut [bool],
        stack: &mut Vec<usize>,
        arrows: &mut Vec<Arrow>,
        found: &mut Vec<Path>,
    ) {
        let v = *stack.last().expect("path stack is never empty");
        if v == target {
            found.push(Path {
                vertices: stack.iter().map(|&i| self.nodes[i].name.clone()).collect(),
                arrows: arrows.clone(),
            });
            return;
        }
        let steps = self.children[v]
            .iter()
            .map(|&c| (c, Arrow::Forward))
            .chain(self.parents[v].iter().map(|&p| (p, Arrow::Backward)));
        for (w, arrow) in steps {
            if on_path[w] {
                continue;
            }
            on_path[w] = true;
            stack.push(w);
            arrows.push(arrow);
            self.extend_paths(target, on_path, stack, arrows, found);
            arrows.pop();
            stack.pop();
            on_path[w] = false;
        }
    }

    /// Whether `path` is open given `c`: every collider is in `c` or has a
    /// descendant in `c`, and no non-collider is in `c`.
    pub fn path_is_open(&self, path: &Path, c: &[&str]) -> Result<bool> {
        let c = self.ids(c)?;
        let ids = path.vertices.iter().map(|n| self.id(n)).collect::<Result<Vec<_>>>()?;
        for k in 1..ids.len().saturating_sub(1) {
            let v = ids[k];
            let collider = path.arrows[k - 1] == Arrow::Forward && path.arrows[k] == Arrow::Backward;
            if collider {
                if !c.iter().any(|&w| self.descendants[v].get(w)) {
                    return Ok(false);
                }
            } else if c.contains(&v) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// First open path (in enumeration order) between any vertex of `a` and
    /// any vertex of `b` given `c`, or `None` when they are d-separated.
    pub fn open_path(&self, a: &[&str], b: &[&str], c: &[&str]) -> Result<Option<Path>> {
        self.disjoint_ids([a, b, c])?;
        for x in a {
            for y in b {
                for path in self.enumerate_paths(x, y)? {
                    if self.path_is_open(&path, c)? {
                        return Ok(Some(path));
                    }
                }
            }
        }
        Ok(None)
    }
}
