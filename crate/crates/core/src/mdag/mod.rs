//! Missing-data DAGs.
//!
//! An [`MDag`] is an ordinary DAG whose vertices additionally carry a
//! visibility annotation: fully observed, missing (with a designated
//! response indicator), or fully hidden. Queries are answered on the
//! underlying DAG: d-separation via a reachability sweep, simple-path
//! enumeration for small graphs, and the missingness classification built on
//! top of d-separation.
//!
//! Graphs are immutable after construction and are `Send + Sync`.

mod parse;
mod paths;

use std::collections::HashMap;
use std::fmt;

pub use parse::{parse_graph_spec, ParseError};
pub use paths::{Arrow, Path, MAX_ENUMERATION_VERTICES};

/// Graph spec for the federated setting where gradients depend on private
/// data and responsiveness depends on user info and the data itself.
pub const GRADIENT_MNAR_SPEC: &str = include_str!("../../graphs/gradient_mnar.graph");

/// Graph spec for the shadow-variable assumptions the sampling correction
/// relies on.
pub const SHADOW_ASSUMPTION_SPEC: &str = include_str!("../../graphs/shadow_assumption.graph");

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum MdagError {
    #[error("duplicate vertex `{0}`")]
    DuplicateVertex(String),
    #[error("unknown vertex `{0}`")]
    UnknownVertex(String),
    #[error("self-loop on `{0}`")]
    SelfLoop(String),
    #[error("duplicate edge `{0}` -> `{1}`")]
    DuplicateEdge(String, String),
    #[error("directed cycle through {0:?}")]
    Cycle(Vec<String>),
    #[error("missing vertex `{vertex}` names unknown indicator `{indicator}`")]
    UnknownIndicator { vertex: String, indicator: String },
    #[error("vertex `{0}` appears in more than one of the query sets")]
    OverlappingSets(String),
    #[error("path endpoints must differ (got `{0}` twice)")]
    SameEndpoint(String),
    #[error("path enumeration is limited to {limit} vertices, graph has {actual}")]
    TooLarge { limit: usize, actual: usize },
    #[error("target `{0}` is not marked as missing")]
    TargetNotMissing(String),
    #[error("`{0}` must be fully observed")]
    NotObserved(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

pub type Result<T> = std::result::Result<T, MdagError>;

/// How much of a variable the analyst (here, the central server) gets to see.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Visibility {
    Observed,
    /// Observed only when `indicator` equals one.
    Missing { indicator: String },
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VariableNode {
    pub name: String,
    pub visibility: Visibility,
}

impl VariableNode {
    pub fn observed(name: impl Into<String>) -> Self {
        Self { name: name.into(), visibility: Visibility::Observed }
    }

    pub fn hidden(name: impl Into<String>) -> Self {
        Self { name: name.into(), visibility: Visibility::Hidden }
    }

    pub fn missing(name: impl Into<String>, indicator: impl Into<String>) -> Self {
        Self { name: name.into(), visibility: Visibility::Missing { indicator: indicator.into() } }
    }
}

/// A directed edge by vertex name.
///
/// `deterministic` marks edges where the child is a function of the parent
/// (model outputs computed from private data). The tag is carried for
/// display and serialization only; it does not change separation queries.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EdgeSpec {
    pub parent: String,
    pub child: String,
    pub deterministic: bool,
}

impl EdgeSpec {
    pub fn new(parent: impl Into<String>, child: impl Into<String>) -> Self {
        Self { parent: parent.into(), child: child.into(), deterministic: false }
    }

    pub fn deterministic(parent: impl Into<String>, child: impl Into<String>) -> Self {
        Self { parent: parent.into(), child: child.into(), deterministic: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MissingnessClass {
    Mcar,
    Mar,
    Mnar,
}

impl fmt::Display for MissingnessClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MissingnessClass::Mcar => "MCAR",
            MissingnessClass::Mar => "MAR",
            MissingnessClass::Mnar => "MNAR",
        })
    }
}

/// Fixed-width bitset row used for the descendant closure.
#[derive(Debug, Clone, PartialEq, Eq)]
struct BitRow(Vec<u64>);

impl BitRow {
    fn new(n: usize) -> Self {
        BitRow(vec![0; n.div_ceil(64)])
    }

    fn set(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }

    fn get(&self, i: usize) -> bool {
        self.0[i / 64] >> (i % 64) & 1 == 1
    }

    fn union_with(&mut self, other: &BitRow) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a |= b;
        }
    }
}

#[derive(Debug, Clone)]
pub struct MDag {
    nodes: Vec<VariableNode>,
    index: HashMap<String, usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    deterministic: Vec<(usize, usize)>,
    /// `descendants[v]` includes `v` itself.
    descendants: Vec<BitRow>,
}

impl MDag {
    /// Validates vertices and edges and builds the graph.
    ///
    /// Rejects duplicate names, unknown endpoints, self-loops, duplicate
    /// edges, missing-variable indicators that are not declared, and any
    /// directed cycle (detected with Kahn's algorithm).
    pub fn new(vertices: Vec<VariableNode>, edges: Vec<EdgeSpec>) -> Result<Self> {
        let mut index = HashMap::with_capacity(vertices.len());
        for (i, v) in vertices.iter().enumerate() {
            if index.insert(v.name.clone(), i).is_some() {
                return Err(MdagError::DuplicateVertex(v.name.clone()));
            }
        }
        for v in &vertices {
            if let Visibility::Missing { indicator } = &v.visibility {
                if !index.contains_key(indicator) {
                    return Err(MdagError::UnknownIndicator {
                        vertex: v.name.clone(),
                        indicator: indicator.clone(),
                    });
                }
            }
        }

        let n = vertices.len();
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        let mut deterministic = Vec::new();
        for e in &edges {
            let p = *index.get(&e.parent).ok_or_else(|| MdagError::UnknownVertex(e.parent.clone()))?;
            let c = *index.get(&e.child).ok_or_else(|| MdagError::UnknownVertex(e.child.clone()))?;
            if p == c {
                return Err(MdagError::SelfLoop(e.parent.clone()));
            }
            if children[p].contains(&c) {
                return Err(MdagError::DuplicateEdge(e.parent.clone(), e.child.clone()));
            }
            children[p].push(c);
            parents[c].push(p);
            if e.deterministic {
                deterministic.push((p, c));
            }
        }

        let order = topological_order(&parents, &children).map_err(|stuck| {
            MdagError::Cycle(stuck.into_iter().map(|i| vertices[i].name.clone()).collect())
        })?;

        let mut descendants: Vec<BitRow> = (0..n)
            .map(|i| {
                let mut row = BitRow::new(n);
                row.set(i);
                row
            })
            .collect();
        for &v in order.iter().rev() {
            for &c in &children[v] {
                let child_row = descendants[c].clone();
                descendants[v].union_with(&child_row);
            }
        }

        Ok(Self { nodes: vertices, index, parents, children, deterministic, descendants })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[VariableNode] {
        &self.nodes
    }

    pub fn node(&self, name: &str) -> Result<&VariableNode> {
        Ok(&self.nodes[self.id(name)?])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn edges(&self) -> Vec<EdgeSpec> {
        let mut out = Vec::new();
        for (p, cs) in self.children.iter().enumerate() {
            for &c in cs {
                out.push(EdgeSpec {
                    parent: self.nodes[p].name.clone(),
                    child: self.nodes[c].name.clone(),
                    deterministic: self.deterministic.contains(&(p, c)),
                });
            }
        }
        out
    }

    pub fn parents(&self, name: &str) -> Result<Vec<&str>> {
        let v = self.id(name)?;
        Ok(self.parents[v].iter().map(|&p| self.nodes[p].name.as_str()).collect())
    }

    pub fn children(&self, name: &str) -> Result<Vec<&str>> {
        let v = self.id(name)?;
        Ok(self.children[v].iter().map(|&c| self.nodes[c].name.as_str()).collect())
    }

    /// Whether `desc` is a descendant of `anc` (every vertex is its own descendant).
    pub fn is_descendant(&self, desc: &str, anc: &str) -> Result<bool> {
        Ok(self.descendants[self.id(anc)?].get(self.id(desc)?))
    }

    fn id(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| MdagError::UnknownVertex(name.to_string()))
    }

    fn ids(&self, names: &[&str]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.id(n)).collect()
    }

    fn disjoint_ids(&self, sets: [&[&str]; 3]) -> Result<[Vec<usize>; 3]> {
        let mut owner = vec![usize::MAX; self.len()];
        let mut out: [Vec<usize>; 3] = Default::default();
        for (k, set) in sets.iter().enumerate() {
            for name in set.iter() {
                let v = self.id(name)?;
                if owner[v] != usize::MAX && owner[v] != k {
                    return Err(MdagError::OverlappingSets(name.to_string()));
                }
                owner[v] = k;
                if !out[k].contains(&v) {
                    out[k].push(v);
                }
            }
        }
        Ok(out)
    }

    /// True when every path between `a` and `b` is blocked by `c`.
    ///
    /// Reachability sweep over (vertex, direction-of-arrival) states: a
    /// trail may pass a non-collider only outside `c`, and a collider only
    /// when it is an ancestor of (or in) `c`. Runs in O(V + E).
    pub fn d_separated(&self, a: &[&str], b: &[&str], c: &[&str]) -> Result<bool> {
        let [a, b, c] = self.disjoint_ids([a, b, c])?;
        let reach = self.reachable_from(&a, &c);
        Ok(!b.iter().any(|&v| reach[v]))
    }

    /// Vertices connected to some source by a trail that is active given `c`.
    fn reachable_from(&self, sources: &[usize], c: &[usize]) -> Vec<bool> {
        let n = self.len();
        let mut in_c = vec![false; n];
        for &v in c {
            in_c[v] = true;
        }
        // Ancestors of the conditioning set, the set itself included.
        let mut opens_collider = vec![false; n];
        for v in 0..n {
            opens_collider[v] = c.iter().any(|&w| self.descendants[v].get(w));
        }

        // Direction of arrival: `UP` = came from a child, `DOWN` = came from a parent.
        const UP: usize = 0;
        const DOWN: usize = 1;
        let mut visited = vec![[false; 2]; n];
        let mut reachable = vec![false; n];
        let mut stack: Vec<(usize, usize)> = sources.iter().map(|&s| (s, UP)).collect();

        while let Some((v, dir)) = stack.pop() {
            if visited[v][dir] {
                continue;
            }
            visited[v][dir] = true;
            if !in_c[v] {
                reachable[v] = true;
            }
            if dir == UP && !in_c[v] {
                stack.extend(self.parents[v].iter().map(|&p| (p, UP)));
                stack.extend(self.children[v].iter().map(|&ch| (ch, DOWN)));
            } else if dir == DOWN {
                if !in_c[v] {
                    stack.extend(self.children[v].iter().map(|&ch| (ch, DOWN)));
                }
                if opens_collider[v] {
                    stack.extend(self.parents[v].iter().map(|&p| (p, UP)));
                }
            }
        }
        reachable
    }

    /// Classifies the missingness of `target` with response indicator
    /// `indicator`, given the fully observed covariates `observed`.
    ///
    /// MCAR when the indicator is marginally d-separated from the target,
    /// MAR when separation holds given `observed`, MNAR otherwise.
    pub fn classify_missingness(
        &self,
        indicator: &str,
        target: &str,
        observed: &[&str],
    ) -> Result<MissingnessClass> {
        match &self.node(target)?.visibility {
            Visibility::Missing { .. } => {}
            _ => return Err(MdagError::TargetNotMissing(target.to_string())),
        }
        if self.node(indicator)?.visibility != Visibility::Observed {
            return Err(MdagError::NotObserved(indicator.to_string()));
        }
        for name in observed {
            if self.node(name)?.visibility != Visibility::Observed {
                return Err(MdagError::NotObserved(name.to_string()));
            }
        }
        if self.d_separated(&[indicator], &[target], &[])? {
            Ok(MissingnessClass::Mcar)
        } else if self.d_separated(&[indicator], &[target], observed)? {
            Ok(MissingnessClass::Mar)
        } else {
            Ok(MissingnessClass::Mnar)
        }
    }

    /// Checks the two shadow-variable conditions for `z`:
    /// (i) `z` is *not* d-separated from `s` given `r` and `d_rest`, and
    /// (ii) `z` is d-separated from `r` given `s` and `d_rest`.
    pub fn check_shadow_conditions(
        &self,
        z: &str,
        r: &str,
        s: &str,
        d_rest: &[&str],
    ) -> Result<(bool, bool)> {
        let mut given_r: Vec<&str> = vec![r];
        given_r.extend_from_slice(d_rest);
        let mut given_s: Vec<&str> = vec![s];
        given_s.extend_from_slice(d_rest);
        let associated = !self.d_separated(&[z], &[s], &given_r)?;
        let independent = self.d_separated(&[z], &[r], &given_s)?;
        Ok((associated, independent))
    }

    /// Serializes back to the line-oriented graph spec format.
    pub fn to_spec_string(&self) -> String {
        let mut out = String::new();
        for node in &self.nodes {
            match &node.visibility {
                Visibility::Observed => out.push_str(&format!("vertex {} observed\n", node.name)),
                Visibility::Hidden => out.push_str(&format!("vertex {} hidden\n", node.name)),
                Visibility::Missing { indicator } => {
                    out.push_str(&format!("vertex {} missing {}\n", node.name, indicator))
                }
            }
        }
        for e in self.edges() {
            let tag = if e.deterministic { " deterministic" } else { "" };
            out.push_str(&format!("edge {} {}{}\n", e.parent, e.child, tag));
        }
        out
    }

    /// The bundled graph where gradients are missing not at random.
    pub fn gradient_mnar() -> Self {
        parse_graph_spec(GRADIENT_MNAR_SPEC).expect("bundled graph spec is valid")
    }

    /// The bundled graph encoding the shadow-variable assumptions.
    pub fn shadow_assumption() -> Self {
        parse_graph_spec(SHADOW_ASSUMPTION_SPEC).expect("bundled graph spec is valid")
    }
}

/// Kahn's algorithm. On failure returns the vertices left with unresolved
/// parents, which all lie on or downstream of a cycle.
fn topological_order(
    parents: &[Vec<usize>],
    children: &[Vec<usize>],
) -> std::result::Result<Vec<usize>, Vec<usize>> {
    let n = parents.len();
    let mut indegree: Vec<usize> = parents.iter().map(Vec::len).collect();
    let mut queue: Vec<usize> = (0..n).filter(|&v| indegree[v] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(v) = queue.pop() {
        order.push(v);
        for &c in &children[v] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                queue.push(c);
            }
        }
    }
    if order.len() == n {
        Ok(order)
    } else {
        Err((0..n).filter(|&v| indegree[v] > 0).collect())
    }
}
