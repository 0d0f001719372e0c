//! Line-oriented graph spec format.
//!
//! ```text
//! # comment
//! vertex <name> observed
//! vertex <name> hidden
//! vertex <name> missing <indicator>
//! edge <parent> <child> [deterministic]
//! ```
//!
//! Vertices must be declared before the edges that use them. Anything after
//! `#` on a line is ignored.

use std::collections::HashSet;

use super::{EdgeSpec, MDag, MdagError, VariableNode, Visibility};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

fn err(line: usize, message: impl Into<String>) -> MdagError {
    MdagError::Parse(ParseError { line, message: message.into() })
}

pub fn parse_graph_spec(text: &str) -> Result<MDag, MdagError> {
    let mut vertices = Vec::new();
    let mut declared = HashSet::new();
    let mut edges = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["vertex", name, kind, rest @ ..] => {
                let visibility = match (*kind, rest) {
                    ("observed", []) => Visibility::Observed,
                    ("hidden", []) => Visibility::Hidden,
                    ("missing", [indicator]) => Visibility::Missing { indicator: indicator.to_string() },
                    ("missing", []) => return Err(err(line_no, "missing vertex needs an indicator name")),
                    ("observed" | "hidden" | "missing", _) => {
                        return Err(err(line_no, format!("unexpected tokens after `{kind}`")))
                    }
                    _ => return Err(err(line_no, format!("unknown visibility `{kind}`"))),
                };
                if !declared.insert(name.to_string()) {
                    return Err(err(line_no, format!("vertex `{name}` declared twice")));
                }
                vertices.push(VariableNode { name: name.to_string(), visibility });
            }
            ["edge", parent, child, tag @ ..] => {
                let deterministic = match tag {
                    [] => false,
                    ["deterministic"] => true,
                    _ => return Err(err(line_no, format!("unknown edge tag `{}`", tag.join(" ")))),
                };
                for end in [parent, child] {
                    if !declared.contains(*end) {
                        return Err(err(line_no, format!("edge uses undeclared vertex `{end}`")));
                    }
                }
                edges.push(EdgeSpec { parent: parent.to_string(), child: child.to_string(), deterministic });
            }
            [keyword, ..] => {
                return Err(err(line_no, format!("cannot parse `{line}` (keyword `{keyword}`)")))
            }
            [] => unreachable!("blank lines are skipped"),
        }
    }
    MDag::new(vertices, edges)
}
