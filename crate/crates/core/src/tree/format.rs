//! TOML tree-spec format.
//!
//! ```toml
//! root = "r"                 # optional; defaults to the unique parentless vertex
//!
//! [[vertex]]
//! id = "r"
//! bounds = [[-1.0, 1.0], [-1.0, 1.0]]
//!
//! [[vertex]]
//! id = "p2"
//! dim = 3                    # with `range`, repeats one interval `dim` times
//! range = [-1.0, 1.0]
//!
//! [[vertex]]
//! id = "switch"              # no bounds: a purely categorical vertex
//!
//! [[edge]]
//! parent = "r"
//! label = 0
//! child = "p1"
//! ```

use serde::Deserialize;

use super::{SpecError, TreeSpec};
use crate::Scalar;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTree {
    root: Option<String>,
    #[serde(default)]
    vertex: Vec<RawVertex>,
    #[serde(default)]
    edge: Vec<RawEdge>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVertex {
    id: String,
    dim: Option<usize>,
    bounds: Option<Vec<[f64; 2]>>,
    range: Option<[f64; 2]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEdge {
    parent: String,
    label: u32,
    child: String,
}

pub(super) fn parse<T: Scalar>(text: &str) -> Result<TreeSpec<T>, SpecError> {
    let raw: RawTree = toml::from_str(text).map_err(|e| SpecError::Parse(e.to_string()))?;
    let mut builder = TreeSpec::builder();
    for v in raw.vertex {
        let bounds: Vec<[f64; 2]> = match (v.bounds, v.range, v.dim) {
            (Some(_), Some(_), _) => {
                return Err(SpecError::Parse(format!(
                    "vertex `{}` sets both `bounds` and `range`",
                    v.id
                )))
            }
            (Some(b), None, declared) => {
                if let Some(d) = declared.filter(|&d| d != b.len()) {
                    return Err(SpecError::DimMismatch {
                        vertex: v.id,
                        declared: d,
                        given: b.len(),
                    });
                }
                b
            }
            (None, Some(r), Some(d)) => vec![r; d],
            (None, Some(_), None) => {
                return Err(SpecError::Parse(format!("vertex `{}` has `range` without `dim`", v.id)))
            }
            (None, None, Some(d)) if d > 0 => {
                return Err(SpecError::DimMismatch {
                    vertex: v.id,
                    declared: d,
                    given: 0,
                })
            }
            (None, None, _) => Vec::new(),
        };
        let bounds = bounds.into_iter().map(|[lo, hi]| (T::lit(lo), T::lit(hi))).collect();
        builder = builder.vertex(v.id, bounds);
    }
    for e in raw.edge {
        builder = builder.edge(e.parent, e.label, e.child);
    }
    if let Some(r) = raw.root {
        builder = builder.root(r);
    }
    builder.build()
}
