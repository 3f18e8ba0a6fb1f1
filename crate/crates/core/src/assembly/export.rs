use std::fmt::Write;

use super::{AssembledNetwork, AssemblyError, LayerOp};
use crate::canonical::to_canonical_bytes;

/// Graphviz rendering: one node per layer labelled with its kind and output
/// size, solid edges for the feed-forward graph, dashed for cell skips.
pub fn to_dot(net: &AssembledNetwork) -> String {
    let mut out = String::from("digraph network {\n  rankdir=TB;\n");
    for l in &net.layers {
        let shape = match l.op {
            LayerOp::Input { .. } | LayerOp::Output { .. } => "ellipse",
            LayerOp::Concatenate | LayerOp::Sum => "diamond",
            _ => "box",
        };
        let _ = writeln!(out, "  n{} [label=\"{} {}\", shape={}];", l.id, l.op.name(), l.output, shape);
    }
    for (f, t) in &net.edges {
        let _ = writeln!(out, "  n{f} -> n{t};");
    }
    for (f, t) in &net.cell_skips {
        let _ = writeln!(out, "  n{f} -> n{t} [style=dashed, constraint=false];");
    }
    out.push_str("}\n");
    out
}

pub fn to_json(net: &AssembledNetwork) -> Vec<u8> {
    to_canonical_bytes(net).expect("networks always serialize")
}

/// Parses and validates a network produced by [`to_json`].
pub fn import_json(bytes: &[u8]) -> Result<AssembledNetwork, AssemblyError> {
    let net: AssembledNetwork = serde_json::from_slice(bytes).map_err(|e| AssemblyError::Json(e.to_string()))?;
    net.validate()?;
    Ok(net)
}
