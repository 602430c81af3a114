//! Graphviz export of circuits.

use std::fmt::Write;

use crate::discovery::Circuit;

/// Edge count above which a rendered file is considered large.
pub const LARGE_EDGE_COUNT: usize = 10_000;

/// Layout size in points: full layer width and distance per unit of `y`.
const WIDTH_PT: f64 = 720.0;
const LAYER_PT: f64 = 144.0;

fn node_id(layer: usize, neuron: usize) -> String {
    format!("n{layer}_{neuron}")
}

/// DOT digraph of a circuit. Neurons are pinned at their grid coordinates
/// (`pos`, for `neato -n`); positive edges are red, negative edges blue, and
/// pen width grows with `|w|` relative to the largest edge.
pub fn render_dot(circuit: &Circuit) -> String {
    let n_layers = circuit.widths.len();
    let mut present: Vec<Vec<bool>> = circuit.widths.iter().map(|&w| vec![false; w]).collect();
    for (j, keep) in circuit.keep.iter().enumerate() {
        for &i in keep {
            present[j + 1][i] = true;
        }
    }
    for v in present[n_layers - 1].iter_mut() {
        *v = true;
    }
    for &(g, from, to) in &circuit.edges {
        present[g][from] = true;
        present[g + 1][to] = true;
    }
    let max_abs = circuit.edge_weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));

    let mut out = String::new();
    out.push_str("digraph circuit {\n");
    out.push_str("  graph [splines=false, outputorder=edgesfirst];\n");
    out.push_str("  node [shape=circle, width=0.15, height=0.15, fixedsize=true, label=\"\"];\n");
    out.push_str("  edge [arrowhead=none];\n");
    for (layer, row) in present.iter().enumerate() {
        let width = circuit.widths[layer] as f64;
        let y = layer as f64 * circuit.layer_spacing;
        for (i, _) in row.iter().enumerate().filter(|(_, p)| **p) {
            let x = (i as f64 + 0.5) / width;
            let _ = writeln!(
                out,
                "  {} [pos=\"{:.3},{:.3}!\", tooltip=\"layer {layer} neuron {i}\"];",
                node_id(layer, i),
                x * WIDTH_PT,
                y * LAYER_PT
            );
        }
    }
    for (&(g, from, to), &w) in circuit.edges.iter().zip(&circuit.edge_weights) {
        let (color, sign) = if w >= 0.0 { ("red", "+") } else { ("blue", "-") };
        let pen = if max_abs > 0.0 { 0.2 + 2.8 * w.abs() / max_abs } else { 0.2 };
        let _ = writeln!(
            out,
            "  {} -> {} [color={color}, sign=\"{sign}\", weight_value=\"{w}\", penwidth={pen:.3}];",
            node_id(g, from),
            node_id(g + 1, to)
        );
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circuit() -> Circuit {
        Circuit {
            keep: vec![vec![1]],
            k_per_layer: 1,
            edge_epsilon: 0.0,
            edges: vec![(0, 0, 1), (1, 1, 0)],
            edge_weights: vec![0.5, -2.0],
            widths: vec![2, 2, 1],
            layer_spacing: 1.0,
            source_model_id: "x".into(),
        }
    }

    #[test]
    fn edge_colours_follow_sign() {
        let dot = render_dot(&circuit());
        assert!(dot.starts_with("digraph circuit {"));
        assert!(dot.trim_end().ends_with('}'));
        assert!(dot.contains("n0_0 -> n1_1 [color=red, sign=\"+\""));
        assert!(dot.contains("n1_1 -> n2_0 [color=blue, sign=\"-\""));
        assert!(dot.contains("penwidth=3.000"));
        assert_eq!(dot.matches("->").count(), 2);
        // Dropped hidden neuron 0 and unused input 1 are not drawn.
        assert!(!dot.contains("n1_0 ["));
        assert!(!dot.contains("n0_1 ["));
    }
}
