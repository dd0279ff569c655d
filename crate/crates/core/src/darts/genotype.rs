use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_OPS: usize = 8;
pub const NUM_NODES: usize = 4;
pub const NUM_EDGES: usize = 14;
pub const INPUTS_PER_NODE: usize = 2;

/// Candidate operations, in the fixed index order used by the α matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "sep_conv_3x3")]
    SepConv3x3,
    #[serde(rename = "sep_conv_5x5")]
    SepConv5x5,
    #[serde(rename = "dil_conv_3x3")]
    DilConv3x3,
    #[serde(rename = "dil_conv_5x5")]
    DilConv5x5,
    #[serde(rename = "max_pool_3x3")]
    MaxPool3x3,
    #[serde(rename = "avg_pool_3x3")]
    AvgPool3x3,
    #[serde(rename = "identity")]
    Identity,
    #[serde(rename = "zero")]
    Zero,
}

impl OpKind {
    pub const ALL: [OpKind; NUM_OPS] = [
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
        OpKind::MaxPool3x3,
        OpKind::AvgPool3x3,
        OpKind::Identity,
        OpKind::Zero,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<OpKind> {
        OpKind::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::Identity => "identity",
            OpKind::Zero => "zero",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown operation {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Normal,
    Reduce,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Normal => "normal",
            CellKind::Reduce => "reduce",
        }
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(CellKind::Normal),
            "reduce" => Ok(CellKind::Reduce),
            _ => Err(Error::invalid(format!("unknown cell kind {s:?}"))),
        }
    }
}

/// Index of edge `pred → node` in the 14-row α matrix. States 0 and 1 are
/// the cell inputs; node `j` is state `j + 2`.
pub fn edge_index(node: usize, pred: usize) -> usize {
    debug_assert!(node < NUM_NODES && pred < node + 2);
    (0..node).map(|m| m + 2).sum::<usize>() + pred
}

/// Two `(predecessor state, op)` pairs per intermediate node, node-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub normal: Vec<(usize, OpKind)>,
    pub reduce: Vec<(usize, OpKind)>,
}

impl Genotype {
    /// Both inputs feed every node through `op`.
    pub fn uniform(op: OpKind) -> Genotype {
        let cell: Vec<(usize, OpKind)> = (0..NUM_NODES).flat_map(|_| [(0, op), (1, op)]).collect();
        Genotype {
            normal: cell.clone(),
            reduce: cell,
        }
    }

    pub fn cell(&self, kind: CellKind) -> &[(usize, OpKind)] {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduce => &self.reduce,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for kind in [CellKind::Normal, CellKind::Reduce] {
            let cell = self.cell(kind);
            if cell.len() != NUM_NODES * INPUTS_PER_NODE {
                return Err(Error::invalid(format!(
                    "{} cell needs {} edges, has {}",
                    kind.name(),
                    NUM_NODES * INPUTS_PER_NODE,
                    cell.len()
                )));
            }
            for (node, pair) in cell.chunks(INPUTS_PER_NODE).enumerate() {
                for &(pred, op) in pair {
                    if pred >= node + 2 {
                        return Err(Error::invalid(format!(
                            "{} node {node}: predecessor {pred} is not earlier",
                            kind.name()
                        )));
                    }
                    if op == OpKind::Zero {
                        return Err(Error::invalid(format!("{} node {node}: zero op kept", kind.name())));
                    }
                }
                if pair[0].0 == pair[1].0 {
                    return Err(Error::invalid(format!(
                        "{} node {node}: duplicate predecessor {}",
                        kind.name(),
                        pair[0].0
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Genotype> {
        let g: Genotype = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Genotype> {
        Genotype::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Keeps, per edge, the strongest non-zero op and, per node, the two edges
/// whose kept op has the largest softmax weight. Ties go to the lower op
/// index, then the lower predecessor.
pub fn discretize(alpha_normal: &Tensor, alpha_reduce: &Tensor) -> Result<Genotype> {
    Ok(Genotype {
        normal: discretize_cell(alpha_normal)?,
        reduce: discretize_cell(alpha_reduce)?,
    })
}

pub fn discretize_cell(alpha: &Tensor) -> Result<Vec<(usize, OpKind)>> {
    if alpha.shape() != [NUM_EDGES, NUM_OPS] {
        return Err(Error::shape("discretize", alpha.shape(), &[NUM_EDGES, NUM_OPS]));
    }
    if !alpha.is_finite() {
        return Err(Error::NonFinite("architecture weights".into()));
    }
    let mut out = Vec::with_capacity(NUM_NODES * INPUTS_PER_NODE);
    for node in 0..NUM_NODES {
        // (weight, op, pred)
        let mut cands: Vec<(f64, usize, usize)> = (0..node + 2)
            .map(|pred| {
                let row = alpha.row(edge_index(node, pred));
                let probs = softmax(row);
                let mut best = 0;
                for op in 1..NUM_OPS {
                    if op != OpKind::Zero.index() && probs[op] > probs[best] {
                        best = op;
                    }
                }
                (probs[best], best, pred)
            })
            .collect();
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut kept: Vec<(usize, OpKind)> = cands[..INPUTS_PER_NODE]
            .iter()
            .map(|&(_, op, pred)| (pred, OpKind::ALL[op]))
            .collect();
        kept.sort_by_key(|&(pred, _)| pred);
        out.extend(kept);
    }
    Ok(out)
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn state_name(state: usize) -> String {
    match state {
        0 => "c_{k-2}".to_string(),
        1 => "c_{k-1}".to_string(),
        s => (s - 2).to_string(),
    }
}

/// Graphviz rendering of one cell: inputs, the four intermediate nodes and
/// the concatenated output.
pub fn export_genotype_dot(genotype: &Genotype, kind: CellKind) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "digraph {} {{", kind.name());
    s.push_str("  rankdir=LR;\n");
    s.push_str("  node [shape=box, style=filled];\n");
    s.push_str("  \"c_{k-2}\" [fillcolor=darkseagreen2];\n");
    s.push_str("  \"c_{k-1}\" [fillcolor=darkseagreen2];\n");
    for n in 0..NUM_NODES {
        let _ = writeln!(s, "  \"{n}\" [fillcolor=lightblue];");
    }
    s.push_str("  \"c_{k}\" [fillcolor=palegoldenrod];\n");
    for (i, &(pred, op)) in genotype.cell(kind).iter().enumerate() {
        let node = i / INPUTS_PER_NODE;
        let _ = writeln!(s, "  \"{}\" -> \"{node}\" [label=\"{}\"];", state_name(pred), op.name());
    }
    for n in 0..NUM_NODES {
        let _ = writeln!(s, "  \"{n}\" -> \"c_{{k}}\";");
    }
    s.push_str("}\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_indices_cover_fourteen_rows() {
        let all: Vec<usize> = (0..NUM_NODES).flat_map(|j| (0..j + 2).map(move |i| edge_index(j, i))).collect();
        assert_eq!(all, (0..NUM_EDGES).collect::<Vec<_>>());
    }

    #[test]
    fn op_names_round_trip() {
        for op in OpKind::ALL {
            assert_eq!(op.name().parse::<OpKind>().unwrap(), op);
            assert_eq!(OpKind::from_index(op.index()), Some(op));
        }
        assert!("conv_7x7".parse::<OpKind>().is_err());
    }

    #[test]
    fn json_round_trip_and_format() {
        let g = Genotype::uniform(OpKind::SepConv3x3);
        let text = g.to_json().unwrap();
        assert!(text.contains("\"sep_conv_3x3\""));
        assert_eq!(Genotype::from_json(&text).unwrap(), g);
        let raw = r#"{"normal":[[0,"identity"],[1,"zero"],[0,"identity"],[1,"identity"],[0,"identity"],[1,"identity"],[0,"identity"],[1,"identity"]],"reduce":[]}"#;
        assert!(Genotype::from_json(raw).is_err());
    }

    #[test]
    fn unique_max_and_tie_rules() {
        let mut a = Tensor::zeros(&[NUM_EDGES, NUM_OPS]);
        for e in 0..NUM_EDGES {
            a.data_mut()[e * NUM_OPS] = 1.0;
        }
        let g = discretize(&a, &a).unwrap();
        assert!(g.normal.iter().all(|&(_, op)| op == OpKind::SepConv3x3));
        g.validate().unwrap();

        let mut t = Tensor::zeros(&[NUM_EDGES, NUM_OPS]);
        for e in 0..NUM_EDGES {
            t.data_mut()[e * NUM_OPS + 2] = 3.0;
            t.data_mut()[e * NUM_OPS + 5] = 3.0;
            t.data_mut()[e * NUM_OPS + 7] = 9.0;
        }
        let g = discretize(&t, &t).unwrap();
        assert!(g.normal.iter().all(|&(_, op)| op == OpKind::DilConv3x3));
        // equal strengths everywhere: lower predecessors win
        assert!(g.normal.chunks(2).all(|p| p[0].0 == 0 && p[1].0 == 1));
    }

    #[test]
    fn identity_dot_has_eight_labeled_and_four_concat_edges() {
        let dot = export_genotype_dot(&Genotype::uniform(OpKind::Identity), CellKind::Normal);
        assert_eq!(dot.matches("[label=\"identity\"]").count(), 8);
        assert_eq!(dot.matches("-> \"c_{k}\"").count(), 4);
        assert_eq!(dot, export_genotype_dot(&Genotype::uniform(OpKind::Identity), CellKind::Normal));
    }
}
