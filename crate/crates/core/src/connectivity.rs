//! Layer-dependency graphs of a single block and their distance theory.
//!
//! Layer `0` is the block input; an edge `(i, j)` with `j < i` means layer
//! `i` reads the output of layer `j` directly. The backpropagation distance
//! between `i` and `j` is the length of the shortest chain of such reads.

use std::collections::VecDeque;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum Scheme {
    /// Every layer reads every earlier layer.
    FullDense,
    /// Layer `i` reads `i - 2^k` for `k = 0..=floor(log2 i)`.
    LogDense,
    /// Layer `i` reads only `i - 1`.
    Chain,
    /// Chain plus an identity skip over every two-layer residual unit:
    /// even layers `i` also read `i - 2`.
    ResidualChain,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::FullDense,
        Scheme::LogDense,
        Scheme::Chain,
        Scheme::ResidualChain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::FullDense => "full-dense",
            Scheme::LogDense => "log-dense",
            Scheme::Chain => "chain",
            Scheme::ResidualChain => "residual-chain",
        }
    }

    /// Direct inputs of layer `i >= 1`, nearest first.
    pub fn inputs(self, i: usize) -> Vec<usize> {
        match self {
            Scheme::FullDense => (0..i).rev().collect(),
            Scheme::LogDense => {
                let mut v = Vec::new();
                let mut step = 1;
                while step <= i {
                    v.push(i - step);
                    step <<= 1;
                }
                v
            }
            Scheme::Chain => vec![i - 1],
            Scheme::ResidualChain => {
                if i.is_multiple_of(2) {
                    vec![i - 1, i - 2]
                } else {
                    vec![i - 1]
                }
            }
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-dense" | "full" | "dense" => Ok(Scheme::FullDense),
            "log-dense" | "log" => Ok(Scheme::LogDense),
            "chain" => Ok(Scheme::Chain),
            "residual-chain" | "residual" => Ok(Scheme::ResidualChain),
            other => Err(Error::invalid(format!("unknown connectivity scheme {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConnectivityGraph {
    layers: usize,
    scheme: Scheme,
    /// `reads[i]` lists the direct inputs of layer `i`.
    reads: Vec<Vec<usize>>,
}

impl ConnectivityGraph {
    pub fn new(layers: usize, scheme: Scheme) -> Result<Self> {
        if layers < 1 {
            return Err(Error::invalid("connectivity graph needs at least one layer"));
        }
        let mut reads = vec![Vec::new()];
        reads.extend((1..=layers).map(|i| scheme.inputs(i)));
        Ok(ConnectivityGraph { layers, scheme, reads })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.reads
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().map(move |&j| (i, j)))
    }

    pub fn edge_count(&self) -> usize {
        self.reads.iter().map(Vec::len).sum()
    }

    /// Breadth-first distances from layer `from` to every layer, following
    /// read edges towards the input. `None` marks an unreachable layer.
    pub fn distances_from(&self, from: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.layers + 1];
        let mut queue = VecDeque::from([from]);
        dist[from] = Some(0);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap();
            for &v in &self.reads[u] {
                if dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}

/// Shortest read-chain length from layer `i` down to layer `j`.
pub fn backprop_distance(g: &ConnectivityGraph, i: usize, j: usize) -> Result<usize> {
    if i <= j || i > g.layers {
        return Err(Error::invalid(format!(
            "backprop distance needs {} >= i > j, got i={i}, j={j}",
            g.layers
        )));
    }
    g.distances_from(i)[j]
        .ok_or_else(|| Error::invalid(format!("layer {j} unreachable from {i} in {} graph", g.scheme)))
}

/// Maximum backpropagation distance over all pairs `i > j`.
pub fn max_backprop_distance(g: &ConnectivityGraph) -> Result<usize> {
    let mut worst = 0;
    for i in 1..=g.layers {
        let dist = g.distances_from(i);
        for (j, d) in dist.iter().enumerate().take(i) {
            let d = d.ok_or_else(|| Error::invalid(format!("layer {j} unreachable from {i} in {} graph", g.scheme)))?;
            worst = worst.max(d);
        }
    }
    Ok(worst)
}

/// Edge count of a scheme with `layers` layers, by closed form.
pub fn connection_count(layers: usize, scheme: Scheme) -> u64 {
    let l = layers as u64;
    match scheme {
        Scheme::FullDense => l * (l + 1) / 2,
        Scheme::LogDense => (1..=l).map(|i| u64::from(i.ilog2()) + 1).sum(),
        Scheme::Chain => l,
        Scheme::ResidualChain => l + l / 2,
    }
}

/// Factor `lambda^(depth - from)` multiplying the direct gradient term when
/// every shortcut between `from` and `depth` is scaled by `lambda`.
pub fn shortcut_gain(lambda: f64, from: usize, depth: usize) -> Result<f64> {
    if depth <= from {
        return Err(Error::invalid(format!(
            "shortcut gain needs depth > from, got {depth} <= {from}"
        )));
    }
    Ok((from..depth).fold(1.0, |acc, _| acc * lambda))
}

/// Product of per-unit shortcut scales `lambdas[from..depth]`.
pub fn shortcut_gain_varying(lambdas: &[f64], from: usize, depth: usize) -> Result<f64> {
    if depth <= from || depth > lambdas.len() {
        return Err(Error::invalid("shortcut range outside the scale sequence"));
    }
    Ok(lambdas[from..depth].iter().product())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnalysisRow {
    pub scheme: Scheme,
    pub layers: usize,
    pub edges: usize,
    pub mbd: usize,
}

pub fn analyze(schemes: &[Scheme], layers: impl IntoIterator<Item = usize> + Clone) -> Result<Vec<AnalysisRow>> {
    let mut rows = Vec::new();
    for &scheme in schemes {
        for l in layers.clone() {
            let g = ConnectivityGraph::new(l, scheme)?;
            rows.push(AnalysisRow {
                scheme,
                layers: l,
                edges: g.edge_count(),
                mbd: max_backprop_distance(&g)?,
            });
        }
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[AnalysisRow]) -> String {
    let mut s = String::from("scheme,L,edges,mbd\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.scheme, r.layers, r.edges, r.mbd);
    }
    s
}

pub fn rows_to_table(rows: &[AnalysisRow]) -> String {
    let mut s = format!("{:<16} {:>6} {:>8} {:>5}\n", "scheme", "L", "edges", "MBD");
    for r in rows {
        let _ = writeln!(s, "{:<16} {:>6} {:>8} {:>5}", r.scheme.name(), r.layers, r.edges, r.mbd);
    }
    s
}
