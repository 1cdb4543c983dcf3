//! Shared oracles for integration tests.

#![allow(dead_code)]

use rdunet::network::{Ingredient, PlanRow};

/// Layer table of the full-size network, transcribed verbatim:
/// block, ingredient, kernel, feature-map size ("--" where none is listed).
pub const LAYER_TABLE: &str = "\
Input\t\t\t320x320x1
Down 1\tConv\t3x3\t320x320x64
\tDense (6 Conv)\t3x3\t--
\tBN, PReLU, Conv\t2x2\t320x320x64
Down 2\tConv (stride 2)\t2x2\t160x160x64
\tBN, PReLU, Conv\t3x3\t160x160x128
\tDense(6 Conv)\t3x3\t--
\tBN, PReLU, Conv\t2x2\t160x160x128
Down 3\tConv (stride 2)\t2x2\t80x80x128
\tBN, PReLU, Conv\t3x3\t80x80x256
\tDense(6 Conv)\t3x3\t--
\tBN, PReLU, Conv\t2x2\t80x80x256
Down 4\tConv (stride 2)\t2x2\t40x40x256
\tBN, PReLU, Conv\t3x3\t40x40x512
\tDense(6 Conv)\t3x3\t--
\tBN, PReLU, Conv\t2x2\t40x40x512
Bridge\tConv (stride 2)\t2x2\t20x20x512
\tBN, PReLU, Conv\t2x2\t20x20x1024
Up 4\tDense(6 Conv)\t3x3\t--
\tBN, PReLU, Conv\t2x2\t20x20x1024
\tUnpooling\t--\t40x40
\tAddition\t--\t--
Up 3\tBN, PReLU, Conv\t3x3\t40x40x512
\tDense(6 Conv)\t3x3\t--
\tBN, PReLU, Conv\t2x2\t40x40x512
\tUnpooling\t--\t80x80
Up 2\tAddition\t--\t--
\tBN, PReLU, Conv\t3x3\t80x80x256
\tDense(6 Conv)\t3x3\t--
\tBN, PReLU, Conv\t2x2\t80x80x256
Up 1\tUnpooling\t--\t160x160
\tAddition\t--\t--
\tBN, PReLU, Conv\t3x3\t160x160x128
\tDense(6 Conv)\t3x3\t--
output\tBN, PReLU, Conv\t2x2\t160x160x128
\tUnpooling\t--\t320x320
\tAddition\t--\t--
output\tBN, PReLU, Conv\t3x3\t320x320x64
\tDense(6 Conv)\t3x3\t--
\tBN, PReLU, Conv\t2x2\t320x320x64
output\tConv\t1x1\t320x320x1
";

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub ingredient: Ingredient,
    pub kernel: Option<usize>,
    pub hw: Option<(usize, usize)>,
    pub channels: Option<usize>,
}

/// Parses the table body (input row excluded) into ingredient rows.
pub fn table_rows() -> Vec<TableRow> {
    LAYER_TABLE
        .lines()
        .skip(1)
        .map(|line| {
            let cols: Vec<&str> = line.split('\t').collect();
            assert_eq!(cols.len(), 4, "{line:?}");
            let ingredient = match cols[1] {
                "Conv" => Ingredient::Conv,
                "Conv (stride 2)" => Ingredient::StridedConv,
                "BN, PReLU, Conv" => Ingredient::PreActConv,
                s if s.starts_with("Dense") => Ingredient::Dense,
                "Unpooling" => Ingredient::Unpool,
                "Addition" => Ingredient::Addition,
                other => panic!("unknown ingredient {other:?}"),
            };
            let kernel = match cols[2] {
                "--" => None,
                k => Some(k.split('x').next().unwrap().parse().unwrap()),
            };
            let (hw, channels) = match cols[3] {
                "--" => (None, None),
                size => {
                    let dims: Vec<usize> = size.split('x').map(|d| d.parse().unwrap()).collect();
                    (Some((dims[0], dims[1])), dims.get(2).copied())
                }
            };
            TableRow {
                ingredient,
                kernel,
                hw,
                channels,
            }
        })
        .collect()
}

/// Compares a plan against the table. The table's last row lists the
/// exported single-channel class mask, so the classifier's class count is
/// collapsed to one channel there. Returns the number of sized rows compared.
pub fn compare_plan(plan: &[PlanRow]) -> Result<usize, String> {
    let table = table_rows();
    if plan.len() != table.len() {
        return Err(format!("plan has {} rows, table {}", plan.len(), table.len()));
    }
    let mut sized = 0;
    for (i, (p, t)) in plan.iter().zip(&table).enumerate() {
        if p.ingredient != t.ingredient {
            return Err(format!("row {i}: ingredient {:?} vs {:?}", p.ingredient, t.ingredient));
        }
        if t.kernel.is_some() && p.kernel != t.kernel {
            return Err(format!("row {i}: kernel {:?} vs {:?}", p.kernel, t.kernel));
        }
        let last = i + 1 == table.len();
        let c = if last { 1 } else { p.size.2 };
        if let Some(hw) = t.hw {
            sized += 1;
            if (p.size.0, p.size.1) != hw {
                return Err(format!("row {i}: size {:?} vs {:?}", p.size, hw));
            }
        }
        if let Some(tc) = t.channels {
            if c != tc {
                return Err(format!("row {i}: channels {c} vs {tc}"));
            }
        }
    }
    Ok(sized)
}

/// Central-difference derivative of a scalar function of one variable.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Per-pixel counting oracle: `(tp, fp, fn)` of `class`, plus hits and total.
pub fn count_oracle(pred: &[u8], truth: &[u8], class: u8) -> (u64, u64, u64, u64, u64) {
    let (mut tp, mut fp, mut fneg, mut hits) = (0, 0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            hits += 1;
        }
        match (p == class, t == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    (tp, fp, fneg, hits, pred.len() as u64)
}

/// Breadth-first shortest read-chain lengths from `from` over `edges`
/// (pairs `(reader, source)`).
pub fn bfs(edges: &[(usize, usize)], nodes: usize, from: usize) -> Vec<Option<usize>> {
    let mut adj = vec![Vec::new(); nodes];
    for &(i, j) in edges {
        adj[i].push(j);
    }
    let mut dist = vec![None; nodes];
    dist[from] = Some(0);
    let mut queue = std::collections::VecDeque::from([from]);
    while let Some(u) = queue.pop_front() {
        let d = dist[u].unwrap();
        for &v in &adj[u] {
            if dist[v].is_none() {
                dist[v] = Some(d + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Log-dense edges built from the definition: layer i reads i - 2^k.
pub fn log_dense_edges(layers: usize) -> Vec<(usize, usize)> {
    let mut e = Vec::new();
    for i in 1..=layers {
        let mut k = 0;
        while (1usize << k) <= i {
            e.push((i, i - (1 << k)));
            k += 1;
        }
    }
    e
}
