//! Attention diagnostics: the fused absolute-PE score expansion and CSV dumps
//! of the encoder's per-aspect attention.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::env::{Instance, Solution};
use crate::error::{shape_err, Result};
use crate::model::Dact;

/// Row-major dense matrix used by the diagnostics.
pub type Matrix = Vec<Vec<f64>>;

fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let k = b.len();
    if a.iter().any(|r| r.len() != k) {
        return shape_err("matmul inner dimensions differ");
    }
    let cols = b.first().map_or(0, Vec::len);
    Ok(a.iter().map(|row| (0..cols).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect()).collect())
}

fn scaled_outer(q: &Matrix, k: &Matrix, scale: f64) -> Matrix {
    q.iter().map(|qi| k.iter().map(|kj| scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>()).collect()).collect()
}

/// The four terms of the fused score `((h+g)Wq)((h+g)Wk)^T / sqrt(dk)`:
/// node-to-node, position-to-position, node-to-position, position-to-node.
pub fn decompose_abs_pe_attention(h: &Matrix, g: &Matrix, wq: &Matrix, wk: &Matrix) -> Result<[Matrix; 4]> {
    if h.len() != g.len() || h.iter().zip(g).any(|(a, b)| a.len() != b.len()) {
        return shape_err("node and positional embeddings differ in shape");
    }
    let dk = wq.first().map_or(0, Vec::len);
    if dk == 0 || wk.first().map_or(0, Vec::len) != dk {
        return shape_err("query and key projections differ in width");
    }
    let s = 1.0 / (dk as f64).sqrt();
    let (hq, hk) = (matmul(h, wq)?, matmul(h, wk)?);
    let (gq, gk) = (matmul(g, wq)?, matmul(g, wk)?);
    Ok([scaled_outer(&hq, &hk, s), scaled_outer(&gq, &gk, s), scaled_outer(&hq, &gk, s), scaled_outer(&gq, &hk, s)])
}

/// The fused score computed directly.
pub fn fused_abs_pe_attention(h: &Matrix, g: &Matrix, wq: &Matrix, wk: &Matrix) -> Result<Matrix> {
    let x: Matrix = h.iter().zip(g).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
    let dk = wq.first().map_or(0, Vec::len);
    Ok(scaled_outer(&matmul(&x, wq)?, &matmul(&x, wk)?, 1.0 / (dk as f64).sqrt()))
}

pub fn matrix_csv(m: &Matrix) -> String {
    let mut s = String::new();
    for row in m {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", line.join(","));
    }
    s
}

/// Per-head normalized attention of every encoder layer on one state, rows
/// and columns ordered by solution position. Returns `(layer, head, node, position)`.
pub fn attention_by_position(
    model: &Dact,
    instance: &Instance,
    solution: &Solution,
) -> Result<Vec<(usize, usize, Matrix, Matrix)>> {
    let n = solution.len();
    let table = model.positional_table(n)?;
    let input = model.batch_input(&[(instance, solution)], &table)?;
    let order = solution.order();
    let reorder = |data: &[f32]| -> Matrix {
        order.iter().map(|&a| order.iter().map(|&b| data[a * n + b] as f64).collect()).collect()
    };
    Ok(model
        .attention(&input)?
        .into_iter()
        .map(|(l, k, node, pos)| (l, k, reorder(node.data()), reorder(pos.data())))
        .collect())
}

/// Writes `layer{l}_head{k}_{node|position}.csv` files into `dir`.
pub fn dump_attention(model: &Dact, instance: &Instance, solution: &Solution, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (l, k, node, pos) in attention_by_position(model, instance, solution)? {
        for (aspect, m) in [("node", &node), ("position", &pos)] {
            let path = dir.join(format!("layer{l}_head{k}_{aspect}.csv"));
            std::fs::write(&path, matrix_csv(m))?;
            files.push(path);
        }
    }
    Ok(files)
}

/// Mean of the two corner entries (first and last position) relative to the
/// median entry of a position-attention matrix.
pub fn corner_ratio(m: &Matrix) -> f64 {
    let n = m.len();
    let corner = 0.5 * (m[0][n - 1] + m[n - 1][0]);
    let mut all: Vec<f64> = m.iter().flatten().copied().collect();
    all.sort_by(f64::total_cmp);
    corner / all[all.len() / 2]
}
