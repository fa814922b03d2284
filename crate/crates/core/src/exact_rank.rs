//! Exact rank of integer matrices by fraction-free row reduction.
//!
//! Rows are kept sparse and divided by their content (gcd of entries) after
//! every elimination, so banded 0/1 masks stay cheap even at 1024×1024.

use std::collections::{HashMap, HashSet};

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Signed, Zero};

type SparseRow = Vec<(usize, BigInt)>;

/// Exact rank over the rationals of a 0/1 matrix given as boolean rows.
pub fn exact_rank_bool(rows: &[Vec<bool>]) -> usize {
    // Duplicate rows never change rank.
    let mut seen = HashSet::new();
    let unique: Vec<&Vec<bool>> = rows.iter().filter(|r| seen.insert(*r)).collect();
    let sparse: Vec<SparseRow> = unique
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(c, _)| (c, BigInt::one()))
                .collect()
        })
        .collect();
    exact_rank_sparse(sparse)
}

/// Exact rank of an integer matrix.
pub fn exact_rank_int(rows: &[Vec<i64>]) -> usize {
    let sparse = rows
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .filter(|(_, &v)| v != 0)
                .map(|(c, &v)| (c, BigInt::from(v)))
                .collect()
        })
        .collect();
    exact_rank_sparse(sparse)
}

fn exact_rank_sparse(rows: Vec<SparseRow>) -> usize {
    let mut pivots: HashMap<usize, SparseRow> = HashMap::new();
    for mut row in rows {
        while let Some((lead, _)) = row.first() {
            match pivots.get(lead) {
                Some(pivot) => row = eliminate(&row, pivot),
                None => {
                    pivots.insert(*lead, row);
                    break;
                }
            }
        }
    }
    pivots.len()
}

/// `p₀·row − r₀·pivot`, reduced by content. Both share the same leading column.
fn eliminate(row: &SparseRow, pivot: &SparseRow) -> SparseRow {
    let a = &pivot[0].1;
    let b = &row[0].1;
    let g = a.gcd(b);
    let (a, b) = (a / &g, b / &g);
    let mut out = Vec::with_capacity(row.len() + pivot.len());
    let (mut i, mut j) = (1, 1);
    while i < row.len() || j < pivot.len() {
        let ci = row.get(i).map_or(usize::MAX, |e| e.0);
        let cj = pivot.get(j).map_or(usize::MAX, |e| e.0);
        let (col, v) = if ci < cj {
            i += 1;
            (ci, &a * &row[i - 1].1)
        } else if cj < ci {
            j += 1;
            (cj, -(&b * &pivot[j - 1].1))
        } else {
            i += 1;
            j += 1;
            (ci, &a * &row[i - 1].1 - &b * &pivot[j - 1].1)
        };
        if !v.is_zero() {
            out.push((col, v));
        }
    }
    let content = out
        .iter()
        .fold(BigInt::zero(), |acc, (_, v)| acc.gcd(v));
    if !content.is_zero() && !content.abs().is_one() {
        for (_, v) in out.iter_mut() {
            *v /= &content;
        }
    }
    out
}
