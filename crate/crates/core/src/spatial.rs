//! Uniform-grid neighbor search over 3D points.

use std::collections::HashMap;

type Cell = (i64, i64, i64);

pub struct Grid<'a> {
    points: &'a [[f64; 3]],
    cell: f64,
    cells: HashMap<Cell, Vec<usize>>,
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

impl<'a> Grid<'a> {
    pub fn new(points: &'a [[f64; 3]], cell: f64) -> Self {
        assert!(cell > 0.0, "grid cell must be positive");
        let mut cells: HashMap<Cell, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(cell, p)).or_default().push(i);
        }
        Self {
            points,
            cell,
            cells,
        }
    }

    fn key(cell: f64, p: &[f64; 3]) -> Cell {
        (
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        )
    }

    /// Indices within `radius` of point `i` (including `i`), ascending.
    pub fn within(&self, i: usize, radius: f64) -> Vec<usize> {
        let p = &self.points[i];
        let r2 = radius * radius;
        let reach = (radius / self.cell).ceil() as i64;
        let (cx, cy, cz) = Self::key(self.cell, p);
        let mut out = Vec::new();
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(members) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        out.extend(members.iter().copied().filter(|&j| dist2(p, &self.points[j]) <= r2));
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// The `k` nearest other points of `i`, closest first; ties by index.
    pub fn knn(&self, i: usize, k: usize) -> Vec<usize> {
        let p = &self.points[i];
        let (cx, cy, cz) = Self::key(self.cell, p);
        let k = k.min(self.points.len().saturating_sub(1));
        if k == 0 {
            return Vec::new();
        }
        let mut cand: Vec<(f64, usize)> = Vec::new();
        let mut ring = 0i64;
        loop {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(members) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                            for &j in members {
                                if j != i {
                                    cand.push((dist2(p, &self.points[j]), j));
                                }
                            }
                        }
                    }
                }
            }
            // Everything within `ring * cell` of p has been visited.
            if cand.len() >= k {
                cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let safe = ring as f64 * self.cell;
                if cand[k - 1].0 <= safe * safe {
                    break;
                }
            }
            ring += 1;
        }
        cand.truncate(k);
        cand.into_iter().map(|(_, j)| j).collect()
    }
}
