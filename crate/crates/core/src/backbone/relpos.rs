use super::patch::PatchGrid;
use crate::tensor::{Real, Tensor};

/// Relative position table `r_ij = (‖δ_ij‖², δx_ij, δy_ij)`, where `δ_ij`
/// is the grid offset from patch `i` to patch `j` (x to the right, y down).
#[derive(Debug, Clone, PartialEq)]
pub struct RelPosEncoding {
    num_patches: usize,
    entries: Vec<[f64; 3]>,
}

impl RelPosEncoding {
    pub fn new(grid: &PatchGrid) -> Self {
        let n = grid.num_patches();
        let mut entries = Vec::with_capacity(n * n);
        for i in 0..n {
            let (ri, ci) = grid.position(i);
            for j in 0..n {
                let (rj, cj) = grid.position(j);
                let dx = cj as f64 - ci as f64;
                let dy = rj as f64 - ri as f64;
                entries.push([dx * dx + dy * dy, dx, dy]);
            }
        }
        RelPosEncoding {
            num_patches: n,
            entries,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.num_patches
    }

    pub fn get(&self, i: usize, j: usize) -> [f64; 3] {
        self.entries[i * self.num_patches + j]
    }

    /// The table as a `[P² × 3]` matrix, row `i·P + j` holding `r_ij`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.entries.len(), 3], |k| T::lit(self.entries[k / 3][k % 3]))
    }
}

/// Distinct integer offsets for `heads` attention heads, walking outward
/// from the origin ring by ring (by squared length, then counter-clockwise
/// angle starting at +x). The first four are the unit offsets.
pub fn spiral_offsets(heads: usize) -> Vec<(i32, i32)> {
    let mut radius = 1i32;
    loop {
        let mut cands: Vec<(i32, i32)> = (-radius..=radius)
            .flat_map(|x| (-radius..=radius).map(move |y| (x, y)))
            .filter(|&(x, y)| (x, y) != (0, 0) && x * x + y * y <= radius * radius)
            .collect();
        if cands.len() >= heads {
            // y grows downward, so counter-clockwise on screen is atan2(-y, x).
            let angle = |&(x, y): &(i32, i32)| {
                let a = (-(y as f64)).atan2(x as f64);
                if a < 0.0 {
                    a + std::f64::consts::TAU
                } else {
                    a
                }
            };
            cands.sort_by(|a, b| {
                let la = a.0 * a.0 + a.1 * a.1;
                let lb = b.0 * b.0 + b.1 * b.1;
                la.cmp(&lb).then(angle(a).total_cmp(&angle(b)))
            });
            cands.truncate(heads);
            return cands;
        }
        radius += 1;
    }
}
