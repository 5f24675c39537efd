use super::{Substrate, Vec3};

/// Uniform periodic grid mapping cells to the spheres that may be reached
/// from any point of the cell within `reach` µm.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    cells_per_axis: usize,
    cell_size: f64,
    reach: f64,
    starts: Vec<u32>,
    ids: Vec<u32>,
}

impl SpatialIndex {
    /// Builds the index. Every sphere is registered in every cell touched by
    /// its bounding box inflated by `reach` (typically the longest step).
    pub fn build(substrate: &Substrate, reach: f64) -> Self {
        let l = substrate.voxel_side;
        let reach = reach.max(0.0);
        let mean_radius = if substrate.spheres.is_empty() {
            l
        } else {
            substrate.spheres.iter().map(|s| s.radius).sum::<f64>() / substrate.spheres.len() as f64
        };
        let target = (mean_radius + reach).max(l / 128.0);
        let n = ((l / target).floor() as usize).clamp(1, 128);
        let cell_size = l / n as f64;

        let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); n * n * n];
        for (id, s) in substrate.spheres.iter().enumerate() {
            let extent = s.radius + reach;
            let mut ranges = [(0i64, 0i64); 3];
            for (axis, range) in ranges.iter_mut().enumerate() {
                let lo = ((s.center[axis] - extent) / cell_size).floor() as i64;
                let hi = ((s.center[axis] + extent) / cell_size).floor() as i64;
                *range = if hi - lo + 1 >= n as i64 { (0, n as i64 - 1) } else { (lo, hi) };
            }
            for i in ranges[0].0..=ranges[0].1 {
                for j in ranges[1].0..=ranges[1].1 {
                    for k in ranges[2].0..=ranges[2].1 {
                        let cell = Self::flat(n, i, j, k);
                        buckets[cell].push(id as u32);
                    }
                }
            }
        }

        let mut starts = Vec::with_capacity(n * n * n + 1);
        let mut ids = Vec::new();
        starts.push(0);
        for b in &buckets {
            ids.extend_from_slice(b);
            starts.push(ids.len() as u32);
        }
        Self { cells_per_axis: n, cell_size, reach, starts, ids }
    }

    #[inline]
    fn flat(n: usize, i: i64, j: i64, k: i64) -> usize {
        let n_i = n as i64;
        let w = |x: i64| x.rem_euclid(n_i) as usize;
        (w(i) * n + w(j)) * n + w(k)
    }

    /// Spheres that may contain `point` or be reached within `reach` of it.
    /// `point` must already be wrapped into the voxel.
    #[inline]
    pub fn candidates(&self, point: &Vec3) -> &[u32] {
        let n = self.cells_per_axis;
        let c = |x: f64| ((x / self.cell_size) as usize).min(n - 1);
        let cell = (c(point.x) * n + c(point.y)) * n + c(point.z);
        &self.ids[self.starts[cell] as usize..self.starts[cell + 1] as usize]
    }

    pub fn reach(&self) -> f64 {
        self.reach
    }

    pub fn cells_per_axis(&self) -> usize {
        self.cells_per_axis
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::Sphere;

    #[test]
    fn every_sphere_in_every_touched_cell() {
        let mut s = Substrate::empty(10.0, 1.0);
        s.spheres.push(Sphere { center: Vec3::new(0.2, 5.0, 9.9), radius: 1.0 });
        s.spheres.push(Sphere { center: Vec3::new(5.0, 5.0, 5.0), radius: 0.5 });
        let index = SpatialIndex::build(&s, 0.3);
        // sample points on a fine grid; anything within radius + reach must be listed
        let steps = 60;
        for i in 0..steps {
            for j in 0..steps {
                for k in 0..steps {
                    let p = Vec3::new(i as f64, j as f64, k as f64) * (10.0 / steps as f64);
                    for (id, sp) in s.spheres.iter().enumerate() {
                        if s.min_image(&sp.center, &p).norm() <= sp.radius + 0.3 {
                            assert!(index.candidates(&p).contains(&(id as u32)), "{p:?} {id}");
                        }
                    }
                }
            }
        }
    }
}
