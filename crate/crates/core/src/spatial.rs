//! Integer voxel keys and a spatial hash with exact ring-expansion k-NN.

use std::collections::HashMap;

use nalgebra::Vector3;

/// Voxel coordinate `floor(p / voxel_size)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey {
    pub ix: i32,
    pub iy: i32,
    pub iz: i32,
}

impl VoxelKey {
    pub const fn new(ix: i32, iy: i32, iz: i32) -> Self {
        Self { ix, iy, iz }
    }

    #[inline]
    pub fn of(p: &Vector3<f64>, voxel_size: f64) -> Self {
        Self {
            ix: (p.x / voxel_size).floor() as i32,
            iy: (p.y / voxel_size).floor() as i32,
            iz: (p.z / voxel_size).floor() as i32,
        }
    }

    #[inline]
    pub fn offset(&self, dx: i32, dy: i32, dz: i32) -> Self {
        Self::new(self.ix + dx, self.iy + dy, self.iz + dz)
    }

    /// The 27 keys of the 3x3x3 block centred on `self`, in a fixed order.
    pub fn neighborhood(&self) -> impl Iterator<Item = VoxelKey> + '_ {
        (-1..=1).flat_map(move |dx| {
            (-1..=1).flat_map(move |dy| (-1..=1).map(move |dz| self.offset(dx, dy, dz)))
        })
    }

    /// Lower corner of the voxel in world units.
    pub fn origin(&self, voxel_size: f64) -> Vector3<f64> {
        Vector3::new(
            self.ix as f64 * voxel_size,
            self.iy as f64 * voxel_size,
            self.iz as f64 * voxel_size,
        )
    }
}

/// Result of a neighbour query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: u32,
    pub dist2: f64,
}

/// Sparse map from voxel keys to point indices.
///
/// The hash stores indices only; queries take the position array the
/// indices refer to.
#[derive(Debug, Clone)]
pub struct SpatialHash {
    cell_size: f64,
    cells: HashMap<VoxelKey, Vec<u32>>,
    lo: [i32; 3],
    hi: [i32; 3],
}

impl SpatialHash {
    pub fn new(cell_size: f64) -> Self {
        assert!(cell_size > 0.0, "cell size must be positive");
        Self {
            cell_size,
            cells: HashMap::new(),
            lo: [i32::MAX; 3],
            hi: [i32::MIN; 3],
        }
    }

    pub fn build(points: &[Vector3<f64>], cell_size: f64) -> Self {
        let mut hash = Self::new(cell_size);
        for (i, p) in points.iter().enumerate() {
            hash.insert(VoxelKey::of(p, cell_size), i as u32);
        }
        hash
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn key_of(&self, p: &Vector3<f64>) -> VoxelKey {
        VoxelKey::of(p, self.cell_size)
    }

    pub fn insert(&mut self, key: VoxelKey, index: u32) {
        self.cells.entry(key).or_default().push(index);
        let k = [key.ix, key.iy, key.iz];
        for a in 0..3 {
            self.lo[a] = self.lo[a].min(k[a]);
            self.hi[a] = self.hi[a].max(k[a]);
        }
    }

    pub fn contains_key(&self, key: &VoxelKey) -> bool {
        self.cells.contains_key(key)
    }

    pub fn cell(&self, key: &VoxelKey) -> &[u32] {
        self.cells.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Keys in ascending order.
    pub fn sorted_keys(&self) -> Vec<VoxelKey> {
        let mut keys: Vec<_> = self.cells.keys().copied().collect();
        keys.sort_unstable();
        keys
    }

    /// Chebyshev ring radius beyond which no occupied cell exists.
    fn max_useful_ring(&self, c: &VoxelKey) -> i32 {
        if self.cells.is_empty() {
            return -1;
        }
        let k = [c.ix, c.iy, c.iz];
        (0..3)
            .map(|a| (k[a] - self.lo[a]).abs().max((self.hi[a] - k[a]).abs()))
            .max()
            .unwrap_or(0)
    }

    fn visit_shell(&self, c: &VoxelKey, r: i32, mut f: impl FnMut(u32)) {
        let mut visit = |key: VoxelKey| {
            if let Some(ids) = self.cells.get(&key) {
                for &i in ids {
                    f(i);
                }
            }
        };
        if r == 0 {
            visit(*c);
            return;
        }
        for dx in -r..=r {
            for dy in -r..=r {
                if dx.abs() == r || dy.abs() == r {
                    for dz in -r..=r {
                        visit(c.offset(dx, dy, dz));
                    }
                } else {
                    visit(c.offset(dx, dy, -r));
                    visit(c.offset(dx, dy, r));
                }
            }
        }
    }

    /// Exact `k` nearest neighbours of `q`, sorted by (distance, index).
    ///
    /// With `max_radius = Some(r)`, only points within distance `r` are
    /// candidates; the result is then exact among those.
    pub fn knn(
        &self,
        points: &[Vector3<f64>],
        q: &Vector3<f64>,
        k: usize,
        max_radius: Option<f64>,
    ) -> Vec<Neighbor> {
        let mut found: Vec<Neighbor> = Vec::new();
        if k == 0 || self.cells.is_empty() {
            return found;
        }
        let c = self.key_of(q);
        let limit = self.max_useful_ring(&c);
        let ring_cap = match max_radius {
            Some(r) => ((r / self.cell_size).ceil() as i32).min(limit),
            None => limit,
        };
        let r2_cap = max_radius.map(|r| r * r);
        let mut r = 0;
        while r <= ring_cap {
            self.visit_shell(&c, r, |i| {
                let d2 = (points[i as usize] - q).norm_squared();
                if r2_cap.map_or(true, |cap| d2 <= cap) {
                    found.push(Neighbor { index: i, dist2: d2 });
                }
            });
            if found.len() >= k {
                found.sort_by(cmp_neighbor);
                found.truncate(k);
                let guaranteed = r as f64 * self.cell_size;
                if found[k - 1].dist2 <= guaranteed * guaranteed {
                    return found;
                }
            }
            r += 1;
        }
        found.sort_by(cmp_neighbor);
        found.truncate(k);
        found
    }

    pub fn nearest(&self, points: &[Vector3<f64>], q: &Vector3<f64>) -> Option<Neighbor> {
        self.knn(points, q, 1, None).into_iter().next()
    }
}

fn cmp_neighbor(a: &Neighbor, b: &Neighbor) -> std::cmp::Ordering {
    a.dist2
        .total_cmp(&b.dist2)
        .then_with(|| a.index.cmp(&b.index))
}

/// Cell size such that a cell holds roughly `k` points of a surface-like cloud.
pub fn surface_cell_size(points: &[Vector3<f64>], k: usize) -> f64 {
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let ext = hi - lo;
    let mut dims = [ext.x, ext.y, ext.z];
    dims.sort_by(f64::total_cmp);
    let area = (dims[1] * dims[2]).max(1e-12);
    (area * k as f64 / points.len() as f64).sqrt().max(1e-4)
}

/// Brute-force reference used in tests.
pub fn knn_brute_force(
    points: &[Vector3<f64>],
    q: &Vector3<f64>,
    k: usize,
    max_radius: Option<f64>,
) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> = points
        .iter()
        .enumerate()
        .map(|(i, p)| Neighbor {
            index: i as u32,
            dist2: (p - q).norm_squared(),
        })
        .filter(|n| max_radius.map_or(true, |r| n.dist2 <= r * r))
        .collect();
    all.sort_by(cmp_neighbor);
    all.truncate(k);
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn floor_convention() {
        assert_eq!(
            VoxelKey::of(&Vector3::new(0.1, 0.1, 0.1), 1.0),
            VoxelKey::new(0, 0, 0)
        );
        assert_eq!(
            VoxelKey::of(&Vector3::new(-0.1, 0.0, 0.0), 1.0),
            VoxelKey::new(-1, 0, 0)
        );
    }

    #[test]
    fn neighborhood_has_27_unique_keys() {
        let c = VoxelKey::new(3, -2, 0);
        let mut keys: Vec<_> = c.neighborhood().collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 27);
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let n = 50 + trial * 10;
            let pts: Vec<Vector3<f64>> = (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            let hash = SpatialHash::build(&pts, 0.7);
            for _ in 0..20 {
                let q = Vector3::new(
                    rng.gen_range(-4.0..4.0),
                    rng.gen_range(-4.0..4.0),
                    rng.gen_range(-2.0..2.0),
                );
                for k in [1, 4, 9] {
                    assert_eq!(hash.knn(&pts, &q, k, None), knn_brute_force(&pts, &q, k, None));
                    assert_eq!(
                        hash.knn(&pts, &q, k, Some(1.1)),
                        knn_brute_force(&pts, &q, k, Some(1.1))
                    );
                }
            }
        }
    }

    #[test]
    fn empty_hash_returns_nothing() {
        let hash = SpatialHash::new(1.0);
        assert!(hash.knn(&[], &Vector3::zeros(), 3, None).is_empty());
    }
}
