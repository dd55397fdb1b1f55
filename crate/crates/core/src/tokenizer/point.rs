//! Point cloud grouping: farthest point sampling and k-nearest-neighbour
//! neighbourhoods, cascaded twice at a 1/4 sampling ratio.

use std::cmp::Ordering;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLING_RATIO: usize = 4;

/// `P × (3 + c)` matrix: xyz coordinates followed by `c` per-point features.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Tensor,
}

impl PointCloud {
    pub fn new(points: Tensor) -> Result<Self> {
        let (_, cols) = points.ensure_matrix("point cloud")?;
        if cols < 3 {
            return Err(Error::Shape(format!(
                "point rows need at least 3 coordinates, got {cols}"
            )));
        }
        if !points.is_finite() {
            return Err(Error::Data("non-finite point coordinate or feature".into()));
        }
        Ok(Self { points })
    }

    pub fn from_xyz(coords: &[[f64; 3]]) -> Result<Self> {
        let data = coords.iter().flatten().copied().collect();
        Self::new(Tensor::new(vec![coords.len(), 3], data)?)
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.points.cols() - 3
    }

    pub fn coord(&self, i: usize) -> [f64; 3] {
        let r = self.points.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn coords(&self) -> Vec<[f64; 3]> {
        (0..self.len()).map(|i| self.coord(i)).collect()
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.points.row(i)[3..]
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    /// Parses ASCII XYZ: one `x y z [features...]` per line; `#` starts a
    /// comment line.
    pub fn parse_xyz(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Data(format!("xyz line {}: {e}", lineno + 1)))?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Data("xyz file has no points".into()));
        }
        Self::new(
            Tensor::from_rows(&rows)
                .map_err(|_| Error::Data("xyz rows have differing column counts".into()))?,
        )
    }

    pub fn load_xyz(path: &Path) -> Result<Self> {
        Self::parse_xyz(&std::fs::read_to_string(path)?)
    }

    pub fn to_xyz(&self) -> String {
        let mut s = String::new();
        for i in 0..self.len() {
            let row: Vec<String> = self
                .points
                .row(i)
                .iter()
                .map(|v| format!("{v:?}"))
                .collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy farthest point sampling over raw coordinates. Starts from index 0;
/// ties go to the lowest index; already-selected points are never reselected.
pub fn fps_indices(coords: &[[f64; 3]], count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > coords.len() {
        return Err(Error::Argument(format!(
            "sample count {count} outside [1, {}]",
            coords.len()
        )));
    }
    let mut selected = Vec::with_capacity(count);
    let mut taken = vec![false; coords.len()];
    let mut nearest = vec![f64::INFINITY; coords.len()];
    let mut current = 0;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == count {
            return Ok(selected);
        }
        let c = coords[current];
        let mut best: Option<usize> = None;
        for (i, p) in coords.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = dist2(p, &c);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if best.map_or(true, |b| nearest[i] > nearest[b]) {
                best = Some(i);
            }
        }
        current = best.expect("count <= len leaves a candidate");
    }
}

pub fn farthest_point_sample(cloud: &PointCloud, count: usize) -> Result<Vec<usize>> {
    fps_indices(&cloud.coords(), count)
}

/// For each center, the `k` nearest points ordered by (distance, index).
pub fn knn_indices(coords: &[[f64; 3]], centers: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > coords.len() {
        return Err(Error::Argument(format!(
            "neighbour count {k} outside [1, {}]",
            coords.len()
        )));
    }
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(coords.len());
    centers
        .iter()
        .map(|&c| {
            let center = coords
                .get(c)
                .ok_or_else(|| Error::Argument(format!("center index {c} out of range")))?;
            keyed.clear();
            keyed.extend(
                coords
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (dist2(p, center), i)),
            );
            let cmp = |a: &(f64, usize), b: &(f64, usize)| {
                a.0.partial_cmp(&b.0)
                    .unwrap_or(Ordering::Equal)
                    .then(a.1.cmp(&b.1))
            };
            if k < keyed.len() {
                keyed.select_nth_unstable_by(k - 1, cmp);
            }
            let mut group = keyed[..k].to_vec();
            group.sort_unstable_by(cmp);
            Ok(group.into_iter().map(|(_, i)| i).collect())
        })
        .collect()
}

pub fn knn_group(cloud: &PointCloud, centers: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    knn_indices(&cloud.coords(), centers, k)
}

/// Precomputed geometry of the two-stage point tokenizer. Parameter-free, so
/// it can be computed once per cloud and reused across training steps.
#[derive(Clone, Debug, PartialEq)]
pub struct PointGroups {
    /// Stage-1 neighbourhood size after clamping to the cloud size.
    pub k1: usize,
    /// Stage-2 neighbourhood size after clamping to the stage-1 center count.
    pub k2: usize,
    /// `(P/4)·k1 × (3 + c)`: center-relative coordinates and raw features.
    pub stage1_rows: Tensor,
    /// `(P/16)·k2 × 3`: center-relative coordinates of stage-1 centers.
    pub stage2_rel: Tensor,
    /// `(P/16)·k2` indices into the stage-1 centers.
    pub stage2_members: Vec<usize>,
    pub stage1_centers: usize,
    pub stage2_centers: usize,
}

/// Runs FPS and KNN for both stages.
pub fn group_points(cloud: &PointCloud, k: usize) -> Result<PointGroups> {
    let p = cloud.len();
    if p < 16 || p % 16 != 0 {
        return Err(Error::Shape(format!(
            "point count {p} must be a positive multiple of 16"
        )));
    }
    if k == 0 {
        return Err(Error::Argument("neighbour count must be positive".into()));
    }
    let coords = cloud.coords();
    let c = cloud.feature_dim();

    let n1 = p / SAMPLING_RATIO;
    let k1 = k.min(p);
    let centers1 = fps_indices(&coords, n1)?;
    let groups1 = knn_indices(&coords, &centers1, k1)?;
    let mut rows1 = Vec::with_capacity(n1 * k1 * (3 + c));
    for (&ci, group) in centers1.iter().zip(&groups1) {
        let center = coords[ci];
        for &j in group {
            let q = coords[j];
            rows1.extend_from_slice(&[q[0] - center[0], q[1] - center[1], q[2] - center[2]]);
            rows1.extend_from_slice(cloud.features(j));
        }
    }

    let coords1: Vec<[f64; 3]> = centers1.iter().map(|&i| coords[i]).collect();
    let n2 = n1 / SAMPLING_RATIO;
    let k2 = k.min(n1);
    let centers2 = fps_indices(&coords1, n2)?;
    let groups2 = knn_indices(&coords1, &centers2, k2)?;
    let mut rel2 = Vec::with_capacity(n2 * k2 * 3);
    let mut members = Vec::with_capacity(n2 * k2);
    for (&ci, group) in centers2.iter().zip(&groups2) {
        let center = coords1[ci];
        for &j in group {
            let q = coords1[j];
            rel2.extend_from_slice(&[q[0] - center[0], q[1] - center[1], q[2] - center[2]]);
            members.push(j);
        }
    }

    Ok(PointGroups {
        k1,
        k2,
        stage1_rows: Tensor::new(vec![n1 * k1, 3 + c], rows1)?,
        stage2_rel: Tensor::new(vec![n2 * k2, 3], rel2)?,
        stage2_members: members,
        stage1_centers: n1,
        stage2_centers: n2,
    })
}
