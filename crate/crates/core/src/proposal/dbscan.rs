use crate::geom::Point3;
use std::collections::HashMap;

/// Density-based clustering over 3D coordinates with a uniform hash grid of
/// cell size `eps`. Returns one label per point; `None` marks noise (never
/// produced when `min_samples <= 1`). Labels are numbered in order of the
/// lowest point index of each cluster.
pub fn dbscan(points: &[Point3], eps: f64, min_samples: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let cell = |p: &Point3| {
        (
            (p.x / eps).floor() as i64,
            (p.y / eps).floor() as i64,
            (p.z / eps).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    let eps2 = eps * eps;
    let neighbours = |i: usize| -> Vec<usize> {
        let p = &points[i];
        let (cx, cy, cz) = cell(p);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &j in bucket {
                            let q = &points[j];
                            let d2 =
                                (p.x - q.x).powi(2) + (p.y - q.y).powi(2) + (p.z - q.z).powi(2);
                            if d2 <= eps2 {
                                out.push(j);
                            }
                        }
                    }
                }
            }
        }
        out
    };

    let min_samples = min_samples.max(1);
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut next = 0;
    for start in 0..n {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let nb = neighbours(start);
        if nb.len() < min_samples {
            continue;
        }
        let label = next;
        next += 1;
        labels[start] = Some(label);
        let mut stack = nb;
        while let Some(j) = stack.pop() {
            if labels[j].is_none() {
                labels[j] = Some(label);
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            let nb = neighbours(j);
            if nb.len() >= min_samples {
                stack.extend(nb);
            }
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn find(parent: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while parent[r] != r {
            r = parent[r];
        }
        parent[i] = r;
        r
    }

    /// Transitive closure of the eps-graph via union-find over all pairs.
    fn closure_oracle(points: &[Point3], eps: f64) -> Vec<usize> {
        let n = points.len();
        let mut parent: Vec<usize> = (0..n).collect();
        for i in 0..n {
            for j in i + 1..n {
                let (p, q) = (&points[i], &points[j]);
                let d2 = (p.x - q.x).powi(2) + (p.y - q.y).powi(2) + (p.z - q.z).powi(2);
                if d2 <= eps * eps {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        (0..n).map(|i| find(&mut parent, i)).collect()
    }

    #[test]
    fn two_far_groups() {
        let mut pts: Vec<Point3> = (0..10)
            .map(|i| Point3::new(i as f64 * 0.1, 0.0, 0.0))
            .collect();
        pts.extend((0..10).map(|i| Point3::new(10.0 + i as f64 * 0.1, 0.0, 0.0)));
        let labels = dbscan(&pts, 0.5, 1);
        assert!(labels[..10].iter().all(|l| *l == Some(0)));
        assert!(labels[10..].iter().all(|l| *l == Some(1)));
    }

    #[test]
    fn noise_with_min_samples() {
        let pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(0.1, 0.0, 0.0),
            Point3::new(0.2, 0.0, 0.0),
            Point3::new(5.0, 0.0, 0.0),
        ];
        let labels = dbscan(&pts, 0.5, 2);
        assert_eq!(labels, vec![Some(0), Some(0), Some(0), None]);
    }

    proptest! {
        #[test]
        fn matches_union_find(raw in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0, 0.0f64..2.0), 1..120)) {
            let pts: Vec<Point3> = raw.iter().map(|&(x, y, z)| Point3::new(x, y, z)).collect();
            let labels = dbscan(&pts, 0.5, 1);
            let roots = closure_oracle(&pts, 0.5);
            for i in 0..pts.len() {
                for j in 0..pts.len() {
                    prop_assert_eq!(labels[i] == labels[j], roots[i] == roots[j]);
                }
            }
            prop_assert!(labels.iter().all(|l| l.is_some()));
        }
    }
}
