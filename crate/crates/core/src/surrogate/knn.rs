use serde::{Deserialize, Serialize};

use super::features::N_FEATURES;
use super::tree::Row;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum KdNode {
    Leaf {
        start: u32,
        end: u32,
    },
    Split {
        dim: u8,
        value: f64,
        left: u32,
        right: u32,
    },
}

/// One-nearest-neighbour model over standardized features, indexed by a
/// kd-tree. Distance ties go to the earliest training row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Knn {
    pub p: u8,
    pub leaf_size: usize,
    mean: Row,
    scale: Row,
    points: Vec<Row>,
    targets: Vec<f64>,
    order: Vec<u32>,
    nodes: Vec<KdNode>,
}

impl Knn {
    pub fn fit(x: &[Row], y: &[f64], p: u8, leaf_size: usize) -> Self {
        assert!(!x.is_empty() && x.len() == y.len());
        assert!(
            p == 1 || p == 2,
            "only Manhattan and Euclidean metrics are supported"
        );
        let n = x.len() as f64;
        let mut mean = [0.0; N_FEATURES];
        let mut scale = [1.0; N_FEATURES];
        for d in 0..N_FEATURES {
            mean[d] = x.iter().map(|r| r[d]).sum::<f64>() / n;
            let var = x.iter().map(|r| (r[d] - mean[d]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                scale[d] = var.sqrt();
            }
        }
        let std_points: Vec<Row> = x.iter().map(|r| standardize(r, &mean, &scale)).collect();
        let mut order: Vec<u32> = (0..x.len() as u32).collect();
        let mut nodes = Vec::new();
        build(
            &std_points,
            &mut order,
            0,
            x.len(),
            leaf_size.max(1),
            &mut nodes,
        );
        Self {
            p,
            leaf_size: leaf_size.max(1),
            points: order.iter().map(|&i| std_points[i as usize]).collect(),
            targets: order.iter().map(|&i| y[i as usize]).collect(),
            mean,
            scale,
            order,
            nodes,
        }
    }

    pub fn predict(&self, x: &Row) -> f64 {
        let q = standardize(x, &self.mean, &self.scale);
        let mut best = (f64::INFINITY, u32::MAX, 0.0);
        self.search(0, &q, &mut best);
        best.2
    }

    fn dist(&self, a: &Row, b: &Row) -> f64 {
        match self.p {
            1 => a.iter().zip(b).map(|(u, v)| (u - v).abs()).sum(),
            _ => a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum(),
        }
    }

    fn plane(&self, gap: f64) -> f64 {
        if self.p == 1 {
            gap.abs()
        } else {
            gap * gap
        }
    }

    fn search(&self, node: usize, q: &Row, best: &mut (f64, u32, f64)) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for k in start as usize..end as usize {
                    let d = self.dist(&self.points[k], q);
                    let id = self.order[k];
                    if d < best.0 || (d == best.0 && id < best.1) {
                        *best = (d, id, self.targets[k]);
                    }
                }
            }
            KdNode::Split {
                dim,
                value,
                left,
                right,
            } => {
                let gap = q[dim as usize] - value;
                let (near, far) = if gap <= 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near as usize, q, best);
                // `<=` keeps exploring equal-distance candidates for the tie rule
                if self.plane(gap) <= best.0 {
                    self.search(far as usize, q, best);
                }
            }
        }
    }
}

fn standardize(r: &Row, mean: &Row, scale: &Row) -> Row {
    std::array::from_fn(|d| (r[d] - mean[d]) / scale[d])
}

fn build(
    points: &[Row],
    order: &mut [u32],
    start: usize,
    end: usize,
    leaf: usize,
    nodes: &mut Vec<KdNode>,
) -> u32 {
    let id = nodes.len() as u32;
    let slice = &mut order[start..end];
    let spread = |d: usize| {
        let (lo, hi) = slice
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                let v = points[i as usize][d];
                (lo.min(v), hi.max(v))
            });
        hi - lo
    };
    let dim = (0..N_FEATURES)
        .max_by(|&a, &b| spread(a).total_cmp(&spread(b)).then(b.cmp(&a)))
        .expect("nonzero dims");
    if end - start <= leaf || spread(dim) == 0.0 {
        nodes.push(KdNode::Leaf {
            start: start as u32,
            end: end as u32,
        });
        return id;
    }
    slice.sort_by(|&a, &b| {
        points[a as usize][dim]
            .total_cmp(&points[b as usize][dim])
            .then(a.cmp(&b))
    });
    let mid = slice.len() / 2;
    let value = points[slice[mid - 1] as usize][dim];
    nodes.push(KdNode::Leaf { start: 0, end: 0 });
    let left = build(points, order, start, start + mid, leaf, nodes);
    let right = build(points, order, start + mid, end, leaf, nodes);
    nodes[id as usize] = KdNode::Split {
        dim: dim as u8,
        value,
        left,
        right,
    };
    id
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(x: &[Row], y: &[f64], q: &Row, p: u8) -> f64 {
        let k = Knn::fit(x, y, p, 1);
        let qs = standardize(q, &k.mean, &k.scale);
        let mut best = (f64::INFINITY, 0.0);
        for (r, t) in x.iter().zip(y) {
            let d: f64 = standardize(r, &k.mean, &k.scale)
                .iter()
                .zip(&qs)
                .map(|(a, b)| (a - b).abs().powi(i32::from(p)))
                .sum();
            if d < best.0 {
                best = (d, *t);
            }
        }
        best.1
    }

    #[test]
    fn matches_linear_scan_and_memorizes() {
        let x: Vec<Row> = (0..101)
            .map(|i| std::array::from_fn(|d| ((i * (d + 3) * 7919) % 101) as f64))
            .collect();
        let y: Vec<f64> = (0..101).map(|i| i as f64).collect();
        for p in [1, 2] {
            let k = Knn::fit(&x, &y, p, 8);
            for (r, t) in x.iter().zip(&y).step_by(7) {
                assert_eq!(k.predict(r), brute(&x, &y, r, p));
                assert_eq!(k.predict(r), *t);
            }
            for j in 0..50 {
                let q: Row = std::array::from_fn(|d| ((j * 31 + d * 17) % 97) as f64 + 0.5);
                assert_eq!(k.predict(&q), brute(&x, &y, &q, p));
            }
        }
    }
}
