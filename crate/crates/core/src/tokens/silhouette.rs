use std::collections::BTreeMap;

use crate::error::{ensure, Result};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean silhouette coefficient with Euclidean distance. Points in singleton
/// clusters contribute 0, as do points with `a = b = 0`.
pub fn silhouette_score(vectors: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    ensure!(
        vectors.len() == labels.len(),
        Dimension,
        "{} vectors but {} labels",
        vectors.len(),
        labels.len()
    );
    ensure!(vectors.len() >= 2, Validation, "need at least 2 points");
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    ensure!(members.len() >= 2, Validation, "need at least 2 distinct labels");

    let n = vectors.len();
    let mut total = 0.0;
    for i in 0..n {
        let own = &members[&labels[i]];
        if own.len() == 1 {
            continue;
        }
        let a = own
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| dist(&vectors[i], &vectors[j]))
            .sum::<f64>()
            / (own.len() - 1) as f64;
        let b = members
            .iter()
            .filter(|(&l, _)| l != labels[i])
            .map(|(_, idx)| {
                idx.iter().map(|&j| dist(&vectors[i], &vectors[j])).sum::<f64>() / idx.len() as f64
            })
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_tight_clusters() {
        let x = vec![
            vec![0.0, 0.0],
            vec![0.0, 0.1],
            vec![10.0, 10.0],
            vec![10.0, 10.1],
        ];
        let s = silhouette_score(&x, &[0, 0, 1, 1]).unwrap();
        assert!((s - 0.9929289321903443).abs() < 1e-12, "{s}");
    }

    #[test]
    fn identical_points_score_zero() {
        let x = vec![vec![1.0, 2.0]; 4];
        assert_eq!(silhouette_score(&x, &[0, 1, 0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn single_label_rejected() {
        let x = vec![vec![0.0], vec![1.0]];
        assert!(silhouette_score(&x, &[3, 3]).is_err());
    }
}
