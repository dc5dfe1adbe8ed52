//! Per-replicate centering and the classical binned empirical variogram.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::likelihood::ReplicateSet;
use crate::matern::LocationSet;

pub const DEFAULT_BINS: usize = 15;

/// Binned semivariances; `gamma` is NaN for bins without pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct VariogramCurve {
    pub bin_centers: Vec<f64>,
    pub gamma: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Subtracts each replicate's own mean.
pub fn center_replicates(reps: &ReplicateSet) -> ReplicateSet {
    let mut data = reps.data().clone();
    for mut col in data.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    ReplicateSet::new(data).expect("centering keeps entries finite")
}

/// Half the largest pairwise distance.
pub fn default_max_dist(locs: &LocationSet) -> f64 {
    0.5 * locs.max_distance()
}

/// `γ̂(bin) = Σ (z_i − z_j)² / (2 N_bin)` over pairs with distance in the bin.
/// Bins split `[0, max_dist]` evenly; the last bin includes `max_dist`.
pub fn empirical_variogram(z: &DVector<f64>, locs: &LocationSet, n_bins: usize, max_dist: f64) -> Result<VariogramCurve> {
    let n = locs.len();
    if n < 2 {
        return Err(Error::domain("a variogram needs at least two locations"));
    }
    if z.len() != n {
        return Err(Error::dimension(format!("{} values for {} locations", z.len(), n)));
    }
    if n_bins == 0 || !(max_dist > 0.0) || !max_dist.is_finite() {
        return Err(Error::domain("need at least one bin and a positive maximum distance"));
    }
    let width = max_dist / n_bins as f64;
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for i in 0..n {
        for j in 0..i {
            let h = locs.distance(i, j);
            if h > max_dist {
                continue;
            }
            let b = ((h / width) as usize).min(n_bins - 1);
            let d = z[i] - z[j];
            sums[b] += d * d;
            counts[b] += 1;
        }
    }
    Ok(VariogramCurve {
        bin_centers: (0..n_bins).map(|b| (b as f64 + 0.5) * width).collect(),
        gamma: sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| if c == 0 { f64::NAN } else { s / (2.0 * c as f64) })
            .collect(),
        counts,
    })
}

/// One curve per replicate, in replicate order.
pub fn variograms(reps: &ReplicateSet, locs: &LocationSet, n_bins: usize, max_dist: f64) -> Result<Vec<VariogramCurve>> {
    reps.check_locations(locs)?;
    (0..reps.m())
        .into_par_iter()
        .map(|i| empirical_variogram(&reps.column(i), locs, n_bins, max_dist))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matern::MaternParams;
    use crate::simulate::{gen_replicates, make_locations, Layout};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn centering() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = DMatrix::from_fn(7, 5, |_, _| rng.random_range(-3.0..10.0));
        let c = center_replicates(&ReplicateSet::new(data).unwrap());
        for col in c.data().column_iter() {
            assert!(col.mean().abs() < 1e-12);
        }
        assert_eq!(center_replicates(&c).data().map(|v| (v * 1e9).round()), c.data().map(|v| (v * 1e9).round()));
        let k = center_replicates(&ReplicateSet::new(DMatrix::from_element(3, 2, 4.2)).unwrap());
        assert!(k.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_points() {
        let locs = LocationSet::new(vec![[0.0, 0.0], [0.3, 0.4]]).unwrap();
        let v = empirical_variogram(&DVector::from_vec(vec![0.0, 2.0]), &locs, 1, 0.5).unwrap();
        assert_eq!(v.gamma, vec![2.0]);
        assert_eq!(v.counts, vec![1]);
        assert_eq!(v.bin_centers, vec![0.25]);
        let v = empirical_variogram(&DVector::from_vec(vec![0.0, 2.0]), &locs, 2, 1.0).unwrap();
        assert_eq!(v.counts, vec![0, 1]);
        assert!(v.gamma[0].is_nan());
        let one = LocationSet::new(vec![[0.0, 0.0]]).unwrap();
        assert!(empirical_variogram(&DVector::zeros(1), &one, 3, 1.0).is_err());
    }

    #[test]
    fn invariances() {
        let locs = make_locations(25, Layout::Uniform, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = DVector::from_fn(25, |_, _| rng.random_range(-1.0..1.0));
        let md = default_max_dist(&locs);
        let a = empirical_variogram(&z, &locs, 6, md).unwrap();
        let shifted = empirical_variogram(&z.add_scalar(7.5), &locs, 6, md).unwrap();
        let neg = empirical_variogram(&(-&z), &locs, 6, md).unwrap();
        for b in 0..6 {
            if a.counts[b] > 0 {
                assert!((a.gamma[b] - shifted.gamma[b]).abs() < 1e-12);
                assert_eq!(a.gamma[b], neg.gamma[b]);
                assert!(a.gamma[b] >= 0.0);
            }
        }
        let within = (0..25)
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .filter(|&(i, j)| locs.distance(i, j) <= md)
            .count();
        assert_eq!(a.counts.iter().sum::<usize>(), within);
        let flat = empirical_variogram(&DVector::from_element(25, 3.0), &locs, 6, md).unwrap();
        assert!(flat.gamma.iter().zip(&flat.counts).all(|(g, &c)| c == 0 || *g == 0.0));
    }

    #[test]
    fn tracks_exponential_model() {
        let locs = make_locations(100, Layout::Grid, 0).unwrap();
        let th = MaternParams::new(1.0, 0.1, 0.5).unwrap();
        let reps = gen_replicates(&locs, &th, 50, 9).unwrap();
        let md = default_max_dist(&locs);
        let curves = variograms(&reps, &locs, DEFAULT_BINS, md).unwrap();
        let mut dev = 0.0;
        let mut used = 0;
        for b in 0..DEFAULT_BINS {
            if curves[0].counts[b] < 30 {
                continue;
            }
            let mean = curves.iter().map(|c| c.gamma[b]).sum::<f64>() / curves.len() as f64;
            let h = curves[0].bin_centers[b];
            dev += (mean - (1.0 - (-h / 0.1).exp())).abs();
            used += 1;
        }
        assert!(used >= 5);
        assert!(dev / (used as f64) < 0.15, "mean abs deviation {}", dev / used as f64);
    }
}
