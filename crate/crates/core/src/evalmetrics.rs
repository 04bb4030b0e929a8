//! Sample-quality metrics for the checkerboard and image experiments.

use std::cmp::Ordering;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};

/// Square checkerboard centred at the origin. Cell (i, j), counted from the
/// lower-left corner, is filled when i + j is even.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckerboardSpec {
    pub half_width: f64,
    pub cell_side: f64,
}

impl Default for CheckerboardSpec {
    fn default() -> Self {
        CheckerboardSpec { half_width: 4.0, cell_side: 2.0 }
    }
}

impl CheckerboardSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.half_width > 0.0 && self.cell_side > 0.0) {
            return Err(Error::Config(format!(
                "checkerboard needs positive half_width and cell_side, got {} and {}",
                self.half_width, self.cell_side
            )));
        }
        let n = 2.0 * self.half_width / self.cell_side;
        if (n - n.round()).abs() > 1e-9 || (n.round() as i64) % 2 != 0 {
            return Err(Error::Config(format!(
                "board width {} is not an even number of cells of side {}",
                2.0 * self.half_width,
                self.cell_side
            )));
        }
        Ok(())
    }

    pub fn cells_per_axis(&self) -> usize {
        (2.0 * self.half_width / self.cell_side).round() as usize
    }

    /// Cell indices of a point, or None when it lies off the board.
    pub fn cell_of(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        let n = self.cells_per_axis() as f64;
        let i = ((p[0] + self.half_width) / self.cell_side).floor();
        let j = ((p[1] + self.half_width) / self.cell_side).floor();
        if i >= 0.0 && i < n && j >= 0.0 && j < n {
            Some((i as usize, j as usize))
        } else {
            None
        }
    }

    pub fn is_filled_cell(i: usize, j: usize) -> bool {
        (i + j) % 2 == 0
    }

    pub fn is_filled(&self, p: [f64; 2]) -> bool {
        matches!(self.cell_of(p), Some((i, j)) if Self::is_filled_cell(i, j))
    }

    /// Filled cells in row-major (i, j) order.
    pub fn filled_cells(&self) -> Vec<(usize, usize)> {
        let n = self.cells_per_axis();
        (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|&(i, j)| Self::is_filled_cell(i, j)).collect()
    }

    /// Lower-left corner of cell (i, j).
    pub fn cell_origin(&self, i: usize, j: usize) -> [f64; 2] {
        [-self.half_width + i as f64 * self.cell_side, -self.half_width + j as f64 * self.cell_side]
    }

    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        let o = self.cell_origin(i, j);
        [o[0] + 0.5 * self.cell_side, o[1] + 0.5 * self.cell_side]
    }
}

/// Fraction of points that are not inside a filled cell.
pub fn boundary_violation(points: &[[f64; 2]], spec: &CheckerboardSpec) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Undefined("boundary violation of an empty point set".into()));
    }
    let bad = points.iter().filter(|p| !spec.is_filled(**p)).count();
    Ok(bad as f64 / points.len() as f64)
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or_else(|| a.len().cmp(&b.len()))
}

fn canonical<P: AsRef<[f64]>>(pts: &[P]) -> Vec<&[f64]> {
    let mut v: Vec<&[f64]> = pts.iter().map(|p| p.as_ref()).collect();
    v.sort_by(|a, b| lex_cmp(a, b));
    v
}

fn mean_pair_distance(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    let mut total = 0.0;
    for x in a {
        let mut row = 0.0;
        for y in b {
            row += x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        }
        total += row;
    }
    total / (a.len() as f64 * b.len() as f64)
}

/// Energy distance 2⟨|x−y|⟩ − ⟨|x−x'|⟩ − ⟨|y−y'|⟩ as a V-statistic.
///
/// Both sets are sorted before summation, so the result depends only on the
/// two multisets: it is exactly symmetric and exactly zero for equal sets.
pub fn energy_distance<P: AsRef<[f64]>, Q: AsRef<[f64]>>(xs: &[P], ys: &[Q]) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::Undefined("energy distance needs two nonempty samples".into()));
    }
    let mut a = canonical(xs);
    let mut b = canonical(ys);
    let dim = a[0].len();
    if a.iter().chain(&b).any(|p| p.len() != dim) {
        return Err(shape!("energy distance inputs have mixed dimensions"));
    }
    let order = a
        .len()
        .cmp(&b.len())
        .then_with(|| a.iter().zip(&b).map(|(p, q)| lex_cmp(p, q)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal));
    if order == Ordering::Greater {
        std::mem::swap(&mut a, &mut b);
    }
    let cross = mean_pair_distance(&a, &b);
    let within_a = mean_pair_distance(&a, &a);
    let within_b = mean_pair_distance(&b, &b);
    Ok(2.0 * cross - within_a - within_b)
}

/// Within-cell energy distance with its bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct WedReport {
    pub value: f64,
    /// Filled cells holding reference points but no model points.
    pub skipped_cells: usize,
}

/// Per-filled-cell energy distance between model and reference points,
/// averaged with weights proportional to the reference count per cell.
/// Cells without model points are dropped and the weights renormalised.
pub fn wed(model_points: &[[f64; 2]], true_points: &[[f64; 2]], spec: &CheckerboardSpec) -> Result<WedReport> {
    let n = spec.cells_per_axis();
    let bucket = |pts: &[[f64; 2]]| {
        let mut cells: Vec<Vec<[f64; 2]>> = vec![Vec::new(); n * n];
        for p in pts {
            if let Some((i, j)) = spec.cell_of(*p) {
                if CheckerboardSpec::is_filled_cell(i, j) {
                    cells[i * n + j].push(*p);
                }
            }
        }
        cells
    };
    let model = bucket(model_points);
    let truth = bucket(true_points);
    let mut weighted = 0.0;
    let mut weight = 0usize;
    let mut skipped = 0usize;
    for (i, j) in spec.filled_cells() {
        let c = i * n + j;
        if truth[c].is_empty() {
            continue;
        }
        if model[c].is_empty() {
            skipped += 1;
            continue;
        }
        weighted += truth[c].len() as f64 * energy_distance(&model[c], &truth[c])?;
        weight += truth[c].len();
    }
    if skipped > 0 {
        warn!("wed: {skipped} filled cell(s) have no model points; weights renormalised over the rest");
    }
    if weight == 0 {
        return Err(Error::Undefined("no filled cell holds both model and reference points".into()));
    }
    Ok(WedReport { value: weighted / weight as f64, skipped_cells: skipped })
}

/// Mean and covariance (n − 1 normalisation) of a set of feature vectors.
pub fn gaussian_fit<P: AsRef<[f64]>>(feats: &[P]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if feats.len() < 2 {
        return Err(Error::Undefined(format!("need at least 2 feature vectors, got {}", feats.len())));
    }
    let dim = feats[0].as_ref().len();
    if feats.iter().any(|f| f.as_ref().len() != dim) {
        return Err(shape!("feature vectors have mixed dimensions"));
    }
    let n = feats.len() as f64;
    let mut mean = DVector::zeros(dim);
    for f in feats {
        mean += DVector::from_column_slice(f.as_ref());
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for f in feats {
        let c = DVector::from_column_slice(f.as_ref()) - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= n - 1.0;
    Ok((mean, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// ‖μ₁−μ₂‖² + Tr[Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2}] for given Gaussian statistics.
///
/// The trace of the product root is taken from Σ₁^{1/2} Σ₂ Σ₁^{1/2}, which is
/// symmetric and has the same spectrum; negative eigenvalues are clipped to 0.
pub fn frechet_from_stats(
    mu1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != (d, d) || cov2.shape() != (d, d) {
        return Err(shape!("Gaussian statistics have inconsistent dimensions"));
    }
    let root1 = psd_sqrt(cov1);
    let inner = &root1 * cov2 * &root1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_root: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let mean_term = (mu1 - mu2).norm_squared();
    Ok((mean_term + cov1.trace() + cov2.trace() - 2.0 * tr_root).max(0.0))
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn frechet_gaussian<P: AsRef<[f64]>, Q: AsRef<[f64]>>(feats_real: &[P], feats_gen: &[Q]) -> Result<f64> {
    let (m1, c1) = gaussian_fit(feats_real)?;
    let (m2, c2) = gaussian_fit(feats_gen)?;
    if m1.len() != m2.len() {
        return Err(shape!("feature dimension {} vs {}", m1.len(), m2.len()));
    }
    frechet_from_stats(&m1, &c1, &m2, &c2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdTime {
    Reached { epoch: f64, seconds: f64 },
    NotReached,
}

/// Wall time at which a BV curve first drops below `threshold`, treating BV as
/// linear between consecutive measurements.
///
/// `epoch_seconds[e]` is the duration of training epoch e + 1, so the clock
/// reads Σ_{i<e} epoch_seconds[i] after e completed epochs.
pub fn threshold_time(bv_rows: &[(f64, f64)], epoch_seconds: &[f64], threshold: f64) -> Result<ThresholdTime> {
    if bv_rows.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::Undefined("BV rows must be strictly increasing in epoch".into()));
    }
    let clock = |epoch: f64| -> Result<f64> {
        let whole = epoch.floor() as usize;
        if epoch < 0.0 || whole > epoch_seconds.len() || (whole == epoch_seconds.len() && epoch.fract() > 0.0) {
            return Err(Error::Undefined(format!("no wall time recorded for epoch {epoch}")));
        }
        let done: f64 = epoch_seconds[..whole].iter().sum();
        let partial = if whole < epoch_seconds.len() { epoch.fract() * epoch_seconds[whole] } else { 0.0 };
        Ok(done + partial)
    };
    let Some(&(e0, b0)) = bv_rows.first() else {
        return Ok(ThresholdTime::NotReached);
    };
    if b0 < threshold {
        return Ok(ThresholdTime::Reached { epoch: e0, seconds: clock(e0)? });
    }
    for w in bv_rows.windows(2) {
        let ((ea, ba), (eb, bb)) = (w[0], w[1]);
        if bb < threshold {
            let epoch = ea + (ba - threshold) / (ba - bb) * (eb - ea);
            return Ok(ThresholdTime::Reached { epoch, seconds: clock(epoch)? });
        }
    }
    Ok(ThresholdTime::NotReached)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn board() -> CheckerboardSpec {
        CheckerboardSpec::default()
    }

    #[test]
    fn board_geometry() {
        let b = board();
        b.validate().unwrap();
        assert_eq!(b.cells_per_axis(), 4);
        assert_eq!(b.filled_cells().len(), 8);
        assert!(b.is_filled([-3.0, -3.0]));
        assert!(!b.is_filled([-1.0, -3.0]));
        assert!(!b.is_filled([4.0, 0.0]));
        assert!(b.is_filled([-4.0, -4.0]));
        assert!(CheckerboardSpec { half_width: 3.0, cell_side: 2.0 }.validate().is_err());
        assert!(CheckerboardSpec { half_width: 4.0, cell_side: 0.0 }.validate().is_err());
    }

    #[test]
    fn bv_counts() {
        let b = board();
        let filled: Vec<[f64; 2]> = b.filled_cells().iter().map(|&(i, j)| b.cell_center(i, j)).collect();
        assert_eq!(boundary_violation(&filled, &b).unwrap(), 0.0);
        let blank: Vec<[f64; 2]> = b.filled_cells().iter().map(|&(i, j)| b.cell_center((i + 1) % 4, j)).collect();
        assert_eq!(boundary_violation(&blank, &b).unwrap(), 1.0);
        let mixed = [filled[0], filled[1], filled[2], blank[0]];
        assert_eq!(boundary_violation(&mixed, &b).unwrap(), 0.25);
        assert_eq!(boundary_violation(&[[9.0, 0.0]], &b).unwrap(), 1.0);
        assert!(boundary_violation(&[], &b).is_err());
    }

    #[test]
    fn energy_distance_hand_cases() {
        assert_eq!(energy_distance(&[[0.0]], &[[1.0]]).unwrap(), 2.0);
        assert_eq!(energy_distance(&[[0.0], [2.0]], &[[1.0]]).unwrap(), 1.0);
        let a = [[0.5, 1.0], [2.0, -1.0], [0.0, 0.0]];
        let b = [[0.0, 0.0], [0.5, 1.0], [2.0, -1.0]];
        assert_eq!(energy_distance(&a, &b).unwrap(), 0.0);
        assert!(energy_distance::<[f64; 1], [f64; 1]>(&[], &[[1.0]]).is_err());
        assert!(energy_distance(&[vec![0.0]], &[vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn wed_cases() {
        let b = board();
        let pts: Vec<[f64; 2]> = (0..20).map(|i| [-3.9 + 0.09 * i as f64, -3.5 + 0.05 * i as f64]).collect();
        let rep = wed(&pts, &pts, &b).unwrap();
        assert_eq!(rep, WedReport { value: 0.0, skipped_cells: 0 });

        // one cell: shift within it
        let truth: Vec<[f64; 2]> = (0..10).map(|i| [-3.95 + 0.05 * i as f64, -3.0 + 0.1 * i as f64]).collect();
        let shifted: Vec<[f64; 2]> = truth.iter().map(|p| [p[0] + 1.0, p[1]]).collect();
        let rep = wed(&shifted, &truth, &b).unwrap();
        assert_eq!(rep.value, energy_distance(&shifted, &truth).unwrap());

        // cell (2,2) has reference points but no model points
        let mut truth2 = truth.clone();
        truth2.push([1.0, 1.0]);
        let rep = wed(&shifted, &truth2, &b).unwrap();
        assert_eq!(rep.skipped_cells, 1);
        assert_eq!(rep.value, energy_distance(&shifted, &truth).unwrap());
        assert!(wed(&[[1.0, 1.0]], &truth, &b).is_err());
    }

    #[test]
    fn frechet_one_dimensional() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let unit = [[-s], [s]];
        let shifted = [[3.0 - s], [3.0 + s]];
        let wide = [[-3.0 * s], [3.0 * s]];
        assert!((frechet_gaussian(&unit, &shifted).unwrap() - 9.0).abs() <= 1e-8);
        assert!((frechet_gaussian(&unit, &wide).unwrap() - 4.0).abs() <= 1e-8);
        assert!(frechet_gaussian(&unit, &[[1.0, 2.0], [0.0, 1.0]]).is_err());
        assert!(frechet_gaussian(&unit, &[[1.0]]).is_err());
    }

    #[test]
    fn frechet_matches_commuting_closed_form() {
        // diagonal covariances: Σ (σ₁ − σ₂)² per axis
        let c1 = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0, 0.25]));
        let c2 = DMatrix::from_diagonal(&DVector::from_vec(vec![9.0, 1.0, 0.25]));
        let m = DVector::zeros(3);
        let v = frechet_from_stats(&m, &c1, &m, &c2).unwrap();
        assert_relative_eq!(v, 4.0 + 1.0 + 0.0, epsilon = 1e-12);
    }

    #[test]
    fn threshold_time_cases() {
        let secs = vec![1.0; 30];
        match threshold_time(&[(10.0, 0.2), (20.0, 0.05)], &secs, 0.1).unwrap() {
            ThresholdTime::Reached { epoch, seconds } => {
                assert_relative_eq!(epoch, 50.0 / 3.0, max_relative = 1e-14);
                assert_relative_eq!(seconds, 50.0 / 3.0, max_relative = 1e-14);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            threshold_time(&[(0.0, 0.05), (10.0, 0.01)], &secs, 0.1).unwrap(),
            ThresholdTime::Reached { epoch: 0.0, seconds: 0.0 }
        );
        assert_eq!(
            threshold_time(&[(0.0, 0.5), (10.0, 0.3), (20.0, 0.2)], &secs, 0.1).unwrap(),
            ThresholdTime::NotReached
        );
        assert!(threshold_time(&[(10.0, 0.5), (0.0, 0.3)], &secs, 0.1).is_err());
    }

    proptest! {
        #[test]
        fn energy_distance_symmetric(
            xs in prop::collection::vec(prop::array::uniform2(-5.0f64..5.0), 1..12),
            ys in prop::collection::vec(prop::array::uniform2(-5.0f64..5.0), 1..12),
        ) {
            prop_assert_eq!(energy_distance(&xs, &ys).unwrap(), energy_distance(&ys, &xs).unwrap());
            prop_assert!(energy_distance(&xs, &ys).unwrap() >= -1e-12);
        }

        #[test]
        fn bv_permutation_invariant(mut pts in prop::collection::vec(prop::array::uniform2(-5.0f64..5.0), 1..30), seed in 0usize..100) {
            let b = board();
            let before = boundary_violation(&pts, &b).unwrap();
            let n = pts.len();
            pts.rotate_left(seed % n);
            pts.reverse();
            prop_assert_eq!(before, boundary_violation(&pts, &b).unwrap());
        }

        #[test]
        fn frechet_self_distance_vanishes(feats in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 4..20)) {
            let v = frechet_gaussian(&feats, &feats).unwrap();
            prop_assert!((0.0..=1e-8).contains(&v));
        }
    }
}
