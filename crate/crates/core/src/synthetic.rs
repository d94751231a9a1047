//! Synthetic rating matrices with a controlled correlation level and
//! informative missingness, plus the probability that such matrices are
//! estimatable.
//!
//! Generation draws a correlation matrix with off-diagonals in
//! `[s - 0.2, s + 0.2]`, samples multivariate normal scores, cuts each column
//! into five equal-width categories over `[-2.5, 2.5]`, and deletes
//! `round(r m)` cells per column with weight `6 - x` so low ratings are more
//! likely to go missing. Rows left empty get one random cell back.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample_weighted;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::data::{convert_scores, save_csv, ConversionSpec, RatingMatrix};
use crate::error::{Error, Result};

/// Half-width of the band the off-diagonal correlations are drawn from.
pub const BAND: f64 = 0.2;
/// Smallest eigenvalue kept by the PSD repair.
pub const EIGEN_FLOOR: f64 = 1e-8;
const REPAIR_ROUNDS: usize = 100;
const MAX_REPAIR_DRIFT: f64 = 0.05;
const CORRELATION_DRAWS: usize = 20;

/// Conversion used for the latent normal scores.
pub const LATENT_CONVERSION: ConversionSpec = ConversionSpec::FixedRange { lo: -2.5, hi: 2.5 };

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub m: usize,
    pub n: usize,
    /// Target correlation between columns.
    pub s: f64,
    /// Fraction of each column deleted.
    pub r: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(m: usize, n: usize, s: f64, r: f64, seed: u64) -> Self {
        Self { m, n, s, r, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 || self.n < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 rows and 2 columns, got {}x{}",
                self.m, self.n
            )));
        }
        if !(0.0..1.0).contains(&self.r) {
            return Err(Error::InvalidParameter(format!("missing rate must be in [0, 1), got {}", self.r)));
        }
        check_band(self.s)
    }

    /// Deletions per column before rows are rescued.
    pub fn deletions_per_column(&self) -> usize {
        (self.r * self.m as f64).round() as usize
    }
}

fn check_band(s: f64) -> Result<()> {
    if !(s - BAND > -1.0 && s + BAND < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "correlation band [{:.2}, {:.2}] leaves (-1, 1)",
            s - BAND,
            s + BAND
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthInstance {
    pub truth: RatingMatrix,
    pub observed: RatingMatrix,
    pub spec: SynthSpec,
    /// Correlation matrix the scores were drawn from.
    pub correlation: DMatrix<f64>,
    /// Cells restored from the truth so that no row is empty.
    pub rescued: Vec<(usize, usize)>,
}

impl SynthInstance {
    /// Writes `truth.csv`, `observed.csv` and `spec.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        save_csv(&self.truth, dir.join("truth.csv"))?;
        save_csv(&self.observed, dir.join("observed.csv"))?;
        let path = dir.join("spec.json");
        fs::write(&path, serde_json::to_string_pretty(&Sidecar::new(self.spec))?).map_err(|source| {
            Error::Io {
                path: path.to_path_buf(),
                source,
            }
        })
    }
}

/// Self-describing record of how an instance was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub spec: SynthSpec,
    pub conversion: ConversionSpec,
    pub psd_repair: String,
    pub deletion_weight: String,
}

impl Sidecar {
    pub fn new(spec: SynthSpec) -> Self {
        Self {
            spec,
            conversion: LATENT_CONVERSION,
            psd_repair: format!("eigenvalue clipping at {EIGEN_FLOOR:e}, unit-diagonal rescale"),
            deletion_weight: "6 - rating".into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn clip_to_band(c: &mut DMatrix<f64>, lo: f64, hi: f64) {
    let n = c.nrows();
    for a in 0..n {
        for b in 0..n {
            c[(a, b)] = if a == b { 1.0 } else { c[(a, b)].clamp(lo, hi) };
        }
    }
}

/// Nearest-PSD step: floor the eigenvalues, then rescale to unit diagonal.
fn clip_eigenvalues(c: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(c.clone());
    let lambda = eig.eigenvalues.map(|l| l.max(EIGEN_FLOOR));
    let v = &eig.eigenvectors;
    let mut out = v * DMatrix::from_diagonal(&lambda) * v.transpose();
    let d = DVector::from_iterator(out.nrows(), (0..out.nrows()).map(|i| out[(i, i)].sqrt().recip()));
    for a in 0..out.nrows() {
        for b in 0..out.ncols() {
            out[(a, b)] *= d[a] * d[b];
        }
    }
    out.fill_diagonal(1.0);
    (&out + out.transpose()) * 0.5
}

fn band_excess(c: &DMatrix<f64>, lo: f64, hi: f64) -> f64 {
    let n = c.nrows();
    let mut worst: f64 = 0.0;
    for a in 0..n {
        for b in (a + 1)..n {
            let x = c[(a, b)];
            worst = worst.max(lo - x).max(x - hi);
        }
    }
    worst
}

/// Random correlation matrix with off-diagonals drawn uniformly from
/// `[s - 0.2, s + 0.2]`, repaired to positive definite when needed by
/// alternating eigenvalue clipping with clipping back into the band.
pub fn random_correlation<R: Rng + ?Sized>(n: usize, s: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    check_band(s)?;
    let (lo, hi) = (s - BAND, s + BAND);
    let mut c = DMatrix::identity(n, n);
    for a in 0..n {
        for b in (a + 1)..n {
            let x = rng.random_range(lo..=hi);
            c[(a, b)] = x;
            c[(b, a)] = x;
        }
    }
    let mut repaired = c.clone();
    for _ in 0..REPAIR_ROUNDS {
        if SymmetricEigen::new(c.clone()).eigenvalues.min() >= EIGEN_FLOOR {
            return Ok(c);
        }
        repaired = clip_eigenvalues(&c);
        if band_excess(&repaired, lo, hi) <= 1e-12 {
            return Ok(repaired);
        }
        c = repaired.clone();
        clip_to_band(&mut c, lo, hi);
    }
    let drift = band_excess(&repaired, lo, hi);
    if drift <= MAX_REPAIR_DRIFT {
        Ok(repaired)
    } else {
        Err(Error::Generation(format!(
            "correlation repair left entries {drift:.3} outside the band"
        )))
    }
}

fn cholesky_factor(c: &DMatrix<f64>) -> DMatrix<f64> {
    match c.clone().cholesky() {
        Some(ch) => ch.l(),
        None => {
            let eig = SymmetricEigen::new(c.clone());
            let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
            &eig.eigenvectors * DMatrix::from_diagonal(&root)
        }
    }
}

/// Generates one instance; the same spec always yields the same instance.
pub fn generate(spec: &SynthSpec) -> Result<SynthInstance> {
    spec.validate()?;
    let SynthSpec { m, n, s, .. } = *spec;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut correlation = None;
    let mut last_err = None;
    for _ in 0..CORRELATION_DRAWS {
        match random_correlation(n, s, &mut rng) {
            Ok(c) => {
                correlation = Some(c);
                break;
            }
            Err(e) => last_err = Some(e),
        }
    }
    let correlation = match correlation {
        Some(c) => c,
        None => return Err(last_err.expect("at least one draw")),
    };
    let l = cholesky_factor(&correlation);

    let mut latent = vec![vec![0.0; m]; n];
    for i in 0..m {
        let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = &l * z;
        for j in 0..n {
            latent[j][i] = x[j];
        }
    }
    let mut grid = vec![vec![None; n]; m];
    for (j, scores) in latent.iter().enumerate() {
        for (i, r) in convert_scores(scores, &LATENT_CONVERSION)?.into_iter().enumerate() {
            grid[i][j] = Some(f64::from(r));
        }
    }
    let truth = RatingMatrix::from_rows(grid, true)?;

    let mut observed = truth.clone();
    let k = spec.deletions_per_column();
    for j in 0..n {
        let weight = |i: usize| 6.0 - truth.get(i, j).expect("truth is complete");
        let picked = sample_weighted(&mut rng, m, weight, k)
            .map_err(|e| Error::Generation(format!("weighted deletion failed: {e}")))?;
        for i in picked {
            observed.set(i, j, None);
        }
    }
    let mut rescued = Vec::new();
    for i in observed.empty_rows() {
        let j = rng.random_range(0..n);
        observed.set(i, j, truth.get(i, j));
        rescued.push((i, j));
    }
    Ok(SynthInstance {
        truth,
        observed,
        spec: *spec,
        correlation,
        rescued,
    })
}

/// Probability that two columns, each missing `floor(r m)` of `m` rows at
/// random, still share a row.
pub fn edge_probability(r: f64, m: usize) -> f64 {
    let k = (r * m as f64 + 1e-9).floor() as u64;
    let m = m as u64;
    if 2 * k < m {
        return 1.0;
    }
    if k > m {
        return 0.0;
    }
    // both missing sets together cover all rows
    1.0 - (ln_binomial(k, 2 * k - m) - ln_binomial(m, k)).exp()
}

/// How edges of the random graph are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeSampling {
    /// One Bernoulli draw per unordered pair.
    Undirected,
    /// One draw per ordered pair; a pair is linked if either draw succeeds.
    OrderedPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Monte Carlo probability that a random graph on `n` nodes is connected.
pub fn connectivity_probability<R: Rng + ?Sized>(
    p_edge: f64,
    n: usize,
    trials: usize,
    sampling: EdgeSampling,
    rng: &mut R,
) -> Result<Estimate> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&p_edge) {
        return Err(Error::InvalidParameter(format!("edge probability {p_edge} outside [0, 1]")));
    }
    let mut parent = vec![0; n];
    let mut hits = 0usize;
    for _ in 0..trials {
        parent.iter_mut().enumerate().for_each(|(i, p)| *p = i);
        let mut groups = n;
        for a in 0..n {
            for b in (a + 1)..n {
                let linked = match sampling {
                    EdgeSampling::Undirected => rng.random_bool(p_edge),
                    EdgeSampling::OrderedPairs => rng.random_bool(p_edge) | rng.random_bool(p_edge),
                };
                if linked {
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    if ra != rb {
                        parent[ra] = rb;
                        groups -= 1;
                    }
                }
            }
        }
        if groups <= 1 {
            hits += 1;
        }
    }
    let value = hits as f64 / trials as f64;
    Ok(Estimate {
        value,
        stderr: (value * (1.0 - value) / trials as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::{mann_whitney_u, pair_report};
    use crate::estimatability::is_estimatable;

    #[test]
    fn no_missing_rate_keeps_truth() {
        let inst = generate(&SynthSpec::new(50, 4, 0.5, 0.0, 3)).unwrap();
        assert_eq!(inst.observed, inst.truth);
        assert!(inst.truth.cells().iter().all(|c| matches!(c, Some(x) if (1.0..=5.0).contains(x))));
    }

    #[test]
    fn deletion_count_per_column() {
        let spec = SynthSpec::new(1000, 6, 0.5, 0.3, 7);
        let inst = generate(&spec).unwrap();
        for j in 0..6 {
            let rescued = inst.rescued.iter().filter(|c| c.1 == j).count();
            let missing = (0..1000).filter(|&i| !inst.observed.is_observed(i, j)).count();
            assert_eq!(missing + rescued, 300);
        }
    }

    #[test]
    fn observed_agrees_with_truth_and_rows_nonempty() {
        let inst = generate(&SynthSpec::new(60, 3, 0.3, 0.6, 11)).unwrap();
        assert!(inst.observed.empty_rows().is_empty());
        for (o, t) in inst.observed.cells().iter().zip(inst.truth.cells()) {
            if o.is_some() {
                assert_eq!(o, t);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec::new(80, 5, 0.7, 0.3, 42);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SynthSpec { seed: 43, ..spec };
        assert_ne!(generate(&spec).unwrap().truth, generate(&other).unwrap().truth);
    }

    #[test]
    fn band_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(random_correlation(3, 0.9, &mut rng).is_err());
        assert!(generate(&SynthSpec::new(10, 3, -0.85, 0.1, 0)).is_err());
        assert!(generate(&SynthSpec::new(10, 3, 0.5, 1.0, 0)).is_err());
    }

    #[test]
    fn correlation_band_and_psd() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_correlation(2, 0.5, &mut rng).unwrap();
            assert!((0.3..=0.7).contains(&c[(0, 1)]));
            let c = random_correlation(6, 0.7, &mut rng).unwrap();
            assert!(SymmetricEigen::new(c.clone()).eigenvalues.min() >= -1e-10);
            assert!(band_excess(&c, 0.5, 0.9) <= MAX_REPAIR_DRIFT);
            assert!((0..6).all(|i| (c[(i, i)] - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn deleted_values_run_low() {
        let inst = generate(&SynthSpec::new(1000, 4, 0.5, 0.3, 5)).unwrap();
        let (mut gone, mut kept) = (Vec::new(), Vec::new());
        for (o, t) in inst.observed.cells().iter().zip(inst.truth.cells()) {
            if o.is_some() { kept.push(t.unwrap()) } else { gone.push(t.unwrap()) }
        }
        let u = mann_whitney_u(&gone, &kept).unwrap();
        assert!(u.p_value < 0.01);
        assert!(u.u < (gone.len() * kept.len()) as f64 / 2.0);
    }

    #[test]
    fn moderate_missingness_is_estimatable() {
        for seed in 0..10 {
            let inst = generate(&SynthSpec::new(100, 6, 0.5, 0.4, seed)).unwrap();
            assert!(is_estimatable(&inst.observed).is_estimatable);
        }
    }

    #[test]
    fn higher_correlation_higher_tau() {
        let tau = |s| pair_report(&generate(&SynthSpec::new(400, 4, s, 0.0, 9)).unwrap().truth).mean_off_diagonal_tau().unwrap();
        assert!(tau(0.7) > tau(0.3));
    }

    #[test]
    fn edge_probability_cases() {
        assert_eq!(edge_probability(0.4, 100), 1.0);
        assert!((edge_probability(0.8, 50) - 0.9175).abs() < 1e-4);
        assert!((edge_probability(0.9, 500) - 0.9962).abs() < 1e-4);
        // m = 3, k = 2: each column keeps one row, linked only if it is the same one
        assert!((edge_probability(2.0 / 3.0, 3) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn connectivity_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for sampling in [EdgeSampling::Undirected, EdgeSampling::OrderedPairs] {
            let e = connectivity_probability(1.0, 6, 50, sampling, &mut rng).unwrap();
            assert_eq!((e.value, e.stderr), (1.0, 0.0));
            assert_eq!(connectivity_probability(0.0, 3, 50, sampling, &mut rng).unwrap().value, 0.0);
        }
        assert_eq!(connectivity_probability(0.0, 1, 5, EdgeSampling::Undirected, &mut rng).unwrap().value, 1.0);
        assert!(connectivity_probability(0.5, 4, 0, EdgeSampling::Undirected, &mut rng).is_err());
    }

    #[test]
    fn sidecar_replays() {
        let dir = tempfile::tempdir().unwrap();
        let inst = generate(&SynthSpec::new(30, 3, 0.5, 0.2, 2)).unwrap();
        inst.save(dir.path()).unwrap();
        let side = Sidecar::load(dir.path().join("spec.json")).unwrap();
        assert_eq!(side.conversion, LATENT_CONVERSION);
        assert_eq!(generate(&side.spec).unwrap(), inst);
        assert!(dir.path().join("observed.csv").exists());
    }
}
