//! Two-component Gaussian mixture fitted by expectation maximization.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    Full,
    Diagonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    /// Stop once the log-likelihood improves by less than this.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub restarts: usize,
    pub seed: u64,
    pub covariance: CovarianceKind,
    /// Ridge added to each covariance: `ridge_factor * trace / dim`.
    pub ridge_factor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 500,
            restarts: 5,
            seed: 0,
            covariance: CovarianceKind::Full,
            ridge_factor: 1e-6,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return Err(Error::Config(format!("EM tolerance must be finite and nonnegative, got {}", self.tolerance)));
        }
        if self.max_iterations == 0 || self.restarts == 0 {
            return Err(Error::Config("EM needs at least one iteration and one restart".into()));
        }
        if !(self.ridge_factor >= 0.0 && self.ridge_factor.is_finite()) {
            return Err(Error::Config(format!("ridge factor must be finite and nonnegative, got {}", self.ridge_factor)));
        }
        Ok(())
    }
}

/// Fitted mixture; `loglik_trace[i]` is the total log-likelihood before the
/// `i`-th M-step of the winning restart, the last entry the final value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gmm2 {
    pub weights: [f64; 2],
    pub means: [Vec<f64>; 2],
    pub covariances: [Vec<Vec<f64>>; 2],
    pub loglik_trace: Vec<f64>,
}

impl Gmm2 {
    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn log_likelihood(&self) -> f64 {
        *self.loglik_trace.last().unwrap_or(&f64::NEG_INFINITY)
    }

    /// Same mixture with component indices exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            weights: [self.weights[1], self.weights[0]],
            means: [self.means[1].clone(), self.means[0].clone()],
            covariances: [self.covariances[1].clone(), self.covariances[0].clone()],
            loglik_trace: self.loglik_trace.clone(),
        }
    }

    fn components(&self) -> Result<[Component; 2]> {
        let mk = |k: usize| -> Result<Component> {
            let n = self.dim();
            let cov = Array2::from_shape_fn((n, n), |(i, j)| self.covariances[k][i][j]);
            Component::new(self.weights[k], Array1::from(self.means[k].clone()), cov)
        };
        Ok([mk(0)?, mk(1)?])
    }

    /// Posterior responsibilities `[N, 2]` of each row of `data`.
    pub fn responsibilities(&self, data: ArrayView2<f64>) -> Result<Array2<f64>> {
        let comps = self.components()?;
        let (resp, _) = e_step(data, &comps);
        Ok(resp)
    }
}

struct Component {
    log_weight: f64,
    mean: Array1<f64>,
    cov: Array2<f64>,
    chol: Array2<f64>,
    log_det: f64,
}

impl Component {
    fn new(weight: f64, mean: Array1<f64>, cov: Array2<f64>) -> Result<Self> {
        let chol = cholesky(&cov).ok_or_else(|| Error::Domain("covariance is not positive definite".into()))?;
        let log_det = 2.0 * chol.diag().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            log_weight: weight.max(f64::MIN_POSITIVE).ln(),
            mean,
            cov,
            chol,
            log_det,
        })
    }

    fn log_density(&self, x: ArrayView1<f64>) -> f64 {
        let d = x.len();
        // forward substitution L y = x - mean
        let mut y = vec![0.0; d];
        for i in 0..d {
            let mut s = x[i] - self.mean[i];
            for j in 0..i {
                s -= self.chol[[i, j]] * y[j];
            }
            y[i] = s / self.chol[[i, i]];
        }
        let maha: f64 = y.iter().map(|v| v * v).sum();
        -0.5 * (maha + self.log_det + d as f64 * (2.0 * std::f64::consts::PI).ln())
    }
}

/// Lower Cholesky factor, or `None` if the matrix is not positive definite.
pub(crate) fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Some(l)
}

fn e_step(data: ArrayView2<f64>, comps: &[Component; 2]) -> (Array2<f64>, f64) {
    let n = data.nrows();
    let mut resp = Array2::<f64>::zeros((n, 2));
    let mut ll = 0.0;
    for (i, x) in data.rows().into_iter().enumerate() {
        let a = comps[0].log_weight + comps[0].log_density(x);
        let b = comps[1].log_weight + comps[1].log_density(x);
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        resp[[i, 0]] = (a - lse).exp();
        resp[[i, 1]] = (b - lse).exp();
        ll += lse;
    }
    (resp, ll)
}

fn m_step(data: ArrayView2<f64>, resp: &Array2<f64>, config: &EmConfig, floor: f64) -> Result<[Component; 2]> {
    let n = data.nrows() as f64;
    let d = data.ncols();
    let mut out = Vec::with_capacity(2);
    for k in 0..2 {
        let r = resp.column(k);
        let nk = r.sum().max(1e-12);
        let mean = data.t().dot(&r) / nk;
        let centered = &data - &mean;
        let mut cov = Array2::<f64>::zeros((d, d));
        match config.covariance {
            CovarianceKind::Full => {
                let weighted = &centered * &r.view().insert_axis(Axis(1));
                cov = weighted.t().dot(&centered) / nk;
            }
            CovarianceKind::Diagonal => {
                for j in 0..d {
                    cov[[j, j]] = centered.column(j).iter().zip(r.iter()).map(|(c, w)| w * c * c).sum::<f64>() / nk;
                }
            }
        }
        let ridge = (config.ridge_factor * cov.diag().sum() / d as f64).max(floor);
        for j in 0..d {
            cov[[j, j]] += ridge;
        }
        out.push(Component::new(nk / n, mean, cov)?);
    }
    let b = out.pop().expect("two components");
    let a = out.pop().expect("two components");
    Ok([a, b])
}

/// Two-means clustering with k-means++ seeding; returns hard responsibilities.
fn kmeans_init(data: ArrayView2<f64>, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = data.nrows();
    let dist2 = |a: ArrayView1<f64>, b: &Array1<f64>| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let first = data.row(rng.random_range(0..n)).to_owned();
    let d: Vec<f64> = data.rows().into_iter().map(|x| dist2(x, &first)).collect();
    let total: f64 = d.iter().sum();
    let mut target = rng.random::<f64>() * total;
    let mut second_idx = n - 1;
    for (i, &di) in d.iter().enumerate() {
        if target < di {
            second_idx = i;
            break;
        }
        target -= di;
    }
    let mut centers = [first, data.row(second_idx).to_owned()];
    let mut assign = vec![0usize; n];
    for _ in 0..50 {
        let mut changed = false;
        for (i, x) in data.rows().into_iter().enumerate() {
            let a = if dist2(x, &centers[0]) <= dist2(x, &centers[1]) { 0 } else { 1 };
            if a != assign[i] {
                assign[i] = a;
                changed = true;
            }
        }
        for (k, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == k).collect();
            if !members.is_empty() {
                let mut c = Array1::<f64>::zeros(data.ncols());
                for &i in &members {
                    c += &data.row(i);
                }
                *center = c / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    let mut resp = Array2::<f64>::zeros((n, 2));
    for (i, &a) in assign.iter().enumerate() {
        resp[[i, a]] = 1.0;
    }
    // keep both components alive when k-means collapses
    if assign.iter().all(|&a| a == assign[0]) {
        let other = 1 - assign[0];
        resp[[second_idx, assign[0]]] = 0.0;
        resp[[second_idx, other]] = 1.0;
    }
    resp
}

/// Minimum number of rows for a fit in `dim` dimensions.
pub fn min_samples(dim: usize, kind: CovarianceKind) -> usize {
    match kind {
        CovarianceKind::Full => 2 * dim + 2,
        CovarianceKind::Diagonal => 4,
    }
}

/// Fits a two-component mixture to the rows of `data` (best of several
/// k-means-seeded restarts by final log-likelihood).
pub fn fit_gmm2_data(data: ArrayView2<f64>, config: &EmConfig) -> Result<Gmm2> {
    config.validate()?;
    let (n, d) = data.dim();
    if d == 0 {
        return Err(Error::Shape("zero-dimensional features".into()));
    }
    let need = min_samples(d, config.covariance);
    if n < need {
        return Err(Error::Shape(format!("{n} samples; need at least {need} for {d}-dim features")));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite feature".into()));
    }
    let first = data.row(0);
    if data.rows().into_iter().all(|r| r == first) {
        return Err(Error::NoSeparableClasses("all feature vectors are identical".into()));
    }
    let global_mean = data.mean_axis(Axis(0)).expect("non-empty");
    let global_trace: f64 = (&data - &global_mean).mapv(|v| v * v).sum() / n as f64;
    let floor = 1e-9 * global_trace / d as f64;
    let mut best: Option<Gmm2> = None;
    for restart in 0..config.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(restart as u64));
        let mut resp = kmeans_init(data, &mut rng);
        let mut comps = m_step(data, &resp, config, floor)?;
        let mut trace = Vec::new();
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..config.max_iterations {
            let (r, ll) = e_step(data, &comps);
            trace.push(ll);
            resp = r;
            if ll - prev < config.tolerance {
                break;
            }
            prev = ll;
            comps = m_step(data, &resp, config, floor)?;
        }
        let fitted = Gmm2 {
            weights: [comps[0].log_weight.exp(), comps[1].log_weight.exp()],
            means: [comps[0].mean.to_vec(), comps[1].mean.to_vec()],
            covariances: [
                comps[0].cov.rows().into_iter().map(|r| r.to_vec()).collect(),
                comps[1].cov.rows().into_iter().map(|r| r.to_vec()).collect(),
            ],
            loglik_trace: trace,
        };
        if best.as_ref().is_none_or(|b| fitted.log_likelihood() > b.log_likelihood()) {
            best = Some(fitted);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn two_clusters(n: usize, sep: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels = Vec::new();
        let data = Array2::from_shape_fn((n, 3), |(i, j)| {
            let c = usize::from(i % 3 == 0);
            if j == 0 {
                labels.push(c);
            }
            rng.sample::<f64, _>(StandardNormal) + if c == 1 && j == 0 { sep } else { 0.0 }
        });
        (data, labels)
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = ndarray::array![[4.0, 2.0, 0.6], [2.0, 5.0, 1.0], [0.6, 1.0, 3.0]];
        let l = cholesky(&a).unwrap();
        let back = l.dot(&l.t());
        for (x, y) in back.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(cholesky(&ndarray::array![[1.0, 2.0], [2.0, 1.0]]).is_none());
    }

    #[test]
    fn separated_clusters_are_recovered() {
        let (data, labels) = two_clusters(300, 8.0, 4);
        let g = fit_gmm2_data(data.view(), &EmConfig::default()).unwrap();
        let r = g.responsibilities(data.view()).unwrap();
        // map component to label by the first sample
        let comp_of_one = if g.means[0][0] > g.means[1][0] { 0 } else { 1 };
        for (i, &l) in labels.iter().enumerate() {
            let p = if l == 1 { r[[i, comp_of_one]] } else { r[[i, 1 - comp_of_one]] };
            assert!(p >= 0.99, "sample {i}: {p}");
        }
        let w1 = g.weights[comp_of_one];
        assert!((w1 - 1.0 / 3.0).abs() < 0.05);
    }

    #[test]
    fn loglik_is_monotone() {
        for seed in 0..5 {
            let (data, _) = two_clusters(120, 1.5, seed);
            let g = fit_gmm2_data(data.view(), &EmConfig { restarts: 1, ..Default::default() }).unwrap();
            for w in g.loglik_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{w:?}");
            }
        }
    }

    #[test]
    fn degenerate_and_small_inputs() {
        let same = Array2::from_elem((20, 2), 0.5);
        assert!(matches!(fit_gmm2_data(same.view(), &EmConfig::default()), Err(Error::NoSeparableClasses(_))));
        let (data, _) = two_clusters(7, 5.0, 1);
        assert!(fit_gmm2_data(data.view(), &EmConfig::default()).is_err());
        let diag = EmConfig { covariance: CovarianceKind::Diagonal, ..Default::default() };
        fit_gmm2_data(data.view(), &diag).unwrap();
    }

    #[test]
    fn single_gaussian_does_not_crash() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = Array2::from_shape_fn((200, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let g = fit_gmm2_data(data.view(), &EmConfig::default()).unwrap();
        assert!(g.weights.iter().all(|w| w.is_finite() && *w >= 0.0));
        assert!((g.weights[0] + g.weights[1] - 1.0).abs() < 1e-12);
    }
}
