//! Average treatment effects, baseline estimators and the cross-validation
//! harness.

use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::completion::{fit, FitConfig, FitReport, TuckerModel};
use crate::error::{Error, Result};
use crate::linalg::{solve_spd, Matrix};
use crate::panel::{decode_regime, observation_tensor, PanelDataset, RegimeCode};
use crate::propensity::{weight_tensor, PropensityConfig, PropensityModel, WeightTensor};
use crate::rng;
use crate::sieve::{SieveBasis, SieveProjector, SieveSpec};
use crate::tensor::{leading_left_singular_vectors, MultilinearRank, Tensor3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteQuery {
    pub regime_a: RegimeCode,
    pub regime_b: RegimeCode,
    /// Subject indices (0-based); `None` means all.
    pub subjects: Option<Vec<usize>>,
    /// Time indices (0-based); `None` means all.
    pub times: Option<Vec<usize>>,
}

impl AteQuery {
    /// All-ones versus all-zeros over every subject and time.
    pub fn treat_all_vs_none(k: usize) -> Result<Self> {
        Ok(Self { regime_a: RegimeCode::all_ones(k)?, regime_b: RegimeCode::all_zeros(k)?, subjects: None, times: None })
    }
}

fn resolve(set: &Option<Vec<usize>>, len: usize, what: &str) -> Result<Vec<usize>> {
    match set {
        None => Ok((0..len).collect()),
        Some(v) => {
            if v.is_empty() {
                return Err(Error::argument(format!("empty {what} set")));
            }
            if let Some(bad) = v.iter().find(|&&i| i >= len) {
                return Err(Error::argument(format!("{what} index {bad} out of range 0..{len}")));
            }
            Ok(v.clone())
        }
    }
}

/// Mean of `Ŷ_{i,t,l} − Ŷ_{i,t,l′}` over the selected cells.
pub fn ate(y_hat: &Tensor3, query: &AteQuery) -> Result<f64> {
    let [n, t, kk] = y_hat.dims();
    if query.regime_a.k != query.regime_b.k {
        return Err(Error::argument("regimes in an ATE query must share the same k"));
    }
    if query.regime_a.n_regimes() != kk {
        return Err(Error::argument(format!(
            "regimes with k={} do not index a third mode of size {kk}",
            query.regime_a.k
        )));
    }
    let subjects = resolve(&query.subjects, n, "subject")?;
    let times = resolve(&query.times, t, "time")?;
    let (la, lb) = (query.regime_a.l, query.regime_b.l);
    let mut total = 0.0;
    for &tt in &times {
        for &i in &subjects {
            total += y_hat.get(i, tt, la) - y_hat.get(i, tt, lb);
        }
    }
    Ok(total / (subjects.len() * times.len()) as f64)
}

/// `‖Ŷ − 𝒴*‖²_F / ‖𝒴*‖²_F`.
pub fn normalized_error(y_hat: &Tensor3, y_star: &Tensor3) -> Result<f64> {
    if y_hat.dims() != y_star.dims() {
        return Err(Error::argument("normalized_error needs tensors of equal dims"));
    }
    let denom = y_star.frobenius_sq();
    if denom == 0.0 {
        return Err(Error::argument("ground truth tensor is zero"));
    }
    Ok(y_hat.sub(y_star)?.frobenius_sq() / denom)
}

/// `‖P_Ω(Ŷ − Y)‖_F / ‖P_Ω(Y)‖_F` (norms not squared).
pub fn l2_cv(y_hat: &Tensor3, y_obs: &Tensor3, omega: &Tensor3) -> Result<f64> {
    if y_hat.dims() != y_obs.dims() || y_obs.dims() != omega.dims() {
        return Err(Error::argument("l2_cv needs tensors of equal dims"));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for ((&h, &y), &o) in y_hat.as_slice().iter().zip(y_obs.as_slice()).zip(omega.as_slice()) {
        if o != 0.0 {
            num += (h - y) * (h - y);
            den += y * y;
        }
    }
    if den == 0.0 {
        return Err(Error::argument("observed outcomes are all zero"));
    }
    Ok((num / den).sqrt())
}

/// Feature map `(a_{(t−k+1):t}, X₀ row, t) ↦ μ` design vector.
pub type FeatureMap = dyn Fn(&[u8], &[f64], usize) -> Vec<f64> + Sync;

/// `(1, a_{(t−k+1):t}, X₀ᵀ)`.
pub fn linear_design(bits: &[u8], x0: &[f64], _t: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(1 + bits.len() + x0.len());
    v.push(1.0);
    v.extend(bits.iter().map(|&b| f64::from(b)));
    v.extend_from_slice(x0);
    v
}

#[derive(Debug, Clone)]
pub struct HrmsmFit {
    /// One coefficient vector per time.
    pub coefs: Vec<Vec<f64>>,
    pub prediction: Tensor3,
}

/// Time-specific IPTW-weighted least squares of `Y_{i,t}` on the design
/// evaluated at the received regime; predictions fill every regime slice.
pub fn fit_hrmsm(data: &PanelDataset, w: &WeightTensor, k: usize, design: &FeatureMap) -> Result<HrmsmFit> {
    let (n, tt) = (data.n_subjects(), data.n_times());
    let kk = 1usize << k;
    if w.w.dims() != [n, tt, kk] {
        return Err(Error::argument(format!("weight tensor dims {:?} do not match ({n}, {tt}, {kk})", w.w.dims())));
    }
    let regimes: Vec<Vec<u8>> = (0..kk).map(|l| decode_regime(l, k)).collect::<Result<_>>()?;
    let x0 = data.baseline();
    let mut coefs = Vec::with_capacity(tt);
    let mut prediction = Tensor3::zeros(n, tt, kk);
    for t in 1..=tt {
        let p = design(&regimes[0], x0.row(0), t).len();
        let mut xtwx = Matrix::zeros(p, p);
        let mut xtwy = Matrix::zeros(p, 1);
        for i in 0..n {
            let l = data.observed_regime(i, t, k);
            let wi = w.w.get(i, t - 1, l);
            if wi == 0.0 {
                continue;
            }
            let f = design(&regimes[l], x0.row(i), t);
            let y = data.outcome(i, t);
            for a in 0..p {
                let fa = wi * f[a];
                xtwy[(a, 0)] += fa * y;
                for b in a..p {
                    xtwx[(a, b)] += fa * f[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
        }
        let sol = solve_spd(&xtwx, &xtwy, 1e-8)?;
        if sol.ridge > 0.0 {
            warn!("hrmsm design at t={t} is singular; ridge {:.3e} added", sol.ridge);
        }
        let beta = sol.x.column(0);
        for (l, bits) in regimes.iter().enumerate() {
            for i in 0..n {
                let f = design(bits, x0.row(i), t);
                prediction.set(i, t - 1, l, crate::linalg::dot(&f, &beta));
            }
        }
        coefs.push(beta);
    }
    Ok(HrmsmFit { coefs, prediction })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnfoldedConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for UnfoldedConfig {
    fn default() -> Self {
        Self { max_iters: 300, tol: 1e-10 }
    }
}

fn weighted_unfolded_loss(m: &Matrix, wm: &Matrix, u: &Matrix, v: &Matrix) -> f64 {
    let mut loss = 0.0;
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let wij = wm[(i, j)];
            if wij != 0.0 {
                let r = m[(i, j)] - crate::linalg::dot(u.row(i), v.row(j));
                loss += wij * r * r;
            }
        }
    }
    0.5 * loss
}

/// Weighted rank-`r₁` factorization `U Vᵀ` of the mode-1 unfolding with
/// `U ∈ col(Φ)` (or unconstrained when `projector` is `None`), by
/// alternating least squares.
pub fn fit_unfolded(
    y_obs: &Tensor3,
    omega: &Tensor3,
    w: &Tensor3,
    projector: Option<&SieveProjector>,
    r1: usize,
    config: &UnfoldedConfig,
) -> Result<Tensor3> {
    let dims = y_obs.dims();
    if omega.dims() != dims || w.dims() != dims {
        return Err(Error::argument("y, omega and w must share dims"));
    }
    let (n, cols) = (dims[0], dims[1] * dims[2]);
    if r1 == 0 || r1 > n.min(cols) {
        return Err(Error::argument(format!("rank {r1} must be in 1..={}", n.min(cols))));
    }
    if let Some(p) = projector {
        if p.n_rows() != n {
            return Err(Error::argument("sieve basis rows do not match subjects"));
        }
        if r1 > p.phi().cols() {
            return Err(Error::argument(format!("rank {r1} exceeds the sieve dimension {}", p.phi().cols())));
        }
    }
    let m = y_obs.unfold(1)?;
    let wm = omega.hadamard(w)?.unfold(1)?;
    let mut mw = m.clone();
    for (a, &b) in mw.as_mut_slice().iter_mut().zip(wm.as_slice()) {
        *a *= b;
    }
    let mut u = leading_left_singular_vectors(&mw, r1)?;
    if let Some(p) = projector {
        u = p.project(&u)?;
    }
    let mut v = Matrix::zeros(cols, r1);
    let mut prev = f64::INFINITY;
    for it in 0..config.max_iters {
        // V step: one small weighted least-squares problem per column.
        for j in 0..cols {
            let mut a = Matrix::zeros(r1, r1);
            let mut b = Matrix::zeros(r1, 1);
            let mut any = false;
            for i in 0..n {
                let wij = wm[(i, j)];
                if wij == 0.0 {
                    continue;
                }
                any = true;
                let ui = u.row(i);
                for p in 0..r1 {
                    b[(p, 0)] += wij * ui[p] * m[(i, j)];
                    for q in 0..r1 {
                        a[(p, q)] += wij * ui[p] * ui[q];
                    }
                }
            }
            let vj = if any { solve_spd(&a, &b, 1e-10)?.x.column(0) } else { vec![0.0; r1] };
            v.row_mut(j).copy_from_slice(&vj);
        }
        // U step, either per row or through the sieve coefficients.
        match projector {
            None => {
                for i in 0..n {
                    let mut a = Matrix::zeros(r1, r1);
                    let mut b = Matrix::zeros(r1, 1);
                    for j in 0..cols {
                        let wij = wm[(i, j)];
                        if wij == 0.0 {
                            continue;
                        }
                        let vj = v.row(j);
                        for p in 0..r1 {
                            b[(p, 0)] += wij * vj[p] * m[(i, j)];
                            for q in 0..r1 {
                                a[(p, q)] += wij * vj[p] * vj[q];
                            }
                        }
                    }
                    let ui = solve_spd(&a, &b, 1e-10)?.x.column(0);
                    u.row_mut(i).copy_from_slice(&ui);
                }
            }
            Some(p) => {
                let phi = p.phi();
                let d = phi.cols();
                let dim = d * r1;
                let mut big = Matrix::zeros(dim, dim);
                let mut rhs = Matrix::zeros(dim, 1);
                for i in 0..n {
                    let mut a = Matrix::zeros(r1, r1);
                    let mut c = vec![0.0; r1];
                    for j in 0..cols {
                        let wij = wm[(i, j)];
                        if wij == 0.0 {
                            continue;
                        }
                        let vj = v.row(j);
                        for p in 0..r1 {
                            c[p] += wij * vj[p] * m[(i, j)];
                            for q in 0..r1 {
                                a[(p, q)] += wij * vj[p] * vj[q];
                            }
                        }
                    }
                    let fi = phi.row(i);
                    // vec(B) is column-major in B (d×r₁): index q·d + s.
                    for p in 0..r1 {
                        for s in 0..d {
                            rhs[(p * d + s, 0)] += c[p] * fi[s];
                            for q in 0..r1 {
                                let apq = a[(p, q)];
                                if apq == 0.0 {
                                    continue;
                                }
                                for s2 in 0..d {
                                    big[(p * d + s, q * d + s2)] += apq * fi[s] * fi[s2];
                                }
                            }
                        }
                    }
                }
                let sol = solve_spd(&big, &rhs, 1e-10)?.x;
                let b = Matrix::from_fn(d, r1, |s, q| sol[(q * d + s, 0)]);
                u = phi.matmul(&b)?;
            }
        }
        let loss = weighted_unfolded_loss(&m, &wm, &u, &v);
        if !loss.is_finite() {
            return Err(Error::numerical("unfolded factorization diverged"));
        }
        debug!("unfolded iter {it}: loss {loss:.6e}");
        if prev - loss <= config.tol * prev.max(1e-300) {
            break;
        }
        prev = loss;
    }
    let fitted = u.matmul_t(&v)?;
    Tensor3::fold(&fitted, 1, dims)
}

/// Row-normalized Gaussian kernel weights `H_{i,j} ∝ exp(−‖x_j − x_i‖²/(2σ²))`
/// between test rows `i` and training rows `j`.
pub fn kernel_weights(x0_test: &Matrix, x0_train: &Matrix, sigma: f64) -> Result<Matrix> {
    if x0_test.cols() != x0_train.cols() {
        return Err(Error::argument("test and training covariates differ in width"));
    }
    if !(sigma > 0.0) {
        return Err(Error::argument("kernel bandwidth must be positive"));
    }
    if x0_train.rows() == 0 {
        return Err(Error::argument("no training subjects for kernel smoothing"));
    }
    let (m, n) = (x0_test.rows(), x0_train.rows());
    let mut h = Matrix::zeros(m, n);
    let denom = 2.0 * sigma * sigma;
    for i in 0..m {
        let xi = x0_test.row(i);
        let logits: Vec<f64> = (0..n)
            .map(|j| {
                let d2: f64 = xi.iter().zip(x0_train.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                -d2 / denom
            })
            .collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
        for (j, v) in logits.iter().enumerate() {
            h[(i, j)] = (v - mx).exp() / z;
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    CoTucker,
    Tucker,
    CoUnfold,
    Hrmsm,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::CoTucker, Method::Tucker, Method::CoUnfold, Method::Hrmsm];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::CoTucker => "co-tucker",
            Method::Tucker => "tucker",
            Method::CoUnfold => "co-unfold",
            Method::Hrmsm => "hrmsm",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "co-tucker" => Ok(Method::CoTucker),
            "tucker" => Ok(Method::Tucker),
            "co-unfold" => Ok(Method::CoUnfold),
            "hrmsm" => Ok(Method::Hrmsm),
            _ => Err(Error::argument(format!("unknown method '{s}'"))),
        }
    }
}

/// Everything a single method fit needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationSettings {
    pub k: usize,
    pub sieve: SieveSpec,
    pub fit: FitConfig,
    pub unfolded: UnfoldedConfig,
    pub propensity: PropensityConfig,
    pub truncation: Option<f64>,
    pub kernel_sigma: f64,
}

impl Default for EstimationSettings {
    fn default() -> Self {
        Self {
            k: 5,
            sieve: SieveSpec::default(),
            fit: FitConfig::with_rank(MultilinearRank::new(2, 1, 6)),
            unfolded: UnfoldedConfig::default(),
            propensity: PropensityConfig::default(),
            truncation: None,
            kernel_sigma: 1.0,
        }
    }
}

/// A fitted completion on the training subjects, able to predict others.
pub struct MethodFit {
    pub method: Method,
    pub y_hat: Tensor3,
    /// Tucker factors for the tensor methods.
    pub model: Option<TuckerModel>,
    pub report: Option<FitReport>,
    /// Basis fitted on the training covariates (co-tucker only).
    pub basis: Option<SieveBasis>,
    x0_train: Matrix,
}

impl MethodFit {
    /// Completed tensor for new subjects: sieve transfer for co-tucker,
    /// kernel smoothing of the training fit otherwise.
    pub fn predict(&self, x0_new: &Matrix, kernel_sigma: f64) -> Result<Tensor3> {
        match (&self.basis, &self.model) {
            (Some(basis), Some(model)) => model.predict_from_basis(&basis.transform(x0_new)?),
            _ => {
                let h = kernel_weights(x0_new, &self.x0_train, kernel_sigma)?;
                self.y_hat.mode_product(&h, 1)
            }
        }
    }
}

/// Sieve basis fitted on `x0` and the projector onto its column space.
pub fn sieve_for(x0: &Matrix, spec: SieveSpec) -> Result<(SieveBasis, SieveProjector)> {
    let basis = SieveBasis::fit(x0, spec)?;
    let proj = SieveProjector::new(&basis.transform(x0)?)?;
    Ok((basis, proj))
}

/// Fits one method given weights already computed on `data`.
pub fn fit_method(data: &PanelDataset, weights: &WeightTensor, method: Method, settings: &EstimationSettings) -> Result<MethodFit> {
    let k = settings.k;
    let (omega, y_obs) = observation_tensor(data, k)?;
    let x0 = data.baseline().clone();
    let tensor_fit = |model: TuckerModel, report: FitReport, basis: Option<SieveBasis>| -> Result<MethodFit> {
        let y_hat = model.reconstruct()?;
        Ok(MethodFit { method, y_hat, model: Some(model), report: Some(report), basis, x0_train: x0.clone() })
    };
    match method {
        Method::CoTucker => {
            let (basis, proj) = sieve_for(&x0, settings.sieve)?;
            let (model, report) = fit(&y_obs, &omega, &weights.w, Some(&proj), &settings.fit)?;
            tensor_fit(model, report, Some(basis))
        }
        Method::Tucker => {
            let (model, report) = fit(&y_obs, &omega, &weights.w, None, &settings.fit)?;
            tensor_fit(model, report, None)
        }
        Method::CoUnfold => {
            let (_, proj) = sieve_for(&x0, settings.sieve)?;
            let y_hat = fit_unfolded(&y_obs, &omega, &weights.w, Some(&proj), settings.fit.rank.r1, &settings.unfolded)?;
            Ok(MethodFit { method, y_hat, model: None, report: None, basis: None, x0_train: x0 })
        }
        Method::Hrmsm => {
            let fit = fit_hrmsm(data, weights, k, &linear_design)?;
            Ok(MethodFit { method, y_hat: fit.prediction, model: None, report: None, basis: None, x0_train: x0 })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPlan {
    pub folds: usize,
    pub seed: u64,
    /// Explicit fold label per subject; overrides the seeded shuffle.
    #[serde(default)]
    pub assignment: Option<Vec<usize>>,
}

impl CvPlan {
    pub fn new(folds: usize, seed: u64) -> Self {
        Self { folds, seed, assignment: None }
    }

    /// Fold label of every subject.
    pub fn fold_labels(&self, n: usize) -> Result<Vec<usize>> {
        if self.folds < 2 {
            return Err(Error::argument("cross-validation needs at least 2 folds"));
        }
        if self.folds > n {
            return Err(Error::argument(format!("{} folds exceed {n} subjects", self.folds)));
        }
        let labels = match &self.assignment {
            Some(a) => {
                if a.len() != n || a.iter().any(|&f| f >= self.folds) {
                    return Err(Error::argument("explicit fold assignment does not match the panel"));
                }
                a.clone()
            }
            None => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng::stream(self.seed, "cv-folds", 0));
                let mut labels = vec![0; n];
                for (pos, &i) in order.iter().enumerate() {
                    labels[i] = pos % self.folds;
                }
                labels
            }
        };
        for v in 0..self.folds {
            let size = labels.iter().filter(|&&f| f == v).count();
            if size < 2 {
                return Err(Error::argument(format!("fold {v} has {size} subject(s); at least 2 needed")));
            }
        }
        Ok(labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub train_l2: f64,
    pub test_l2: f64,
    pub train_ate: f64,
    pub test_ate: f64,
}

/// Fold-wise training and held-out-subject errors for one method. Treatment
/// models are refit on each training fold only.
pub fn cv_evaluate(data: &PanelDataset, settings: &EstimationSettings, plan: &CvPlan, method: Method) -> Result<Vec<FoldMetrics>> {
    let n = data.n_subjects();
    let labels = plan.fold_labels(n)?;
    let query = AteQuery::treat_all_vs_none(settings.k)?;
    let mut out = Vec::with_capacity(plan.folds);
    for v in 0..plan.folds {
        let test_rows: Vec<usize> = (0..n).filter(|&i| labels[i] == v).collect();
        let train_rows: Vec<usize> = (0..n).filter(|&i| labels[i] != v).collect();
        if train_rows.len() < 2 {
            return Err(Error::argument(format!("fold {v} leaves fewer than 2 training subjects")));
        }
        let train = data.select_subjects(&train_rows);
        let test = data.select_subjects(&test_rows);
        let model = PropensityModel::fit(&train, &settings.propensity)?;
        let weights = weight_tensor(&train, &model, settings.k, settings.truncation)?;
        let fitted = fit_method(&train, &weights, method, settings)?;
        let y_test = fitted.predict(test.baseline(), settings.kernel_sigma)?;
        let (om_tr, y_tr) = observation_tensor(&train, settings.k)?;
        let (om_te, y_te) = observation_tensor(&test, settings.k)?;
        let m = FoldMetrics {
            fold: v,
            train_l2: l2_cv(&fitted.y_hat, &y_tr, &om_tr)?,
            test_l2: l2_cv(&y_test, &y_te, &om_te)?,
            train_ate: ate(&fitted.y_hat, &query)?,
            test_ate: ate(&y_test, &query)?,
        };
        debug!("cv {method} fold {v}: train {:.4} test {:.4}", m.train_l2, m.test_l2);
        out.push(m);
    }
    Ok(out)
}

/// Means over folds, in the field order of [`FoldMetrics`].
pub fn average_folds(metrics: &[FoldMetrics]) -> Result<[f64; 4]> {
    if metrics.is_empty() {
        return Err(Error::argument("no folds to average"));
    }
    let n = metrics.len() as f64;
    let mut acc = [0.0; 4];
    for m in metrics {
        acc[0] += m.train_l2;
        acc[1] += m.test_l2;
        acc[2] += m.train_ate;
        acc[3] += m.test_ate;
    }
    Ok(acc.map(|v| v / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propensity::weight_tensor_from_probs;
    use crate::simbench::{generate, Assignment, OutcomeModel, SimDesign};
    use crate::tensor::tucker_reconstruct;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Tensor3 {
        Tensor3::from_fn(dims, |_, _, _| rng.sample(StandardNormal))
    }

    fn query(k: usize, a: usize, b: usize) -> AteQuery {
        AteQuery { regime_a: RegimeCode::new(k, a).unwrap(), regime_b: RegimeCode::new(k, b).unwrap(), subjects: None, times: None }
    }

    #[test]
    fn ate_of_identical_and_shifted_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut y = rand_tensor(&mut rng, [5, 4, 4]);
        for i in 0..5 {
            for t in 0..4 {
                y.set(i, t, 1, y.get(i, t, 0));
                y.set(i, t, 3, y.get(i, t, 2) + 2.5);
            }
        }
        assert_eq!(ate(&y, &query(2, 1, 0)).unwrap(), 0.0);
        assert!((ate(&y, &query(2, 3, 2)).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn ate_on_generator_tensor_matches_brute_force() {
        let d = SimDesign { n: 30, t: 6, k: 3, d0: 4, ..SimDesign::default() };
        let sim = generate(&d, 0).unwrap();
        let mut brute = 0.0;
        for i in 0..30 {
            for t in 0..6 {
                brute += sim.y_star.get(i, t, 7) - sim.y_star.get(i, t, 0);
            }
        }
        brute /= 180.0;
        let q = AteQuery::treat_all_vs_none(3).unwrap();
        assert!((ate(&sim.y_star, &q).unwrap() - brute).abs() < 1e-12);
        assert!((sim.true_ate - brute).abs() < 1e-12);
    }

    #[test]
    fn ate_rejects_bad_queries() {
        let y = Tensor3::zeros(3, 3, 4);
        let mut q = query(2, 1, 0);
        q.subjects = Some(vec![]);
        assert!(matches!(ate(&y, &q), Err(Error::Argument(_))));
        let q = AteQuery { regime_a: RegimeCode::new(2, 1).unwrap(), regime_b: RegimeCode::new(3, 0).unwrap(), subjects: None, times: None };
        assert!(ate(&y, &q).is_err());
    }

    #[test]
    fn ate_over_subsets() {
        let y = Tensor3::from_fn([4, 3, 2], |i, t, l| (l * (i + 10 * t)) as f64);
        let q = AteQuery { subjects: Some(vec![1, 3]), times: Some(vec![2]), ..query(1, 1, 0) };
        assert!((ate(&y, &q).unwrap() - 22.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn ate_is_linear_and_antisymmetric(seed in 0u64..1000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = rand_tensor(&mut rng, [4, 3, 8]);
            let z = rand_tensor(&mut rng, [4, 3, 8]);
            let q = query(3, 5, 2);
            let combo = y.scale(alpha).add(&z.scale(beta)).unwrap();
            let lhs = ate(&combo, &q).unwrap();
            let rhs = alpha * ate(&y, &q).unwrap() + beta * ate(&z, &q).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
            prop_assert!((ate(&y, &query(3, 2, 5)).unwrap() + ate(&y, &q).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn kernel_rows_are_probability_vectors(seed in 0u64..1000, m in 1usize..5, n in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::from_fn(m, 3, |_, _| rng.sample(StandardNormal));
            let b = Matrix::from_fn(n, 3, |_, _| 3.0 * rng.sample::<f64, _>(StandardNormal));
            let h = kernel_weights(&a, &b, 0.7).unwrap();
            for i in 0..m {
                prop_assert!(h.row(i).iter().all(|&v| v >= 0.0));
                prop_assert!((h.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalized_error_reference_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = rand_tensor(&mut rng, [3, 4, 2]);
        assert_eq!(normalized_error(&y, &y).unwrap(), 0.0);
        assert!((normalized_error(&Tensor3::zeros(3, 4, 2), &y).unwrap() - 1.0).abs() < 1e-15);
        assert!((normalized_error(&y.scale(2.0), &y).unwrap() - 1.0).abs() < 1e-15);
        assert!(normalized_error(&y, &Tensor3::zeros(3, 4, 2)).is_err());
    }

    #[test]
    fn kernel_degenerate_and_symmetric_cases() {
        let test = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let one = Matrix::from_rows(&[vec![5.0, 1.0]]).unwrap();
        assert_eq!(kernel_weights(&test, &one, 1.0).unwrap()[(0, 0)], 1.0);
        let two = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        let h = kernel_weights(&test, &two, 1.0).unwrap();
        assert!((h[(0, 0)] - 0.5).abs() < 1e-15 && (h[(0, 1)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kernel_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::from_fn(3, 2, |_, _| rng.sample(StandardNormal));
        let b = Matrix::from_fn(5, 2, |_, _| rng.sample(StandardNormal));
        let h = kernel_weights(&a, &b, 1.0).unwrap();
        for i in 0..3 {
            let raw: Vec<f64> = (0..5)
                .map(|j| {
                    let d2 = (a[(i, 0)] - b[(j, 0)]).powi(2) + (a[(i, 1)] - b[(j, 1)]).powi(2);
                    (-d2 / 2.0).exp()
                })
                .collect();
            let z: f64 = raw.iter().sum();
            for j in 0..5 {
                assert!((h[(i, j)] - raw[j] / z).abs() < 1e-12);
            }
            assert!((h.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn unit_weights(data: &PanelDataset, k: usize) -> WeightTensor {
        let (omega, _) = observation_tensor(data, k).unwrap();
        WeightTensor { w: omega, truncation: None, clamped: 0 }
    }

    #[test]
    fn hrmsm_recovers_exact_linear_model() {
        let d = SimDesign { n: 60, t: 5, k: 2, d0: 3, assignment: Assignment::Randomized, ..SimDesign::default() };
        let sim = generate(&d, 0).unwrap();
        // Overwrite outcomes with an exact linear model in (1, bits, X0).
        let truth: Vec<Vec<f64>> = (1..=5).map(|t| vec![t as f64, 2.0, -1.0, 0.5, 0.25 * t as f64, -3.0]).collect();
        let mut y = Matrix::zeros(60, 5);
        for i in 0..60 {
            for t in 1..=5 {
                let f = linear_design(&sim.panel.history_bits(i, t, 2), sim.panel.baseline().row(i), t);
                y[(i, t - 1)] = crate::linalg::dot(&f, &truth[t - 1]);
            }
        }
        let xs = (1..=5).map(|t| sim.panel.covariates(t).clone()).collect();
        let panel = PanelDataset::new(sim.panel.subject_ids().to_vec(), sim.panel.baseline().clone(), xs, sim.panel.treatments().to_vec(), y).unwrap();
        let fit = fit_hrmsm(&panel, &unit_weights(&panel, 2), 2, &linear_design).unwrap();
        // At t = 1 the earlier bit is always zero-padded and the design is
        // singular, so only later times are checked.
        for t in 1..5 {
            for (a, b) in fit.coefs[t].iter().zip(&truth[t]) {
                assert!((a - b).abs() < 1e-8, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn hrmsm_constant_weights_equal_unweighted() {
        let d = SimDesign { n: 80, t: 4, k: 2, d0: 3, ..SimDesign::default() };
        let sim = generate(&d, 1).unwrap();
        let w1 = unit_weights(&sim.panel, 2);
        let w3 = WeightTensor { w: w1.w.scale(3.7), truncation: None, clamped: 0 };
        let a = fit_hrmsm(&sim.panel, &w1, 2, &linear_design).unwrap();
        let b = fit_hrmsm(&sim.panel, &w3, 2, &linear_design).unwrap();
        assert!(a.prediction.max_abs_diff(&b.prediction) < 1e-8);
    }

    #[test]
    fn hrmsm_oracle_weights_identify_m1_ate() {
        let d = SimDesign { n: 2000, t: 10, k: 5, ..SimDesign::default() };
        let sim = generate(&d, 0).unwrap();
        let w = weight_tensor_from_probs(&sim.panel, &sim.propensities, 5, None).unwrap();
        let fit = fit_hrmsm(&sim.panel, &w, 5, &linear_design).unwrap();
        // Before t = k the earlier bits are always zero-padded in the data,
        // so time-specific coefficients for them are not identified.
        let q = AteQuery { times: Some((4..10).collect()), ..AteQuery::treat_all_vs_none(5).unwrap() };
        let est = ate(&fit.prediction, &q).unwrap();
        let truth = ate(&sim.y_star, &q).unwrap();
        assert!((est - truth).abs() < 0.05 * truth.abs(), "{est} vs {truth}");
    }

    #[test]
    fn unfolded_recovers_rank_one_with_full_observation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = Matrix::from_fn(12, 1, |_, _| rng.sample(StandardNormal));
        let v = Matrix::from_fn(1, 1, |_, _| 1.5);
        let w2 = Matrix::from_fn(4, 1, |_, _| rng.sample(StandardNormal));
        let w3 = Matrix::from_fn(3, 1, |_, _| rng.sample(StandardNormal));
        let core = Tensor3::from_fn([1, 1, 1], |_, _, _| v[(0, 0)]);
        let y = tucker_reconstruct(&core, &u, &w2, &w3).unwrap();
        let ones = Tensor3::filled(12, 4, 3, 1.0);
        let fitted = fit_unfolded(&y, &ones, &ones, None, 1, &UnfoldedConfig::default()).unwrap();
        assert!(fitted.max_abs_diff(&y) < 1e-6);
    }

    #[test]
    fn unfolded_identity_sieve_matches_unconstrained() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = rand_tensor(&mut rng, [8, 3, 2]);
        let omega = Tensor3::from_fn([8, 3, 2], |_, _, _| f64::from(u8::from(rng.gen::<f64>() < 0.7)));
        let w = Tensor3::from_fn([8, 3, 2], |_, _, _| 0.5 + rng.gen::<f64>());
        let cfg = UnfoldedConfig { max_iters: 50, tol: 1e-300 };
        let proj = SieveProjector::new(&Matrix::identity(8)).unwrap();
        let a = fit_unfolded(&y, &omega, &w, None, 2, &cfg).unwrap();
        let b = fit_unfolded(&y, &omega, &w, Some(&proj), 2, &cfg).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn cv_plan_partitions_subjects() {
        let labels = CvPlan::new(3, 9).fold_labels(10).unwrap();
        for v in 0..3 {
            assert!(labels.iter().filter(|&&f| f == v).count() >= 3);
        }
        assert!(CvPlan::new(1, 0).fold_labels(10).is_err());
        assert!(CvPlan::new(6, 0).fold_labels(10).is_err());
        assert!(CvPlan::new(11, 0).fold_labels(10).is_err());
    }

    #[test]
    fn cv_with_duplicated_covariates_predicts_held_out_subjects() {
        let d = SimDesign { n: 24, t: 6, k: 2, d0: 2, noise_sd: 0.0, outcome: OutcomeModel::M1, ..SimDesign::default() };
        let base = generate(&d, 0).unwrap();
        // Subjects i and i+12 share X₀ and treatment paths.
        let rows: Vec<usize> = (0..12).chain(0..12).collect();
        let panel = base.panel.select_subjects(&rows);
        let plan = CvPlan { folds: 2, seed: 0, assignment: Some((0..24).map(|i| usize::from(i >= 12)).collect()) };
        let settings = EstimationSettings {
            k: 2,
            sieve: SieveSpec::legendre(1),
            fit: FitConfig::with_rank(MultilinearRank::new(2, 1, 3)),
            propensity: PropensityConfig { penalty: crate::propensity::Penalty::None, ..PropensityConfig::default() },
            ..EstimationSettings::default()
        };
        let m = cv_evaluate(&panel, &settings, &plan, Method::CoTucker).unwrap();
        for f in &m {
            assert!(f.test_l2 < 1e-6, "{f:?}");
        }
        let avg = average_folds(&m).unwrap();
        assert!((avg[1] - (m[0].test_l2 + m[1].test_l2) / 2.0).abs() < 1e-15);
    }
}
