//! Weighted Tucker completion by projected gradient descent.
//!
//! The model is `X = ⟦G; U₁, U₂, U₃⟧` with `U₁` confined to the column space
//! of a sieve basis `Φ` (when one is given) and `U₂`, `U₃` kept on the
//! Stiefel manifold. The loss is `½ Σ_{Ω} W (Y − X)²`.
//!
//! The default scheme updates the blocks `U₁, U₂, U₃, G` in turn, each with
//! its own line search. Because `X` is linear in every single block, the
//! minimizing step along a block direction has a closed form; that step is
//! tried first and then halved until the Armijo condition holds. After a
//! `U₂`/`U₃` step the factor is retracted with a thin QR and the triangular
//! factor is absorbed into `G`, which leaves `X` unchanged.

use std::collections::BTreeMap;
use std::path::Path;

use log::{debug, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{singular_values, spectral_norm, thin_qr, Matrix};
use crate::rng;
use crate::sieve::SieveProjector;
use crate::tensor::{matrix_to_tensor, tensor_to_matrix, tucker_reconstruct, MultilinearRank, Tensor3};

#[derive(Debug, Clone, PartialEq)]
pub struct TuckerModel {
    pub core: Tensor3,
    pub u1: Matrix,
    pub u2: Matrix,
    pub u3: Matrix,
    /// Sieve coefficients with `u1 = Φ·b`, when fitted with a basis.
    pub b: Option<Matrix>,
}

impl TuckerModel {
    pub fn rank(&self) -> MultilinearRank {
        let [r1, r2, r3] = self.core.dims();
        MultilinearRank::new(r1, r2, r3)
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.u1.rows(), self.u2.rows(), self.u3.rows()]
    }

    pub fn reconstruct(&self) -> Result<Tensor3> {
        tucker_reconstruct(&self.core, &self.u1, &self.u2, &self.u3)
    }

    /// Completed tensor for new subjects with sieve basis rows `phi_new`:
    /// `G ×₁ Φ_new·B ×₂ U₂ ×₃ U₃`.
    pub fn predict_from_basis(&self, phi_new: &Matrix) -> Result<Tensor3> {
        let b = self
            .b
            .as_ref()
            .ok_or_else(|| Error::argument("model was fitted without a sieve basis"))?;
        let u1 = phi_new.matmul(b)?;
        tucker_reconstruct(&self.core, &u1, &self.u2, &self.u3)
    }

    /// Writes `manifest.json` plus one container file per component.
    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.core.write_to(&dir.join("core.tnsr"))?;
        matrix_to_tensor(&self.u1).write_to(&dir.join("u1.tnsr"))?;
        matrix_to_tensor(&self.u2).write_to(&dir.join("u2.tnsr"))?;
        matrix_to_tensor(&self.u3).write_to(&dir.join("u3.tnsr"))?;
        if let Some(b) = &self.b {
            matrix_to_tensor(b).write_to(&dir.join("b.tnsr"))?;
        }
        let manifest = serde_json::json!({
            "dims": self.dims(),
            "rank": self.rank(),
            "has_sieve": self.b.is_some(),
            "components": ["core.tnsr", "u1.tnsr", "u2.tnsr", "u3.tnsr"],
            "config": extra,
        });
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let core = Tensor3::read_from(&dir.join("core.tnsr"))?;
        let u1 = tensor_to_matrix(&Tensor3::read_from(&dir.join("u1.tnsr"))?)?;
        let u2 = tensor_to_matrix(&Tensor3::read_from(&dir.join("u2.tnsr"))?)?;
        let u3 = tensor_to_matrix(&Tensor3::read_from(&dir.join("u3.tnsr"))?)?;
        let bpath = dir.join("b.tnsr");
        let b = if bpath.exists() { Some(tensor_to_matrix(&Tensor3::read_from(&bpath)?)?) } else { None };
        let model = Self { core, u1, u2, u3, b };
        check_model(&model)?;
        Ok(model)
    }
}

fn check_model(m: &TuckerModel) -> Result<()> {
    let [r1, r2, r3] = m.core.dims();
    if m.u1.cols() != r1 || m.u2.cols() != r2 || m.u3.cols() != r3 {
        return Err(Error::argument("core dims do not match factor widths"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// Constant step, no line search.
    Fixed(f64),
    /// Halving from `η₀ = 1`.
    Backtracking,
    /// Halving from the exact minimizing step along each block direction.
    BlockExact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateScheme {
    /// `U₁, U₂, U₃, G` updated in turn, each with its own step.
    Blockwise,
    /// All four gradients taken at the same point and one common step.
    Joint,
}

/// Where the descent starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitRule {
    /// Projected HOSVD of `Y ⊙ Ω ⊙ W` only.
    Weighted,
    /// Also descend from the projected HOSVD of `Y ⊙ Ω` and keep the run
    /// with the lower final weighted loss.
    #[default]
    WeightedOrPlain,
}

/// Optional trimming towards the incoherent, bounded-core domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Incoherence {
    /// Row norms² of `U_k` are capped at `μ₀·r_k/dim_k`.
    pub mu0: f64,
    /// Spectral norms of the core unfoldings are capped at `L₀`.
    pub l0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub rank: MultilinearRank,
    pub max_iters: usize,
    pub step: StepRule,
    pub scheme: UpdateScheme,
    pub tol: f64,
    /// Iterations over which the relative loss decrease is measured.
    pub window: usize,
    pub armijo: f64,
    pub max_halvings: usize,
    pub incoherence: Option<Incoherence>,
    /// Re-orthonormalize `U₁` (absorbing the scale into `G`) after its step.
    pub orthonormalize_u1: bool,
    pub seed: u64,
    #[serde(default)]
    pub init: InitRule,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            rank: MultilinearRank::new(1, 1, 1),
            max_iters: 2000,
            step: StepRule::BlockExact,
            scheme: UpdateScheme::Blockwise,
            tol: 1e-9,
            window: 5,
            armijo: 1e-4,
            max_halvings: 30,
            incoherence: None,
            orthonormalize_u1: false,
            seed: 0,
            init: InitRule::default(),
        }
    }
}

impl FitConfig {
    pub fn with_rank(rank: MultilinearRank) -> Self {
        Self { rank, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::argument("max_iters must be ≥ 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::argument("tol must be > 0"));
        }
        if let StepRule::Fixed(eta) = self.step {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::argument("fixed step must be positive"));
            }
        }
        if let Some(inc) = self.incoherence {
            if !(inc.mu0 > 0.0 && inc.l0 > 0.0) {
                return Err(Error::argument("incoherence bounds must be positive"));
            }
        }
        Ok(())
    }
}

/// One row of a rank-tuning table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BicRow {
    pub r1: usize,
    pub r2: usize,
    pub r3: usize,
    pub bic: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitReport {
    /// Weighted loss before the first iteration and after each iteration.
    pub loss_trajectory: Vec<f64>,
    pub final_loss: f64,
    pub iterations: usize,
    pub converged: bool,
    pub rank: Option<MultilinearRank>,
    pub bic_table: Vec<BicRow>,
}

/// Observed cells with their weights, the unit every fit works on.
#[derive(Debug, Clone)]
pub struct ObservedEntries {
    dims: [usize; 3],
    i: Vec<usize>,
    tl: Vec<usize>,
    y: Vec<f64>,
    w: Vec<f64>,
}

impl ObservedEntries {
    /// Collects the cells with nonzero `Ω·W`.
    pub fn new(y_obs: &Tensor3, omega: &Tensor3, w: &Tensor3) -> Result<Self> {
        let dims = y_obs.dims();
        if omega.dims() != dims || w.dims() != dims {
            return Err(Error::argument(format!(
                "dims mismatch: y {:?}, omega {:?}, w {:?}",
                dims,
                omega.dims(),
                w.dims()
            )));
        }
        if !y_obs.is_finite() || !omega.is_finite() || !w.is_finite() {
            return Err(Error::argument("non-finite values in y, omega or weights"));
        }
        if w.as_slice().iter().any(|&v| v < 0.0) {
            return Err(Error::argument("weights must be nonnegative"));
        }
        let n1 = dims[0];
        let mut out = Self { dims, i: Vec::new(), tl: Vec::new(), y: Vec::new(), w: Vec::new() };
        for (off, ((&yv, &om), &wv)) in y_obs.as_slice().iter().zip(omega.as_slice()).zip(w.as_slice()).enumerate() {
            let weight = om * wv;
            if weight != 0.0 {
                out.i.push(off % n1);
                out.tl.push(off / n1);
                out.y.push(yv);
                out.w.push(weight);
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// `Y ⊙ Ω ⊙ W` as a dense tensor.
    pub fn weighted_tensor(&self) -> Tensor3 {
        let [n1, n2, n3] = self.dims;
        let mut t = Tensor3::zeros(n1, n2, n3);
        let data = t.as_mut_slice();
        for e in 0..self.len() {
            data[self.i[e] + n1 * self.tl[e]] = self.y[e] * self.w[e];
        }
        t
    }

    /// Equal weights make `Y ⊙ Ω ⊙ W` a multiple of `Y ⊙ Ω`.
    pub fn uniform_weights(&self) -> bool {
        self.w.windows(2).all(|p| p[0] == p[1])
    }

    /// `Y ⊙ Ω` on the cells with nonzero weight.
    pub fn plain_tensor(&self) -> Tensor3 {
        let [n1, n2, n3] = self.dims;
        let mut t = Tensor3::zeros(n1, n2, n3);
        let data = t.as_mut_slice();
        for e in 0..self.len() {
            data[self.i[e] + n1 * self.tl[e]] = self.y[e];
        }
        t
    }

    /// `C = G ×₂ U₂ ×₃ U₃`, shape `(r1, T, K)`.
    fn partial(core: &Tensor3, u2: &Matrix, u3: &Matrix) -> Tensor3 {
        core.mode_product(u3, 3)
            .and_then(|c| c.mode_product(u2, 2))
            .expect("factor shapes checked by caller")
    }

    /// Model values at the observed cells given `U₁` and `C`.
    fn values(&self, u1: &Matrix, c: &Tensor3) -> Vec<f64> {
        let r1 = u1.cols();
        let cs = c.as_slice();
        (0..self.len())
            .map(|e| {
                let off = r1 * self.tl[e];
                crate::linalg::dot(u1.row(self.i[e]), &cs[off..off + r1])
            })
            .collect()
    }

    /// `½ Σ W Y²`, the loss of the zero model.
    fn scale(&self) -> f64 {
        0.5 * (0..self.len()).map(|e| self.w[e] * self.y[e] * self.y[e]).sum::<f64>()
    }

    fn loss_from_values(&self, x: &[f64]) -> f64 {
        0.5 * (0..self.len()).map(|e| self.w[e] * (x[e] - self.y[e]).powi(2)).sum::<f64>()
    }

    pub fn loss(&self, m: &TuckerModel) -> f64 {
        let c = Self::partial(&m.core, &m.u2, &m.u3);
        self.loss_from_values(&self.values(&m.u1, &c))
    }

    /// Gradients of the loss with respect to `(G, U₁, U₂, U₃)`.
    pub fn gradients(&self, m: &TuckerModel) -> Grads {
        let c = Self::partial(&m.core, &m.u2, &m.u3);
        let x = self.values(&m.u1, &c);
        self.gradients_at(m, &c, &x)
    }

    fn gradients_at(&self, m: &TuckerModel, c: &Tensor3, x: &[f64]) -> Grads {
        let [n1, n2, n3] = self.dims;
        let r1 = m.u1.cols();
        let cs = c.as_slice();
        let mut du1 = Matrix::zeros(n1, r1);
        // S = ∇L ×₁ U₁ᵀ, shape (r1, T, K).
        let mut s = Tensor3::zeros(r1, n2, n3);
        {
            let ss = s.as_mut_slice();
            for e in 0..self.len() {
                let r = self.w[e] * (x[e] - self.y[e]);
                if r == 0.0 {
                    continue;
                }
                let off = r1 * self.tl[e];
                let row = du1.row_mut(self.i[e]);
                for a in 0..r1 {
                    row[a] += r * cs[off + a];
                }
                let u = m.u1.row(self.i[e]);
                for a in 0..r1 {
                    ss[off + a] += r * u[a];
                }
            }
        }
        let (u2t, u3t) = (m.u2.transpose(), m.u3.transpose());
        let s3 = s.mode_product(&u3t, 3).expect("shapes");
        let s2 = s.mode_product(&u2t, 2).expect("shapes");
        let dg = s3.mode_product(&u2t, 2).expect("shapes");
        let du2 = s3.unfold(2).unwrap().matmul_t(&m.core.unfold(2).unwrap()).expect("shapes");
        let du3 = s2.unfold(3).unwrap().matmul_t(&m.core.unfold(3).unwrap()).expect("shapes");
        Grads { core: dg, u1: du1, u2: du2, u3: du3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub core: Tensor3,
    pub u1: Matrix,
    pub u2: Matrix,
    pub u3: Matrix,
}

fn check_conformable(y_obs: &Tensor3, model: &TuckerModel) -> Result<()> {
    check_model(model)?;
    if model.dims() != y_obs.dims() {
        return Err(Error::argument(format!(
            "model dims {:?} do not match data dims {:?}",
            model.dims(),
            y_obs.dims()
        )));
    }
    Ok(())
}

/// `½ Σ_{Ω} W (Y − X)²`.
pub fn weighted_loss(y_obs: &Tensor3, omega: &Tensor3, w: &Tensor3, model: &TuckerModel) -> Result<f64> {
    check_conformable(y_obs, model)?;
    Ok(ObservedEntries::new(y_obs, omega, w)?.loss(model))
}

/// The four partial gradients in their unfolded Kronecker form, computed
/// densely from `∇L = W ⊙ Ω ⊙ (X − Y)`.
pub fn gradients(y_obs: &Tensor3, omega: &Tensor3, w: &Tensor3, model: &TuckerModel) -> Result<Grads> {
    check_conformable(y_obs, model)?;
    let x = model.reconstruct()?;
    let grad = x.sub(y_obs)?.hadamard(omega)?.hadamard(w)?;
    let (u1, u2, u3, g) = (&model.u1, &model.u2, &model.u3, &model.core);
    let core = grad
        .mode_product(&u1.transpose(), 1)?
        .mode_product(&u2.transpose(), 2)?
        .mode_product(&u3.transpose(), 3)?;
    let du1 = grad.unfold(1)?.matmul(&u3.kron(u2))?.matmul_t(&g.unfold(1)?)?;
    let du2 = grad.unfold(2)?.matmul(&u3.kron(u1))?.matmul_t(&g.unfold(2)?)?;
    let du3 = grad.unfold(3)?.matmul(&u2.kron(u1))?.matmul_t(&g.unfold(3)?)?;
    Ok(Grads { core, u1: du1, u2: du2, u3: du3 })
}

/// Per-mode eigenvectors of `M_k(Y_w)M_k(Y_w)ᵀ`, reusable across ranks.
#[derive(Debug, Clone)]
pub struct HosvdCache {
    y_w: Tensor3,
    factors: [Matrix; 3],
}

impl HosvdCache {
    /// Keeps up to `max_rank[k]` leading vectors for mode `k`.
    pub fn new(y_w: &Tensor3, max_rank: [usize; 3]) -> Result<Self> {
        let dims = y_w.dims();
        let mut factors: [Matrix; 3] = Default::default();
        for k in 0..3 {
            let r = max_rank[k].clamp(1, dims[k]);
            factors[k] = crate::tensor::leading_left_singular_vectors(&y_w.unfold(k + 1)?, r)?;
        }
        Ok(Self { y_w: y_w.clone(), factors })
    }

    fn factor(&self, mode: usize, r: usize) -> Result<Matrix> {
        let f = &self.factors[mode];
        if r > f.cols() {
            return Err(Error::argument(format!("cache holds {} vectors for mode {}, {} requested", f.cols(), mode + 1, r)));
        }
        Ok(f.leading_columns(r))
    }

    /// Initial model for `rank`; see [`initialize`].
    pub fn initialize(&self, projector: Option<&SieveProjector>, rank: MultilinearRank) -> Result<TuckerModel> {
        rank.validate(self.y_w.dims())?;
        if let Some(p) = projector {
            check_sieve(p, self.y_w.dims()[0], rank)?;
        }
        let mut u1 = self.factor(0, rank.r1)?;
        let u2 = self.factor(1, rank.r2)?;
        let u3 = self.factor(2, rank.r3)?;
        if let Some(p) = projector {
            let (q, _) = thin_qr(&p.project(&u1)?);
            // Re-project in case the QR had to complete a deficient basis.
            u1 = p.project(&q)?;
        }
        let core = self
            .y_w
            .mode_product(&u1.transpose(), 1)?
            .mode_product(&u2.transpose(), 2)?
            .mode_product(&u3.transpose(), 3)?;
        Ok(TuckerModel { core, u1, u2, u3, b: None })
    }
}

fn check_sieve(p: &SieveProjector, n1: usize, rank: MultilinearRank) -> Result<()> {
    if p.n_rows() != n1 {
        return Err(Error::argument(format!("sieve basis has {} rows, tensor has {} subjects", p.n_rows(), n1)));
    }
    if rank.r1 > p.phi().cols() {
        return Err(Error::argument(format!(
            "rank r1={} exceeds the sieve dimension {}",
            rank.r1,
            p.phi().cols()
        )));
    }
    Ok(())
}

/// HOSVD of `Y ⊙ Ω ⊙ W`; `U₁` is projected onto `col(Φ)` and
/// re-orthonormalized, and `G = Y_w ×₁ U₁ᵀ ×₂ U₂ᵀ ×₃ U₃ᵀ`.
pub fn initialize(
    y_obs: &Tensor3,
    omega: &Tensor3,
    w: &Tensor3,
    projector: Option<&SieveProjector>,
    rank: MultilinearRank,
) -> Result<TuckerModel> {
    rank.validate(y_obs.dims())?;
    let obs = ObservedEntries::new(y_obs, omega, w)?;
    HosvdCache::new(&obs.weighted_tensor(), rank.as_array())?.initialize(projector, rank)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Block {
    U1,
    U2,
    U3,
    Core,
}

struct Fitter<'a> {
    obs: &'a ObservedEntries,
    projector: Option<&'a SieveProjector>,
    cfg: &'a FitConfig,
}

impl<'a> Fitter<'a> {
    fn project_u1(&self, u: &Matrix) -> Matrix {
        match self.projector {
            Some(p) => p.project(u).expect("shapes"),
            None => u.clone(),
        }
    }

    /// Stiefel retraction of `U_k` with the triangular factor absorbed into `G`.
    fn retract(m: &mut TuckerModel, mode: usize) {
        let u = match mode {
            1 => &m.u1,
            2 => &m.u2,
            _ => &m.u3,
        };
        let (q, r) = thin_qr(u);
        m.core = m.core.mode_product(&r, mode).expect("shapes");
        match mode {
            1 => m.u1 = q,
            2 => m.u2 = q,
            _ => m.u3 = q,
        }
    }

    fn trim(&self, m: &mut TuckerModel) {
        let Some(inc) = self.cfg.incoherence else { return };
        let dims = m.dims();
        let rank = m.rank().as_array();
        for (k, u) in [&mut m.u1, &mut m.u2, &mut m.u3].into_iter().enumerate() {
            let bound = inc.mu0 * rank[k] as f64 / dims[k] as f64;
            for r in 0..u.rows() {
                let row = u.row_mut(r);
                let sq: f64 = row.iter().map(|v| v * v).sum();
                if sq > bound {
                    let s = (bound / sq).sqrt();
                    row.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        if self.projector.is_some() {
            m.u1 = self.project_u1(&m.u1);
        }
        for mode in 1..=3 {
            let norm = spectral_norm(&m.core.unfold(mode).expect("mode")).unwrap_or(0.0);
            if norm > inc.l0 {
                m.core = m.core.scale(inc.l0 / norm);
            }
        }
    }

    /// Applies `param ← param − η·dir` for one block plus the projections.
    fn step_block(&self, m: &TuckerModel, block: Block, dir: &Dir, eta: f64) -> TuckerModel {
        let mut next = m.clone();
        match (block, dir) {
            (Block::U1, Dir::Mat(d)) => {
                next.u1 = m.u1.add_scaled(d, -eta).expect("shapes");
                if self.cfg.orthonormalize_u1 {
                    Self::retract(&mut next, 1);
                }
            }
            (Block::U2, Dir::Mat(d)) => {
                next.u2 = m.u2.add_scaled(d, -eta).expect("shapes");
                Self::retract(&mut next, 2);
            }
            (Block::U3, Dir::Mat(d)) => {
                next.u3 = m.u3.add_scaled(d, -eta).expect("shapes");
                Self::retract(&mut next, 3);
            }
            (Block::Core, Dir::Core(d)) => {
                next.core = m.core.zip_with(d, |a, b| a - eta * b).expect("shapes");
            }
            _ => unreachable!("direction kind matches block"),
        }
        self.trim(&mut next);
        next
    }

    /// Change of the observed model values per unit step along `dir`.
    fn directional_values(&self, m: &TuckerModel, block: Block, dir: &Dir) -> Vec<f64> {
        match (block, dir) {
            (Block::U1, Dir::Mat(d)) => {
                let c = ObservedEntries::partial(&m.core, &m.u2, &m.u3);
                self.obs.values(d, &c)
            }
            (Block::U2, Dir::Mat(d)) => {
                let c = ObservedEntries::partial(&m.core, d, &m.u3);
                self.obs.values(&m.u1, &c)
            }
            (Block::U3, Dir::Mat(d)) => {
                let c = ObservedEntries::partial(&m.core, &m.u2, d);
                self.obs.values(&m.u1, &c)
            }
            (Block::Core, Dir::Core(d)) => {
                let c = ObservedEntries::partial(d, &m.u2, &m.u3);
                self.obs.values(&m.u1, &c)
            }
            _ => unreachable!(),
        }
    }

    fn first_trial(&self, m: &TuckerModel, block: Block, dir: &Dir, slope: f64) -> f64 {
        match self.cfg.step {
            StepRule::Fixed(eta) => eta,
            StepRule::Backtracking => 1.0,
            StepRule::BlockExact => {
                let dx = self.directional_values(m, block, dir);
                let curv: f64 = (0..self.obs.len()).map(|e| self.obs.w[e] * dx[e] * dx[e]).sum();
                if curv > 0.0 && curv.is_finite() {
                    slope / curv
                } else {
                    1.0
                }
            }
        }
    }

    /// One line-searched block update; returns the new loss if a step was taken.
    fn update_block(&self, m: &mut TuckerModel, block: Block, loss: f64, iter: usize) -> Result<Option<f64>> {
        let g = self.obs.gradients(m);
        let dir = match block {
            Block::U1 => Dir::Mat(self.project_u1(&g.u1)),
            Block::U2 => Dir::Mat(g.u2),
            Block::U3 => Dir::Mat(g.u3),
            Block::Core => Dir::Core(g.core),
        };
        // Directional derivative along −dir (for U₁ this is ⟨g, P g⟩ = ‖P g‖²).
        let slope = dir.norm_sq();
        if !slope.is_finite() {
            return Err(Error::numerical(format!("non-finite gradient at iteration {iter}")));
        }
        if slope == 0.0 {
            return Ok(None);
        }
        let mut eta = self.first_trial(m, block, &dir, slope);
        let fixed = matches!(self.cfg.step, StepRule::Fixed(_));
        for _ in 0..=self.cfg.max_halvings {
            let cand = self.step_block(m, block, &dir, eta);
            let new_loss = self.obs.loss(&cand);
            if new_loss.is_nan() {
                return Err(Error::numerical(format!(
                    "loss became NaN at iteration {iter} ({block:?} block, step {eta:.3e})"
                )));
            }
            if fixed || (new_loss <= loss - self.cfg.armijo * eta * slope && new_loss <= loss) {
                *m = cand;
                return Ok(Some(new_loss));
            }
            eta *= 0.5;
        }
        Ok(None)
    }

    fn joint_update(&self, m: &mut TuckerModel, loss: f64, iter: usize) -> Result<Option<f64>> {
        let g = self.obs.gradients(m);
        let d1 = self.project_u1(&g.u1);
        let slope = d1.frobenius_sq() + g.u2.frobenius_sq() + g.u3.frobenius_sq() + g.core.frobenius_sq();
        if !slope.is_finite() {
            return Err(Error::numerical(format!("non-finite gradient at iteration {iter}")));
        }
        if slope == 0.0 {
            return Ok(None);
        }
        let fixed = matches!(self.cfg.step, StepRule::Fixed(_));
        let mut eta = match self.cfg.step {
            StepRule::Fixed(e) => e,
            _ => 1.0,
        };
        for _ in 0..=self.cfg.max_halvings {
            let mut cand = m.clone();
            cand.u1 = m.u1.add_scaled(&d1, -eta)?;
            cand.u2 = m.u2.add_scaled(&g.u2, -eta)?;
            cand.u3 = m.u3.add_scaled(&g.u3, -eta)?;
            cand.core = m.core.zip_with(&g.core, |a, b| a - eta * b)?;
            if self.cfg.orthonormalize_u1 {
                Self::retract(&mut cand, 1);
            }
            Self::retract(&mut cand, 2);
            Self::retract(&mut cand, 3);
            self.trim(&mut cand);
            let new_loss = self.obs.loss(&cand);
            if new_loss.is_nan() {
                return Err(Error::numerical(format!("loss became NaN at iteration {iter} (step {eta:.3e})")));
            }
            if fixed || (new_loss <= loss - self.cfg.armijo * eta * slope && new_loss <= loss) {
                *m = cand;
                return Ok(Some(new_loss));
            }
            eta *= 0.5;
        }
        Ok(None)
    }

    fn run(&self, mut m: TuckerModel) -> Result<(TuckerModel, FitReport)> {
        let mut loss = self.obs.loss(&m);
        if !loss.is_finite() {
            return Err(Error::numerical("initial loss is not finite"));
        }
        let mut traj = vec![loss];
        let mut converged = false;
        let mut iters = 0;
        // Below this the fit interpolates the data to rounding error.
        let floor = 1e-28 * self.obs.scale();
        while iters < self.cfg.max_iters {
            if loss <= floor {
                converged = true;
                break;
            }
            iters += 1;
            let mut moved = false;
            match self.cfg.scheme {
                UpdateScheme::Blockwise => {
                    for block in [Block::U1, Block::U2, Block::U3, Block::Core] {
                        if let Some(l) = self.update_block(&mut m, block, loss, iters)? {
                            moved |= l < loss;
                            loss = l;
                        }
                    }
                }
                UpdateScheme::Joint => {
                    if let Some(l) = self.joint_update(&mut m, loss, iters)? {
                        moved = l < loss;
                        loss = l;
                    }
                }
            }
            traj.push(loss);
            if !moved {
                converged = true;
                break;
            }
            let w = self.cfg.window;
            if traj.len() > w {
                let past = traj[traj.len() - 1 - w];
                if past - loss <= self.cfg.tol * past {
                    converged = true;
                    break;
                }
            }
        }
        debug!("fit stopped after {iters} iterations, loss {loss:.6e}, converged {converged}");
        if let Some(p) = self.projector {
            m.b = Some(p.coefficients(&m.u1)?);
        }
        let report = FitReport {
            loss_trajectory: traj,
            final_loss: loss,
            iterations: iters,
            converged,
            rank: Some(m.rank()),
            bic_table: Vec::new(),
        };
        Ok((m, report))
    }
}

enum Dir {
    Mat(Matrix),
    Core(Tensor3),
}

impl Dir {
    fn norm_sq(&self) -> f64 {
        match self {
            Dir::Mat(m) => m.frobenius_sq(),
            Dir::Core(t) => t.frobenius_sq(),
        }
    }
}

/// Runs the descent from a given starting model.
pub fn fit_from(
    y_obs: &Tensor3,
    omega: &Tensor3,
    w: &Tensor3,
    projector: Option<&SieveProjector>,
    config: &FitConfig,
    start: TuckerModel,
) -> Result<(TuckerModel, FitReport)> {
    config.validate()?;
    check_conformable(y_obs, &start)?;
    let obs = ObservedEntries::new(y_obs, omega, w)?;
    if let Some(p) = projector {
        check_sieve(p, y_obs.dims()[0], start.rank())?;
    }
    Fitter { obs: &obs, projector, cfg: config }.run(start)
}

/// HOSVD initialization followed by projected gradient descent.
pub fn fit(
    y_obs: &Tensor3,
    omega: &Tensor3,
    w: &Tensor3,
    projector: Option<&SieveProjector>,
    config: &FitConfig,
) -> Result<(TuckerModel, FitReport)> {
    config.validate()?;
    let start = initialize(y_obs, omega, w, projector, config.rank)?;
    let obs = ObservedEntries::new(y_obs, omega, w)?;
    if config.init == InitRule::Weighted || obs.uniform_weights() {
        return fit_from(y_obs, omega, w, projector, config, start);
    }
    let plain = HosvdCache::new(&obs.plain_tensor(), config.rank.as_array())?.initialize(projector, config.rank)?;
    let fitter = Fitter { obs: &obs, projector, cfg: config };
    better_of(fitter.run(start)?, fitter.run(plain)?)
}

/// Ties keep the first run.
fn better_of(a: (TuckerModel, FitReport), b: (TuckerModel, FitReport)) -> Result<(TuckerModel, FitReport)> {
    Ok(if b.1.final_loss < a.1.final_loss { b } else { a })
}

/// `r₁r₂r₃ + (N−r₁)r₁ + (T−r₂)r₂ + (K−r₃)r₃`.
pub fn degrees_of_freedom(dims: [usize; 3], rank: MultilinearRank) -> f64 {
    let [n, t, k] = dims.map(|d| d as f64);
    let [r1, r2, r3] = rank.as_array().map(|r| r as f64);
    r1 * r2 * r3 + (n - r1) * r1 + (t - r2) * r2 + (k - r3) * r3
}

/// `log‖√W ⊙ P_Ω(Y − X)‖²_F + log(NTK)/(NTK)·df`, from the weighted loss.
pub fn bic_from_loss(dims: [usize; 3], rank: MultilinearRank, loss: f64) -> f64 {
    let rss = 2.0 * loss;
    let floored = if rss < 1e-300 {
        warn!("zero residual in BIC; floored at 1e-300");
        1e-300
    } else {
        rss
    };
    let ntk = (dims[0] * dims[1] * dims[2]) as f64;
    floored.ln() + ntk.ln() / ntk * degrees_of_freedom(dims, rank)
}

pub fn bic(y_obs: &Tensor3, omega: &Tensor3, w: &Tensor3, model: &TuckerModel) -> Result<f64> {
    let loss = weighted_loss(y_obs, omega, w, model)?;
    Ok(bic_from_loss(y_obs.dims(), model.rank(), loss))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankGrids {
    pub r1: Vec<usize>,
    pub r2: Vec<usize>,
    pub r3: Vec<usize>,
}

impl Default for RankGrids {
    fn default() -> Self {
        Self { r1: vec![1, 3, 5, 7], r2: vec![2, 4, 6], r3: vec![6, 8, 10] }
    }
}

impl RankGrids {
    pub fn new(r1: Vec<usize>, r2: Vec<usize>, r3: Vec<usize>) -> Self {
        let norm = |mut v: Vec<usize>| {
            v.sort_unstable();
            v.dedup();
            v
        };
        Self { r1: norm(r1), r2: norm(r2), r3: norm(r3) }
    }

    /// Adds `rank` to the grids if missing.
    pub fn augmented(&self, rank: MultilinearRank) -> Self {
        let add = |v: &Vec<usize>, r| {
            let mut v = v.clone();
            v.push(r);
            v
        };
        Self::new(add(&self.r1, rank.r1), add(&self.r2, rank.r2), add(&self.r3, rank.r3))
    }
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub rank: MultilinearRank,
    pub table: Vec<BicRow>,
    pub model: TuckerModel,
    pub report: FitReport,
}

/// Sequential BIC search: draw `r₁†, r₂†`, choose `r₃`, then `r₁`, then `r₂`,
/// repeated for `sweeps` rounds. Ties go to the smaller rank.
pub fn tune_ranks(
    y_obs: &Tensor3,
    omega: &Tensor3,
    w: &Tensor3,
    projector: Option<&SieveProjector>,
    grids: &RankGrids,
    config: &FitConfig,
    sweeps: usize,
) -> Result<TuneResult> {
    config.validate()?;
    let grids = RankGrids::new(grids.r1.clone(), grids.r2.clone(), grids.r3.clone());
    if grids.r1.is_empty() || grids.r2.is_empty() || grids.r3.is_empty() {
        return Err(Error::argument("rank grids must be nonempty"));
    }
    let dims = y_obs.dims();
    let d_phi = projector.map(|p| p.phi().cols()).unwrap_or(usize::MAX);
    let feasible = |mode: usize, r: usize| r >= 1 && r <= dims[mode] && (mode != 0 || r <= d_phi);
    let mut filtered: [Vec<usize>; 3] = Default::default();
    for (k, g) in [&grids.r1, &grids.r2, &grids.r3].into_iter().enumerate() {
        for &r in g {
            if feasible(k, r) {
                filtered[k].push(r);
            } else {
                warn!("rank {r} infeasible for mode {} (size {}); skipped", k + 1, dims[k]);
            }
        }
        if filtered[k].is_empty() {
            return Err(Error::argument(format!("no feasible rank in the mode-{} grid", k + 1)));
        }
    }

    let obs = ObservedEntries::new(y_obs, omega, w)?;
    let max_rank = [0, 1, 2].map(|k| *filtered[k].iter().max().unwrap());
    let cache = HosvdCache::new(&obs.weighted_tensor(), max_rank)?;
    let plain_cache = match config.init {
        InitRule::WeightedOrPlain if !obs.uniform_weights() => Some(HosvdCache::new(&obs.plain_tensor(), max_rank)?),
        _ => None,
    };
    let fitter = Fitter { obs: &obs, projector, cfg: config };

    let mut memo: BTreeMap<MultilinearRank, (f64, TuckerModel, FitReport)> = BTreeMap::new();
    let mut table = Vec::new();
    let mut evaluate = |rank: MultilinearRank| -> Result<f64> {
        if !memo.contains_key(&rank) {
            let mut best = fitter.run(cache.initialize(projector, rank)?)?;
            if let Some(pc) = &plain_cache {
                best = better_of(best, fitter.run(pc.initialize(projector, rank)?)?)?;
            }
            let (model, report) = best;
            let bic = bic_from_loss(dims, rank, report.final_loss);
            memo.insert(rank, (bic, model, report));
        }
        let (bic, _, report) = &memo[&rank];
        table.push(BicRow { r1: rank.r1, r2: rank.r2, r3: rank.r3, bic: *bic, loss: report.final_loss });
        Ok(*bic)
    };

    let mut rng = rng::stream(config.seed, "tune-ranks", 0);
    let mut current = [
        *filtered[0].choose(&mut rng).unwrap(),
        *filtered[1].choose(&mut rng).unwrap(),
        filtered[2][0],
    ];
    for _ in 0..sweeps.max(1) {
        for mode in [2usize, 0, 1] {
            let mut best: Option<(f64, usize)> = None;
            for &r in &filtered[mode] {
                let mut cand = current;
                cand[mode] = r;
                let b = evaluate(MultilinearRank::new(cand[0], cand[1], cand[2]))?;
                if best.map_or(true, |(bb, _)| b < bb) {
                    best = Some((b, r));
                }
            }
            current[mode] = best.unwrap().1;
        }
    }
    let rank = MultilinearRank::new(current[0], current[1], current[2]);
    let (_, model, mut report) = memo.remove(&rank).expect("selected rank was evaluated");
    report.bic_table = table.clone();
    Ok(TuneResult { rank, table, model, report })
}

/// `‖P_Φ^⊥ Û₁‖_F` where `Û₁` are the leading mode-1 singular vectors of the
/// completed tensor: how much of the fitted subject structure lies outside
/// the sieve space.
pub fn sieve_residual_diagnostic(model: &TuckerModel, projector: &SieveProjector) -> Result<f64> {
    let x = model.reconstruct()?;
    let u = crate::tensor::leading_left_singular_vectors(&x.unfold(1)?, model.rank().r1)?;
    Ok(u.sub(&projector.project(&u)?)?.frobenius_norm())
}

/// Largest eigenvalue-based check that `u` has orthonormal columns.
pub fn stiefel_defect(u: &Matrix) -> f64 {
    u.orthonormality_defect()
}

/// Singular values of the mode-`mode` unfolding of a completed tensor.
pub fn unfolding_spectrum(x: &Tensor3, mode: usize) -> Result<Vec<f64>> {
    Ok(singular_values(&x.unfold(mode)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sieve::{build_basis, SieveSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, d: [usize; 3]) -> Tensor3 {
        Tensor3::from_fn(d, |_, _, _| rng.sample(StandardNormal))
    }

    fn random_model(rng: &mut ChaCha8Rng, dims: [usize; 3], r: [usize; 3]) -> TuckerModel {
        TuckerModel {
            core: rand_tensor(rng, r),
            u1: rand_mat(rng, dims[0], r[0]),
            u2: thin_qr(&rand_mat(rng, dims[1], r[1])).0,
            u3: thin_qr(&rand_mat(rng, dims[2], r[2])).0,
            b: None,
        }
    }

    fn random_mask(rng: &mut ChaCha8Rng, d: [usize; 3], p: f64) -> Tensor3 {
        Tensor3::from_fn(d, |_, _, _| if rng.gen::<f64>() < p { 1.0 } else { 0.0 })
    }

    #[test]
    fn loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = [5, 4, 3];
        let m = random_model(&mut rng, dims, [2, 2, 2]);
        let x = m.reconstruct().unwrap();
        let ones = Tensor3::filled(5, 4, 3, 1.0);
        assert_eq!(weighted_loss(&x, &ones, &ones, &m).unwrap(), 0.0);
        let y = rand_tensor(&mut rng, dims);
        let full = weighted_loss(&y, &ones, &ones, &m).unwrap();
        assert!((full - 0.5 * y.sub(&x).unwrap().frobenius_sq()).abs() < 1e-12);
        let omega = random_mask(&mut rng, dims, 0.4);
        let w = Tensor3::from_fn(dims, |_, _, _| rng.gen_range(0.5..3.0));
        let mut s = 0.0;
        for i in 0..5 {
            for t in 0..4 {
                for l in 0..3 {
                    s += 0.5 * omega.get(i, t, l) * w.get(i, t, l) * (y.get(i, t, l) - x.get(i, t, l)).powi(2);
                }
            }
        }
        assert!((weighted_loss(&y, &omega, &w, &m).unwrap() - s).abs() < 1e-12);
        assert!(weighted_loss(&Tensor3::zeros(4, 4, 3), &ones, &ones, &m).is_err());
    }

    #[test]
    fn sparse_and_dense_gradients_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = [6, 5, 4];
        let m = random_model(&mut rng, dims, [2, 3, 2]);
        let y = rand_tensor(&mut rng, dims);
        let omega = random_mask(&mut rng, dims, 0.5);
        let w = Tensor3::from_fn(dims, |_, _, _| rng.gen_range(0.5..2.0));
        let dense = gradients(&y, &omega, &w, &m).unwrap();
        let sparse = ObservedEntries::new(&y, &omega, &w).unwrap().gradients(&m);
        assert!(dense.core.max_abs_diff(&sparse.core) < 1e-10);
        assert!(dense.u1.max_abs_diff(&sparse.u1) < 1e-10);
        assert!(dense.u2.max_abs_diff(&sparse.u2) < 1e-10);
        assert!(dense.u3.max_abs_diff(&sparse.u3) < 1e-10);
    }

    #[test]
    fn gradients_vanish_at_interpolation_and_zero_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = [4, 3, 3];
        let m = random_model(&mut rng, dims, [2, 2, 2]);
        let x = m.reconstruct().unwrap();
        let ones = Tensor3::filled(4, 3, 3, 1.0);
        let g = gradients(&x, &ones, &ones, &m).unwrap();
        assert!(g.core.max_norm() < 1e-12 && g.u1.max_abs() < 1e-12 && g.u2.max_abs() < 1e-12 && g.u3.max_abs() < 1e-12);
        let y = rand_tensor(&mut rng, dims);
        let g = gradients(&y, &ones, &Tensor3::zeros(4, 3, 3), &m).unwrap();
        assert!(g.core.max_norm() == 0.0 && g.u1.max_abs() == 0.0 && g.u2.max_abs() == 0.0 && g.u3.max_abs() == 0.0);
    }

    #[test]
    fn bic_arithmetic() {
        assert_eq!(degrees_of_freedom([4, 4, 4], MultilinearRank::new(1, 1, 1)), 10.0);
        let dims = [4, 4, 4];
        let a = bic_from_loss(dims, MultilinearRank::new(1, 1, 1), 0.5);
        let b = bic_from_loss(dims, MultilinearRank::new(2, 2, 2), 0.5);
        assert!(a < b);
        let want = 1f64.ln() + 64f64.ln() / 64.0 * 10.0;
        assert!((a - want).abs() < 1e-15);
        assert!(bic_from_loss(dims, MultilinearRank::new(1, 1, 1), 0.0).is_finite());
    }

    #[test]
    fn constant_tensor_rank_one() {
        let y = Tensor3::filled(5, 4, 3, 2.5);
        let ones = Tensor3::filled(5, 4, 3, 1.0);
        let cfg = FitConfig::with_rank(MultilinearRank::new(1, 1, 1));
        let (m, rep) = fit(&y, &ones, &ones, None, &cfg).unwrap();
        assert!(m.reconstruct().unwrap().max_abs_diff(&y) < 1e-12);
        assert!(rep.iterations <= 1);
    }

    #[test]
    fn initialization_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = [12, 5, 4];
        let x0 = rand_mat(&mut rng, 12, 2);
        let phi = build_basis(&x0, SieveSpec::legendre(2)).unwrap();
        let proj = SieveProjector::new(&phi).unwrap();
        let mut m = random_model(&mut rng, dims, [2, 2, 2]);
        m.u1 = phi.matmul(&rand_mat(&mut rng, phi.cols(), 2)).unwrap();
        let y = m.reconstruct().unwrap();
        let ones = Tensor3::filled(12, 5, 4, 1.0);
        let init = initialize(&y, &ones, &ones, Some(&proj), MultilinearRank::new(2, 2, 2)).unwrap();
        let rel = init.reconstruct().unwrap().sub(&y).unwrap().frobenius_norm() / y.frobenius_norm();
        assert!(rel < 1e-8);

        let ident = SieveProjector::new(&Matrix::identity(12)).unwrap();
        let y2 = rand_tensor(&mut rng, dims);
        let r = MultilinearRank::new(2, 2, 2);
        let a = initialize(&y2, &ones, &ones, Some(&ident), r).unwrap();
        let b = initialize(&y2, &ones, &ones, None, r).unwrap();
        assert!(a.u1.max_abs_diff(&b.u1) < 1e-10);
        assert!(a.core.max_abs_diff(&b.core) < 1e-10);

        let z = initialize(&Tensor3::zeros(12, 5, 4), &ones, &ones, None, r).unwrap();
        assert_eq!(z.core.max_norm(), 0.0);
        assert!(initialize(&y2, &ones, &ones, None, MultilinearRank::new(13, 1, 1)).is_err());
    }

    #[test]
    fn interpolation_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = [6, 4, 4];
        let mut m = random_model(&mut rng, dims, [2, 2, 2]);
        m.u1 = thin_qr(&m.u1).0;
        let y = m.reconstruct().unwrap();
        let omega = random_mask(&mut rng, dims, 0.5);
        let ones = Tensor3::filled(6, 4, 4, 1.0);
        let y_obs = y.hadamard(&omega).unwrap();
        let (out, rep) = fit_from(&y_obs, &omega, &ones, None, &FitConfig::with_rank(m.rank()), m.clone()).unwrap();
        assert_eq!(out.core, m.core);
        assert_eq!(out.u1, m.u1);
        assert_eq!(out.u2, m.u2);
        assert_eq!(out.u3, m.u3);
        assert_eq!(rep.loss_trajectory, vec![0.0]);
    }

    #[test]
    fn planted_recovery_with_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, t, k) = (30, 12, 8);
        let x0 = rand_mat(&mut rng, n, 2);
        let phi = build_basis(&x0, SieveSpec::legendre(2)).unwrap();
        let proj = SieveProjector::new(&phi).unwrap();
        let truth = TuckerModel {
            core: rand_tensor(&mut rng, [2, 2, 2]).scale(5.0),
            u1: thin_qr(&phi.matmul(&rand_mat(&mut rng, phi.cols(), 2)).unwrap()).0,
            u2: thin_qr(&rand_mat(&mut rng, t, 2)).0,
            u3: thin_qr(&rand_mat(&mut rng, k, 2)).0,
            b: None,
        };
        let y = truth.reconstruct().unwrap();
        let omega = random_mask(&mut rng, [n, t, k], 0.4);
        let ones = Tensor3::filled(n, t, k, 1.0);
        let y_obs = y.hadamard(&omega).unwrap();
        let cfg = FitConfig { max_iters: 500, ..FitConfig::with_rank(MultilinearRank::new(2, 2, 2)) };
        let (m, rep) = fit(&y_obs, &omega, &ones, Some(&proj), &cfg).unwrap();
        for w in rep.loss_trajectory.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(m.u2.orthonormality_defect() < 1e-8 && m.u3.orthonormality_defect() < 1e-8);
        assert!(proj.project(&m.u1).unwrap().max_abs_diff(&m.u1) < 1e-8);
        let rel = m.reconstruct().unwrap().sub(&y).unwrap().frobenius_norm() / y.frobenius_norm();
        assert!(rel < 1e-3, "relative error {rel} after {} iterations", rep.iterations);
        // Sieve transfer reproduces the training rows.
        let again = m.predict_from_basis(&phi).unwrap();
        assert!(again.max_abs_diff(&m.reconstruct().unwrap()) < 1e-8);
    }

    #[test]
    fn plain_start_guards_against_dominant_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let dims = [30, 8, 8];
        let truth = random_model(&mut rng, dims, [2, 1, 2]);
        let y = truth.reconstruct().unwrap();
        let omega = random_mask(&mut rng, dims, 0.3);
        let mut w = Tensor3::filled(30, 8, 8, 1.0);
        let hot = (0..y.len()).find(|&o| omega.as_slice()[o] == 1.0).unwrap();
        w.as_mut_slice()[hot] = 1e6;
        let y_obs = y.hadamard(&omega).unwrap();
        let base = FitConfig { max_iters: 300, ..FitConfig::with_rank(MultilinearRank::new(2, 1, 2)) };
        let (_, lit) = fit(&y_obs, &omega, &w, None, &FitConfig { init: InitRule::Weighted, ..base }).unwrap();
        let obs = ObservedEntries::new(&y_obs, &omega, &w).unwrap();
        let plain_start = HosvdCache::new(&obs.plain_tensor(), [2, 1, 2]).unwrap().initialize(None, base.rank).unwrap();
        let (_, plain) = fit_from(&y_obs, &omega, &w, None, &base, plain_start).unwrap();
        let (_, both) = fit(&y_obs, &omega, &w, None, &base).unwrap();
        assert_eq!(both.final_loss, lit.final_loss.min(plain.final_loss));
        assert!(both.final_loss < lit.final_loss);
        assert!(both.loss_trajectory.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn joint_and_backtracking_schemes_are_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dims = [10, 6, 4];
        let y = rand_tensor(&mut rng, dims);
        let omega = random_mask(&mut rng, dims, 0.6);
        let w = Tensor3::from_fn(dims, |_, _, _| rng.gen_range(1.0..4.0));
        for (scheme, step) in [
            (UpdateScheme::Joint, StepRule::Backtracking),
            (UpdateScheme::Blockwise, StepRule::Backtracking),
            (UpdateScheme::Blockwise, StepRule::BlockExact),
        ] {
            let cfg = FitConfig { scheme, step, max_iters: 100, ..FitConfig::with_rank(MultilinearRank::new(2, 2, 2)) };
            let (_, rep) = fit(&y.hadamard(&omega).unwrap(), &omega, &w, None, &cfg).unwrap();
            assert!(rep.loss_trajectory.windows(2).all(|p| p[1] <= p[0]), "{scheme:?}/{step:?}");
            assert!(rep.final_loss < rep.loss_trajectory[0]);
        }
    }

    #[test]
    fn incoherence_trimming_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dims = [10, 6, 4];
        let y = rand_tensor(&mut rng, dims);
        let ones = Tensor3::filled(10, 6, 4, 1.0);
        let inc = Incoherence { mu0: 3.0, l0: 4.0 };
        let cfg = FitConfig { incoherence: Some(inc), max_iters: 50, ..FitConfig::with_rank(MultilinearRank::new(2, 2, 2)) };
        let (m, rep) = fit(&y, &ones, &ones, None, &cfg).unwrap();
        assert!(rep.loss_trajectory.windows(2).all(|p| p[1] <= p[0]));
        for (u, d) in [(&m.u2, 6.0), (&m.u3, 4.0)] {
            for r in 0..u.rows() {
                let sq: f64 = u.row(r).iter().map(|v| v * v).sum();
                assert!(sq <= 3.0 * 2.0 / d + 1e-9);
            }
        }
        for mode in 1..=3 {
            assert!(spectral_norm(&m.core.unfold(mode).unwrap()).unwrap() <= 4.0 + 1e-9);
        }
    }

    #[test]
    fn orthonormal_u1_option() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims = [8, 5, 4];
        let y = rand_tensor(&mut rng, dims);
        let ones = Tensor3::filled(8, 5, 4, 1.0);
        let cfg = FitConfig { orthonormalize_u1: true, max_iters: 30, ..FitConfig::with_rank(MultilinearRank::new(2, 2, 2)) };
        let (m, _) = fit(&y, &ones, &ones, None, &cfg).unwrap();
        assert!(m.u1.orthonormality_defect() < 1e-10);
    }

    #[test]
    fn tuning_with_singleton_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dims = [8, 5, 4];
        let y = rand_tensor(&mut rng, dims);
        let ones = Tensor3::filled(8, 5, 4, 1.0);
        let grids = RankGrids::new(vec![2], vec![2], vec![3]);
        let res = tune_ranks(&y, &ones, &ones, None, &grids, &FitConfig { max_iters: 20, ..Default::default() }, 1).unwrap();
        assert_eq!(res.rank, MultilinearRank::new(2, 2, 3));
        assert_eq!(res.table.len(), 3);
        // Infeasible entries are skipped, not fatal.
        let grids = RankGrids::new(vec![2, 50], vec![2], vec![3]);
        assert!(tune_ranks(&y, &ones, &ones, None, &grids, &FitConfig { max_iters: 5, ..Default::default() }, 1).is_ok());
        let grids = RankGrids::new(vec![50], vec![2], vec![3]);
        assert!(tune_ranks(&y, &ones, &ones, None, &grids, &FitConfig::default(), 1).is_err());
    }

    #[test]
    fn model_directory_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut m = random_model(&mut rng, [6, 4, 3], [2, 2, 1]);
        m.b = Some(rand_mat(&mut rng, 3, 2));
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path(), serde_json::json!({"note": "x"})).unwrap();
        assert_eq!(TuckerModel::load(dir.path()).unwrap(), m);
    }

    #[test]
    fn nonfinite_inputs_rejected() {
        let mut y = Tensor3::filled(3, 3, 2, 1.0);
        y.set(0, 0, 0, f64::NAN);
        let ones = Tensor3::filled(3, 3, 2, 1.0);
        assert!(matches!(
            fit(&y, &ones, &ones, None, &FitConfig::default()),
            Err(Error::Argument(_))
        ));
    }
}
