//! Joint dependency scores for latent vectors.
//!
//! Latents are standardized with per-dimension statistics `(μ, σ)`, pushed
//! through a marginal CDF and back through a quantile function, and then
//! scored either by a multivariate Gaussian / Student-t log-likelihood or by
//! a Gaussian / Student-t copula log-density. The scale matrix is Σ = LLᵀ
//! with L unpacked from a parameter vector ϕ (row-major lower triangle,
//! softplus on the diagonal).

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::special::{self, LN_2PI};

/// Lower and upper clamp applied to every PIT value.
pub const U_CLAMP: f64 = 1e-6;
/// Smallest Cholesky diagonal accepted before Σ is called singular.
pub const MIN_CHOLESKY_DIAG: f64 = 1e-12;
/// Reference values needed per dimension for empirical marginals.
pub const MIN_REFERENCE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Multivariate,
    Copula,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Base {
    Gaussian,
    StudentT,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalMode {
    Parametric,
    Empirical,
}

/// User-facing settings from which a [`DependencyModel`] is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DependencyConfig {
    pub family: Family,
    pub base: Base,
    pub marginal_mode: MarginalMode,
    /// Initial effective degrees of freedom (> 2).
    pub nu: f64,
    pub learn_nu: bool,
}

impl Default for DependencyConfig {
    fn default() -> Self {
        Self {
            family: Family::Copula,
            base: Base::StudentT,
            marginal_mode: MarginalMode::Parametric,
            nu: 4.0,
            learn_nu: false,
        }
    }
}

impl DependencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 2.0 && self.nu.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "dependency.nu must be finite and > 2, got {}",
                self.nu
            )));
        }
        if self.family == Family::Multivariate && self.marginal_mode == MarginalMode::Empirical {
            return Err(Error::InvalidConfig(
                "empirical marginals are only available for the copula family".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyModel {
    pub family: Family,
    pub base: Base,
    pub marginal_mode: MarginalMode,
    pub dim: usize,
    /// Packed Cholesky parameters, length d(d+1)/2.
    pub phi: Vec<f64>,
    /// Raw degrees-of-freedom parameter; ν = 2 + softplus(ν_raw).
    pub nu_raw: Option<f64>,
    pub learn_nu: bool,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Sorted per-dimension latents of normal training frames (empirical mode).
    pub reference: Option<Vec<Vec<f64>>>,
}

/// Number of packed parameters for a d×d lower triangle.
pub fn packed_len(d: usize) -> usize {
    d * (d + 1) / 2
}

fn packed_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

/// Unpacks ϕ into a dense row-major lower-triangular L with a softplus
/// diagonal.
pub fn unpack_cholesky(phi: &[f64], d: usize) -> Result<Vec<f64>> {
    if phi.len() != packed_len(d) {
        return Err(Error::DimensionMismatch {
            what: "Cholesky parameter vector",
            expected: packed_len(d),
            got: phi.len(),
        });
    }
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..i {
            l[i * d + j] = phi[packed_index(i, j)];
        }
        l[i * d + i] = special::softplus(phi[packed_index(i, i)]);
    }
    Ok(l)
}

/// Inverse of [`unpack_cholesky`] for a lower-triangular L with positive
/// diagonal.
pub fn pack_cholesky(l: &[f64], d: usize) -> Result<Vec<f64>> {
    if l.len() != d * d {
        return Err(Error::DimensionMismatch {
            what: "Cholesky factor",
            expected: d * d,
            got: l.len(),
        });
    }
    let mut phi = vec![0.0; packed_len(d)];
    for i in 0..d {
        for j in 0..i {
            phi[packed_index(i, j)] = l[i * d + j];
        }
        let diag = l[i * d + i];
        if !(diag > 0.0) {
            return Err(Error::IllConditioned { min_diag: diag });
        }
        phi[packed_index(i, i)] = special::softplus_inv(diag);
    }
    Ok(phi)
}

/// Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(sigma: &[f64], d: usize) -> Result<Vec<f64>> {
    if sigma.len() != d * d {
        return Err(Error::DimensionMismatch {
            what: "covariance matrix",
            expected: d * d,
            got: sigma.len(),
        });
    }
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = sigma[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::IllConditioned { min_diag: s.max(0.0).sqrt() });
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Ok(l)
}

/// Σ = LLᵀ from packed parameters.
pub fn sigma_from_phi(phi: &[f64], d: usize) -> Result<Vec<f64>> {
    let l = unpack_cholesky(phi, d)?;
    let mut s = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..=i.min(j) {
                acc += l[i * d + k] * l[j * d + k];
            }
            s[i * d + j] = acc;
        }
    }
    Ok(s)
}

/// log det Σ = 2 Σᵢ log Lᵢᵢ.
pub fn log_det_sigma(phi: &[f64], d: usize) -> Result<f64> {
    let l = unpack_cholesky(phi, d)?;
    Ok((0..d).map(|i| 2.0 * l[i * d + i].ln()).sum())
}

/// Mid-rank empirical CDF value of `x` against an ascending reference:
/// (#{r < x} + ½·#{r = x} + ½)/(n + 1), clamped to the PIT range.
pub fn empirical_pit(x: f64, sorted_reference: &[f64]) -> f64 {
    let below = sorted_reference.partition_point(|&r| r < x);
    let not_above = sorted_reference.partition_point(|&r| r <= x);
    let rank = below as f64 + 0.5 * (not_above - below) as f64;
    let n = sorted_reference.len() as f64;
    ((rank + 0.5) / (n + 1.0)).clamp(U_CLAMP, 1.0 - U_CLAMP)
}

/// Tape handles for the trainable parts of a [`DependencyModel`].
#[derive(Debug, Clone, Copy)]
pub struct DepVars<'t> {
    pub phi: Var<'t>,
    /// Raw degrees of freedom (Student-t only).
    pub nu_raw: Option<Var<'t>>,
}

impl DependencyModel {
    /// Identity-correlation model with zero mean and unit scale.
    pub fn new(config: &DependencyConfig, dim: usize) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(Error::InvalidConfig("latent dimension must be positive".into()));
        }
        let mut phi = vec![0.0; packed_len(dim)];
        let one = special::softplus_inv(1.0);
        for i in 0..dim {
            phi[packed_index(i, i)] = one;
        }
        Ok(Self {
            family: config.family,
            base: config.base,
            marginal_mode: config.marginal_mode,
            dim,
            phi,
            nu_raw: match config.base {
                Base::StudentT => Some(special::softplus_inv(config.nu - 2.0)),
                Base::Gaussian => None,
            },
            learn_nu: config.learn_nu && config.base == Base::StudentT,
            mu: vec![0.0; dim],
            sigma: vec![1.0; dim],
            reference: None,
        })
    }

    /// Effective degrees of freedom, if Student-t.
    pub fn nu(&self) -> Option<f64> {
        self.nu_raw.map(|r| 2.0 + special::softplus(r))
    }

    pub fn set_nu(&mut self, nu: f64) -> Result<()> {
        if self.base != Base::StudentT || !(nu > 2.0) {
            return Err(Error::InvalidConfig(format!("cannot set nu = {nu} on this model")));
        }
        self.nu_raw = Some(special::softplus_inv(nu - 2.0));
        Ok(())
    }

    /// Replaces ϕ by the Cholesky factor of `sigma` (row-major d×d SPD).
    pub fn set_sigma(&mut self, sigma: &[f64]) -> Result<()> {
        let l = cholesky(sigma, self.dim)?;
        self.phi = pack_cholesky(&l, self.dim)?;
        Ok(())
    }

    pub fn sigma_matrix(&self) -> Result<Vec<f64>> {
        sigma_from_phi(&self.phi, self.dim)
    }

    /// Sets (μ, σ) to the per-dimension mean and population standard
    /// deviation of `latents` (row-major `[n, d]`); in empirical mode also
    /// stores the sorted reference columns.
    pub fn fit_marginals(&mut self, latents: &[f64]) -> Result<()> {
        let d = self.dim;
        let n = latents.len() / d;
        if n == 0 || n * d != latents.len() {
            return Err(Error::DimensionMismatch {
                what: "latent matrix length",
                expected: d,
                got: latents.len(),
            });
        }
        if let Some(i) = latents.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "latent", index: i });
        }
        let mut mu = vec![0.0; d];
        for row in latents.chunks(d) {
            for (m, v) in mu.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mu.iter_mut() {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for row in latents.chunks(d) {
            for j in 0..d {
                var[j] += (row[j] - mu[j]).powi(2);
            }
        }
        let sigma: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();
        if let Some(index) = sigma.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::ZeroScale { index });
        }
        self.mu = mu;
        self.sigma = sigma;
        if self.marginal_mode == MarginalMode::Empirical {
            self.set_reference(latents)?;
        }
        Ok(())
    }

    /// Stores sorted per-dimension reference values from `[n, d]` latents.
    pub fn set_reference(&mut self, latents: &[f64]) -> Result<()> {
        let d = self.dim;
        let n = latents.len() / d;
        if n < MIN_REFERENCE {
            return Err(Error::EmptyReference {
                needed: MIN_REFERENCE,
                got: n,
            });
        }
        let mut cols = vec![Vec::with_capacity(n); d];
        for row in latents.chunks(d) {
            for (c, &v) in cols.iter_mut().zip(row) {
                c.push(v);
            }
        }
        for c in cols.iter_mut() {
            c.sort_by(f64::total_cmp);
        }
        self.reference = Some(cols);
        Ok(())
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "latent dimension",
                expected: self.dim,
                got: z.len(),
            });
        }
        if let Some(index) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "latent", index });
        }
        Ok(())
    }

    fn check_scales(&self) -> Result<()> {
        if let Some(index) = self.sigma.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::ZeroScale { index });
        }
        Ok(())
    }

    /// Records ϕ (and ν_raw) on `tape`; trainable leaves when `trainable`.
    pub fn on_tape<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<DepVars<'t>> {
        let phi = Tensor::from_vec(self.phi.clone())?;
        let phi = if trainable { tape.param(&phi) } else { tape.leaf(&phi) };
        let nu_raw = self.nu_raw.map(|r| {
            let t = Tensor::scalar(r);
            if trainable && self.learn_nu {
                tape.param(&t)
            } else {
                tape.leaf(&t)
            }
        });
        Ok(DepVars { phi, nu_raw })
    }

    fn nu_var<'t>(&self, vars: &DepVars<'t>) -> Result<Option<Var<'t>>> {
        match (self.base, vars.nu_raw) {
            (Base::StudentT, Some(r)) => Ok(Some(r.softplus()?.add_scalar(2.0)?)),
            (Base::StudentT, None) => Err(Error::InvalidConfig("Student-t model without nu".into())),
            (Base::Gaussian, _) => Ok(None),
        }
    }

    /// L (dense `[d, d]`) and log det Σ on the tape; fails when any
    /// diagonal of L falls below [`MIN_CHOLESKY_DIAG`].
    pub fn cholesky_on_tape<'t>(&self, phi: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let d = self.dim;
        if phi.numel() != packed_len(d) {
            return Err(Error::DimensionMismatch {
                what: "Cholesky parameter vector",
                expected: packed_len(d),
                got: phi.numel(),
            });
        }
        let mut off = vec![None; d * d];
        let mut diag_pos = vec![None; d * d];
        let mut diag = Vec::with_capacity(d);
        for i in 0..d {
            for j in 0..i {
                off[i * d + j] = Some(packed_index(i, j));
            }
            diag_pos[i * d + i] = Some(packed_index(i, i));
            diag.push(Some(packed_index(i, i)));
        }
        let sp = phi.softplus()?;
        let diag_vals = sp.gather(diag, vec![d])?;
        let min_diag = diag_vals.value().into_iter().fold(f64::INFINITY, f64::min);
        if min_diag < MIN_CHOLESKY_DIAG {
            return Err(Error::IllConditioned { min_diag });
        }
        let l = if d > 1 {
            phi.gather(off, vec![d, d])?.add(sp.gather(diag_pos, vec![d, d])?)?
        } else {
            sp.gather(diag_pos, vec![1, 1])?
        };
        let log_det = diag_vals.log()?.sum()?.scale(2.0)?;
        Ok((l, log_det))
    }

    /// Per-row log-density of the batch `z` (`[B, d]` raw latents); higher
    /// means more normal.
    pub fn score_on_tape<'t>(&self, tape: &'t Tape, vars: &DepVars<'t>, z: Var<'t>) -> Result<Var<'t>> {
        self.check_scales()?;
        let mu = tape.constant(vec![self.dim], self.mu.clone())?;
        let sigma = tape.constant(vec![self.dim], self.sigma.clone())?;
        self.score_on_tape_with(tape, vars, z, mu, sigma)
    }

    /// [`Self::score_on_tape`] with the standardization statistics given as
    /// tape values (`[d]` each) instead of the stored (μ, σ).
    pub fn score_on_tape_with<'t>(
        &self,
        tape: &'t Tape,
        vars: &DepVars<'t>,
        z: Var<'t>,
        mu: Var<'t>,
        sigma: Var<'t>,
    ) -> Result<Var<'t>> {
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::DimensionMismatch {
                what: "latent batch width",
                expected: self.dim,
                got: *shape.last().unwrap_or(&0),
            });
        }
        if let Some(index) = sigma.value().iter().position(|&s| !(s > 0.0)) {
            return Err(Error::ZeroScale { index });
        }
        let nu = self.nu_var(vars)?;
        let (l, log_det) = self.cholesky_on_tape(vars.phi)?;
        let u = self.pit_on_tape(tape, z, mu, sigma, nu)?;
        let v = match nu {
            Some(nu) => u.t_quantile(nu)?,
            None => u.norm_quantile()?,
        };
        match self.family {
            Family::Multivariate => {
                let ll = joint_log_density(tape, self.dim, v, l, log_det, nu)?;
                Ok(ll.sub(sigma.log()?.sum()?)?)
            }
            Family::Copula => {
                let joint = joint_log_density(tape, self.dim, v, l, log_det, nu)?;
                let marg = univariate_log_density(v, nu)?.sum_axis(1)?;
                Ok(joint.sub(marg)?)
            }
        }
    }

    /// PIT values `[B, d]` clamped to `[1e-6, 1 − 1e-6]`.
    fn pit_on_tape<'t>(
        &self,
        tape: &'t Tape,
        z: Var<'t>,
        mu: Var<'t>,
        sigma: Var<'t>,
        nu: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        if self.family == Family::Copula && self.marginal_mode == MarginalMode::Empirical {
            let reference = self.checked_reference()?;
            let d = self.dim;
            let zs = z.value();
            let u: Vec<f64> = zs
                .iter()
                .enumerate()
                .map(|(k, &x)| empirical_pit(x, &reference[k % d]))
                .collect();
            return Ok(tape.constant(z.shape(), u)?);
        }
        let zs = z.sub(mu)?.div(sigma)?;
        let u = match nu {
            Some(nu) => zs.t_cdf(nu)?,
            None => zs.norm_cdf()?,
        };
        Ok(u.clamp(U_CLAMP, 1.0 - U_CLAMP)?)
    }

    fn checked_reference(&self) -> Result<&[Vec<f64>]> {
        let reference = self.reference.as_deref().ok_or(Error::EmptyReference {
            needed: MIN_REFERENCE,
            got: 0,
        })?;
        if reference.len() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "empirical reference columns",
                expected: self.dim,
                got: reference.len(),
            });
        }
        if let Some(short) = reference.iter().map(Vec::len).find(|&n| n < MIN_REFERENCE) {
            return Err(Error::EmptyReference {
                needed: MIN_REFERENCE,
                got: short,
            });
        }
        Ok(reference)
    }

    /// Scores of many latents (`[n, d]` row-major) with frozen parameters.
    pub fn score_batch(&self, latents: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim;
        let n = latents.len() / d;
        if n == 0 || n * d != latents.len() {
            return Err(Error::DimensionMismatch {
                what: "latent matrix length",
                expected: d,
                got: latents.len(),
            });
        }
        if let Some(index) = latents.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "latent", index });
        }
        let tape = Tape::new();
        let vars = self.on_tape(&tape, false)?;
        let z = tape.constant(vec![n, d], latents.to_vec())?;
        Ok(self.score_on_tape(&tape, &vars, z)?.value())
    }

    /// Log-density score of one latent vector; higher is more normal.
    pub fn score(&self, z: &[f64]) -> Result<f64> {
        self.check_latent(z)?;
        Ok(self.score_batch(z)?[0])
    }

    /// Standardized latent (z − μ)/σ.
    pub fn standardize(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_latent(z)?;
        self.check_scales()?;
        Ok(z.iter()
            .zip(&self.mu)
            .zip(&self.sigma)
            .map(|((x, m), s)| (x - m) / s)
            .collect())
    }

    /// PIT of a raw latent: parametric marginals act on the standardized
    /// value, empirical marginals rank the raw value against the reference.
    pub fn pit(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_latent(z)?;
        if self.family == Family::Copula && self.marginal_mode == MarginalMode::Empirical {
            let reference = self.checked_reference()?;
            return Ok(z.iter().zip(reference).map(|(&x, r)| empirical_pit(x, r)).collect());
        }
        let zs = self.standardize(z)?;
        let nu = self.nu();
        Ok(zs
            .into_iter()
            .map(|x| match nu {
                Some(nu) => special::t_cdf(x, nu),
                None => special::norm_cdf(x),
            })
            .map(|u| u.clamp(U_CLAMP, 1.0 - U_CLAMP))
            .collect())
    }

    fn require(&self, family: Family, base: Base) -> Result<()> {
        if self.family != family || self.base != base {
            return Err(Error::InvalidConfig(format!(
                "operation needs a {family:?}/{base:?} model, this one is {:?}/{:?}",
                self.family, self.base
            )));
        }
        Ok(())
    }

    /// Multivariate Gaussian log-likelihood of a raw latent.
    pub fn mv_gaussian_loglik(&self, z: &[f64]) -> Result<f64> {
        self.require(Family::Multivariate, Base::Gaussian)?;
        self.score(z)
    }

    /// Multivariate Student-t log-likelihood of a raw latent.
    pub fn mv_student_t_loglik(&self, z: &[f64]) -> Result<f64> {
        self.require(Family::Multivariate, Base::StudentT)?;
        self.score(z)
    }

    fn copula_from_u(&self, u: &[f64]) -> Result<f64> {
        if u.len() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "copula argument",
                expected: self.dim,
                got: u.len(),
            });
        }
        Ok(self.copula_batch(u)?[0])
    }

    fn copula_batch(&self, u: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim;
        let n = u.len() / d;
        if n == 0 || n * d != u.len() {
            return Err(Error::DimensionMismatch {
                what: "copula argument length",
                expected: d,
                got: u.len(),
            });
        }
        if let Some(index) = u.iter().position(|v| v.is_nan()) {
            return Err(Error::NonFinite { what: "u", index });
        }
        let tape = Tape::new();
        let vars = self.on_tape(&tape, false)?;
        let nu = self.nu_var(&vars)?;
        let (l, log_det) = self.cholesky_on_tape(vars.phi)?;
        let uu: Vec<f64> = u.iter().map(|x| x.clamp(U_CLAMP, 1.0 - U_CLAMP)).collect();
        let u = tape.constant(vec![n, d], uu)?;
        let v = match nu {
            Some(nu) => u.t_quantile(nu)?,
            None => u.norm_quantile()?,
        };
        let joint = joint_log_density(&tape, d, v, l, log_det, nu)?;
        let marg = univariate_log_density(v, nu)?.sum_axis(1)?;
        Ok(joint.sub(marg)?.value())
    }

    /// Copula log-densities of many points (`[n, d]` row-major in (0,1)).
    pub fn copula_logdensity_batch(&self, u: &[f64]) -> Result<Vec<f64>> {
        if self.family != Family::Copula {
            return Err(Error::UnsupportedFamily);
        }
        self.copula_batch(u)
    }

    /// Gaussian copula log-density at `u` ∈ (0,1)^d.
    pub fn gaussian_copula_logdensity(&self, u: &[f64]) -> Result<f64> {
        self.require(Family::Copula, Base::Gaussian)?;
        self.copula_from_u(u)
    }

    /// Student-t copula log-density at `u` ∈ (0,1)^d.
    pub fn student_t_copula_logdensity(&self, u: &[f64]) -> Result<f64> {
        self.require(Family::Copula, Base::StudentT)?;
        self.copula_from_u(u)
    }

    /// Copula log-density at `u` for either base.
    pub fn copula_logdensity(&self, u: &[f64]) -> Result<f64> {
        if self.family != Family::Copula {
            return Err(Error::UnsupportedFamily);
        }
        self.copula_from_u(u)
    }
}

/// Row-wise joint log-density of `v` (`[B, d]`) under N(0, Σ) or t_ν(0, Σ).
fn joint_log_density<'t>(
    tape: &'t Tape,
    d: usize,
    v: Var<'t>,
    l: Var<'t>,
    log_det: Var<'t>,
    nu: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let y = tape.tri_solve(l, v)?;
    let m = y.square()?.sum_axis(1)?;
    let df = d as f64;
    match nu {
        None => {
            let c = log_det.scale(-0.5)?.add_scalar(-0.5 * df * LN_2PI)?;
            Ok(m.scale(-0.5)?.add(c)?)
        }
        Some(nu) => {
            let half_nu = nu.scale(0.5)?;
            let half_nud = nu.add_scalar(df)?.scale(0.5)?;
            let c = half_nud
                .lgamma()?
                .sub(half_nu.lgamma()?)?
                .sub(nu.scale(std::f64::consts::PI)?.log()?.scale(0.5 * df)?)?
                .sub(log_det.scale(0.5)?)?;
            let kernel = m.div(nu)?.add_scalar(1.0)?.log()?.mul(half_nud)?;
            Ok(c.sub(kernel)?)
        }
    }
}

/// Element-wise univariate standard normal or t_ν log-density of `v`.
fn univariate_log_density<'t>(v: Var<'t>, nu: Option<Var<'t>>) -> Result<Var<'t>> {
    match nu {
        None => Ok(v.square()?.scale(-0.5)?.add_scalar(-0.5 * LN_2PI)?),
        Some(nu) => {
            let half_nu1 = nu.add_scalar(1.0)?.scale(0.5)?;
            let c = half_nu1
                .lgamma()?
                .sub(nu.scale(0.5)?.lgamma()?)?
                .sub(nu.scale(std::f64::consts::PI)?.log()?.scale(0.5)?)?;
            let kernel = v.square()?.div(nu)?.add_scalar(1.0)?.log()?.mul(half_nu1)?;
            Ok(c.sub(kernel)?)
        }
    }
}

/// Marginal-only score on the tape: the diagonal Gaussian log-density of
/// standardized latents, Σᵢ −½((zᵢ−μᵢ)/σᵢ)² − log σᵢ − ½ log 2π per row.
pub fn marginal_score_on_tape<'t>(tape: &'t Tape, z: Var<'t>, mu: &[f64], sigma: &[f64]) -> Result<Var<'t>> {
    if let Some(index) = sigma.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::ZeroScale { index });
    }
    let d = mu.len();
    let c: f64 = sigma.iter().map(|s| -s.ln() - 0.5 * LN_2PI).sum();
    let m = tape.constant(vec![d], mu.to_vec())?;
    let s = tape.constant(vec![d], sigma.to_vec())?;
    Ok(z.sub(m)?.div(s)?.square()?.sum_axis(1)?.scale(-0.5)?.add_scalar(c)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packing_round_trip() {
        let phi = vec![0.3, -0.2, 1.1, 0.5, 0.0, -0.7];
        let l = unpack_cholesky(&phi, 3).unwrap();
        let back = pack_cholesky(&l, 3).unwrap();
        for (a, b) in phi.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_mid_rank() {
        assert_eq!(empirical_pit(2.5, &[1.0, 2.0, 3.0, 4.0]), 0.5);
        assert_eq!(empirical_pit(2.0, &[1.0, 2.0, 3.0, 4.0]), 0.4);
        assert_eq!(empirical_pit(-9.0, &[1.0, 2.0, 3.0, 4.0]), 0.1);
    }
}
