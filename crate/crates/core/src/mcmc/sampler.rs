//! The blocked Metropolis-within-Gibbs sampler and multi-chain driver.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adapt::{refresh_points, Adapt};
use super::diagnostics::{rhat, summarize_values, SummaryRow};
use super::init::initial_state;
use super::transform::{from_unconstrained, to_unconstrained};
use super::update::{accept, fd_hessian, gibbs_tau, proposal_from_precision, propose};
use crate::error::{invalid, numerical, Result};
use crate::longitudinal::{beta_fisher_eta, expit, LN_2PI};
use crate::model::{frailty_of, FrailtyRole, IvCache, Model, ParameterState, SubjectCache, Workspace};
use crate::spec::Family;

/// Stages of one sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Beta,
    Dispersion,
    D,
    RandomEffects,
    Frailty,
    FrailtyScale,
    Recurrent,
    Causes,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Beta,
        Stage::Dispersion,
        Stage::D,
        Stage::RandomEffects,
        Stage::Frailty,
        Stage::FrailtyScale,
        Stage::Recurrent,
        Stage::Causes,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub chains: usize,
    /// Total iterations per chain, warmup included.
    pub iterations: usize,
    pub warmup: usize,
    pub thin: usize,
    pub seed: u64,
    pub target_scalar: f64,
    pub target_block: f64,
    /// Stages run in this order each sweep; stages left out stay fixed.
    pub block_order: Vec<Stage>,
    /// MH steps per sweep for each hazard block.
    pub hazard_steps: usize,
    /// MH steps per sweep for the covariance block.
    pub d_steps: usize,
    /// Update `(γ, α, α^υ, γ0)` of a hazard jointly instead of as four blocks.
    pub joint_hazard: bool,
    /// Add a move that rescales the frailty sd and all frailties together.
    pub frailty_interweave: bool,
    /// Sd of the perturbation applied to the starting values of chains > 0.
    pub jitter: f64,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    /// Also keep every retained draw of the latent variables.
    pub store_latent: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            chains: 3,
            iterations: 3000,
            warmup: 1500,
            thin: 1,
            seed: 1,
            target_scalar: 0.44,
            target_block: 0.234,
            block_order: Stage::ALL.to_vec(),
            hazard_steps: 3,
            d_steps: 5,
            joint_hazard: true,
            frailty_interweave: true,
            jitter: 0.1,
            workers: 0,
            store_latent: false,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(invalid("chains must be at least 1"));
        }
        if self.warmup >= self.iterations {
            return Err(invalid("warmup must be smaller than iterations"));
        }
        if self.thin == 0 {
            return Err(invalid("thin must be at least 1"));
        }
        for t in [self.target_scalar, self.target_block] {
            if !(t > 0.0 && t < 1.0) {
                return Err(invalid("target acceptance rates must lie in (0, 1)"));
            }
        }
        Ok(())
    }
}

/// Post-warmup acceptance of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub accepted: u64,
    pub proposed: u64,
    pub target: f64,
    /// Final proposal scale; for per-subject blocks the mean over subjects.
    pub scale: f64,
}

impl AcceptanceStats {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDraw {
    pub re: Vec<Vec<f64>>,
    pub frailty: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDraws {
    pub iterations: Vec<usize>,
    /// `values[k][p]`: retained draw `k` of parameter `p`.
    pub values: Vec<Vec<f64>>,
    pub latent: Vec<LatentDraw>,
    pub acceptance: BTreeMap<String, AcceptanceStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub monitored: Vec<bool>,
    pub chains: Vec<ChainDraws>,
}

impl PosteriorDraws {
    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Draws of parameter `p`, one vector per chain.
    pub fn column(&self, p: usize) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.values.iter().map(|v| v[p]).collect()).collect()
    }

    pub fn pooled(&self, p: usize) -> Vec<f64> {
        self.column(p).concat()
    }

    pub fn rhat(&self, p: usize) -> Result<f64> {
        let cols = self.column(p);
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        rhat(&refs)
    }

    /// Largest R̂ over monitored parameters; constant parameters are skipped.
    pub fn max_rhat(&self) -> Option<f64> {
        (0..self.names.len())
            .filter(|&p| self.monitored[p])
            .filter_map(|p| self.rhat(p).ok())
            .fold(None, |m, r| Some(m.map_or(r, |m: f64| m.max(r))))
    }

    /// Posterior mean, sd, central 95% interval, MCSE and R̂ per parameter;
    /// with `hazard_ratios` also `HR_…` rows summarizing `exp(α)`.
    pub fn summarize(&self, hazard_ratios: bool) -> Result<Vec<SummaryRow>> {
        let mut out = Vec::new();
        for (p, name) in self.names.iter().enumerate() {
            let mut row = summarize_values(name, &self.pooled(p))?;
            row.rhat = self.rhat(p).ok();
            out.push(row);
        }
        if hazard_ratios {
            for (p, name) in self.names.iter().enumerate() {
                if name.starts_with("alpha_") || name.starts_with("gamma_") {
                    let draws: Vec<f64> = self.pooled(p).iter().map(|v| v.exp()).collect();
                    out.push(summarize_values(&format!("HR_{name}"), &draws)?);
                }
            }
        }
        Ok(out)
    }

    /// Mean acceptance rate of `block` over chains.
    pub fn acceptance_rate(&self, block: &str) -> Option<f64> {
        let rates: Vec<f64> = self.chains.iter().filter_map(|c| c.acceptance.get(block).map(|a| a.rate())).collect();
        (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG stream for one `(seed, chain, iteration, subject, stage)` tuple, so
/// parallel and serial subject updates draw the same numbers.
pub fn substream(seed: u64, chain: u64, iteration: u64, subject: u64, stage: u64) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for v in [chain, iteration, subject, stage] {
        h = splitmix(h ^ v);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// `x + scale · L⁻ᵀ z` for `L` the Cholesky factor of a precision matrix.
fn propose_precision<R: Rng + ?Sized>(x: &[f64], chol_prec: &DMatrix<f64>, scale: f64, rng: &mut R) -> Vec<f64> {
    let d = x.len();
    let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let step = chol_prec.transpose().solve_upper_triangular(&z).unwrap_or(z);
    x.iter().zip(step.iter()).map(|(a, s)| a + scale * s).collect()
}

struct Prop {
    adapt: Adapt,
    chol: DMatrix<f64>,
}

impl Prop {
    fn new(dim: usize, target: f64) -> Self {
        Self { adapt: Adapt::new(dim, target), chol: DMatrix::identity(dim, dim) }
    }
}

struct HazBlock {
    name: String,
    idx: Vec<usize>,
    touches_ivs: bool,
    prop: Prop,
}

struct Chain<'m> {
    ws: Workspace<'m>,
    cfg: ChainConfig,
    chain: usize,
    rng: ChaCha8Rng,
    beta_nc: Vec<Prop>,
    disp: Vec<Prop>,
    d: Prop,
    re: Vec<Adapt>,
    re_info: Vec<DMatrix<f64>>,
    frailty: Vec<Adapt>,
    frailty_curv: Vec<f64>,
    sigma_frailty: Prop,
    interweave: Prop,
    hazard: Vec<Vec<HazBlock>>,
    hazard_info: Vec<DMatrix<f64>>,
}

fn stats(name: &str, a: &Adapt, out: &mut BTreeMap<String, AcceptanceStats>) {
    out.insert(
        name.to_string(),
        AcceptanceStats { accepted: a.accepted, proposed: a.proposed, target: a.target, scale: a.scale() },
    );
}

impl<'m> Chain<'m> {
    fn new(model: &'m Model, cfg: &ChainConfig, chain: usize) -> Result<Self> {
        let mut rng = substream(cfg.seed, chain as u64, u64::MAX, u64::MAX, 0);
        let state = initial_state(model, chain, cfg.jitter, &mut rng);
        let ws = Workspace::new(model, state)?;
        if !ws.log_posterior().is_finite() {
            return Err(numerical("the initial log posterior is not finite"));
        }
        let (ts, tb) = (cfg.target_scalar, cfg.target_block);
        let target = |d: usize| if d == 1 { ts } else { tb };
        let n = model.n_subjects();
        let hazard = model
            .hazards
            .iter()
            .map(|hm| {
                let s = &hm.config.stratum;
                let [rg, ra, ru, r0] = hm.theta_ranges();
                let parts: Vec<(String, std::ops::Range<usize>, bool)> = if cfg.joint_hazard {
                    vec![(format!("hazard[{s}]"), 0..hm.theta_len(), true)]
                } else {
                    vec![
                        (format!("gamma[{s}]"), rg, false),
                        (format!("alpha[{s}]"), ra, true),
                        (format!("alpha_frailty[{s}]"), ru, false),
                        (format!("gamma0[{s}]"), r0, true),
                    ]
                };
                parts
                    .into_iter()
                    .filter(|p| !p.1.is_empty())
                    .map(|(name, r, touches_ivs)| HazBlock {
                        name,
                        prop: Prop::new(r.len(), target(r.len())),
                        idx: r.collect(),
                        touches_ivs,
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            beta_nc: model.outcomes.iter().map(|o| Prop::new(o.noncentered.len(), target(o.noncentered.len()))).collect(),
            disp: model.outcomes.iter().map(|_| Prop::new(1, ts)).collect(),
            d: Prop::new(super::transform::n_unconstrained(model.n_re), tb),
            re: (0..n).map(|_| Adapt::new(model.n_re, target(model.n_re))).collect(),
            re_info: vec![DMatrix::zeros(model.n_re, model.n_re); n],
            frailty: (0..n).map(|_| Adapt::new(1, ts)).collect(),
            frailty_curv: vec![0.0; n],
            sigma_frailty: Prop::new(1, ts),
            interweave: Prop::new(1, ts),
            hazard,
            hazard_info: model.hazards.iter().map(|hm| DMatrix::zeros(hm.theta_len(), hm.theta_len())).collect(),
            ws,
            cfg: cfg.clone(),
            chain,
            rng,
        })
    }

    fn model(&self) -> &'m Model {
        self.ws.model
    }

    fn sub_rng(&self, iter: usize, subject: usize, stage: u64) -> ChaCha8Rng {
        substream(self.cfg.seed, self.chain as u64, iter as u64, subject as u64, stage)
    }

    // ---- targets ----

    fn disp_target(&self, j: usize, log_disp: f64) -> f64 {
        let m = self.model();
        let disp = log_disp.exp();
        let mut s = self.ws.state.clone_scalars();
        s.dispersion[j] = disp;
        let mut lp = m.dispersion_prior(&s, j) + log_disp;
        for (i, c) in self.ws.caches.iter().enumerate() {
            lp += m.long_ll(j, i, &c.eta_obs[j], disp);
        }
        lp
    }

    fn scatter(&self) -> DMatrix<f64> {
        let k = self.model().n_re;
        let mut s = DMatrix::zeros(k, k);
        for re in &self.ws.state.re {
            let dev = DVector::from_iterator(k, re.iter().zip(&self.ws.re_mean).map(|(a, b)| a - b));
            s += &dev * dev.transpose();
        }
        s
    }

    fn d_target(&self, u: &[f64], scatter: &DMatrix<f64>) -> f64 {
        let m = self.model();
        let k = m.n_re;
        let (d, _, _, log_jac) = from_unconstrained(u, k);
        let Some(chol) = d.clone().cholesky() else {
            return f64::NEG_INFINITY;
        };
        let n = m.n_subjects() as f64;
        let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().take(k).map(|v| v.ln()).sum::<f64>();
        let trace = (chol.inverse() * scatter).trace();
        m.d_prior(&d) + log_jac - 0.5 * n * (k as f64 * LN_2PI + logdet) - 0.5 * trace
    }

    fn sigma_frailty_target(&self, log_sigma: f64) -> f64 {
        let m = self.model();
        let sigma = log_sigma.exp();
        m.spec.priors.sigma_frailty.logpdf(sigma)
            + log_sigma
            + self.ws.state.frailty.iter().map(|&u| m.frailty_logdensity(u, sigma)).sum::<f64>()
    }

    /// Frailty-dependent hazard terms of subject `i` at frailty `u`.
    fn frailty_hazard(&self, i: usize, u: f64) -> f64 {
        let m = self.model();
        let mut ll = 0.0;
        for (h, hm) in m.hazards.iter().enumerate() {
            if hm.frailty != FrailtyRole::Absent {
                let p = &self.ws.state.hazards[h];
                ll += m.hazard_ll(h, i, &self.ws.caches[i].ivs[h], &p.gamma, hm.frailty_coef(p), u);
            }
        }
        ll
    }

    /// Joint rescaling of `σ_υ` and every `υ_i` by `e^ε`.
    fn interweave_target(&self, eps: f64) -> f64 {
        let m = self.model();
        let s = &self.ws.state;
        let f = eps.exp();
        let sigma = s.sigma_frailty * f;
        let n = s.frailty.len() as f64;
        let mut lp = m.spec.priors.sigma_frailty.logpdf(sigma) + (n + 1.0) * eps;
        for (i, &u) in s.frailty.iter().enumerate() {
            lp += m.frailty_logdensity(u * f, sigma) + self.frailty_hazard(i, u * f);
        }
        lp
    }

    /// Hazard `h` terms under stacked parameters `theta`; also returns the
    /// new per-subject interval caches and log-likelihoods.
    fn hazard_target(&self, h: usize, theta: &[f64], touches_ivs: bool) -> (f64, Vec<Option<Vec<IvCache>>>, Vec<f64>) {
        let m = self.model();
        let hm = &m.hazards[h];
        let mut state = self.ws.state.clone_scalars();
        hm.set_theta(&mut state.hazards[h], theta);
        let p = &state.hazards[h];
        let mut lp = 0.0;
        for b in [crate::model::Block::Gamma(h), crate::model::Block::Alpha(h), crate::model::Block::AlphaFrailty(h), crate::model::Block::Gamma0(h)] {
            lp += m.hazard_prior(&state, h, b);
        }
        let coef = hm.frailty_coef(p);
        let mut ivs_new = Vec::with_capacity(m.n_subjects());
        let mut lls = Vec::with_capacity(m.n_subjects());
        for (i, c) in self.ws.caches.iter().enumerate() {
            let u = frailty_of(&self.ws.state, i);
            let ll = if touches_ivs {
                let ivs = m.intervals(h, i, &p.gamma0, &p.alpha, &c.feats[h]);
                let ll = m.hazard_ll(h, i, &ivs, &p.gamma, coef, u);
                ivs_new.push(Some(ivs));
                ll
            } else {
                ivs_new.push(None);
                m.hazard_ll(h, i, &c.ivs[h], &p.gamma, coef, u)
            };
            lp += ll;
            lls.push(ll);
        }
        (lp, ivs_new, lls)
    }

    // ---- proposal shapes ----

    fn refresh(&mut self) {
        let m = self.model();
        let h = 1e-3;
        for j in 0..m.outcomes.len() {
            let x = self.ws.state.dispersion[j].ln();
            let hess = fd_hessian(|v| self.disp_target(j, v[0]), &[x], h);
            self.disp[j].chol = proposal_from_precision(&(-hess));
            let nc = &m.outcomes[j].noncentered;
            if !nc.is_empty() {
                let prec = self.beta_nc_information(j);
                self.beta_nc[j].chol = proposal_from_precision(&prec);
            }
        }
        if m.n_re > 0 {
            if let Ok(u) = to_unconstrained(&self.ws.state.d) {
                let s = self.scatter();
                let hess = fd_hessian(|v| self.d_target(v, &s), &u, h);
                self.d.chol = proposal_from_precision(&(-hess));
            }
            for i in 0..m.n_subjects() {
                self.re_info[i] = m.re_information(i, &self.ws.state, &self.ws.caches[i]);
            }
        }
        if m.has_frailty() {
            for i in 0..m.n_subjects() {
                let mut curv = 0.0;
                for (hz, hm) in m.hazards.iter().enumerate() {
                    if hm.frailty == FrailtyRole::Absent {
                        continue;
                    }
                    let p = &self.ws.state.hazards[hz];
                    let c = hm.frailty_coef(p);
                    let u = self.ws.state.frailty[i];
                    for (iv, ic) in m.data[i].haz[hz].intervals.iter().zip(&self.ws.caches[i].ivs[hz]) {
                        let lp = crate::longitudinal::dot(&iv.w, &p.gamma) + c * u;
                        curv += c * c * lp.exp() * ic.integral;
                    }
                }
                self.frailty_curv[i] = if curv.is_finite() { curv } else { 0.0 };
            }
            let x = self.ws.state.sigma_frailty.ln();
            let hess = fd_hessian(|v| self.sigma_frailty_target(v[0]), &[x], h);
            self.sigma_frailty.chol = proposal_from_precision(&(-hess));
            let hess = fd_hessian(|v| self.interweave_target(v[0]), &[0.0], h);
            self.interweave.chol = proposal_from_precision(&(-hess));
        }
        for hz in 0..m.hazards.len() {
            self.hazard_info[hz] = m.hazard_information(hz, &self.ws.state, &self.ws.caches);
        }
        for a in self.all_adapts_mut() {
            a.restart();
        }
    }

    fn all_adapts_mut(&mut self) -> Vec<&mut Adapt> {
        let mut out: Vec<&mut Adapt> = Vec::new();
        out.extend(self.beta_nc.iter_mut().map(|p| &mut p.adapt));
        out.extend(self.disp.iter_mut().map(|p| &mut p.adapt));
        out.push(&mut self.d.adapt);
        out.extend(self.re.iter_mut());
        out.extend(self.frailty.iter_mut());
        out.push(&mut self.sigma_frailty.adapt);
        out.push(&mut self.interweave.adapt);
        for hb in self.hazard.iter_mut() {
            out.extend(hb.iter_mut().map(|b| &mut b.prop.adapt));
        }
        out
    }

    fn beta_nc_information(&self, j: usize) -> DMatrix<f64> {
        let m = self.model();
        let om = &m.outcomes[j];
        let nnc = om.noncentered.len();
        let mut info = DMatrix::identity(nnc, nnc) / m.spec.priors.beta.var;
        let disp = self.ws.state.dispersion[j];
        for (i, c) in self.ws.caches.iter().enumerate() {
            let ob = &m.data[i].obs[j];
            for r in 0..ob.len() {
                let w = match om.family {
                    Family::Gaussian => 1.0 / (disp * disp),
                    Family::Beta => beta_fisher_eta(expit(c.eta_obs[j][r]), disp),
                };
                let x = &ob.xnc[r * nnc..(r + 1) * nnc];
                for a in 0..nnc {
                    for b in 0..nnc {
                        info[(a, b)] += w * x[a] * x[b];
                    }
                }
            }
        }
        info
    }

    // ---- updates ----

    fn update_beta(&mut self, j: usize, adapting: bool) {
        let m = self.model();
        let om = &m.outcomes[j];
        let pr = m.spec.priors.beta;
        if !om.centered.is_empty() && m.n_re > 0 {
            // conjugate draw of the means of the centered coefficients
            let slots: Vec<usize> = om.centered.iter().map(|&(_, r)| om.re_offset + r).collect();
            let dinv = self.ws.state.d.clone().cholesky().map(|c| c.inverse()).unwrap_or_else(|| DMatrix::identity(m.n_re, m.n_re));
            let mut base = self.ws.re_mean.clone();
            for &k in &slots {
                base[k] = 0.0;
            }
            let nc = slots.len();
            let n = m.n_subjects() as f64;
            let mut prec = DMatrix::identity(nc, nc) / pr.var;
            let mut lin = DVector::from_element(nc, pr.mean / pr.var);
            let mut sum = DVector::zeros(m.n_re);
            for re in &self.ws.state.re {
                for k in 0..m.n_re {
                    sum[k] += re[k] - base[k];
                }
            }
            let dsum = &dinv * sum;
            for (a, &ka) in slots.iter().enumerate() {
                lin[a] += dsum[ka];
                for (b, &kb) in slots.iter().enumerate() {
                    prec[(a, b)] += n * dinv[(ka, kb)];
                }
            }
            if let Some(chol) = prec.clone().cholesky() {
                let mean = chol.solve(&lin);
                let draw = propose_precision(mean.as_slice(), &chol.unpack(), 1.0, &mut self.rng);
                for (a, &(c, _)) in om.centered.iter().enumerate() {
                    self.ws.state.beta[j][c] = draw[a];
                }
                self.ws.refresh_mean();
            }
        }
        if !om.noncentered.is_empty() {
            let nc = &om.noncentered;
            let uses: Vec<usize> = (0..m.hazards.len()).filter(|&h| m.hazards[h].forms.iter().any(|f| f.outcome == j)).collect();
            let current: Vec<f64> = nc.iter().map(|&c| self.ws.state.beta[j][c]).collect();
            let cur_lp = m.beta_prior(&self.ws.state, j)
                + self.ws.caches.iter().map(|c| c.long_ll[j] + uses.iter().map(|&h| c.haz_ll[h]).sum::<f64>()).sum::<f64>();
            let prop = &self.beta_nc[j];
            let y = propose(&current, &prop.chol, prop.adapt.scale(), &mut self.rng);
            let mut cand = self.ws.state.clone_scalars();
            for (a, &c) in nc.iter().enumerate() {
                cand.beta[j][c] = y[a];
            }
            let mut lp = m.beta_prior(&cand, j);
            let mut new_caches = Vec::with_capacity(m.n_subjects());
            for i in 0..m.n_subjects() {
                let c = m.subject_cache_with(i, &cand, &self.ws.state.re[i]);
                lp += c.long_ll[j] + uses.iter().map(|&h| c.haz_ll[h]).sum::<f64>();
                new_caches.push(c);
            }
            let ok = lp.is_finite() && accept(lp - cur_lp, &mut self.rng);
            if ok {
                self.ws.state.beta[j] = cand.beta[j].clone();
                self.ws.caches = new_caches;
            }
            self.beta_nc[j].adapt.record(ok, adapting);
        }
    }

    fn update_dispersion(&mut self, j: usize, adapting: bool) {
        let x = self.ws.state.dispersion[j].ln();
        let cur = self.disp_target(j, x);
        let p = &self.disp[j];
        let y = propose(&[x], &p.chol, p.adapt.scale(), &mut self.rng)[0];
        let lp = self.disp_target(j, y);
        let ok = lp.is_finite() && accept(lp - cur, &mut self.rng);
        if ok {
            let m = self.model();
            let disp = y.exp();
            self.ws.state.dispersion[j] = disp;
            for (i, c) in self.ws.caches.iter_mut().enumerate() {
                c.long_ll[j] = m.long_ll(j, i, &c.eta_obs[j], disp);
            }
        }
        self.disp[j].adapt.record(ok, adapting);
    }

    fn update_d(&mut self, adapting: bool) {
        let k = self.model().n_re;
        if k == 0 {
            return;
        }
        let s = self.scatter();
        let Ok(mut u) = to_unconstrained(&self.ws.state.d) else {
            return;
        };
        let mut cur = self.d_target(&u, &s);
        for _ in 0..self.cfg.d_steps.max(1) {
            let y = propose(&u, &self.d.chol, self.d.adapt.scale(), &mut self.rng);
            let lp = self.d_target(&y, &s);
            let ok = lp.is_finite() && accept(lp - cur, &mut self.rng);
            if ok {
                u = y;
                cur = lp;
            }
            self.d.adapt.record(ok, adapting);
        }
        let (d, _, _, _) = from_unconstrained(&u, k);
        if d.clone().cholesky().is_some() {
            self.ws.state.d = d;
            self.ws.refresh_d();
        }
    }

    fn update_random_effects(&mut self, iter: usize, adapting: bool) {
        let m = self.model();
        if m.n_re == 0 || m.n_subjects() == 0 {
            return;
        }
        let dinv = match self.ws.state.d.clone().cholesky() {
            Some(c) => c.inverse(),
            None => return,
        };
        let mut re = std::mem::take(&mut self.ws.state.re);
        let state = &self.ws.state;
        let re_mean = &self.ws.re_mean;
        let d_chol = &self.ws.d_chol;
        let (seed, chain) = (self.cfg.seed, self.chain as u64);
        let work = |(i, ((b, cache), (adapt, info))): (usize, ((&mut Vec<f64>, &mut SubjectCache), (&mut Adapt, &DMatrix<f64>)))| {
            let mut rng = substream(seed, chain, iter as u64, i as u64, 1);
            let prec = info + &dinv;
            let Some(chol) = prec.cholesky() else {
                adapt.record(false, adapting);
                return;
            };
            let y = propose_precision(b, &chol.unpack(), adapt.scale(), &mut rng);
            let cur = m.re_logdensity(b, re_mean, d_chol) + cache.total();
            let cand = m.subject_cache_with(i, state, &y);
            let lp = m.re_logdensity(&y, re_mean, d_chol) + cand.total();
            let ok = lp.is_finite() && accept(lp - cur, &mut rng);
            if ok {
                *b = y;
                *cache = cand;
            }
            adapt.record(ok, adapting);
        };
        let items = re
            .iter_mut()
            .zip(self.ws.caches.iter_mut())
            .zip(self.re.iter_mut().zip(self.re_info.iter()))
            .enumerate();
        if rayon::current_num_threads() > 1 {
            items.collect::<Vec<_>>().into_par_iter().for_each(work);
        } else {
            items.for_each(work);
        }
        self.ws.state.re = re;
    }

    fn update_frailty(&mut self, iter: usize, adapting: bool) {
        let m = self.model();
        if !m.has_frailty() {
            return;
        }
        let sigma = self.ws.state.sigma_frailty;
        for i in 0..m.n_subjects() {
            let mut rng = self.sub_rng(iter, i, 2);
            let u = self.ws.state.frailty[i];
            let sd = 1.0 / (1.0 / (sigma * sigma) + self.frailty_curv[i]).sqrt();
            let y = u + self.frailty[i].scale() * sd * rng.sample::<f64, _>(StandardNormal);
            let cur = m.frailty_logdensity(u, sigma) + self.frailty_hazard(i, u);
            let lp = m.frailty_logdensity(y, sigma) + self.frailty_hazard(i, y);
            let ok = lp.is_finite() && accept(lp - cur, &mut rng);
            if ok {
                self.set_frailty(i, y);
            }
            self.frailty[i].record(ok, adapting);
        }
    }

    fn set_frailty(&mut self, i: usize, u: f64) {
        let m = self.model();
        self.ws.state.frailty[i] = u;
        for (h, hm) in m.hazards.iter().enumerate() {
            if hm.frailty != FrailtyRole::Absent {
                let p = &self.ws.state.hazards[h];
                self.ws.caches[i].haz_ll[h] = m.hazard_ll(h, i, &self.ws.caches[i].ivs[h], &p.gamma, hm.frailty_coef(p), u);
            }
        }
    }

    fn update_frailty_scale(&mut self, adapting: bool) {
        if !self.model().has_frailty() {
            return;
        }
        let x = self.ws.state.sigma_frailty.ln();
        let cur = self.sigma_frailty_target(x);
        let y = propose(&[x], &self.sigma_frailty.chol, self.sigma_frailty.adapt.scale(), &mut self.rng)[0];
        let lp = self.sigma_frailty_target(y);
        let ok = lp.is_finite() && accept(lp - cur, &mut self.rng);
        if ok {
            self.ws.state.sigma_frailty = y.exp();
        }
        self.sigma_frailty.adapt.record(ok, adapting);

        if self.cfg.frailty_interweave && self.model().n_subjects() > 0 {
            let cur = self.interweave_target(0.0);
            let eps = propose(&[0.0], &self.interweave.chol, self.interweave.adapt.scale(), &mut self.rng)[0];
            let lp = self.interweave_target(eps);
            let ok = lp.is_finite() && accept(lp - cur, &mut self.rng);
            if ok {
                let f = eps.exp();
                self.ws.state.sigma_frailty *= f;
                for i in 0..self.model().n_subjects() {
                    let u = self.ws.state.frailty[i] * f;
                    self.set_frailty(i, u);
                }
            }
            self.interweave.adapt.record(ok, adapting);
        }
    }

    fn update_hazard(&mut self, h: usize, adapting: bool) {
        let m = self.model();
        let hm = &m.hazards[h];
        let [_, _, _, r0] = hm.theta_ranges();
        let tau = self.ws.state.hazards[h].tau;
        let mut prior_prec = DMatrix::zeros(hm.theta_len(), hm.theta_len());
        let pr = &m.spec.priors;
        let [rg, ra, ru, _] = hm.theta_ranges();
        for k in rg {
            prior_prec[(k, k)] = 1.0 / pr.gamma.var;
        }
        for k in ra {
            prior_prec[(k, k)] = 1.0 / pr.alpha.var;
        }
        for k in ru {
            prior_prec[(k, k)] = 1.0 / pr.alpha_frailty.var;
        }
        for a in 0..hm.q() {
            for b in 0..hm.q() {
                prior_prec[(r0.start + a, r0.start + b)] = tau * hm.penalty.matrix[(a, b)];
            }
        }
        let prec = &self.hazard_info[h] + prior_prec;
        for _ in 0..self.cfg.hazard_steps.max(1) {
            for bi in 0..self.hazard[h].len() {
                let blk = &self.hazard[h][bi];
                let idx = blk.idx.clone();
                let sub = DMatrix::from_fn(idx.len(), idx.len(), |a, b| prec[(idx[a], idx[b])]);
                let chol = proposal_from_precision(&sub);
                let theta = hm.theta(&self.ws.state.hazards[h]);
                let cur_x: Vec<f64> = idx.iter().map(|&k| theta[k]).collect();
                let y = propose(&cur_x, &chol, blk.prop.adapt.scale(), &mut self.rng);
                let mut cand = theta.clone();
                for (a, &k) in idx.iter().enumerate() {
                    cand[k] = y[a];
                }
                let mut cur = self.ws.hazard_total(h);
                for b in [crate::model::Block::Gamma(h), crate::model::Block::Alpha(h), crate::model::Block::AlphaFrailty(h), crate::model::Block::Gamma0(h)] {
                    cur += m.hazard_prior(&self.ws.state, h, b);
                }
                let touches = blk.touches_ivs;
                let (lp, ivs, lls) = self.hazard_target(h, &cand, touches);
                let ok = lp.is_finite() && accept(lp - cur, &mut self.rng);
                if ok {
                    hm.set_theta(&mut self.ws.state.hazards[h], &cand);
                    for (i, (iv, ll)) in ivs.into_iter().zip(lls).enumerate() {
                        if let Some(iv) = iv {
                            self.ws.caches[i].ivs[h] = iv;
                        }
                        self.ws.caches[i].haz_ll[h] = ll;
                    }
                }
                self.hazard[h][bi].prop.adapt.record(ok, adapting);
            }
        }
        let p = &self.ws.state.hazards[h];
        let tau = gibbs_tau(&p.gamma0, &hm.penalty, pr.tau, &mut self.rng);
        self.ws.state.hazards[h].tau = tau;
    }

    fn sweep(&mut self, iter: usize, adapting: bool) {
        let m = self.model();
        for stage in self.cfg.block_order.clone() {
            match stage {
                Stage::Beta => (0..m.outcomes.len()).for_each(|j| self.update_beta(j, adapting)),
                Stage::Dispersion => (0..m.outcomes.len()).for_each(|j| self.update_dispersion(j, adapting)),
                Stage::D => self.update_d(adapting),
                Stage::RandomEffects => self.update_random_effects(iter, adapting),
                Stage::Frailty => self.update_frailty(iter, adapting),
                Stage::FrailtyScale => self.update_frailty_scale(adapting),
                Stage::Recurrent => (0..m.hazards.len()).filter(|&h| m.hazards[h].recurrent).for_each(|h| self.update_hazard(h, adapting)),
                Stage::Causes => (0..m.hazards.len()).filter(|&h| !m.hazards[h].recurrent).for_each(|h| self.update_hazard(h, adapting)),
            }
        }
    }

    fn acceptance(&self) -> BTreeMap<String, AcceptanceStats> {
        let m = self.model();
        let order = &self.cfg.block_order;
        let mut out = BTreeMap::new();
        for (j, om) in m.outcomes.iter().enumerate() {
            if order.contains(&Stage::Beta) && !om.noncentered.is_empty() {
                stats(&format!("beta[{}]", om.name), &self.beta_nc[j].adapt, &mut out);
            }
            if order.contains(&Stage::Dispersion) {
                stats(&format!("dispersion[{}]", om.name), &self.disp[j].adapt, &mut out);
            }
        }
        if m.n_re > 0 && order.contains(&Stage::D) {
            stats("D", &self.d.adapt, &mut out);
        }
        let pooled = |adapts: &[Adapt]| {
            let n = adapts.len().max(1) as f64;
            AcceptanceStats {
                accepted: adapts.iter().map(|a| a.accepted).sum(),
                proposed: adapts.iter().map(|a| a.proposed).sum(),
                target: adapts.first().map_or(f64::NAN, |a| a.target),
                scale: adapts.iter().map(Adapt::scale).sum::<f64>() / n,
            }
        };
        if m.n_re > 0 && m.n_subjects() > 0 && order.contains(&Stage::RandomEffects) {
            out.insert("b".to_string(), pooled(&self.re));
        }
        if m.has_frailty() {
            if m.n_subjects() > 0 && order.contains(&Stage::Frailty) {
                out.insert("frailty".to_string(), pooled(&self.frailty));
            }
            if order.contains(&Stage::FrailtyScale) {
                stats("sigma_frailty", &self.sigma_frailty.adapt, &mut out);
                if self.cfg.frailty_interweave && m.n_subjects() > 0 {
                    stats("sigma_frailty_joint", &self.interweave.adapt, &mut out);
                }
            }
        }
        for (h, hm) in m.hazards.iter().enumerate() {
            let stage = if hm.recurrent { Stage::Recurrent } else { Stage::Causes };
            if order.contains(&stage) {
                for b in &self.hazard[h] {
                    stats(&b.name, &b.prop.adapt, &mut out);
                }
            }
        }
        out
    }

    fn run(mut self) -> Result<ChainDraws> {
        let m = self.model();
        let refresh = refresh_points(self.cfg.warmup);
        let mut draws = ChainDraws { iterations: Vec::new(), values: Vec::new(), latent: Vec::new(), acceptance: BTreeMap::new() };
        for iter in 0..self.cfg.iterations {
            let adapting = iter < self.cfg.warmup;
            if refresh.contains(&iter) && adapting {
                self.refresh();
            }
            self.sweep(iter, adapting);
            if !adapting && (iter - self.cfg.warmup) % self.cfg.thin == 0 {
                let values = m.named_values(&self.ws.state);
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(numerical(format!("chain {}: non-finite parameter at iteration {iter}", self.chain)));
                }
                draws.iterations.push(iter);
                draws.values.push(values);
                if self.cfg.store_latent {
                    draws.latent.push(LatentDraw { re: self.ws.state.re.clone(), frailty: self.ws.state.frailty.clone() });
                }
            }
        }
        draws.acceptance = self.acceptance();
        Ok(draws)
    }
}

impl ParameterState {
    /// Copy of the state without the per-subject latent variables.
    pub(crate) fn clone_scalars(&self) -> ParameterState {
        ParameterState {
            beta: self.beta.clone(),
            dispersion: self.dispersion.clone(),
            d: self.d.clone(),
            hazards: self.hazards.clone(),
            sigma_frailty: self.sigma_frailty,
            re: Vec::new(),
            frailty: self.frailty.clone(),
        }
    }
}

/// Runs `config.chains` independent chains. The output depends only on the
/// model, the data and `config` (the worker count included or not).
pub fn run_chains(model: &Model, config: &ChainConfig) -> Result<PosteriorDraws> {
    config.validate()?;
    let workers = if config.workers == 0 { std::thread::available_parallelism().map_or(1, |n| n.get()) } else { config.workers };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| numerical(format!("thread pool: {e}")))?;
    let chains: Vec<Result<ChainDraws>> = pool.install(|| {
        (0..config.chains)
            .into_par_iter()
            .map(|c| Chain::new(model, config, c)?.run())
            .collect()
    });
    Ok(PosteriorDraws {
        names: model.parameter_names(),
        monitored: model.monitored(),
        chains: chains.into_iter().collect::<Result<_>>()?,
    })
}
