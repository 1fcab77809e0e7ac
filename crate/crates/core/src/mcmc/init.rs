//! Data-driven starting values.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::longitudinal::expit;
use crate::model::{FrailtyRole, HazardParams, Model, ParameterState};
use crate::spec::Family;

const RIDGE: f64 = 1e-2;

fn solve_ridge(xtx: &DMatrix<f64>, xty: &DVector<f64>, ridge: f64) -> DVector<f64> {
    let d = xtx.nrows();
    let a = xtx + DMatrix::identity(d, d) * ridge;
    a.cholesky().map(|c| c.solve(xty)).unwrap_or_else(|| DVector::zeros(d))
}

fn glm_fit(family: Family, rows: &[(DVector<f64>, f64)], prior_mean: &DVector<f64>, ridge: f64) -> DVector<f64> {
    let rows: Vec<(DVector<f64>, f64, f64)> = rows.iter().map(|(x, y)| (x.clone(), *y, 0.0)).collect();
    glm_fit_offset(family, &rows, prior_mean, ridge)
}

/// Least squares for Gaussian outcomes; for beta outcomes a quasi-binomial
/// logit fit by IRLS, which copes with responses very close to 0 or 1
/// where the empirical logit is useless. `ridge` shrinks toward
/// `prior_mean`.
fn glm_fit_offset(
    family: Family,
    rows: &[(DVector<f64>, f64, f64)],
    prior_mean: &DVector<f64>,
    ridge: f64,
) -> DVector<f64> {
    let d = prior_mean.len();
    let solve = |weights: &dyn Fn(&DVector<f64>, f64, f64) -> (f64, f64)| {
        let mut xtx = DMatrix::zeros(d, d);
        let mut xty = prior_mean * ridge;
        for (x, y, off) in rows {
            let (w, z) = weights(x, *y, *off);
            xtx += x * x.transpose() * w;
            xty += x * (w * z);
        }
        solve_ridge(&xtx, &xty, ridge)
    };
    match family {
        Family::Gaussian => solve(&|_, y, off| (1.0, y - off)),
        Family::Beta => {
            let clip = |y: f64| y.clamp(0.01, 0.99);
            let mut b = solve(&|_, y, off| (1.0, (clip(y) / (1.0 - clip(y))).ln() - off));
            for _ in 0..50 {
                let cur = b.clone();
                let next = solve(&|x, y, off| {
                    let eta = x.dot(&cur) + off;
                    let mu = expit(eta);
                    let w = (mu * (1.0 - mu)).max(1e-10);
                    (w, eta - off + (y - mu) / w)
                });
                if next.iter().any(|v| !v.is_finite()) {
                    break;
                }
                let step = (&next - &b).amax();
                b = next;
                if step < 1e-8 {
                    break;
                }
            }
            b
        }
    }
}

/// Pooled regression fits (IRLS for beta outcomes), per-subject fits for the
/// subject-specific coefficients, moment estimates of dispersions and `D`,
/// a crude constant rate for each baseline, zero association, unit frailty
/// sd. Chains other than 0 are jittered by `jitter`.
pub fn initial_state<R: Rng + ?Sized>(model: &Model, chain: usize, jitter: f64, rng: &mut R) -> ParameterState {
    let views = model.views();
    let n = model.n_subjects();
    let pr = &model.spec.priors;
    let mut beta = Vec::new();
    let mut re = vec![vec![0.0; model.n_re]; n];
    let mut dispersion = Vec::new();

    for (j, om) in model.outcomes.iter().enumerate() {
        let view = &views.outcomes[j];
        let p = om.n_fixed();
        let b = if view.y.is_empty() {
            vec![pr.beta.mean; p]
        } else {
            let rows: Vec<(DVector<f64>, f64)> =
                (0..view.y.len()).map(|r| (view.x.row(r).transpose(), view.y[r])).collect();
            glm_fit(om.family, &rows, &DVector::zeros(p), 1e-8).iter().copied().collect()
        };
        beta.push(b);
    }

    // per-subject fits shrunk toward the pooled fit
    let mean0 = model.re_mean(&beta);
    for (j, om) in model.outcomes.iter().enumerate() {
        let nr = om.n_random();
        let nnc = om.noncentered.len();
        for (i, subj_re) in re.iter_mut().enumerate() {
            let ob = &model.data[i].obs[j];
            let m = DVector::from_row_slice(&mean0[om.re_offset..om.re_offset + nr]);
            // non-centered fixed effects enter as a known offset
            let rows: Vec<(DVector<f64>, f64, f64)> = (0..ob.len())
                .map(|r| {
                    let off: f64 = om
                        .noncentered
                        .iter()
                        .enumerate()
                        .map(|(c, &col)| ob.xnc[r * nnc + c] * beta[j][col])
                        .sum();
                    (DVector::from_row_slice(&ob.z[r * nr..(r + 1) * nr]), ob.y[r], off)
                })
                .collect();
            let b = glm_fit_offset(om.family, &rows, &m, RIDGE);
            subj_re[om.re_offset..om.re_offset + nr].copy_from_slice(b.as_slice());
        }
    }

    // centered fixed effects are the means of the subject coefficients
    if n > 0 {
        for (j, om) in model.outcomes.iter().enumerate() {
            for &(c, r) in &om.centered {
                let k = om.re_offset + r;
                beta[j][c] = re.iter().map(|b| b[k]).sum::<f64>() / n as f64;
            }
        }
    }
    let mean = model.re_mean(&beta);
    let k = model.n_re;
    let d = if n >= 2 {
        let mut s = DMatrix::zeros(k, k);
        for b in &re {
            let dev = DVector::from_iterator(k, b.iter().zip(&mean).map(|(a, m)| a - m));
            s += &dev * dev.transpose();
        }
        s /= (n - 1) as f64;
        let floor = DMatrix::from_diagonal(&s.diagonal().map(|v| 0.01 * v + 1e-8));
        let d = &s + floor;
        if d.clone().cholesky().is_some() {
            d
        } else {
            DMatrix::from_diagonal(&s.diagonal().map(|v| v + 1e-6))
        }
    } else {
        DMatrix::identity(k, k)
    };

    for (j, om) in model.outcomes.iter().enumerate() {
        let mut obs = Vec::new();
        for i in 0..n {
            let eta = model.eta_obs(j, i, &beta[j], &re[i]);
            for (r, e) in eta.iter().enumerate() {
                obs.push((model.data[i].obs[j].y[r], *e));
            }
        }
        let disp = match om.family {
            _ if obs.is_empty() => match om.family {
                Family::Gaussian => pr.sigma_y.mean(),
                Family::Beta => pr.phi.mean(),
            },
            Family::Gaussian => {
                let mse = obs.iter().map(|(y, e)| (y - e) * (y - e)).sum::<f64>() / obs.len() as f64;
                mse.sqrt().max(1e-8)
            }
            Family::Beta => {
                let (mut v, mut m) = (0.0, 0.0);
                for &(y, e) in &obs {
                    let mu = expit(e);
                    v += (y - mu) * (y - mu);
                    m += mu * (1.0 - mu);
                }
                if v > 0.0 {
                    (m / v - 1.0).clamp(1.0, 1e6)
                } else {
                    1e6
                }
            }
        };
        dispersion.push(disp);
    }

    let mut hazards = Vec::new();
    for (h, hm) in model.hazards.iter().enumerate() {
        let rows = &views.hazards[h].rows;
        let exposure: f64 = rows.iter().map(|r| r.tstop - r.tstart).sum();
        let events = rows.iter().filter(|r| r.status).count() as f64;
        let level = if exposure > 0.0 { (events.max(0.5) / exposure).ln() } else { 0.0 };
        hazards.push(HazardParams {
            gamma: vec![0.0; hm.n_gamma()],
            alpha: vec![0.0; hm.n_alpha()],
            alpha_frailty: 0.0,
            gamma0: vec![level; hm.q()],
            tau: pr.tau.mean(),
        });
    }

    let mut state = ParameterState {
        beta,
        dispersion,
        d,
        hazards,
        sigma_frailty: 1.0,
        re,
        frailty: if model.has_frailty() { vec![0.0; n] } else { Vec::new() },
    };
    if chain > 0 && jitter > 0.0 {
        let mut z = || jitter * rng.sample::<f64, _>(StandardNormal);
        for v in state.dispersion.iter_mut() {
            *v *= z().exp();
        }
        let s = z().exp();
        state.d *= s;
        for (hm, p) in model.hazards.iter().zip(state.hazards.iter_mut()) {
            let shift = z();
            for g in p.gamma0.iter_mut() {
                *g += shift;
            }
            for g in p.gamma.iter_mut().chain(p.alpha.iter_mut()) {
                *g += z();
            }
            if hm.frailty == FrailtyRole::Scaled {
                p.alpha_frailty += z();
            }
        }
        state.sigma_frailty *= z().exp();
    }
    // a state with a non-finite likelihood is repaired by dropping the
    // association, which the data can always support
    if !(0..n).all(|i| model.subject_cache(i, &state).total().is_finite()) {
        for p in state.hazards.iter_mut() {
            p.alpha.iter_mut().for_each(|a| *a = 0.0);
        }
    }
    state
}
