use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::PositionTag;
use crate::checkpoint::Container;
use crate::error::{check_len, domain, Error, Result};
use crate::ops::{dot, norm};

/// Numerical probe `P(h) = N·h + d_off` predicting `log2` of a number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericalProbe {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub layer: usize,
    pub position_tag: PositionTag,
    pub lambda: f64,
    pub trained_on: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

/// Cholesky solve of the symmetric system `a x = b`. Fails when a pivot is
/// not safely positive relative to the largest diagonal entry.
fn cholesky_solve(a: Vec<f64>, b: Vec<f64>, n: usize) -> Result<Vec<f64>> {
    let a = DMatrix::from_row_slice(n, n, &a);
    let scale = a.diagonal().amax().max(f64::MIN_POSITIVE);
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Solver("system is not positive definite".into()))?;
    if let Some(j) = (0..n).find(|&j| !(chol.l_dirty()[(j, j)].powi(2) > 1e-12 * scale)) {
        return Err(Error::Solver(format!("system is rank deficient (pivot {j})")));
    }
    Ok(chol.solve(&DVector::from_vec(b)).as_slice().to_vec())
}

/// Minimizes `‖y − X w − c‖² + λ‖w‖²`; the intercept `c` is unpenalized and
/// fixed at zero when `intercept` is false.
pub fn fit_ridge(x: &[Vec<f64>], y: &[f64], lambda: f64, intercept: bool) -> Result<RidgeFit> {
    let rows = x.len();
    check_len(rows, y.len())?;
    if rows < 2 {
        return Err(domain("ridge fit needs at least two rows"));
    }
    if !(lambda >= 0.0) {
        return Err(domain("ridge penalty must be non-negative"));
    }
    let d = x[0].len();
    if d == 0 {
        return Err(domain("ridge fit needs at least one feature"));
    }
    for r in x {
        check_len(d, r.len())?;
    }
    let (mx, my) = if intercept {
        let mut mx = vec![0.0; d];
        for r in x {
            for (m, v) in mx.iter_mut().zip(r) {
                *m += v;
            }
        }
        mx.iter_mut().for_each(|m| *m /= rows as f64);
        (mx, y.iter().sum::<f64>() / rows as f64)
    } else {
        (vec![0.0; d], 0.0)
    };
    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    let mut xc = vec![0.0; d];
    for (r, &t) in x.iter().zip(y) {
        for (c, (v, m)) in xc.iter_mut().zip(r.iter().zip(&mx)) {
            *c = v - m;
        }
        let tc = t - my;
        for i in 0..d {
            rhs[i] += xc[i] * tc;
            for j in 0..=i {
                gram[i * d + j] += xc[i] * xc[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            gram[j * d + i] = gram[i * d + j];
        }
        gram[i * d + i] += lambda;
    }
    let weights = cholesky_solve(gram, rhs, d)?;
    let intercept = my - dot(&weights, &mx);
    if weights.iter().any(|w| !w.is_finite()) || !intercept.is_finite() {
        return Err(Error::Solver("non-finite solution".into()));
    }
    Ok(RidgeFit { weights, intercept })
}

/// Ridge probe on `log2(values)` with an unpenalized intercept.
pub fn fit_ridge_probe(
    hidden: &[Vec<f64>],
    values: &[f64],
    lambda: f64,
    layer: usize,
    position_tag: PositionTag,
    trained_on: &str,
) -> Result<NumericalProbe> {
    if let Some(v) = values.iter().find(|v| !(**v > 0.0)) {
        return Err(domain(format!("log target needs positive values, got {v}")));
    }
    let y: Vec<f64> = values.iter().map(|v| v.log2()).collect();
    let fit = fit_ridge(hidden, &y, lambda, true)?;
    Ok(NumericalProbe {
        weights: fit.weights,
        intercept: fit.intercept,
        layer,
        position_tag,
        lambda,
        trained_on: trained_on.to_string(),
    })
}

pub fn probe_predict(probe: &NumericalProbe, h: &[f64]) -> Result<f64> {
    check_len(probe.weights.len(), h.len())?;
    Ok(dot(&probe.weights, h) + probe.intercept)
}

/// Prediction at `h + alpha`.
pub fn perturb_prediction(probe: &NumericalProbe, h: &[f64], alpha: &[f64]) -> Result<f64> {
    check_len(h.len(), alpha.len())?;
    let shifted: Vec<f64> = h.iter().zip(alpha).map(|(a, b)| a + b).collect();
    probe_predict(probe, &shifted)
}

/// `(s, c)` with `s = α·N/‖N‖` and `c = α·N/‖N‖²`.
pub fn projection_intensity(alpha: &[f64], n: &[f64]) -> Result<(f64, f64)> {
    check_len(n.len(), alpha.len())?;
    let nn = norm(n);
    if nn == 0.0 {
        return Err(domain("projection onto a zero direction"));
    }
    let p = dot(alpha, n);
    Ok((p / nn, p / (nn * nn)))
}

/// `P + (Σ c_i) ‖N‖²`.
pub fn cumulative_deviation(p: f64, coefficients: &[f64], n_norm_sq: f64) -> Result<f64> {
    if !(n_norm_sq > 0.0) {
        return Err(domain("squared probe norm must be positive"));
    }
    Ok(p + coefficients.iter().sum::<f64>() * n_norm_sq)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x.len(), y.len())?;
    if x.len() < 2 {
        return Err(domain("correlation needs at least two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(domain("correlation with zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Average ranks (1-based), ties share their mean rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with tie-averaged ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x.len(), y.len())?;
    pearson(&ranks(x), &ranks(y))
}

impl NumericalProbe {
    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.push_meta("kind", "probe");
        c.push_meta("layer", self.layer);
        c.push_meta("position_tag", self.position_tag);
        c.push_meta("d", self.weights.len());
        c.push_meta("lambda", format!("{:?}", self.lambda));
        c.push_meta("intercept", format!("{:?}", self.intercept));
        c.push_meta("trained_on", if self.trained_on.is_empty() { "-" } else { &self.trained_on });
        c.push_tensor("weights", vec![self.weights.len()], self.weights.clone());
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta("kind")? != "probe" {
            return Err(Error::Format("not a probe file".into()));
        }
        let weights = c.tensor("weights")?.to_vec();
        check_len(c.meta_parse("d")?, weights.len())?;
        let trained_on = c.meta("trained_on")?;
        Ok(Self {
            weights,
            intercept: c.meta_parse("intercept")?,
            layer: c.meta_parse("layer")?,
            position_tag: c.meta_parse("position_tag")?,
            lambda: c.meta_parse("lambda")?,
            trained_on: if trained_on == "-" { String::new() } else { trained_on.to_string() },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// `N/‖N‖`.
    pub fn direction(&self) -> Result<Vec<f64>> {
        let n = norm(&self.weights);
        if n == 0.0 {
            return Err(domain("probe has a zero weight vector"));
        }
        Ok(self.weights.iter().map(|w| w / n).collect())
    }
}
