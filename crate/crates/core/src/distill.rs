//! Loss functions of the student objective and their analytic gradients.
//!
//! Every loss is a pure function of plain matrices. The `*_grad` companions
//! return the gradient with respect to the student-side argument only;
//! teacher probabilities and teacher embeddings are constants.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-12;

/// `−Σ_i log Q[i, gold_i]`, the cross entropy of one-hot gold labels.
pub fn propaganda_ce(q: ArrayView2<f64>, gold: &[usize], eps: f64) -> f64 {
    assert_eq!(q.nrows(), gold.len(), "one gold label per row");
    gold.iter()
        .enumerate()
        .map(|(i, &c)| -q[[i, c]].max(eps).ln())
        .sum()
}

/// Gradient of [`propaganda_ce`] with respect to `q`.
pub fn propaganda_ce_grad(q: ArrayView2<f64>, gold: &[usize], eps: f64) -> Array2<f64> {
    let mut g = Array2::zeros(q.raw_dim());
    for (i, &c) in gold.iter().enumerate() {
        g[[i, c]] = -1.0 / q[[i, c]].max(eps);
    }
    g
}

/// Forward KL `Σ_i Σ_c P log(P / Q)` with the teacher `p` as the target.
/// Cells where `P = 0` contribute nothing.
pub fn response_kl(p: ArrayView2<f64>, q: ArrayView2<f64>, eps: f64) -> f64 {
    assert_eq!(p.dim(), q.dim(), "teacher and student distributions differ in shape");
    p.iter()
        .zip(q.iter())
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| pv * (pv / qv.max(eps)).ln())
        .sum()
}

/// Gradient of [`response_kl`] with respect to `q`.
pub fn response_kl_grad(p: ArrayView2<f64>, q: ArrayView2<f64>, eps: f64) -> Array2<f64> {
    assert_eq!(p.dim(), q.dim(), "teacher and student distributions differ in shape");
    let mut g = Array2::zeros(q.raw_dim());
    ndarray::Zip::from(&mut g)
        .and(&p)
        .and(&q)
        .for_each(|g, &pv, &qv| {
            if pv > 0.0 {
                *g = -pv / qv.max(eps);
            }
        });
    g
}

fn row_norms(s: ArrayView2<f64>) -> Vec<f64> {
    s.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

/// Pairwise cosine similarities of the rows of `s`.
///
/// A zero-norm row has cosine 0 with every other row and 1 with itself.
pub fn spatial_matrix(s: ArrayView2<f64>) -> Array2<f64> {
    let n = s.nrows();
    let norms = row_norms(s);
    if norms.iter().any(|&v| v == 0.0) {
        log::warn!("spatial matrix: zero-norm embedding row; its cosines are set to 0");
    }
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        m[[i, i]] = 1.0;
        for k in (i + 1)..n {
            let c = if norms[i] == 0.0 || norms[k] == 0.0 {
                0.0
            } else {
                s.row(i).dot(&s.row(k)) / (norms[i] * norms[k])
            };
            m[[i, k]] = c;
            m[[k, i]] = c;
        }
    }
    m
}

/// Back-propagates `grad_m = ∂L/∂M` through [`spatial_matrix`] to the rows of `s`.
pub fn spatial_matrix_backward(s: ArrayView2<f64>, grad_m: ArrayView2<f64>) -> Array2<f64> {
    let n = s.nrows();
    assert_eq!(grad_m.dim(), (n, n));
    let norms = row_norms(s);
    let m = spatial_matrix_quiet(s, &norms);
    let mut g = Array2::zeros(s.raw_dim());
    for i in 0..n {
        if norms[i] == 0.0 {
            continue;
        }
        let ui = s.row(i).mapv(|v| v / norms[i]);
        let mut acc = ndarray::Array1::<f64>::zeros(s.ncols());
        for k in 0..n {
            if k == i || norms[k] == 0.0 {
                continue;
            }
            let coeff = grad_m[[i, k]] + grad_m[[k, i]];
            if coeff == 0.0 {
                continue;
            }
            let uk = s.row(k).mapv(|v| v / norms[k]);
            acc.scaled_add(coeff, &(&uk - &(&ui * m[[i, k]])));
        }
        g.row_mut(i).assign(&(acc / norms[i]));
    }
    g
}

fn spatial_matrix_quiet(s: ArrayView2<f64>, norms: &[f64]) -> Array2<f64> {
    let n = s.nrows();
    Array2::from_shape_fn((n, n), |(i, k)| {
        if i == k {
            1.0
        } else if norms[i] == 0.0 || norms[k] == 0.0 {
            0.0
        } else {
            s.row(i).dot(&s.row(k)) / (norms[i] * norms[k])
        }
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationReduction {
    /// Plain sum over ordered off-diagonal pairs.
    Sum,
    /// Average over ordered off-diagonal pairs, so the scale does not grow
    /// with document length.
    #[default]
    Mean,
}

/// Squared difference of two spatial matrices over ordered pairs `i ≠ k`.
pub fn relation_mse(teacher: ArrayView2<f64>, student: ArrayView2<f64>, reduction: RelationReduction) -> f64 {
    assert_eq!(teacher.dim(), student.dim(), "spatial matrices differ in shape");
    let n = teacher.nrows();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for k in 0..n {
            if i != k {
                let d = teacher[[i, k]] - student[[i, k]];
                sum += d * d;
            }
        }
    }
    match reduction {
        RelationReduction::Sum => sum,
        RelationReduction::Mean => sum / (n * (n - 1)) as f64,
    }
}

/// Gradient of [`relation_mse`] with respect to the student matrix.
pub fn relation_mse_grad(
    teacher: ArrayView2<f64>,
    student: ArrayView2<f64>,
    reduction: RelationReduction,
) -> Array2<f64> {
    let n = teacher.nrows();
    let mut g = Array2::zeros((n, n));
    if n < 2 {
        return g;
    }
    let scale = match reduction {
        RelationReduction::Sum => 1.0,
        RelationReduction::Mean => 1.0 / (n * (n - 1)) as f64,
    };
    for i in 0..n {
        for k in 0..n {
            if i != k {
                g[[i, k]] = -2.0 * (teacher[[i, k]] - student[[i, k]]) * scale;
            }
        }
    }
    g
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Sentence,
    Token,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Level::Sentence => "sentence",
            Level::Token => "token",
        })
    }
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sentence" => Ok(Level::Sentence),
            "token" => Ok(Level::Token),
            other => Err(Error::Config(format!("unknown level `{other}` (expected sentence or token)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub propaganda: f64,
    pub response_local: f64,
    pub response_global: f64,
    pub relation_local: f64,
    pub relation_global: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            propaganda: 1.0,
            response_local: 1.0,
            response_global: 1.0,
            relation_local: 1.0,
            relation_global: 1.0,
        }
    }
}

impl LossWeights {
    pub fn propaganda_only() -> Self {
        Self {
            propaganda: 1.0,
            response_local: 0.0,
            response_global: 0.0,
            relation_local: 0.0,
            relation_global: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("propaganda", self.propaganda),
            ("response_local", self.response_local),
            ("response_global", self.response_global),
            ("relation_local", self.relation_local),
            ("relation_global", self.relation_global),
        ];
        for (name, w) in all {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight `{name}` must be finite and non-negative, got {w}"
                )));
            }
        }
        Ok(())
    }

    pub fn uses_local(&self) -> bool {
        self.response_local > 0.0 || self.relation_local > 0.0
    }

    pub fn uses_global(&self) -> bool {
        self.response_global > 0.0 || self.relation_global > 0.0
    }

    pub fn uses_teachers(&self) -> bool {
        self.uses_local() || self.uses_global()
    }
}

/// Per-step decomposition of the objective. Terms that are switched off are
/// `None` and do not appear in serialised history.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_sent_propa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_token_propa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_response_local: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_response_global: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_relation_local: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_relation_global: Option<f64>,
    pub total: f64,
}

impl LossReport {
    fn terms(&self, level: Level) -> [(&'static str, Option<f64>, fn(&LossWeights) -> f64); 5] {
        let propa = match level {
            Level::Sentence => ("loss_sent_propa", self.loss_sent_propa),
            Level::Token => ("loss_token_propa", self.loss_token_propa),
        };
        [
            (propa.0, propa.1, |w| w.propaganda),
            ("loss_response_local", self.loss_response_local, |w| w.response_local),
            ("loss_response_global", self.loss_response_global, |w| w.response_global),
            ("loss_relation_local", self.loss_relation_local, |w| w.relation_local),
            ("loss_relation_global", self.loss_relation_global, |w| w.relation_global),
        ]
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("loss_sent_propa", self.loss_sent_propa),
            ("loss_token_propa", self.loss_token_propa),
            ("loss_response_local", self.loss_response_local),
            ("loss_response_global", self.loss_response_global),
            ("loss_relation_local", self.loss_relation_local),
            ("loss_relation_global", self.loss_relation_global),
            ("total", Some(self.total)),
        ]
        .into_iter()
        .find_map(|(name, v)| v.filter(|x| !x.is_finite()).map(|_| name))
    }

    /// Element-wise sum; a term present in either side is present in the result.
    pub fn add(&mut self, other: &LossReport) {
        fn add(a: &mut Option<f64>, b: Option<f64>) {
            if let Some(b) = b {
                *a = Some(a.unwrap_or(0.0) + b);
            }
        }
        add(&mut self.loss_sent_propa, other.loss_sent_propa);
        add(&mut self.loss_token_propa, other.loss_token_propa);
        add(&mut self.loss_response_local, other.loss_response_local);
        add(&mut self.loss_response_global, other.loss_response_global);
        add(&mut self.loss_relation_local, other.loss_relation_local);
        add(&mut self.loss_relation_global, other.loss_relation_global);
        self.total += other.total;
    }

    pub fn scaled(&self, c: f64) -> LossReport {
        let f = |v: Option<f64>| v.map(|x| x * c);
        LossReport {
            loss_sent_propa: f(self.loss_sent_propa),
            loss_token_propa: f(self.loss_token_propa),
            loss_response_local: f(self.loss_response_local),
            loss_response_global: f(self.loss_response_global),
            loss_relation_local: f(self.loss_relation_local),
            loss_relation_global: f(self.loss_relation_global),
            total: self.total * c,
        }
    }
}

/// Weighted objective for one level: `w_p·CE + Σ w·(distillation terms)`.
///
/// A term with weight 0 is skipped entirely, so it cannot contribute even a
/// NaN. Terms that are `None` contribute nothing.
pub fn total_loss(parts: &LossReport, weights: &LossWeights, level: Level) -> Result<f64> {
    let mut total = 0.0;
    for (name, value, weight) in parts.terms(level) {
        let w = weight(weights);
        if w == 0.0 {
            continue;
        }
        let Some(v) = value else { continue };
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name });
        }
        total += w * v;
    }
    Ok(total)
}
