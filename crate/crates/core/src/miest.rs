//! Variational Gaussian estimator `q_theta(E_I_f | E_C)` and the two sampled
//! contrastive log-ratio objectives built on it.
//!
//! An LSTM summarizes the content sequence through its final hidden state;
//! two small MLP heads map that summary to a mean and a log-variance. The
//! per-pair log-likelihood is
//!
//! ```text
//! sum_k 1/2 * ( -(y_k - mu_k)^2 / exp(logvar_k) - logvar_k )
//! ```
//!
//! without the `log 2 pi` constant. `e_step_loss` fits theta to true pairs;
//! `mi_upper_bound` contrasts each true pair with one uniformly drawn
//! in-batch negative.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::LossValue;
use crate::params::{init_weight, ParamStore, Tape};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub hidden: usize,
    pub logvar_min: f64,
    pub logvar_max: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { hidden: 64, logvar_min: -8.0, logvar_max: 8.0 }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("estimator hidden size must be positive".into()));
        }
        if !(self.logvar_min < self.logvar_max) {
            return Err(Error::Config("logvar clamp range is empty".into()));
        }
        Ok(())
    }
}

pub(crate) fn init_params(p: &mut ParamStore, cfg: &EstimatorConfig, d: usize, rng: &mut impl Rng) {
    let h = cfg.hidden;
    p.insert("miest.lstm.w_ih", init_weight(rng, d, 4 * h));
    p.insert("miest.lstm.w_hh", init_weight(rng, h, 4 * h));
    // Forget-gate bias starts at 1.
    p.insert("miest.lstm.b", Matrix::from_fn(1, 4 * h, |_, c| if (h..2 * h).contains(&c) { 1.0 } else { 0.0 }));
    for head in ["mu", "lv"] {
        p.insert(format!("miest.{head}.w1"), init_weight(rng, h, h));
        p.insert(format!("miest.{head}.b1"), Matrix::zeros(1, h));
        p.insert(format!("miest.{head}.w2"), init_weight(rng, h, d));
        p.insert(format!("miest.{head}.b2"), Matrix::zeros(1, d));
    }
}

/// Runs the LSTM over `steps` (each `B x d`, one row per sequence) and returns
/// the final hidden state, `B x H`.
pub fn summarize(t: &mut Tape, steps: &[Var]) -> Var {
    let w_ih = t.p("miest.lstm.w_ih");
    let w_hh = t.p("miest.lstm.w_hh");
    let b = t.p("miest.lstm.b");
    let h_size = t.g.value(w_hh).rows();
    let batch = t.g.value(steps[0]).rows();
    let mut h = t.g.constant(Matrix::zeros(batch, h_size));
    let mut c = t.g.constant(Matrix::zeros(batch, h_size));
    for &x in steps {
        let xi = t.g.matmul(x, w_ih);
        let hh = t.g.matmul(h, w_hh);
        let z = t.g.add(xi, hh);
        let z = t.g.add_row(z, b);
        let i = t.g.slice_cols(z, 0, h_size);
        let f = t.g.slice_cols(z, h_size, h_size);
        let gg = t.g.slice_cols(z, 2 * h_size, h_size);
        let o = t.g.slice_cols(z, 3 * h_size, h_size);
        let i = t.g.sigmoid(i);
        let f = t.g.sigmoid(f);
        let gg = t.g.tanh(gg);
        let o = t.g.sigmoid(o);
        let fc = t.g.mul(f, c);
        let ig = t.g.mul(i, gg);
        c = t.g.add(fc, ig);
        let tc = t.g.tanh(c);
        h = t.g.mul(o, tc);
    }
    h
}

fn head(t: &mut Tape, summary: Var, name: &str) -> Var {
    let (w1, b1) = (t.p(&format!("miest.{name}.w1")), t.p(&format!("miest.{name}.b1")));
    let z = t.g.linear(summary, w1, b1);
    let z = t.g.tanh(z);
    let (w2, b2) = (t.p(&format!("miest.{name}.w2")), t.p(&format!("miest.{name}.b2")));
    t.g.linear(z, w2, b2)
}

/// Gaussian mean and clamped log-variance from a `B x H` summary.
pub fn gaussian(t: &mut Tape, cfg: &EstimatorConfig, summary: Var) -> (Var, Var) {
    let mu = head(t, summary, "mu");
    let lv = head(t, summary, "lv");
    let lv = t.g.clamp(lv, cfg.logvar_min, cfg.logvar_max);
    (mu, lv)
}

/// Mean and log-variance for one `T x d` content sequence, each `1 x d`.
pub fn condition(t: &mut Tape, cfg: &EstimatorConfig, content: Var) -> (Var, Var) {
    let frames = t.g.value(content).rows();
    let steps: Vec<Var> = (0..frames).map(|i| t.g.slice_rows(content, i, 1)).collect();
    let h = summarize(t, &steps);
    gaussian(t, cfg, h)
}

/// Per-row log-likelihood of `y` under `N(mu, exp(logvar))`, `B x 1`.
pub fn loglik_rows(g: &mut Graph, y: Var, mu: Var, logvar: Var) -> Var {
    let r = g.sub(y, mu);
    let r2 = g.square(r);
    let nlv = g.scale(logvar, -1.0);
    let prec = g.exp(nlv);
    let q = g.mul(r2, prec);
    let s = g.add(q, logvar);
    let per = g.sum_cols(s);
    g.scale(per, -0.5)
}

/// `-(1/N) sum_i loglik(y_i | mu_i, logvar_i)`.
pub fn e_step(g: &mut Graph, y: Var, mu: Var, logvar: Var) -> Var {
    let ll = loglik_rows(g, y, mu, logvar);
    let m = g.mean(ll);
    g.scale(m, -1.0)
}

/// `(1/N) sum_i [loglik(y_i | c_i) - loglik(y_{k_i} | c_i)]`.
pub fn mi_bound(g: &mut Graph, y: Var, mu: Var, logvar: Var, negatives: &[usize]) -> Var {
    let pos = loglik_rows(g, y, mu, logvar);
    let yn = g.gather_rows(y, negatives.to_vec());
    let neg = loglik_rows(g, yn, mu, logvar);
    let diff = g.sub(pos, neg);
    g.mean(diff)
}

/// Independent uniform draws from `0..n`, one per row.
pub fn sample_negatives(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// A paired `(E_I_f, E_C)` sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub identity: Vec<f64>,
    pub content: Matrix,
}

/// Value-level view of the estimator over a parameter store.
pub struct MiEstimator<'a> {
    pub params: &'a ParamStore,
    pub config: &'a EstimatorConfig,
}

impl<'a> MiEstimator<'a> {
    pub fn new(params: &'a ParamStore, config: &'a EstimatorConfig) -> Self {
        Self { params, config }
    }

    /// Mean and log-variance rows for a content sequence.
    pub fn condition(&self, content: &Matrix) -> Result<(Matrix, Matrix)> {
        if content.rows() == 0 {
            return Err(Error::Shape("content sequence is empty".into()));
        }
        let mut t = Tape::new(self.params, |_| false);
        let c = t.g.constant(content.clone());
        let (mu, lv) = condition(&mut t, self.config, c);
        Ok((t.g.value(mu).clone(), t.g.value(lv).clone()))
    }

    pub fn loglik(&self, identity: &[f64], content: &Matrix) -> Result<f64> {
        let (mu, lv) = self.condition(content)?;
        if identity.len() != mu.cols() {
            return Err(Error::Shape(format!("identity width {} != estimator width {}", identity.len(), mu.cols())));
        }
        let mut g = Graph::new();
        let y = g.constant(Matrix::row_vector(identity));
        let (m, l) = (g.constant(mu), g.constant(lv));
        let ll = loglik_rows(&mut g, y, m, l);
        Ok(g.value(ll).item())
    }

    fn stacked(&self, pairs: &[Pair]) -> Result<(Matrix, Matrix, Matrix)> {
        let mut mus = Vec::with_capacity(pairs.len());
        let mut lvs = Vec::with_capacity(pairs.len());
        for p in pairs {
            let (mu, lv) = self.condition(&p.content)?;
            if p.identity.len() != mu.cols() {
                return Err(Error::Shape(format!("identity width {} != estimator width {}", p.identity.len(), mu.cols())));
            }
            mus.push(mu);
            lvs.push(lv);
        }
        let ys: Vec<Matrix> = pairs.iter().map(|p| Matrix::row_vector(&p.identity)).collect();
        let stack = |v: &[Matrix]| Matrix::vstack(&v.iter().collect::<Vec<_>>());
        Ok((stack(&ys), stack(&mus), stack(&lvs)))
    }

    pub fn e_step_loss(&self, pairs: &[Pair]) -> Result<LossValue> {
        if pairs.is_empty() {
            return Err(Error::Invalid("e-step loss needs at least one pair".into()));
        }
        let (y, mu, lv) = self.stacked(pairs)?;
        let mut g = Graph::new();
        let (y, mu, lv) = (g.constant(y), g.constant(mu), g.constant(lv));
        let l = e_step(&mut g, y, mu, lv);
        Ok(LossValue::scalar(g.value(l).item()))
    }

    /// Sampled bound with explicit negative indices.
    pub fn mi_upper_bound_with(&self, pairs: &[Pair], negatives: &[usize]) -> Result<LossValue> {
        if pairs.is_empty() || negatives.len() != pairs.len() || negatives.iter().any(|&k| k >= pairs.len()) {
            return Err(Error::Invalid("one in-range negative index per pair is required".into()));
        }
        let (y, mu, lv) = self.stacked(pairs)?;
        let mut g = Graph::new();
        let (y, mu, lv) = (g.constant(y), g.constant(mu), g.constant(lv));
        let l = mi_bound(&mut g, y, mu, lv, negatives);
        Ok(LossValue::scalar(g.value(l).item()))
    }

    pub fn mi_upper_bound(&self, pairs: &[Pair], rng: &mut impl Rng) -> Result<LossValue> {
        let neg = sample_negatives(pairs.len(), rng);
        self.mi_upper_bound_with(pairs, &neg)
    }
}
