//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Perturbation for `(f(x+h) - f(x-h)) / 2h`.
    pub step: f64,
    /// Check at most this many entries per parameter (`None` = all).
    pub max_entries_per_param: Option<usize>,
    /// Denominator floor for the relative error of near-zero gradients.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            max_entries_per_param: None,
            floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||, floor)` over checked entries.
    pub norm_rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        !self.params.is_empty() && self.max_rel_err() < tol
    }

    pub fn entries_checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

fn eval(store: &ParamStore, f: &impl Fn(&mut Graph) -> Var) -> f64 {
    let mut g = Graph::new(store);
    let loss = f(&mut g);
    g.value(loss)[[0, 0]]
}

/// Compares the reverse-mode gradient of the scalar built by `f` against
/// central differences, for every parameter in `store`.
pub fn check_gradients(
    store: &ParamStore,
    f: &impl Fn(&mut Graph) -> Var,
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g);
        g.backward(loss)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for (id, name, value) in store.iter() {
        let n = value.len();
        let entries: Vec<usize> = match cfg.max_entries_per_param {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let zero = ndarray::Array2::zeros(value.dim());
        let grad = analytic.get(id).unwrap_or(&zero);
        let grad = grad.as_slice().expect("standard layout");
        let mut max_rel: f64 = 0.0;
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &e in &entries {
            let orig = value.as_slice().expect("standard layout")[e];
            work.get_mut(id).as_slice_mut().expect("standard layout")[e] = orig + cfg.step;
            let fp = eval(&work, f);
            work.get_mut(id).as_slice_mut().expect("standard layout")[e] = orig - cfg.step;
            let fm = eval(&work, f);
            work.get_mut(id).as_slice_mut().expect("standard layout")[e] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let a = grad[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            max_rel = max_rel.max(rel);
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        report.params.push(ParamCheck {
            name: name.to_string(),
            checked: entries.len(),
            max_rel_err: max_rel,
            norm_rel_err: diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(cfg.floor),
        });
    }
    report
}
