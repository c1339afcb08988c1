//! Parameter registry, Adam and finite-difference gradient checking.

use std::fmt;

use crate::error::{Error, Result};

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimization group of a tensor. Learning rates and freezing act per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    MpiDensity,
    MpiFeatures,
    CubeDensity,
    CubeFeatures,
    Head,
    Reliability,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::MpiDensity,
        ParamGroup::MpiFeatures,
        ParamGroup::CubeDensity,
        ParamGroup::CubeFeatures,
        ParamGroup::Head,
        ParamGroup::Reliability,
    ];

    pub fn code(self) -> u8 {
        match self {
            ParamGroup::MpiDensity => 0,
            ParamGroup::MpiFeatures => 1,
            ParamGroup::CubeDensity => 2,
            ParamGroup::CubeFeatures => 3,
            ParamGroup::Head => 4,
            ParamGroup::Reliability => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        ParamGroup::ALL.into_iter().find(|g| g.code() == code)
    }

    pub fn is_grid(self) -> bool {
        !matches!(self, ParamGroup::Head | ParamGroup::Reliability)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamGroup::MpiDensity => "mpi-density",
            ParamGroup::MpiFeatures => "mpi-features",
            ParamGroup::CubeDensity => "cube-density",
            ParamGroup::CubeFeatures => "cube-features",
            ParamGroup::Head => "head",
            ParamGroup::Reliability => "reliability",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub steps: u64,
    pub frozen: bool,
}

/// Flat registry of every learnable tensor together with its gradient buffer
/// and Adam state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Selects tensors for [`ParamStore::freeze`] and [`ParamStore::unfreeze`].
#[derive(Clone, Debug)]
pub enum Selector<'a> {
    All,
    Group(ParamGroup),
    /// Every group except the one given.
    AllExcept(ParamGroup),
    NamePrefix(&'a str),
}

impl Selector<'_> {
    fn matches(&self, p: &Param) -> bool {
        match self {
            Selector::All => true,
            Selector::Group(g) => p.group == *g,
            Selector::AllExcept(g) => p.group != *g,
            Selector::NamePrefix(prefix) => p.name.starts_with(prefix),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<ParamId> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape(format!(
                "tensor {name}: shape {shape:?} holds {n} values, got {}",
                values.len()
            )));
        }
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Input(format!("tensor {name} registered twice")));
        }
        self.params.push(Param {
            name,
            group,
            shape,
            grad: vec![0.0; n],
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            values,
            steps: 0,
            frozen: false,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].values
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Number of scalar parameters, frozen or not.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Sets the frozen flag on every matching tensor; returns how many matched.
    pub fn freeze(&mut self, selector: &Selector<'_>) -> usize {
        self.set_frozen(selector, true)
    }

    pub fn unfreeze(&mut self, selector: &Selector<'_>) -> usize {
        self.set_frozen(selector, false)
    }

    fn set_frozen(&mut self, selector: &Selector<'_>, frozen: bool) -> usize {
        let mut hits = 0;
        for p in self.params.iter_mut().filter(|p| selector.matches(p)) {
            p.frozen = frozen;
            hits += 1;
        }
        if hits == 0 {
            log::warn!("selector {selector:?} matched no parameters");
        }
        hits
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    /// One Adam update with bias correction on every unfrozen tensor, using
    /// `lr(group)` as the step size. All gradients are zeroed afterwards.
    pub fn adam_step(&mut self, adam: &Adam, lr: impl Fn(ParamGroup) -> f64) {
        for p in &mut self.params {
            // Frozen tensors never accumulate gradients.
            if !p.frozen {
                adam.update(p, lr(p.group));
                p.grad.fill(0.0);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

impl Adam {
    fn update(&self, p: &mut Param, lr: f64) {
        p.steps += 1;
        let t = p.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let step = lr / c1;
        let iter = p
            .values
            .iter_mut()
            .zip(&p.grad)
            .zip(p.first_moment.iter_mut().zip(p.second_moment.iter_mut()));
        for ((x, &g), (m, v)) in iter {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *x -= step * *m / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Exponential learning-rate decay that reaches `final_factor` at `total` steps.
pub fn exponential_decay(step: usize, total: usize, final_factor: f64) -> f64 {
    if total == 0 {
        return 1.0;
    }
    final_factor.powf(step as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} coordinates, max rel. error {:.3e} (tolerance {:.1e}) at #{} [analytic {:.6e}, numeric {:.6e}]",
            self.checked,
            self.max_rel_error,
            self.tolerance,
            self.worst_index,
            self.analytic,
            self.numeric
        )
    }
}

/// Relative error with a floor on the denominator, so coordinates whose true
/// gradient is essentially zero are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central finite differences of `f` at `x`,
/// probing only the coordinates listed in `indices` (all when empty).
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    indices: &[usize],
    h: f64,
    tolerance: f64,
    floor: f64,
) -> GradCheckReport {
    let mut probe = x.to_vec();
    let all: Vec<usize>;
    let indices = if indices.is_empty() {
        all = (0..x.len()).collect();
        &all
    } else {
        indices
    };
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        tolerance,
    };
    for &i in indices {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let err = relative_error(analytic[i], numeric, floor);
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    report
}

/// Finite-difference check over selected `(tensor, index)` coordinates of a
/// store. `f` evaluates the scalar objective; the analytic gradients are read
/// from the store's gradient buffers, which the caller fills beforehand.
pub fn grad_check_store(
    store: &mut ParamStore,
    coords: &[(ParamId, usize)],
    mut f: impl FnMut(&ParamStore) -> f64,
    h: f64,
    tolerance: f64,
    floor: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        tolerance,
    };
    for (k, &(id, i)) in coords.iter().enumerate() {
        let analytic = store.grad(id)[i];
        let orig = store.values(id)[i];
        store.values_mut(id)[i] = orig + h;
        let fp = f(store);
        store.values_mut(id)[i] = orig - h;
        let fm = f(store);
        store.values_mut(id)[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let err = relative_error(analytic, numeric, floor);
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = k;
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("x", ParamGroup::MpiDensity, vec![1], vec![x]).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let (mut s, id) = scalar_store(2.5);
        s.adam_step(&Adam::default(), |_| 0.1);
        assert_eq!(s.values(id), &[2.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut s, id) = scalar_store(1.0);
        s.grad_mut(id)[0] = 1.0;
        s.adam_step(&Adam::default(), |_| 0.01);
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
        let expected = 1.0 - 0.01 / (1.0 + 1e-8);
        assert!((s.values(id)[0] - expected).abs() < 1e-15);
        assert_eq!(s.grad(id), &[0.0]);
    }

    #[test]
    fn first_step_opposes_gradient() {
        let mut s = ParamStore::new();
        let g = vec![0.3, -2.0, 1e-4, 0.0, 5.0];
        let id = s.register("v", ParamGroup::Head, vec![5], vec![0.0; 5]).unwrap();
        s.grad_mut(id).copy_from_slice(&g);
        s.adam_step(&Adam::default(), |_| 1e-3);
        let dot: f64 = s.values(id).iter().zip(&g).map(|(d, g)| d * g).sum();
        assert!(dot < 0.0);
    }

    #[test]
    fn frozen_groups_are_skipped() {
        let mut s = ParamStore::new();
        let a = s.register("a", ParamGroup::Head, vec![2], vec![1.0, 2.0]).unwrap();
        let b = s.register("b", ParamGroup::Reliability, vec![1], vec![0.0]).unwrap();
        assert_eq!(s.freeze(&Selector::AllExcept(ParamGroup::Reliability)), 1);
        s.grad_mut(a).copy_from_slice(&[5.0, -5.0]);
        s.grad_mut(b)[0] = 1.0;
        s.adam_step(&Adam::default(), |_| 0.1);
        assert_eq!(s.values(a), &[1.0, 2.0]);
        assert!(s.values(b)[0] < 0.0);

        s.unfreeze(&Selector::All);
        s.grad_mut(a).copy_from_slice(&[5.0, -5.0]);
        s.adam_step(&Adam::default(), |_| 0.1);
        assert_ne!(s.values(a), &[1.0, 2.0]);
    }

    #[test]
    fn freeze_all_makes_step_identity() {
        let mut s = ParamStore::new();
        let a = s.register("a", ParamGroup::MpiFeatures, vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        s.freeze(&Selector::All);
        s.grad_mut(a).copy_from_slice(&[1.0, 1.0, 1.0]);
        let before = s.clone();
        s.adam_step(&Adam::default(), |_| 1.0);
        assert_eq!(s.values(a), before.values(a));
        assert_eq!(s.freeze(&Selector::NamePrefix("nothing")), 0);
    }

    #[test]
    fn register_validates_shape() {
        let mut s = ParamStore::new();
        assert!(s.register("x", ParamGroup::Head, vec![2, 2], vec![0.0; 3]).is_err());
        s.register("x", ParamGroup::Head, vec![1], vec![0.0]).unwrap();
        assert!(s.register("x", ParamGroup::Head, vec![1], vec![0.0]).is_err());
    }

    #[test]
    fn grad_check_quadratic_and_linear() {
        let r = grad_check(|x| x[0] * x[0], &[3.0], &[6.0], &[], 1e-5, 1e-8, 1e-12);
        assert!(r.passed(), "{r}");
        let r = grad_check(|x| 2.0 * x[0] - 7.0 * x[1], &[0.3, -1.0], &[2.0, -7.0], &[], 1e-3, 1e-10, 1e-12);
        assert!(r.max_rel_error < 1e-10);
        let r = grad_check(|x| x[0] * x[0], &[3.0], &[5.0], &[], 1e-5, 1e-6, 1e-12);
        assert!(!r.passed());
    }

    #[test]
    fn decay_schedule() {
        assert_eq!(exponential_decay(0, 100, 0.1), 1.0);
        assert!((exponential_decay(100, 100, 0.1) - 0.1).abs() < 1e-15);
        assert!((exponential_decay(50, 100, 0.01) - 0.1).abs() < 1e-15);
    }
}
