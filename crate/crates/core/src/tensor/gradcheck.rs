//! Central finite-difference gradient checks.
//!
//! These helpers only evaluate forward passes, so they stay independent of
//! the tape's backward rules they are used to verify.

use super::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Lower bound on the relative-error denominator, so that structurally
    /// zero gradients compare against round-off instead of dividing by it.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Same, before discounting the central difference's round-off
    /// resolution (only differs for [`GradCheck::params`]).
    pub max_raw_rel_err: f64,
    /// Parameter name (or "input") and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, index: usize, err: f64) {
        self.record_raw(name, index, err, err);
    }

    fn record_raw(&mut self, name: &str, index: usize, err: f64, raw: f64) {
        self.checked += 1;
        self.max_raw_rel_err = self.max_raw_rel_err.max(raw);
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some((name.to_string(), index));
        }
    }
}

impl GradCheck {
    pub fn rel_err(&self, analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(self.floor)
    }

    /// Relative error after discounting `resolution`, the smallest
    /// gradient difference the finite difference can resolve.
    pub fn resolved_rel_err(&self, analytic: f64, numeric: f64, resolution: f64) -> f64 {
        ((analytic - numeric).abs() - resolution).max(0.0) / analytic.abs().max(numeric.abs()).max(self.floor)
    }

    /// Round-off resolution of `(plus - minus) / 2h`: a few ulps of the loss
    /// divided by the step. An analytically zero gradient measured through
    /// an O(10) loss reads as ~1e-10 from rounding alone.
    pub fn resolution(&self, plus: f64, minus: f64) -> f64 {
        const ULPS: f64 = 8.0;
        ULPS * f64::EPSILON * plus.abs().max(minus.abs()) / (2.0 * self.step)
    }

    /// Numerical gradient of `f` at `x`.
    pub fn numeric(&self, x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
        let mut probe = x.clone();
        let mut out = Tensor::zeros(x.shape());
        for i in 0..x.numel() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + self.step;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - self.step;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            out.data_mut()[i] = (plus - minus) / (2.0 * self.step);
        }
        out
    }

    /// Compare an analytic gradient tensor with the numerical one.
    pub fn compare(&self, analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> GradCheckReport {
        let mut report = GradCheckReport::default();
        for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            report.record("input", i, self.rel_err(a, n));
        }
        report
    }

    /// Check every scalar of every non-frozen parameter. `analytic` holds
    /// the gradients (typically the store's own `grad` fields, cloned);
    /// `loss` evaluates the scalar objective for the current store values.
    pub fn params(
        &self,
        store: &mut ParamStore<f64>,
        analytic: &[Tensor<f64>],
        mut loss: impl FnMut(&ParamStore<f64>) -> f64,
    ) -> GradCheckReport {
        let mut report = GradCheckReport::default();
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            if store.get(id).frozen {
                continue;
            }
            let name = store.get(id).name.clone();
            for i in 0..store.get(id).value.numel() {
                let orig = store.get(id).value.data()[i];
                store.get_mut(id).value.data_mut()[i] = orig + self.step;
                let plus = loss(store);
                store.get_mut(id).value.data_mut()[i] = orig - self.step;
                let minus = loss(store);
                store.get_mut(id).value.data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic[k].data()[i];
                let res = self.resolution(plus, minus);
                report.record_raw(&name, i, self.resolved_rel_err(a, numeric, res), self.rel_err(a, numeric));
            }
        }
        report
    }
}
