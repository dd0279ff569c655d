//! Central finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub rtol: f64,
    /// Finite-difference step.
    pub step: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            rtol: 1e-4,
            step: 1e-5,
            abs_floor: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LeafReport {
    pub leaf: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &LeafReport> {
        self.leaves.iter().filter(|l| !l.passed)
    }
}

fn evaluate<F>(f: &F, leaves: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences, one report per leaf.
pub fn grad_check<F>(f: F, leaves: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.get(v).cloned().ok_or_else(|| Error::Tape("leaf lost its gradient".into())))
        .collect::<Result<_>>()?;
    compare_gradients(|ls| evaluate(&f, ls), &analytic, leaves, cfg)
}

/// Finite-difference comparison against externally supplied gradients.
pub fn compare_gradients<V>(value: V, analytic: &[Tensor], leaves: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    V: Fn(&[Tensor]) -> Result<f64>,
{
    if analytic.len() != leaves.len() {
        return Err(Error::invalid("one analytic gradient per leaf required"));
    }
    let mut work: Vec<Tensor> = leaves.to_vec();
    let mut reports = Vec::with_capacity(leaves.len());
    for (li, grad) in analytic.iter().enumerate() {
        if grad.shape() != leaves[li].shape() {
            return Err(Error::shape("grad_check", grad.shape(), leaves[li].shape()));
        }
        let mut report = LeafReport {
            leaf: li,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for idx in 0..grad.numel() {
            let orig = work[li].data()[idx];
            work[li].data_mut()[idx] = orig + cfg.step;
            let plus = value(&work)?;
            work[li].data_mut()[idx] = orig - cfg.step;
            let minus = value(&work)?;
            work[li].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad.data()[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            if !(err <= report.max_rel_error) {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        report.passed = report.max_rel_error <= cfg.rtol;
        reports.push(report);
    }
    Ok(GradCheckReport { leaves: reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn identity_has_zero_error() {
        let x = Tensor::from_vec(vec![0.5, -1.5, 2.0]);
        let report = grad_check(|t, v| Ok(t.sum(v[0])), &[x], &GradCheckConfig::default()).unwrap();
        assert!(report.passed());
        assert!(report.max_rel_error() < 1e-9);
    }

    #[test]
    fn matmul_chain_passes() {
        let mut r = rng::stream(1, "gc");
        let leaves = vec![
            Tensor::randn(&[3, 4], 1.0, &mut r),
            Tensor::randn(&[4, 5], 1.0, &mut r),
            Tensor::randn(&[5, 2], 1.0, &mut r),
        ];
        let report = grad_check(
            |t, v| {
                let ab = t.matmul(v[0], v[1])?;
                let abc = t.matmul(ab, v[2])?;
                let sq = t.mul(abc, abc)?;
                Ok(t.sum(sq))
            },
            &leaves,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let x = Tensor::from_vec(vec![1.0, 2.0, -0.5]);
        let f = |ls: &[Tensor]| Ok(ls[0].data().iter().map(|v| v * v).sum::<f64>());
        // d/dx x² with the factor 2 dropped
        let bad = Tensor::from_vec(x.data().to_vec());
        let report = compare_gradients(f, &[bad], &[x.clone()], &GradCheckConfig::default()).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures().count(), 1);
        let good = Tensor::from_vec(x.data().iter().map(|v| 2.0 * v).collect());
        assert!(compare_gradients(f, &[good], &[x], &GradCheckConfig::default()).unwrap().passed());
    }
}
