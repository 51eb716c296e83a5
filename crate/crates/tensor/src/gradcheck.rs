//! Central finite-difference gradient checking.

use rand::Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Options for [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Gradients whose magnitude is below this are compared absolutely.
    pub abs_floor: f64,
    /// Upper bound on coordinates probed per input; `None` probes all.
    pub max_coords: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-5, abs_floor: 1e-6, max_coords: None }
    }
}

impl GradCheck {
    /// Checks the gradients of `f` with respect to every tensor in `inputs`.
    ///
    /// `f` builds the graph from leaves created for `inputs` and may return a
    /// tensor of any shape; it is contracted against a fixed random tensor so
    /// that every output entry contributes.
    pub fn run<F, R>(&self, inputs: &[Tensor], rng: &mut R, f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
        R: Rng + ?Sized,
    {
        let mut tape = Tape::new();
        let leaves = inputs
            .iter()
            .map(|t| tape.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &leaves)?;
        let weights = Tensor::randn(tape.shape(out).to_vec(), 1.0, rng);
        let w = tape.constant(weights.clone())?;
        let loss = tape.dot(out, w)?;
        tape.backward(loss)?;

        let eval = |probe: &[Tensor]| -> Result<f64> {
            let mut t = Tape::new();
            let leaves = probe.iter().map(|x| t.constant(x.clone())).collect::<Result<Vec<_>>>()?;
            let out = f(&mut t, &leaves)?;
            Ok(t.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
        };

        let mut report = GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
        let mut probe = inputs.to_vec();
        for (idx, leaf) in leaves.iter().enumerate() {
            let analytic = tape
                .grad(*leaf)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[idx].shape().to_vec()));
            let n = inputs[idx].numel();
            let coords: Vec<usize> = match self.max_coords {
                Some(k) if k < n => (0..k).map(|_| rng.random_range(0..n)).collect(),
                _ => (0..n).collect(),
            };
            for j in coords {
                let orig = inputs[idx].data()[j];
                probe[idx].data_mut()[j] = orig + self.step;
                let fp = eval(&probe)?;
                probe[idx].data_mut()[j] = orig - self.step;
                let fm = eval(&probe)?;
                probe[idx].data_mut()[j] = orig;
                let numeric = (fp - fm) / (2.0 * self.step);
                let a = analytic.data()[j];
                let abs = (a - numeric).abs();
                let rel = abs / a.abs().max(numeric.abs()).max(self.abs_floor);
                report.max_abs_err = report.max_abs_err.max(abs);
                report.max_rel_err = report.max_rel_err.max(rel);
                report.checked += 1;
            }
        }
        Ok(report)
    }
}
