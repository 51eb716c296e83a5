use collage_tensor::{Tape, Tensor, TensorError, Var};

use crate::error::Result;
use crate::nets::{Discriminator, Generator, NormMode};
use crate::params::Bound;

/// Per-row cosine distance `1 − a·b` between unit rows of `[N, F]`.
///
/// Evaluated as `½‖a − b‖²`, which is the same quantity for unit vectors
/// and is exactly symmetric and exactly zero for identical rows.
pub fn cosine_rows(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.row_dot(d, d)?;
    Ok(tape.scale(sq, 0.5)?)
}

/// Cosine distance between the discriminator features of two `[C, R, R]`
/// images, in `[0, 2]`.
pub fn loss_cosine(d: &Discriminator, x1: &Tensor, x2: &Tensor) -> Result<f64> {
    if x1.shape() != x2.shape() {
        return Err(TensorError::Dimension(format!("images {:?} and {:?} differ in shape", x1.shape(), x2.shape())).into());
    }
    let mut shape = vec![2];
    shape.extend_from_slice(x1.shape());
    let mut data = x1.data().to_vec();
    data.extend_from_slice(x2.data());
    let psi = d.psi(&Tensor::new(shape, data)?)?;
    let f = psi.shape()[1];
    let (a, b) = psi.data().split_at(f);
    Ok((0.5 * a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()).min(2.0))
}

/// Frozen generator and discriminator bound on one tape, for evaluating
/// `L(G(z), x)` against precomputed target features.
pub(crate) struct Critic<'a> {
    pub g: &'a Generator,
    pub d: &'a Discriminator,
    pub gp: Bound,
    pub dp: Bound,
}

impl<'a> Critic<'a> {
    pub fn bind(tape: &mut Tape, g: &'a Generator, d: &'a Discriminator) -> Result<Self> {
        let gp = g.bind(tape, false)?;
        let dp = d.bind(tape, false)?;
        Ok(Critic { g, d, gp, dp })
    }

    /// Per-sample losses `[N]` of `G(z, classes)` against unit feature rows.
    pub fn losses(&self, tape: &mut Tape, z: Var, classes: &[usize], target_psi: Var) -> Result<Var> {
        let out = self.g.forward(tape, &self.gp, z, classes, NormMode::Edit, &crate::nets::NoHooks)?;
        let psi = self.d.forward(tape, &self.dp, out.image, None)?.psi;
        cosine_rows(tape, psi, target_psi)
    }
}
