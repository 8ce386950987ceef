//! Pixel-wise supervision losses for predicted masks.
//!
//! Masks may be passed as `[H,W]`, `[N,H,W]` or `[N,1,H,W]`; batched inputs
//! are averaged over the batch as well as over pixels.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// The eight neighbor offsets, row-major.
pub const NEIGHBORS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Fixed contrastive kernels: kernel `n` is −1 at the center and +1 at the
/// `n`-th neighbor, so each response is `x(p + d_n) − x(p)`.
#[derive(Clone, Debug)]
pub struct CdlKernelBank<T: Scalar = f32> {
    kernels: Tensor<T>,
}

impl<T: Scalar> CdlKernelBank<T> {
    pub fn standard() -> Self {
        let mut data = vec![T::zero(); 8 * 9];
        for (n, &(dy, dx)) in NEIGHBORS.iter().enumerate() {
            data[n * 9 + 4] = -T::one();
            data[n * 9 + ((dy + 1) * 3 + dx + 1) as usize] = T::one();
        }
        Self { kernels: Tensor::new([8, 1, 3, 3], data).expect("static shape") }
    }

    /// `[8,1,3,3]` weight tensor.
    pub fn kernels(&self) -> &Tensor<T> {
        &self.kernels
    }

    pub fn len(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Scalar> Default for CdlKernelBank<T> {
    fn default() -> Self {
        Self::standard()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mse: f64,
    pub cdl: f64,
    pub overall: f64,
}

fn as_nchw<T: Scalar>(tape: &mut Tape<T>, v: Var) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    match shape[..] {
        [h, w] => tape.reshape(v, &[1, 1, h, w]),
        [n, h, w] => tape.reshape(v, &[n, 1, h, w]),
        [_, 1, _, _] => Ok(v),
        _ => Err(shape_err!("mask must be [H,W], [N,H,W] or [N,1,H,W], got {:?}", shape)),
    }
}

fn check_pair<T: Scalar>(tape: &Tape<T>, pre: Var, gt: Var) -> Result<()> {
    if tape.shape(pre) != tape.shape(gt) {
        return Err(shape_err!(
            "predicted mask {:?} and ground truth {:?} differ in shape",
            tape.shape(pre),
            tape.shape(gt)
        ));
    }
    Ok(())
}

/// Mean squared error over all pixels (and samples).
pub fn mse_loss<T: Scalar>(tape: &mut Tape<T>, pre: Var, gt: Var) -> Result<Var> {
    check_pair(tape, pre, gt)?;
    let d = tape.sub(pre, gt)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Contrastive depth loss: squared differences of the eight directional
/// responses, averaged over `H × W × 8` (and samples).
pub fn cdl_loss<T: Scalar>(tape: &mut Tape<T>, pre: Var, gt: Var, bank: &CdlKernelBank<T>) -> Result<Var> {
    check_pair(tape, pre, gt)?;
    let pre = as_nchw(tape, pre)?;
    let gt = as_nchw(tape, gt)?;
    let k = tape.constant(bank.kernels().clone());
    let rp = tape.conv2d(pre, k, None, 1, 1)?;
    let rg = tape.conv2d(gt, k, None, 1, 1)?;
    let d = tape.sub(rp, rg)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// `mse + cdl`; the returned var is the scalar to back-propagate.
pub fn overall_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pre: Var,
    gt: Var,
    bank: &CdlKernelBank<T>,
) -> Result<(Var, LossReport)> {
    let mse = mse_loss(tape, pre, gt)?;
    let cdl = cdl_loss(tape, pre, gt, bank)?;
    let overall = tape.add(mse, cdl)?;
    let report = LossReport {
        mse: tape.value(mse).item()?.to_f64_lossy(),
        cdl: tape.value(cdl).item()?.to_f64_lossy(),
        overall: tape.value(overall).item()?.to_f64_lossy(),
    };
    Ok((overall, report))
}

/// Evaluates both losses on plain tensors.
pub fn loss_report<T: Scalar>(pre: &Tensor<T>, gt: &Tensor<T>) -> Result<LossReport> {
    let mut tape = Tape::new();
    let p = tape.constant(pre.clone());
    let g = tape.constant(gt.clone());
    overall_loss(&mut tape, p, g, &CdlKernelBank::standard()).map(|(_, r)| r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64([2, 2], data).unwrap()
    }

    #[test]
    fn bank_shape() {
        let bank = CdlKernelBank::<f32>::standard();
        for k in bank.kernels().data().chunks(9) {
            assert_eq!(k.iter().sum::<f32>(), 0.0);
            assert_eq!(k.iter().filter(|&&v| v != 0.0).count(), 2);
            assert_eq!(k[4], -1.0);
        }
    }

    #[test]
    fn mse_examples() {
        let zeros = mask(&[0.0; 4]);
        assert_eq!(loss_report(&zeros, &zeros).unwrap(), LossReport::default());
        assert_eq!(loss_report(&mask(&[1.0; 4]), &zeros).unwrap().mse, 1.0);
        assert_eq!(loss_report(&mask(&[0.5, 0.0, 0.0, 0.0]), &zeros).unwrap().mse, 0.0625);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 2]));
        let b = tape.constant(Tensor::zeros([3, 3]));
        assert!(mse_loss(&mut tape, a, b).is_err());
        assert!(cdl_loss(&mut tape, a, b, &CdlKernelBank::standard()).is_err());
    }

    #[test]
    fn interior_constant_shift_vanishes() {
        // 6x6 masks with a replicated 1-pixel border; cropping to the
        // interior 4x4 before the loss is what removes border effects, so
        // compare directional responses on the interior only.
        let base: Vec<f64> = (0..36).map(|i| ((i * 7) % 5) as f64 / 5.0).collect();
        let shifted: Vec<f64> = base.iter().map(|v| v + 0.3).collect();
        let mut tape = Tape::<f64>::new();
        let k = tape.constant(CdlKernelBank::standard().kernels().clone());
        let a = tape.constant(Tensor::from_f64([1, 1, 6, 6], &base).unwrap());
        let b = tape.constant(Tensor::from_f64([1, 1, 6, 6], &shifted).unwrap());
        let ra = tape.conv2d(a, k, None, 1, 0).unwrap();
        let rb = tape.conv2d(b, k, None, 1, 0).unwrap();
        assert!(tape.value(ra).max_abs_diff(tape.value(rb)) < 1e-12);
    }
}
