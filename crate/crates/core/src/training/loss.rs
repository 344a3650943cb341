use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOGIT_CLAMP: f64 = 15.0;
pub const SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSwitches {
    pub bce: bool,
    pub dice: bool,
    pub iou: bool,
}

impl LossSwitches {
    pub const ALL: LossSwitches = LossSwitches { bce: true, dice: true, iou: true };

    pub fn validate(&self) -> Result<()> {
        if self.bce || self.dice || self.iou {
            Ok(())
        } else {
            Err(Error::config("train.loss", "at least one loss term must be enabled"))
        }
    }
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self::ALL
    }
}

/// Scalar loss tensors; `total` sums the enabled terms, the others are always computed.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Tensor,
    pub bce: Tensor,
    pub dice: Tensor,
    pub iou: Tensor,
}

impl LossOutput {
    pub fn values(&self) -> Result<LossValues> {
        let f = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossValues { total: f(&self.total)?, bce: f(&self.bce)?, dice: f(&self.dice)?, iou: f(&self.iou)? })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
    pub iou: f64,
}

pub fn sigmoid(z: &Tensor) -> Result<Tensor> {
    Ok((z.neg()?.exp()? + 1.0)?.recip()?)
}

/// BCE (mean over pixels) + Dice + soft IoU (each per mask, averaged over the batch).
///
/// `logits` and `gt` share shape `(H, W)` or `(B, H, W)`; `gt` must be 0/1.
pub fn segmentation_loss(logits: &Tensor, gt: &Tensor, switches: LossSwitches) -> Result<LossOutput> {
    switches.validate()?;
    if logits.dims() != gt.dims() {
        return Err(Error::input(format!("logits {:?} and ground truth {:?} differ", logits.dims(), gt.dims())));
    }
    if logits.rank() != 2 && logits.rank() != 3 {
        return Err(Error::input("loss expects (H, W) or (B, H, W) inputs"));
    }
    let g = gt.to_dtype(logits.dtype())?;
    let gv = g.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    if gv.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::input("ground truth must be binary"));
    }
    let (z, g) = if logits.rank() == 2 { (logits.unsqueeze(0)?, g.unsqueeze(0)?) } else { (logits.clone(), g) };
    let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)?;

    // softplus(z) - g z, with softplus(z) = max(z, 0) + ln(1 + e^{-|z|})
    let softplus = (z.relu()? + (z.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    let bce = (softplus - (&g * &z)?)?.mean_all()?;

    let p = sigmoid(&z)?;
    let sum_hw = |t: &Tensor| -> Result<Tensor> { Ok(t.sum(D::Minus1)?.sum(D::Minus1)?) };
    let inter = sum_hw(&(&p * &g)?)?;
    let sp = sum_hw(&p)?;
    let sg = sum_hw(&g)?;
    let dice = (1.0 - ((inter.clone() * 2.0)? + SMOOTH)?.div(&((&sp + &sg)? + SMOOTH)?)?)?.mean_all()?;
    let union = ((&sp + &sg)? - &inter)?;
    let iou = (1.0 - (inter + SMOOTH)?.div(&(union + SMOOTH)?)?)?.mean_all()?;

    let mut total: Option<Tensor> = None;
    for (on, term) in [(switches.bce, &bce), (switches.dice, &dice), (switches.iou, &iou)] {
        if on {
            total = Some(match total {
                Some(t) => (t + term)?,
                None => term.clone(),
            });
        }
    }
    Ok(LossOutput { total: total.expect("validated"), bce, dice, iou })
}
