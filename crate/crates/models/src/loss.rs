use crystvox_tensor::{Element, Graph, Var};

use crate::config::{SegLoss, TrainConfig};
use crate::vae::EncoderOutput;
use crate::ModelError;

/// Graph nodes of the VAE objective and its components.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub re: Var,
    pub kl: Var,
    pub bce: Var,
    pub total: Var,
}

impl LossTerms {
    /// `(L_RE, KL, L_BCE, total)`.
    pub fn values<T: Element>(&self, g: &Graph<T>) -> (f64, f64, f64, f64) {
        let v = |x: Var| g.value(x).item().as_f64();
        (v(self.re), v(self.kl), v(self.bce), v(self.total))
    }
}

/// Segmentation loss between logits and one-hot targets.
pub fn unet_loss<T: Element>(g: &mut Graph<T>, logits: Var, target: Var, kind: SegLoss) -> Result<Var, ModelError> {
    Ok(match kind {
        SegLoss::Bce => g.bce_with_logits(logits, target)?,
        SegLoss::SoftmaxCe => g.softmax_cross_entropy(logits, target)?,
    })
}

/// `L_RE(M̂, M) + β·KL(q(z|M) ‖ N(0, 1)) + γ·L_BCE(Ŝ, S)`.
///
/// A zero-weighted term is evaluated for logging but does not enter the total.
#[allow(clippy::too_many_arguments)]
pub fn vae_loss<T: Element>(
    g: &mut Graph<T>,
    m_hat: Var,
    m: Var,
    posterior: &EncoderOutput,
    logits: Var,
    target: Var,
    cfg: &TrainConfig,
) -> Result<LossTerms, ModelError> {
    let re = g.mse(m_hat, m)?;
    let kl = g.kl_diag_gaussian(posterior.mu, posterior.logvar)?;
    let bce = unet_loss(g, logits, target, cfg.seg_loss)?;
    let total = g.weighted_sum(&[(re, 1.0), (kl, cfg.beta), (bce, cfg.gamma)])?;
    Ok(LossTerms { re, kl, bce, total })
}
