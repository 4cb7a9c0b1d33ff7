//! Training losses: intensity, detail, hierarchical semantic, and their
//! weighted total. All L1 terms are mean-reduced.

use crate::numerics::{image_gradient, ssim, NumericsError, Tensor, Var};
use crate::perception::{batch_similarity, PerceptionError, QUESTION_COUNT};

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
}

/// Weights of the detail and hierarchical terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 4.0, beta: 1.0 }
    }
}

/// `mean |f − max(ir, vis)|`.
pub fn intensity_loss<'t>(fused: Var<'t>, ir: Var<'t>, vis: Var<'t>) -> Result<Var<'t>, NumericsError> {
    Ok(fused.sub(ir.maximum(vis)?)?.abs().mean())
}

/// `(1 − SSIM(f, ir)) + (1 − SSIM(f, vis)) + mean |∇f − max(∇ir, ∇vis)|`.
pub fn detail_loss<'t>(fused: Var<'t>, ir: Var<'t>, vis: Var<'t>) -> Result<Var<'t>, NumericsError> {
    let s_ir = ssim(fused, ir)?.rsub_scalar(1.0);
    let s_vis = ssim(fused, vis)?.rsub_scalar(1.0);
    let target = image_gradient(ir)?.maximum(image_gradient(vis)?)?;
    let grad = image_gradient(fused)?.sub(target)?.abs().mean();
    s_ir.add(s_vis)?.add(grad)
}

/// Embeddings for one batch: image embeddings are `B×d`, answer embeddings
/// `B×4×d`. Only the fused image embeddings carry gradients.
pub struct HierInputs<'t, 'a> {
    pub fused_image: Var<'t>,
    pub fused_text: &'a Tensor,
    pub ir_image: &'a Tensor,
    pub ir_text: &'a Tensor,
    pub vis_image: &'a Tensor,
    pub vis_text: &'a Tensor,
}

/// Rows `i` of the result are sample `i`'s embedding of answer `j`.
pub fn question_rows(text: &Tensor, j: usize) -> Result<Tensor, NumericsError> {
    match *text.shape() {
        [b, q, d] if q == QUESTION_COUNT && j < q => {
            let data = (0..b).flat_map(|i| text.data()[(i * q + j) * d..][..d].iter().copied()).collect();
            Tensor::new([b, d], data)
        }
        _ => Err(NumericsError::Shape { op: "question_rows", detail: format!("{:?}, question {j}", text.shape()) }),
    }
}

/// Sum over questions of the L1 distances between the fused image's batch
/// similarity distribution and each source's, averaged over the batch.
pub fn hierarchical_loss<'t>(inputs: &HierInputs<'t, '_>) -> Result<Var<'t>, ObjectiveError> {
    let shape = inputs.fused_image.shape();
    let (b, d) = match *shape.as_slice() {
        [b, d] => (b, d),
        _ => return Err(NumericsError::Shape { op: "hierarchical_loss", detail: format!("{shape:?}") }.into()),
    };
    if b < 2 {
        return Err(PerceptionError::DegenerateBatch(b).into());
    }
    for t in [inputs.ir_image, inputs.vis_image] {
        if t.shape() != [b, d] {
            return Err(PerceptionError::Dimension { expected: d, got: t.shape().last().copied().unwrap_or(0) }.into());
        }
    }
    for t in [inputs.fused_text, inputs.ir_text, inputs.vis_text] {
        if t.shape() != [b, QUESTION_COUNT, d] {
            return Err(PerceptionError::Dimension { expected: d, got: t.shape().last().copied().unwrap_or(0) }.into());
        }
    }
    let tape = inputs.fused_image.tape();
    let ir_image = tape.constant(inputs.ir_image.clone());
    let vis_image = tape.constant(inputs.vis_image.clone());
    let mut terms = Vec::with_capacity(QUESTION_COUNT);
    for j in 0..QUESTION_COUNT {
        let s_f = batch_similarity(inputs.fused_image, &question_rows(inputs.fused_text, j)?)?;
        let s_ir = batch_similarity(ir_image, &question_rows(inputs.ir_text, j)?)?;
        let s_vis = batch_similarity(vis_image, &question_rows(inputs.vis_text, j)?)?;
        terms.push(s_f.sub(s_ir)?.abs().sum().add(s_f.sub(s_vis)?.abs().sum())?);
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = total.add(*t)?;
    }
    Ok(total.scale(1.0 / b as f64))
}

/// Loss components of one batch; `l_total = l_int + α·l_detail + β·l_hier`.
#[derive(Clone, Copy)]
pub struct LossBreakdown<'t> {
    pub l_int: Var<'t>,
    pub l_detail: Var<'t>,
    pub l_hier: Var<'t>,
    pub l_total: Var<'t>,
    pub weights: LossWeights,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub l_int: f64,
    pub l_detail: f64,
    pub l_hier: f64,
    pub l_total: f64,
}

impl LossBreakdown<'_> {
    pub fn values(&self) -> LossValues {
        let v = |x: &Var<'_>| x.value().data()[0];
        LossValues {
            l_int: v(&self.l_int),
            l_detail: v(&self.l_detail),
            l_hier: v(&self.l_hier),
            l_total: v(&self.l_total),
        }
    }
}

/// Weighted total. Without `hier` inputs the hierarchical term is the
/// constant 0.
pub fn total_loss<'t>(
    fused: Var<'t>,
    ir: Var<'t>,
    vis: Var<'t>,
    hier: Option<&HierInputs<'t, '_>>,
    weights: LossWeights,
) -> Result<LossBreakdown<'t>, ObjectiveError> {
    let l_int = intensity_loss(fused, ir, vis)?;
    let l_detail = detail_loss(fused, ir, vis)?;
    let l_hier = match hier {
        Some(h) => hierarchical_loss(h)?,
        None => fused.tape().constant(Tensor::scalar(0.0)),
    };
    let l_total = l_int.add(l_detail.scale(weights.alpha))?.add(l_hier.scale(weights.beta))?;
    Ok(LossBreakdown { l_int, l_detail, l_hier, l_total, weights })
}
