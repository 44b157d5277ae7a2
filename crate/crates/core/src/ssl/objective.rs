use super::{
    global_loss, mean_entropy, patch_loss, reconstruction_loss, teacher_distribution, total_loss, CenterState,
    LossParts, LossReport, LossWeights, SslError,
};
use crate::augment::ViewSet;
use crate::numcore::{NdArray, Real, Tape, Var};
use crate::vit3d::{decode, forward, patchify, patchify_mask, ModelConfig, ModelParams, ModelVars};

/// Everything one mini-batch produces besides gradients.
pub struct StepOutputs {
    pub loss: Var,
    pub report: LossReport,
    /// Raw teacher logits, `2 x K`, for the image-level center.
    pub teacher_global: NdArray,
    /// Raw teacher logits, `2N x K`, for the token-level center.
    pub teacher_patch: NdArray,
    /// Differentiable nodes recorded while running the teacher; always 0.
    pub teacher_grad_nodes: usize,
}

fn stack(parts: &[&NdArray]) -> Result<NdArray, SslError> {
    let cols = parts[0].matrix_dims().1;
    let data: Vec<Real> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Ok(NdArray::from_vec(&[data.len() / cols.max(1), cols], data)?)
}

/// Run teacher and student on one view set and assemble the weighted objective
/// on `tape`. The teacher is evaluated on its own tape from constants.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_views(
    tape: &mut Tape,
    student: &ModelVars,
    teacher: &ModelParams,
    cfg: &ModelConfig,
    views: &ViewSet,
    center: &CenterState,
    tau_s: Real,
    tau_t: Real,
    weights: &LossWeights,
) -> Result<StepOutputs, SslError> {
    let mut ttape = Tape::new();
    let tvars = teacher.to_tape(&mut ttape, false);
    let mut t_global = Vec::with_capacity(2);
    let mut t_patch = Vec::with_capacity(2);
    for g in &views.globals {
        let out = forward(&mut ttape, &tvars, cfg, &g.teacher)?;
        t_global.push(ttape.value(out.global).clone());
        t_patch.push(ttape.value(out.patches).clone());
    }
    let teacher_grad_nodes = ttape.grad_node_count();

    let tg = [
        teacher_distribution(&t_global[0], &center.global, tau_t)?,
        teacher_distribution(&t_global[1], &center.global, tau_t)?,
    ];
    let tp = [
        teacher_distribution(&t_patch[0], &center.patch, tau_t)?,
        teacher_distribution(&t_patch[1], &center.patch, tau_t)?,
    ];

    let mut s_global = Vec::with_capacity(views.n_views());
    let mut s_patch = Vec::with_capacity(2);
    let mut recon = Vec::with_capacity(2);
    let mut targets = Vec::with_capacity(2);
    let mut mask = Vec::new();
    let mut masked_voxels = 0usize;
    for g in &views.globals {
        let out = forward(tape, student, cfg, &g.masked)?;
        s_global.push(out.global);
        s_patch.push(out.patches);
        recon.push(decode(tape, student, out.tokens)?);
        targets.push(patchify(&g.student, cfg.patch)?);
        mask.extend(patchify_mask(&g.voxel_mask, g.student.extent, cfg.patch)?);
        masked_voxels += g.voxel_mask.iter().filter(|&&m| m).count();
    }
    for l in &views.locals {
        s_global.push(forward(tape, student, cfg, &l.view)?.global);
    }

    let global = global_loss(tape, [&tg[0], &tg[1]], &s_global, tau_s)?;
    let patch = patch_loss(tape, [&tp[0], &tp[1]], [s_patch[0], s_patch[1]], tau_s)?;
    let recon = tape.concat_rows(&recon)?;
    let target = stack(&[&targets[0], &targets[1]])?;
    let rec = reconstruction_loss(tape, &target, recon, &mask)?;
    let parts = LossParts {
        global,
        patch,
        rec,
        teacher_entropy: (mean_entropy(&tg[0]) + mean_entropy(&tg[1])) / 2.0,
        mask_ratio: masked_voxels as Real / mask.len() as Real,
        pairs: 2 * (s_global.len() - 1),
    };
    let (loss, report) = total_loss(tape, &parts, weights)?;
    Ok(StepOutputs {
        loss,
        report,
        teacher_global: stack(&[&t_global[0], &t_global[1]])?,
        teacher_patch: stack(&[&t_patch[0], &t_patch[1]])?,
        teacher_grad_nodes,
    })
}
