//! The individual training stages. Every stage runs a fixed epoch budget,
//! full batch, with Adam; supervised stages keep the parameters of the
//! epoch with the best validation accuracy.

use serde::{Deserialize, Serialize};

use super::{PipelineError, TrainConfig, SoftLoss};
use crate::graph::{Splits, ViewKind};
use crate::losses::{bce, distill_loss, mean_positive_cosine, mse, nt_xent, Balancer, Coefficients, SimHead};
use crate::metrics::{accuracy, predictions};
use crate::models::{bind, forward_student, Classifier, Linear, Parameters, Projector, ViewData};
use crate::tensor::{AdamState, Matrix, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedRow {
    pub epoch: usize,
    pub loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SupervisedLog {
    pub rows: Vec<SupervisedRow>,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorRow {
    pub epoch: usize,
    pub loss: f64,
    pub mean_cosine: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProjectorLog {
    pub rows: Vec<ProjectorRow>,
    /// Loss and mean positive cosine after the last update.
    pub final_loss: f64,
    pub final_cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillRow {
    pub epoch: usize,
    pub hard_loss: f64,
    pub soft_loss: f64,
    pub alpha: f64,
    pub beta: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DistillLog {
    pub rows: Vec<DistillRow>,
    pub best_epoch: usize,
}

/// Labels and splits shared by the supervised stages.
#[derive(Clone, Copy, Debug)]
pub struct Supervision<'a> {
    pub labels: &'a [u8],
    pub splits: &'a Splits,
}

impl<'a> Supervision<'a> {
    pub fn check(&self) -> Result<(), PipelineError> {
        if self.splits.train.is_empty() {
            return Err(PipelineError::Invariant("training split is empty".into()));
        }
        if self.splits.val.is_empty() {
            return Err(PipelineError::Invariant("validation split is empty".into()));
        }
        Ok(())
    }
}

fn apply_step<M: Parameters + ?Sized>(
    model: &mut M,
    tape: &Tape,
    params: &[Var],
    adam: &mut AdamState,
) -> Result<(), PipelineError> {
    let grads: Vec<Matrix> = params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
        .collect();
    let refs: Vec<Option<&Matrix>> = grads.iter().map(Some).collect();
    adam.step(&mut model.params_mut(), &refs)?;
    Ok(())
}

fn finite(stage: &'static str, epoch: usize, value: f64) -> Result<f64, PipelineError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(PipelineError::Divergence { stage, epoch, value })
    }
}

fn soft_objective(
    tape: &mut Tape,
    kind: SoftLoss,
    h: Var,
    target: Var,
    tau: f64,
    head: Option<SimHead>,
) -> Result<Var, PipelineError> {
    Ok(match kind {
        SoftLoss::Ntxent => nt_xent(tape, h, target, tau, head)?,
        SoftLoss::Mse => mse(tape, h, target)?,
    })
}

fn bind_head(tape: &mut Tape, head: Option<&Linear>) -> Option<SimHead> {
    head.map(|l| SimHead {
        weight: tape.leaf(l.weight.clone(), true),
        bias: tape.leaf(l.bias.clone(), true),
    })
}

fn step_head(head: Option<&mut Linear>, bound: Option<SimHead>, tape: &Tape, adam: &mut AdamState) -> Result<(), PipelineError> {
    if let (Some(h), Some(b)) = (head, bound) {
        let mut p = crate::models::Mlp { layers: vec![h.clone()] };
        apply_step(&mut p, tape, &[b.weight, b.bias], adam)?;
        *h = p.layers.pop().expect("one layer");
    }
    Ok(())
}

/// Supervised BCE training of `model` on `input`; returns the parameters of
/// the best-validation-accuracy epoch.
pub fn train_classifier(
    stage: &'static str,
    mut model: Classifier,
    input: &ViewData,
    sup: Supervision<'_>,
    cfg: &TrainConfig,
) -> Result<(Classifier, SupervisedLog), PipelineError> {
    sup.check()?;
    let mut adam = AdamState::new(cfg.adam());
    let mut log = SupervisedLog::default();
    let mut best: Option<(f64, Classifier)> = None;
    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let params = bind(&mut tape, &model, true);
        let out = model.forward(&mut tape, &params, input)?;
        let probs = tape.sigmoid(out.logits)?;
        let loss = bce(&mut tape, probs, sup.labels, &sup.splits.train)?;
        let loss_value = finite(stage, epoch, tape.value(loss).get(0, 0))?;
        let preds = predictions(tape.value(probs).as_slice());
        let val_acc = accuracy(&preds, sup.labels, &sup.splits.val)?;
        if best.as_ref().is_none_or(|(b, _)| val_acc > *b) {
            best = Some((val_acc, model.clone()));
            log.best_epoch = epoch;
        }
        tape.backward(loss)?;
        apply_step(&mut model, &tape, &params, &mut adam)?;
        log.rows.push(SupervisedRow {
            epoch,
            loss: loss_value,
            val_acc,
        });
    }
    let (_, best) = best.expect("at least one epoch");
    Ok((best, log))
}

/// Contrastive training of the projector so that
/// `projector(expert_features)` matches `target` row by row. Only the
/// projector (and the optional similarity head) is updated; the last
/// epoch's parameters are kept.
pub fn train_projector(
    mut projector: Projector,
    mut head: Option<Linear>,
    expert_features: &Matrix,
    target: &Matrix,
    cfg: &TrainConfig,
) -> Result<(Projector, Option<Linear>, ProjectorLog), PipelineError> {
    const STAGE: &str = "projector";
    let mut adam = AdamState::new(cfg.adam());
    let mut head_adam = AdamState::new(cfg.adam());
    let mut log = ProjectorLog::default();
    let tau = cfg.tau();
    let evaluate = |projector: &Projector, head: Option<&Linear>, train: bool| -> Result<_, PipelineError> {
        let mut tape = Tape::new();
        let params = bind(&mut tape, projector, train);
        let bound = bind_head(&mut tape, head);
        let x = tape.constant(expert_features.clone());
        let t = tape.constant(target.clone());
        let h = projector.forward(&mut tape, &params, x)?;
        let loss = soft_objective(&mut tape, cfg.soft_loss, h, t, tau, bound)?;
        let cosine = mean_positive_cosine(tape.value(h), target)?;
        Ok((tape, params, bound, loss, cosine))
    };
    for epoch in 0..cfg.epochs {
        let (mut tape, params, bound, loss, mean_cosine) = evaluate(&projector, head.as_ref(), true)?;
        let loss_value = finite(STAGE, epoch, tape.value(loss).get(0, 0))?;
        tape.backward(loss)?;
        apply_step(&mut projector, &tape, &params, &mut adam)?;
        step_head(head.as_mut(), bound, &tape, &mut head_adam)?;
        log.rows.push(ProjectorRow {
            epoch,
            loss: loss_value,
            mean_cosine,
        });
    }
    let (tape, _, _, loss, cosine) = evaluate(&projector, head.as_ref(), false)?;
    log.final_loss = finite(STAGE, cfg.epochs, tape.value(loss).get(0, 0))?;
    log.final_cosine = cosine;
    Ok((projector, head, log))
}

/// Distils `teacher_h` into `student` under `alpha * L_c + beta * L_kd`.
/// The coefficients come from the adaptive balancer unless
/// `cfg.fixed_alpha` is set.
pub fn distill_student(
    mut student: Classifier,
    mut head: Option<Linear>,
    input: &ViewData,
    teacher_h: &Matrix,
    sup: Supervision<'_>,
    cfg: &TrainConfig,
) -> Result<(Classifier, DistillLog), PipelineError> {
    const STAGE: &str = "student";
    sup.check()?;
    if input.kind != ViewKind::Full {
        return Err(PipelineError::Invariant(format!("student trained on a {} view", input.kind)));
    }
    let mut adam = AdamState::new(cfg.adam());
    let mut head_adam = AdamState::new(cfg.adam());
    let mut balancer = Balancer::new(cfg.balancer_lr, cfg.gamma())?;
    let mut log = DistillLog::default();
    let mut best: Option<(f64, Classifier)> = None;
    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let params = bind(&mut tape, &student, true);
        let bound = bind_head(&mut tape, head.as_ref());
        let out = forward_student(&student, &mut tape, &params, input)?;
        let probs = tape.sigmoid(out.logits)?;
        let hard = bce(&mut tape, probs, sup.labels, &sup.splits.train)?;
        let target = tape.constant(teacher_h.clone());
        let soft = soft_objective(&mut tape, cfg.soft_loss, out.representation, target, cfg.tau(), bound)?;
        let hard_value = finite(STAGE, epoch, tape.value(hard).get(0, 0))?;
        let soft_value = finite(STAGE, epoch, tape.value(soft).get(0, 0))?;
        let c = match cfg.fixed_alpha {
            Some(a) => Coefficients::from_alpha(a),
            None if epoch == 0 => balancer.start(hard_value, soft_value)?,
            None => balancer.update(hard_value, soft_value)?,
        };
        if !c.is_valid() {
            return Err(PipelineError::Invariant(format!(
                "epoch {epoch}: alpha {} + beta {} violates the coefficient contract",
                c.alpha, c.beta
            )));
        }
        let total = distill_loss(&mut tape, hard, soft, c)?;
        let preds = predictions(tape.value(probs).as_slice());
        let val_acc = accuracy(&preds, sup.labels, &sup.splits.val)?;
        if best.as_ref().is_none_or(|(b, _)| val_acc > *b) {
            best = Some((val_acc, student.clone()));
            log.best_epoch = epoch;
        }
        tape.backward(total)?;
        apply_step(&mut student, &tape, &params, &mut adam)?;
        step_head(head.as_mut(), bound, &tape, &mut head_adam)?;
        log.rows.push(DistillRow {
            epoch,
            hard_loss: hard_value,
            soft_loss: soft_value,
            alpha: c.alpha,
            beta: c.beta,
            val_acc,
        });
    }
    let (_, best) = best.expect("at least one epoch");
    Ok((best, log))
}
