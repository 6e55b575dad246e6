//! Offline pretraining on teacher trajectories: single action prediction
//! (SAP) and masked language modelling (MLM).

use numcore::{Adam, Gradients};
use rand::Rng;

use crate::error::{contract, Result};
use crate::policy::{DropoutCtx, Policy, Session};
use crate::seeding::Rng as SeededRng;
use crate::vocab::MASK;
use crate::world::{Episode, WorldSet};

use super::rollout::{graph_task, teacher_states};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretrainTask {
    Sap,
    Mlm,
}

/// Mean losses of one pretraining batch; the task not trained is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PretrainLoss {
    pub sap: Option<f64>,
    pub mlm: Option<f64>,
}

/// Task for pretraining batch `step`: `sap_per_mlm` SAP batches, then one MLM batch.
pub fn pretrain_task(step: usize, sap_per_mlm: usize) -> PretrainTask {
    if step % (sap_per_mlm + 1) == sap_per_mlm {
        PretrainTask::Mlm
    } else {
        PretrainTask::Sap
    }
}

/// Chooses masked positions at `rate` (at least one when `rate > 0`) and
/// returns the masked token sequence with the positions.
pub fn mask_tokens(tokens: &[usize], rate: f64, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    if rate <= 0.0 || tokens.is_empty() {
        return (tokens.to_vec(), Vec::new());
    }
    let mut positions: Vec<usize> = (0..tokens.len()).filter(|_| rng.random::<f64>() < rate).collect();
    if positions.is_empty() {
        positions.push(rng.random_range(0..tokens.len()));
    }
    let mut masked = tokens.to_vec();
    for &p in &positions {
        masked[p] = MASK;
    }
    (masked, positions)
}

/// SAP cross-entropy summed over every prefix of the teacher path, sharing
/// one encoding of the instruction. Returns `(loss sum, decisions, correct)`.
/// Averaging over prefixes is the expectation of the loss at a uniformly
/// drawn prefix, without the sampling noise.
fn sap_loss(
    policy: &Policy,
    worlds: &WorldSet,
    ep: &Episode,
    drop: DropoutCtx,
    grads: Option<(&mut Gradients, f64)>,
) -> Result<(f64, usize, usize)> {
    let world = worlds.get(ep.world_seed)?;
    let states = teacher_states(world, ep)?;
    let mut s = Session::new(policy, &ep.instruction.tokens, ep.task_id, drop)?;
    let mut total = None;
    let mut correct = 0;
    for (map, label) in &states {
        let out = s.step(map, graph_task(ep))?;
        let loss = s.tape.cross_entropy(out.logits, &[*label], Some(&out.mask))?;
        let logits = out.masked_logits(&s.tape);
        let argmax = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
        correct += usize::from(argmax == *label);
        total = Some(match total {
            None => loss,
            Some(t) => s.tape.add(t, loss)?,
        });
    }
    let total = total.expect("teacher replay yields at least one state");
    let value = s.tape.value(total).item()?;
    if let Some((g, scale)) = grads {
        let l = s.tape.scale(total, scale)?;
        s.tape.backward(l, g)?;
    }
    Ok((value, states.len(), correct))
}

/// MLM cross-entropy over masked positions with the full teacher trajectory
/// on the map. Returns `(sum of token losses, masked count, correct count)`.
fn mlm_loss(
    policy: &Policy,
    worlds: &WorldSet,
    ep: &Episode,
    rate: f64,
    drop: DropoutCtx,
    rng: &mut SeededRng,
    grads: Option<(&mut Gradients, f64)>,
) -> Result<(f64, usize, usize)> {
    let world = worlds.get(ep.world_seed)?;
    let (masked, positions) = mask_tokens(&ep.instruction.tokens, rate, rng);
    if positions.is_empty() {
        return Ok((0.0, 0, 0));
    }
    let states = teacher_states(world, ep)?;
    let (map, _) = states.last().expect("teacher replay yields at least one state");
    let mut s = Session::new(policy, &masked, ep.task_id, drop)?;
    let out = s.step(map, graph_task(ep))?;
    let logits = s.mlm_logits(out.t_sym, &positions)?;
    let targets: Vec<usize> = positions.iter().map(|&p| ep.instruction.tokens[p]).collect();
    let loss = s.tape.cross_entropy(logits, &targets, None)?;
    let n = positions.len();
    let value = s.tape.value(loss).item()? * n as f64;
    let vals = s.tape.value(logits);
    let vocab = vals.cols();
    let correct = targets
        .iter()
        .enumerate()
        .filter(|&(i, &t)| {
            let row = &vals.data()[i * vocab..(i + 1) * vocab];
            (0..vocab).fold(0, |b, j| if row[j] > row[b] { j } else { b }) == t
        })
        .count();
    if let Some((g, scale)) = grads {
        let l = s.tape.scale(loss, scale * n as f64)?;
        s.tape.backward(l, g)?;
    }
    Ok((value, n, correct))
}

/// One pretraining update on `batch` for the given task. SAP loss is the mean
/// over all teacher decisions in the batch; MLM loss is the mean over all masked tokens in the batch.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step(
    policy: &mut Policy,
    adam: &mut Adam,
    worlds: &WorldSet,
    batch: &[&Episode],
    task: PretrainTask,
    mask_rate: f64,
    dropout_seed: u64,
    rng: &mut SeededRng,
) -> Result<PretrainLoss> {
    if batch.is_empty() {
        return contract("empty pretraining batch");
    }
    let rate = policy.config().dropout;
    let mut grads = Gradients::for_store(policy.store());
    let drop = |i: usize| {
        DropoutCtx::new(rate, crate::seeding::derive_seed(dropout_seed, &[i as u64]))
            .with_groups(&crate::policy::Group::ALL, true)
    };
    let loss = match task {
        PretrainTask::Sap => {
            let mut decisions = 0;
            for ep in batch {
                decisions += ep.reference_path.len();
            }
            let scale = 1.0 / decisions as f64;
            let mut total = 0.0;
            for (i, ep) in batch.iter().enumerate() {
                total += sap_loss(policy, worlds, ep, drop(i), Some((&mut grads, scale)))?.0;
            }
            PretrainLoss {
                sap: Some(total * scale),
                mlm: None,
            }
        }
        PretrainTask::Mlm => {
            // Mask seeds are drawn up front so the loss can be normalised by the batch's token count.
            let mask_rngs: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
            let counts: Vec<usize> = batch
                .iter()
                .zip(&mask_rngs)
                .map(|(ep, &seed)| {
                    let mut r = crate::seeding::rng_for(seed, &[]);
                    mask_tokens(&ep.instruction.tokens, mask_rate, &mut r).1.len()
                })
                .collect();
            let total_masked: usize = counts.iter().sum();
            if total_masked == 0 {
                PretrainLoss {
                    sap: None,
                    mlm: Some(0.0),
                }
            } else {
                let scale = 1.0 / total_masked as f64;
                let mut total = 0.0;
                for (i, (ep, &seed)) in batch.iter().zip(&mask_rngs).enumerate() {
                    let mut r = crate::seeding::rng_for(seed, &[]);
                    total += mlm_loss(policy, worlds, ep, mask_rate, drop(i), &mut r, Some((&mut grads, scale)))?.0;
                }
                PretrainLoss {
                    sap: None,
                    mlm: Some(total * scale),
                }
            }
        }
    };
    adam.step(policy.store_mut(), &mut grads)?;
    policy.bump_version();
    Ok(loss)
}

/// Teacher-forced accuracies `(SAP, MLM)` on a fixed episode set, dropout off.
/// SAP is scored at every prefix; MLM masks with a fixed seed.
pub fn pretrain_accuracy(policy: &Policy, worlds: &WorldSet, episodes: &[Episode], mask_rate: f64, seed: u64) -> Result<(f64, f64)> {
    let (mut sap_hits, mut sap_total, mut mlm_hits, mut mlm_total) = (0usize, 0usize, 0usize, 0usize);
    for ep in episodes {
        let world = worlds.get(ep.world_seed)?;
        let states = teacher_states(world, ep)?;
        let mut s = Session::new(policy, &ep.instruction.tokens, ep.task_id, DropoutCtx::off())?;
        for (map, label) in &states {
            let out = s.step(map, graph_task(ep))?;
            let logits = out.masked_logits(&s.tape);
            let argmax = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
            sap_hits += usize::from(argmax == *label);
            sap_total += 1;
        }
        let mut r = crate::seeding::rng_for(seed, &[crate::seeding::label(&ep.id)]);
        let (_, n, c) = mlm_loss(policy, worlds, ep, mask_rate.max(1e-9), DropoutCtx::off(), &mut r, None)?;
        mlm_hits += c;
        mlm_total += n;
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok((frac(sap_hits, sap_total), frac(mlm_hits, mlm_total)))
}

/// Teacher-forced SAP accuracy and mean loss over every prefix of `episodes`.
pub fn sap_teacher_forced(policy: &Policy, worlds: &WorldSet, episodes: &[Episode]) -> Result<(f64, f64)> {
    let (mut hits, mut total, mut loss) = (0usize, 0usize, 0.0);
    for ep in episodes {
        let world = worlds.get(ep.world_seed)?;
        let mut s = Session::new(policy, &ep.instruction.tokens, ep.task_id, DropoutCtx::off())?;
        for (map, label) in teacher_states(world, ep)? {
            let out = s.step(&map, graph_task(ep))?;
            let l = s.tape.cross_entropy(out.logits, &[label], Some(&out.mask))?;
            loss += s.tape.value(l).item()?;
            let logits = out.masked_logits(&s.tape);
            let argmax = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
            hits += usize::from(argmax == label);
            total += 1;
        }
    }
    if total == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((hits as f64 / total as f64, loss / total as f64))
}
