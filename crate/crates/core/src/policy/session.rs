//! One episode's forward passes on a single tape: the instruction and each
//! panorama are encoded once and reused by every decision step.

use std::collections::BTreeMap;

use numcore::{Tape, Tensor, Var};

use super::layers::Fwd;
use super::{DropoutCtx, Group, Policy};
use crate::error::{contract, NavError, Result};
use crate::topomap::{FeatureSource, TopoMap, ZERO_POSE};
use crate::world::{NodeId, TaskId};

/// Result of one decision step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Fused text features `[N_t, d]`.
    pub t_sym: Var,
    /// Graph features after fusion and refinement `[N_g, 2d]`.
    pub g_out: Var,
    /// Raw action scores `[1, N_g]`; STOP first, then map nodes by id.
    pub logits: Var,
    /// Which graph tokens are selectable (STOP and frontier nodes).
    pub mask: Vec<bool>,
}

impl StepOutput {
    /// Scores with non-candidates set to `-inf`.
    pub fn masked_logits(&self, tape: &Tape) -> Vec<f64> {
        tape.value(self.logits)
            .data()
            .iter()
            .zip(&self.mask)
            .map(|(&s, &m)| if m { s } else { f64::NEG_INFINITY })
            .collect()
    }
}

pub struct Session<'p> {
    policy: &'p Policy,
    pub tape: Tape,
    pub drop: DropoutCtx,
    text: Var,
    pano: BTreeMap<NodeId, Var>,
}

impl<'p> Session<'p> {
    /// Encodes the instruction. `task` selects the text task embedding.
    pub fn new(policy: &'p Policy, tokens: &[usize], task: TaskId, drop: DropoutCtx) -> Result<Self> {
        let mut tape = Tape::new();
        let mut drop = drop;
        let text = encode_text(policy, &mut tape, &mut drop, tokens, task)?;
        Ok(Session {
            policy,
            tape,
            drop,
            text,
            pano: BTreeMap::new(),
        })
    }

    fn fwd(&mut self) -> Fwd<'_> {
        make_fwd(self.policy, &mut self.tape, &mut self.drop)
    }

    pub fn policy(&self) -> &'p Policy {
        self.policy
    }

    /// Contextual text features `[N_t, d]` from the text encoder.
    pub fn text_features(&self) -> Var {
        self.text
    }

    /// Encodes a `K × d_view` panorama into `K × d` view features.
    pub fn encode_panorama(&mut self, views: &Tensor) -> Result<Var> {
        let cfg = self.policy.config();
        if views.shape() != [cfg.view_count, cfg.view_dim] {
            return contract(format!(
                "panorama shape {:?}, expected [{}, {}]",
                views.shape(),
                cfg.view_count,
                cfg.view_dim
            ));
        }
        let m = &self.policy.modules().pano;
        let angles: Vec<usize> = (0..cfg.view_count).collect();
        let mut f = self.fwd();
        let x = f.tape.constant(views.clone())?;
        let x = m.proj.fwd(&mut f, x)?;
        let angle = f.p(m.angle)?;
        let a = f.tape.embedding(angle, &angles)?;
        let x = f.tape.add(x, a)?;
        let x = m.ln.fwd(&mut f, x)?;
        let mut x = f.dropout(x, Group::Node)?;
        for layer in &m.layers {
            x = layer.fwd(&mut f, x, Group::Node)?;
        }
        Ok(x)
    }

    fn panorama_of(&mut self, map: &TopoMap, v: NodeId) -> Result<Var> {
        if let Some(&x) = self.pano.get(&v) {
            return Ok(x);
        }
        let views = map
            .panorama(v)
            .ok_or_else(|| NavError::Contract(format!("no panorama recorded for node {v}")))?
            .clone();
        let x = self.encode_panorama(&views)?;
        self.pano.insert(v, x);
        Ok(x)
    }

    /// Graph tokens `G_0`: STOP first, then map nodes in id order.
    pub fn graph_tokens(&mut self, map: &TopoMap, graph_task: TaskId) -> Result<Var> {
        if map.is_empty() {
            return contract("graph tokens need a non-empty map");
        }
        let mut feats = Vec::with_capacity(map.len() + 1);
        let mut buckets = vec![0usize];
        let mut poses = ZERO_POSE.to_vec();
        let entries: Vec<(NodeId, crate::topomap::MapNode)> = map.nodes().map(|(k, n)| (k, n.clone())).collect();
        for (v, node) in &entries {
            let feat = match node.source {
                FeatureSource::Panorama => {
                    let p = self.panorama_of(map, *v)?;
                    self.tape.mean_rows(p)?
                }
                FeatureSource::Inherited { parent, sector } => {
                    let p = self.panorama_of(map, parent)?;
                    self.tape.select_rows(p, &[sector])?
                }
            };
            feats.push(feat);
            buckets.push(node.last_visit);
            poses.extend_from_slice(&node.pose);
        }
        let cfg = self.policy.config();
        if let Some(&b) = buckets.iter().find(|&&b| b >= cfg.step_buckets) {
            return Err(NavError::Index(format!("step bucket {b} beyond {}", cfg.step_buckets)));
        }
        let n = entries.len() + 1;
        let m = &self.policy.modules().graph;
        let mut f = self.fwd();
        let stop = f.p(m.stop)?;
        let mut rows = vec![stop];
        rows.extend(feats);
        let x = f.tape.concat_rows(&rows)?;
        let x = m.feature.fwd(&mut f, x)?;
        let step = f.p(m.step)?;
        let s = f.tape.embedding(step, &buckets)?;
        let pose = f.tape.constant(Tensor::new(vec![n, 5], poses)?)?;
        let p = m.pose.fwd(&mut f, pose)?;
        let task_t = f.p(m.task)?;
        let t = f.tape.embedding(task_t, &[graph_task.index()])?;
        let x = f.tape.add(x, s)?;
        let x = f.tape.add(x, p)?;
        let x = f.tape.add_row(x, t)?;
        let x = m.ln.fwd(&mut f, x)?;
        f.dropout(x, Group::Node)
    }

    /// Symmetric fusion followed by text-guided refinement: returns
    /// `(T_sym, G_out)` with `G_out = [G_sym | FFN(CrossAttn(G_sym, T_sym))]`.
    pub fn fuse(&mut self, t0: Var, g0: Var) -> Result<(Var, Var)> {
        let d = self.policy.config().d_model;
        for (name, v) in [("text", t0), ("graph", g0)] {
            if self.tape.value(v).cols() != d {
                return contract(format!("{name} features have width {}, expected {d}", self.tape.value(v).cols()));
            }
        }
        let m = self.policy.modules();
        let mut f = self.fwd();
        let (mut t, mut g) = (t0, g0);
        for layer in &m.fusion {
            let t1 = layer.text_from_graph.fwd(&mut f, t, g, Group::Fusion)?;
            let g1 = layer.graph_from_text.fwd(&mut f, g, t, Group::Fusion)?;
            t = layer.text_self.fwd(&mut f, t1, Group::Fusion)?;
            g = layer.graph_self.fwd(&mut f, g1, Group::Fusion)?;
        }
        let guide = m.guide.fwd(&mut f, g, t)?;
        let refined = m.guide_ffn.fwd(&mut f, guide)?;
        let g_out = f.tape.concat_cols(g, refined)?;
        Ok((t, g_out))
    }

    /// Per-token action scores `[1, N_g]` from `G_out`.
    pub fn sap_scores(&mut self, g_out: Var) -> Result<Var> {
        let m = self.policy.modules();
        let mut f = self.fwd();
        let s = m.sap.fwd(&mut f, g_out)?;
        let n = f.tape.value(s).rows();
        Ok(f.tape.reshape(s, vec![1, n])?)
    }

    /// Full decision step over the current map.
    pub fn step(&mut self, map: &TopoMap, graph_task: TaskId) -> Result<StepOutput> {
        let mask = map.candidate_mask();
        if !mask.iter().any(|&m| m) {
            return contract("no candidate actions");
        }
        let g0 = self.graph_tokens(map, graph_task)?;
        let (t_sym, g_out) = self.fuse(self.text, g0)?;
        let logits = self.sap_scores(g_out)?;
        Ok(StepOutput {
            t_sym,
            g_out,
            logits,
            mask,
        })
    }

    /// Vocabulary logits `[m, vocab]` for the given text positions of `t_sym`.
    pub fn mlm_logits(&mut self, t_sym: Var, positions: &[usize]) -> Result<Var> {
        let vocab = self.policy.config().vocab_size;
        let n = self.tape.value(t_sym).rows();
        if let Some(&p) = positions.iter().find(|&&p| p >= n) {
            return Err(NavError::Index(format!("masked position {p} beyond {n} tokens")));
        }
        if positions.is_empty() {
            return Ok(self.tape.constant(Tensor::zeros(&[0, vocab]))?);
        }
        let m = self.policy.modules();
        let mut f = self.fwd();
        let x = f.tape.select_rows(t_sym, positions)?;
        let x = m.mlm_hidden.fwd(&mut f, x)?;
        let x = f.tape.gelu(x)?;
        let x = m.mlm_ln.fwd(&mut f, x)?;
        m.mlm_out.fwd(&mut f, x)
    }
}

fn make_fwd<'a>(policy: &'a Policy, tape: &'a mut Tape, drop: &'a mut DropoutCtx) -> Fwd<'a> {
    Fwd {
        tape,
        store: policy.store(),
        drop,
        heads: policy.config().heads,
    }
}

fn encode_text(
    policy: &Policy,
    tape: &mut Tape,
    drop: &mut DropoutCtx,
    tokens: &[usize],
    task: TaskId,
) -> Result<Var> {
    let cfg = policy.config();
    let n = tokens.len();
    if n == 0 {
        return contract("empty instruction");
    }
    if n > cfg.max_text_len {
        return Err(NavError::Index(format!(
            "instruction has {n} tokens, at most {} supported",
            cfg.max_text_len
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(NavError::Index(format!("token {t} outside vocabulary of {}", cfg.vocab_size)));
    }
    let m = &policy.modules().text;
    let positions: Vec<usize> = (0..n).collect();
    let mut f = make_fwd(policy, tape, drop);
    let word = f.p(m.word)?;
    let pos = f.p(m.pos)?;
    let kind = f.p(m.kind)?;
    let task_t = f.p(m.task)?;
    let w = f.tape.embedding(word, tokens)?;
    let p = f.tape.embedding(pos, &positions)?;
    let k = f.tape.embedding(kind, &[0])?;
    let tk = f.tape.embedding(task_t, &[task.index()])?;
    let x = f.tape.add(w, p)?;
    let x = f.tape.add_row(x, k)?;
    let x = f.tape.add_row(x, tk)?;
    let x = m.ln.fwd(&mut f, x)?;
    let mut x = f.dropout(x, Group::Text)?;
    for layer in &m.layers {
        x = layer.fwd(&mut f, x, Group::Text)?;
    }
    Ok(x)
}
