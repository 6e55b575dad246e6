//! The planner network: text encoder, panorama encoder, graph-token builder,
//! dual-phase fusion transformer, and the action (SAP) and masked-token (MLM) heads.

mod layers;
mod sampling;
mod session;

use std::path::Path;

use numcore::{decode_checkpoint, encode_checkpoint, ParamId, ParamStore, Tensor};
use rand::Rng;

use crate::error::{NavError, Result};
use crate::seeding::{rng_for, Rng as SeededRng};
use crate::vocab::DEFAULT_VOCAB_SIZE;
use layers::{CrossBlock, Ffn, Init, LayerNorm, Linear, SelfBlock};

pub use sampling::{log_softmax, sample_action, SampleMode};
pub use session::{Session, StepOutput};

const CONFIG_TENSOR: &str = "__config__";
/// Number of task-embedding rows; ids 1..=3 are used.
pub const TASK_ROWS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub text_layers: usize,
    pub pano_layers: usize,
    pub fusion_layers: usize,
    pub view_count: usize,
    pub view_dim: usize,
    pub max_text_len: usize,
    /// Step-embedding rows: bucket 0 for unvisited nodes, then one per step.
    pub step_buckets: usize,
    pub dropout: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            vocab_size: DEFAULT_VOCAB_SIZE,
            d_model: 64,
            heads: 4,
            ffn_dim: 128,
            text_layers: 2,
            pano_layers: 2,
            fusion_layers: 4,
            view_count: 12,
            view_dim: 48,
            max_text_len: 64,
            step_buckets: 21,
            dropout: 0.1,
        }
    }
}

impl PolicyConfig {
    fn to_vec(&self) -> Vec<f64> {
        vec![
            self.vocab_size as f64,
            self.d_model as f64,
            self.heads as f64,
            self.ffn_dim as f64,
            self.text_layers as f64,
            self.pano_layers as f64,
            self.fusion_layers as f64,
            self.view_count as f64,
            self.view_dim as f64,
            self.max_text_len as f64,
            self.step_buckets as f64,
            self.dropout,
        ]
    }

    fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 12 || v[..11].iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
            return Err(NavError::Load("malformed policy config block".into()));
        }
        let u = |i: usize| v[i] as usize;
        let c = PolicyConfig {
            vocab_size: u(0),
            d_model: u(1),
            heads: u(2),
            ffn_dim: u(3),
            text_layers: u(4),
            pano_layers: u(5),
            fusion_layers: u(6),
            view_count: u(7),
            view_dim: u(8),
            max_text_len: u(9),
            step_buckets: u(10),
            dropout: v[11],
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NavError::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.vocab_size == 0 || self.ffn_dim == 0 || self.view_count == 0 || self.view_dim == 0 {
            return bad("vocab, ffn, view count and view dim must be positive".into());
        }
        if self.max_text_len == 0 || self.step_buckets == 0 {
            return bad("max_text_len and step_buckets must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Parameter groups; freezing and dropout switches act per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Text = 0,
    /// Panorama encoder and graph-token embeddings.
    Node = 1,
    Fusion = 2,
    Sap = 3,
    Mlm = 4,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Text, Group::Node, Group::Fusion, Group::Sap, Group::Mlm];

    fn of_name(name: &str) -> Option<Group> {
        let prefix = name.split('.').next()?;
        match prefix {
            "text" => Some(Group::Text),
            "node" | "graph" => Some(Group::Node),
            "fusion" => Some(Group::Fusion),
            "sap" => Some(Group::Sap),
            "mlm" => Some(Group::Mlm),
            _ => None,
        }
    }
}

/// Dropout rate, per-group on/off switches, and the mask stream.
#[derive(Debug, Clone)]
pub struct DropoutCtx {
    pub rate: f64,
    active: [bool; 5],
    pub(crate) rng: SeededRng,
}

impl DropoutCtx {
    /// Dropout disabled everywhere (evaluation, gradient checks).
    pub fn off() -> Self {
        DropoutCtx {
            rate: 0.0,
            active: [false; 5],
            rng: rng_for(0, &[]),
        }
    }

    pub fn new(rate: f64, seed: u64) -> Self {
        DropoutCtx {
            rate,
            active: [false; 5],
            rng: rng_for(seed, &[]),
        }
    }

    pub fn with_groups(mut self, groups: &[Group], on: bool) -> Self {
        for g in groups {
            self.active[*g as usize] = on;
        }
        self
    }

    pub fn is_active(&self, g: Group) -> bool {
        self.rate > 0.0 && self.active[g as usize]
    }
}

#[derive(Debug, Clone)]
pub(crate) struct TextEncoder {
    pub word: ParamId,
    pub pos: ParamId,
    pub kind: ParamId,
    pub task: ParamId,
    pub ln: LayerNorm,
    pub layers: Vec<SelfBlock>,
}

#[derive(Debug, Clone)]
pub(crate) struct PanoEncoder {
    pub proj: Linear,
    pub angle: ParamId,
    pub ln: LayerNorm,
    pub layers: Vec<SelfBlock>,
}

#[derive(Debug, Clone)]
pub(crate) struct GraphEmbed {
    pub feature: Linear,
    pub stop: ParamId,
    pub step: ParamId,
    pub pose: Linear,
    pub task: ParamId,
    pub ln: LayerNorm,
}

#[derive(Debug, Clone)]
pub(crate) struct FusionLayer {
    /// Text stream attending to graph tokens.
    pub text_from_graph: CrossBlock,
    /// Graph stream attending to text tokens; weights are not shared with the above.
    pub graph_from_text: CrossBlock,
    pub text_self: SelfBlock,
    pub graph_self: SelfBlock,
}

#[derive(Debug, Clone)]
pub(crate) struct Modules {
    pub text: TextEncoder,
    pub pano: PanoEncoder,
    pub graph: GraphEmbed,
    pub fusion: Vec<FusionLayer>,
    pub guide: layers::Attention,
    pub guide_ffn: Ffn,
    pub sap: Ffn,
    pub mlm_hidden: Linear,
    pub mlm_ln: LayerNorm,
    pub mlm_out: Linear,
}

/// Planner weights plus the handles used to address them.
#[derive(Debug, Clone)]
pub struct Policy {
    config: PolicyConfig,
    store: ParamStore,
    modules: Modules,
    version: u64,
}

impl Policy {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[crate::seeding::label("policy-init")]);
        let mut store = ParamStore::new();
        let modules = build(&config, &mut Init { store: &mut store, rng: &mut rng });
        Ok(Policy {
            config,
            store,
            modules,
            version: 0,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    /// Dropout is a training setting rather than architecture, so each stage may pick its own rate.
    pub fn set_dropout(&mut self, rate: f64) -> Result<()> {
        let config = PolicyConfig {
            dropout: rate,
            ..self.config.clone()
        };
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub(crate) fn modules(&self) -> &Modules {
        &self.modules
    }

    /// Counter bumped after every parameter update; identifies snapshots.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn group_of(&self, id: ParamId) -> Group {
        Group::of_name(self.store.name(id)).expect("every parameter is registered under a group prefix")
    }

    pub fn params_in(&self, group: Group) -> Vec<ParamId> {
        self.store.ids().filter(|&id| self.group_of(id) == group).collect()
    }

    /// Freezes exactly the listed groups.
    pub fn freeze_groups(&mut self, frozen: &[Group]) {
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let g = self.group_of(id);
            self.store.set_frozen(id, frozen.contains(&g));
        }
    }

    pub fn frozen_groups(&self) -> Vec<Group> {
        Group::ALL
            .into_iter()
            .filter(|&g| {
                let ids = self.params_in(g);
                !ids.is_empty() && ids.iter().all(|&id| self.store.is_frozen(id))
            })
            .collect()
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let cfg = Tensor::vector(self.config.to_vec());
        encode_checkpoint(std::iter::once((CONFIG_TENSOR, &cfg)).chain(self.store.named()))
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let named = decode_checkpoint(bytes)?;
        let cfg = named
            .iter()
            .find(|(n, _)| n == CONFIG_TENSOR)
            .ok_or_else(|| NavError::Load("checkpoint has no policy config block".into()))?;
        let config = PolicyConfig::from_slice(cfg.1.data())?;
        let mut policy = Policy::new(config, 0)?;
        let params: Vec<(String, Tensor)> = named.into_iter().filter(|(n, _)| n != CONFIG_TENSOR).collect();
        if params.len() != policy.store.len() {
            return Err(NavError::Load(format!(
                "checkpoint holds {} tensors, policy expects {}",
                params.len(),
                policy.store.len()
            )));
        }
        policy.store.load_named(&params)?;
        Ok(policy)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

fn build<R: Rng>(c: &PolicyConfig, init: &mut Init<R>) -> Modules {
    let d = c.d_model;
    let h = c.ffn_dim;
    let emb = 0.5;
    let text = TextEncoder {
        word: init.tensor("text.word", &[c.vocab_size, d], emb),
        pos: init.tensor("text.pos", &[c.max_text_len, d], emb),
        kind: init.tensor("text.type", &[2, d], emb),
        task: init.tensor("text.task", &[TASK_ROWS, d], emb),
        ln: init.layer_norm("text.ln", d),
        layers: (0..c.text_layers).map(|i| init.self_block(&format!("text.l{i}"), d, h)).collect(),
    };
    let pano = PanoEncoder {
        proj: init.linear("node.proj", c.view_dim, d),
        angle: init.tensor("node.angle", &[c.view_count, d], emb),
        ln: init.layer_norm("node.ln", d),
        layers: (0..c.pano_layers).map(|i| init.self_block(&format!("node.l{i}"), d, h)).collect(),
    };
    let graph = GraphEmbed {
        feature: init.linear("graph.feature", d, d),
        stop: init.tensor("graph.stop", &[1, d], emb),
        step: init.tensor("graph.step", &[c.step_buckets, d], emb),
        pose: init.linear("graph.pose", 5, d),
        task: init.tensor("graph.task", &[TASK_ROWS, d], emb),
        ln: init.layer_norm("graph.ln", d),
    };
    let fusion = (0..c.fusion_layers)
        .map(|i| FusionLayer {
            text_from_graph: init.cross_block(&format!("fusion.l{i}.text_from_graph"), d),
            graph_from_text: init.cross_block(&format!("fusion.l{i}.graph_from_text"), d),
            text_self: init.self_block(&format!("fusion.l{i}.text_self"), d, h),
            graph_self: init.self_block(&format!("fusion.l{i}.graph_self"), d, h),
        })
        .collect();
    let guide = init.attention("fusion.guide", d);
    let guide_ffn = init.ffn("fusion.guide_ffn", d, h, d);
    let sap = Ffn {
        up: init.linear("sap.up", 2 * d, d),
        down: init.linear_std("sap.down", d, 1, 0.01),
    };
    Modules {
        text,
        pano,
        graph,
        fusion,
        guide,
        guide_ffn,
        sap,
        mlm_hidden: init.linear("mlm.hidden", d, d),
        mlm_ln: init.layer_norm("mlm.ln", d),
        mlm_out: init.linear_std("mlm.out", d, c.vocab_size, 0.01),
    }
}
