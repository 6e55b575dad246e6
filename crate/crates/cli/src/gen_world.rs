use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use toponav::seeding::{derive_seed, label};
use toponav::world::{
    annotate_dataset, sample_episode, write_episodes, write_worlds, Episode, EpisodeParams, PathStyle, WorldGraph,
    WorldParams, WorldSet, VARIANTS_PER_TRAJECTORY,
};

use crate::data::{split_file, WORLDS_FILE};
use crate::error::{io_at, refuse, usage, Result};
use crate::manifest::{derive_run_id, prepare_dir, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StyleArg {
    Shortest,
    Meandering,
    /// Alternates shortest and meandering episodes.
    Mixed,
}

/// Generates worlds and episode files for training and evaluation.
#[derive(Debug, Clone, Args)]
pub struct GenWorldArgs {
    #[arg(long)]
    pub seed: u64,
    /// Nodes per world.
    #[arg(long, default_value_t = 36)]
    pub nodes: usize,
    /// Task episodes in the training worlds (`train.jsonl`).
    #[arg(long)]
    pub episodes: usize,
    #[arg(long, value_enum, default_value_t = StyleArg::Shortest)]
    pub style: StyleArg,
    /// Instruction variants per trajectory written to `aug.jsonl`; 1 writes none.
    #[arg(long, default_value_t = 1)]
    pub variants: usize,
    /// Training worlds.
    #[arg(long, default_value_t = 20)]
    pub worlds: usize,
    /// Additional trajectories in the training worlds for pretraining only (`extra.jsonl`).
    #[arg(long, default_value_t = 0)]
    pub extra: usize,
    /// Validation episodes, on their own unseen worlds.
    #[arg(long, default_value_t = 50)]
    pub val: usize,
    /// Held-out test episodes, on unseen worlds disjoint from validation.
    #[arg(long, default_value_t = 100)]
    pub test: usize,
    /// Worlds for each of the validation and test sets.
    #[arg(long, default_value_t = 10)]
    pub heldout_worlds: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct GenWorldSummary {
    pub out: PathBuf,
    pub counts: Vec<(String, usize)>,
}

fn world_params(nodes: usize) -> WorldParams {
    let base = WorldParams::default();
    // Keep node density constant as the node count changes.
    let area = base.area * (nodes as f64 / base.node_count as f64).sqrt();
    WorldParams {
        node_count: nodes,
        area,
        ..base
    }
}

fn make_worlds(seed: u64, role: &str, count: usize, params: &WorldParams) -> Result<Vec<WorldGraph>> {
    (0..count as u64)
        .map(|i| Ok(WorldGraph::generate(derive_seed(seed, &[label(role), i]), params)?))
        .collect()
}

fn style_for(style: StyleArg, i: usize) -> PathStyle {
    match style {
        StyleArg::Shortest => PathStyle::Shortest,
        StyleArg::Meandering => PathStyle::Meandering,
        StyleArg::Mixed if i % 2 == 0 => PathStyle::Shortest,
        StyleArg::Mixed => PathStyle::Meandering,
    }
}

/// `count` episodes spread round-robin over `worlds`. A world that cannot
/// host an episode for one draw gets further draws before the run is refused.
fn make_episodes(seed: u64, role: &str, worlds: &[WorldGraph], count: usize, style: StyleArg) -> Result<Vec<Episode>> {
    const DRAWS: u64 = 8;
    let params = EpisodeParams::default();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let world = &worlds[i % worlds.len()];
        let style = style_for(style, i);
        let mut last = None;
        for draw in 0..DRAWS {
            match sample_episode(world, derive_seed(seed, &[label(role), i as u64, draw]), style, &params) {
                Ok(mut ep) => {
                    ep.id = format!("{role}-{i:05}");
                    out.push(ep);
                    last = None;
                    break;
                }
                Err(e) => last = Some(e),
            }
        }
        if let Some(e) = last {
            return refuse(format!("world {} yields no {role} episode: {e}", world.seed()));
        }
    }
    Ok(out)
}

pub fn cmd_gen_world(args: &GenWorldArgs) -> Result<GenWorldSummary> {
    if args.nodes < 8 {
        return usage(format!("--nodes {} is too small for episodes of at least 3 hops", args.nodes));
    }
    if args.episodes == 0 {
        return usage("--episodes must be positive");
    }
    if args.worlds == 0 || args.heldout_worlds == 0 {
        return usage("--worlds and --heldout-worlds must be positive");
    }
    if args.variants == 0 || args.variants > VARIANTS_PER_TRAJECTORY {
        return usage(format!("--variants must be in 1..={VARIANTS_PER_TRAJECTORY}"));
    }
    let out = prepare_dir(&args.out, &[])?;
    for split in crate::data::SPLITS {
        let p = out.join(split_file(split));
        if p.exists() {
            fs::remove_file(&p).map_err(io_at(&p))?;
        }
    }
    let params = world_params(args.nodes);
    let train_worlds = make_worlds(args.seed, "train-world", args.worlds, &params)?;
    let val_worlds = make_worlds(args.seed, "val-world", args.heldout_worlds, &params)?;
    let test_worlds = make_worlds(args.seed, "test-world", args.heldout_worlds, &params)?;

    let train = make_episodes(args.seed, "train", &train_worlds, args.episodes, args.style)?;
    let extra = make_episodes(args.seed, "extra", &train_worlds, args.extra, args.style)?;
    let val = make_episodes(args.seed, "val", &val_worlds, args.val, args.style)?;
    let test = make_episodes(args.seed, "test", &test_worlds, args.test, args.style)?;

    let worlds: WorldSet = train_worlds.into_iter().chain(val_worlds).chain(test_worlds).collect();
    let aug = if args.variants > 1 {
        let sources: Vec<Episode> = train.iter().chain(&extra).cloned().collect();
        let all = annotate_dataset(&worlds, &sources, derive_seed(args.seed, &[label("annotate")]))?;
        all.chunks(VARIANTS_PER_TRAJECTORY)
            .flat_map(|c| c[..args.variants].iter().cloned())
            .collect()
    } else {
        Vec::new()
    };

    write_worlds(&out.join(WORLDS_FILE), &worlds)?;
    let mut counts = Vec::new();
    for (split, eps) in [("train", &train), ("extra", &extra), ("aug", &aug), ("val", &val), ("test", &test)] {
        if !eps.is_empty() {
            write_episodes(&out.join(split_file(split)), eps)?;
        }
        counts.push((split.to_string(), eps.len()));
    }

    let flags = format!("{args:?}");
    let flags = flags.replace(&format!("{:?}", args.out), "");
    let mut m = RunManifest::new("data", derive_run_id(&["data", &flags]));
    m.seeds.insert("data".into(), args.seed);
    m.seal(&out)?;
    Ok(GenWorldSummary { out, counts })
}

pub fn describe(s: &GenWorldSummary, out: &Path) -> String {
    let parts: Vec<String> = s.counts.iter().map(|(k, n)| format!("{k}={n}")).collect();
    format!("wrote {} ({})", out.display(), parts.join(" "))
}
