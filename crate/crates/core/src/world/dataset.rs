//! Trajectory annotation, train/fine-tune splitting, and line-delimited file IO.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::episode::{Episode, TaskId};
use super::speaker::{draw_cuts, render_instruction, Register};
use super::{WorldGraph, WorldRecord, WorldSet};
use crate::error::{contract, NavError, Result};
use crate::seeding::{label, rng_for};

/// Segment counts of the three split schemes; each is rendered twice.
pub const ANNOTATION_SCHEMES: [usize; 3] = [1, 2, 3];
pub const VARIANTS_PER_TRAJECTORY: usize = 6;

pub const WORLD_FORMAT: &str = "toponav-worlds";
pub const EPISODE_FORMAT: &str = "toponav-episodes";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
}

/// Re-describes every trajectory six times: three split schemes (1, 2 and 3
/// segments) times two descriptions, the first phrased direction-first and the
/// second landmark-first. Variants keep the geometry and carry the augmented task id.
pub fn annotate_dataset(worlds: &WorldSet, episodes: &[Episode], seed: u64) -> Result<Vec<Episode>> {
    let mut out = Vec::with_capacity(episodes.len() * VARIANTS_PER_TRAJECTORY);
    for ep in episodes {
        let world = worlds.get(ep.world_seed)?;
        let hops = ep.hops();
        for (scheme, &segments) in ANNOTATION_SCHEMES.iter().enumerate() {
            let segments = segments.min(hops);
            for draw in 0..2 {
                let variant = scheme * 2 + draw;
                let mut rng = rng_for(seed, &[label("annotate"), label(&ep.id), variant as u64]);
                let cuts = draw_cuts(hops, segments, &mut rng)?;
                let register = if draw == 0 { Register::DirectionFirst } else { Register::LandmarkFirst };
                let instruction = render_instruction(
                    world,
                    &ep.reference_path,
                    ep.start_heading,
                    &cuts,
                    &vec![register; segments],
                    TaskId::Augmented as u8,
                )?;
                out.push(Episode {
                    id: format!("{}-a{}", ep.id, variant),
                    instruction,
                    task_id: TaskId::Augmented,
                    ..ep.clone()
                });
            }
        }
    }
    Ok(out)
}

/// Seeded split into `(sft, rft)` with `round(len * rft_fraction)` episodes
/// (at least one, at most `len - 1`) on the fine-tuning side. Both halves keep
/// input order.
pub fn split_dataset(episodes: &[Episode], rft_fraction: f64, seed: u64) -> Result<(Vec<Episode>, Vec<Episode>)> {
    if episodes.is_empty() {
        return contract("cannot split an empty episode list");
    }
    if !(rft_fraction > 0.0 && rft_fraction < 1.0) {
        return Err(NavError::Config(format!("rft_fraction {rft_fraction} not in (0, 1)")));
    }
    let n = episodes.len();
    let k = if n == 1 {
        0
    } else {
        ((n as f64 * rft_fraction).round() as usize).clamp(1, n - 1)
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[label("split")]));
    let mut to_rft = vec![false; n];
    for &i in &order[..k] {
        to_rft[i] = true;
    }
    let (mut sft, mut rft) = (Vec::with_capacity(n - k), Vec::with_capacity(k));
    for (ep, r) in episodes.iter().zip(to_rft) {
        if r {
            rft.push(ep.clone());
        } else {
            sft.push(ep.clone());
        }
    }
    Ok((sft, rft))
}

fn write_lines<T: Serialize>(path: &Path, format: &str, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = Header {
        format: format.to_string(),
        version: FORMAT_VERSION,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_lines<T: DeserializeOwned>(path: &Path, format: &str) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or_else(|| NavError::Load(format!("{}: empty file", path.display())))??;
    let header: Header = serde_json::from_str(&first)
        .map_err(|e| NavError::Load(format!("{}: bad header: {e}", path.display())))?;
    if header.format != format || header.version != FORMAT_VERSION {
        return Err(NavError::Load(format!(
            "{}: expected {format} v{FORMAT_VERSION}, found {} v{}",
            path.display(),
            header.format,
            header.version
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| NavError::Load(format!("{}:{}: {e}", path.display(), i + 2)))?,
        );
    }
    Ok(out)
}

pub fn write_episodes(path: &Path, episodes: &[Episode]) -> Result<()> {
    write_lines(path, EPISODE_FORMAT, episodes)
}

pub fn read_episodes(path: &Path) -> Result<Vec<Episode>> {
    read_lines(path, EPISODE_FORMAT)
}

pub fn write_worlds(path: &Path, worlds: &WorldSet) -> Result<()> {
    let records: Vec<WorldRecord> = worlds.iter().map(WorldGraph::to_record).collect();
    write_lines(path, WORLD_FORMAT, &records)
}

pub fn read_worlds(path: &Path) -> Result<WorldSet> {
    let records: Vec<WorldRecord> = read_lines(path, WORLD_FORMAT)?;
    records.into_iter().map(WorldGraph::from_record).collect()
}
