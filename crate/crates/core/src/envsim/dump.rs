//! Columnar text dump of a trajectory slab, one row per atomic step.
//!
//! ```text
//! # env_id episode_id step episode_step tokens reward terminated truncated executed success
//! 0 0 0 0 1,2 0 0 0 1 0
//! ```
//!
//! Fields are separated by a single tab. `step` is the atomic slot on the
//! environment's time axis, `tokens` is the comma-joined token list of the
//! action and flags are `0`/`1`. Rewards use the shortest representation
//! that parses back to the same `f64`.

use crate::types::TrajectorySlab;
use std::io::{self, BufRead, Write};

pub const HEADER: &str =
    "# env_id\tepisode_id\tstep\tepisode_step\ttokens\treward\tterminated\ttruncated\texecuted\tsuccess";

#[derive(Debug, Clone, PartialEq)]
pub struct DumpRow {
    pub env_id: usize,
    pub episode_id: u64,
    pub step: usize,
    pub episode_step: u32,
    pub tokens: Vec<u32>,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub executed: bool,
    pub success: bool,
}

pub fn rows(slab: &TrajectorySlab) -> Vec<DumpRow> {
    let mut out = Vec::new();
    for (env_id, records) in slab.envs.iter().enumerate() {
        let mut step = 0;
        for rec in records {
            for j in 0..rec.chunk_len() {
                out.push(DumpRow {
                    env_id,
                    episode_id: rec.episode_ids[j],
                    step,
                    episode_step: rec.episode_steps[j],
                    tokens: rec.chunk.0[j].0.clone(),
                    reward: rec.rewards[j],
                    terminated: rec.terminated[j],
                    truncated: rec.truncated[j],
                    executed: rec.executed[j],
                    success: rec.success[j],
                });
                step += 1;
            }
        }
    }
    out
}

pub fn write_dump<W: Write>(slab: &TrajectorySlab, mut w: W) -> io::Result<()> {
    writeln!(w, "{HEADER}")?;
    let flag = |b: bool| if b { '1' } else { '0' };
    for r in rows(slab) {
        let tokens: Vec<String> = r.tokens.iter().map(|t| t.to_string()).collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{:?}\t{}\t{}\t{}\t{}",
            r.env_id,
            r.episode_id,
            r.step,
            r.episode_step,
            tokens.join(","),
            r.reward,
            flag(r.terminated),
            flag(r.truncated),
            flag(r.executed),
            flag(r.success)
        )?;
    }
    Ok(())
}

fn bad(line: usize, msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, format!("line {line}: {msg}"))
}

pub fn read_dump<R: BufRead>(r: R) -> io::Result<Vec<DumpRow>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 10 {
            return Err(bad(n + 1, "expected 10 fields"));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|_| bad(n + 1, "bad integer"));
        let flag = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(bad(n + 1, "bad flag")),
        };
        let tokens = f[4]
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|t| t.parse::<u32>().map_err(|_| bad(n + 1, "bad token")))
            .collect::<io::Result<Vec<_>>>()?;
        out.push(DumpRow {
            env_id: num(f[0])? as usize,
            episode_id: num(f[1])?,
            step: num(f[2])? as usize,
            episode_step: num(f[3])? as u32,
            tokens,
            reward: f[5].parse().map_err(|_| bad(n + 1, "bad reward"))?,
            terminated: flag(f[6])?,
            truncated: flag(f[7])?,
            executed: flag(f[8])?,
            success: flag(f[9])?,
        });
    }
    Ok(out)
}
