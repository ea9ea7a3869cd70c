//! Plain-text meta-state checkpoints.
//!
//! ```text
//! #metarec-checkpoint v1
//! fingerprint <topology fingerprint>
//! config_hash <hash>
//! seed <u64>
//! outer_step <usize>
//! segments <count>
//! segment <layer> <kind> <rows> <cols>
//! <values separated by spaces>
//! ...
//! ```
//!
//! Values use shortest round-trip formatting, so a reload is bit exact.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::metalearn::MetaState;
use crate::model::{LayerId, NetworkTopology};
use crate::nncore::{ParameterSet, Segment, SegmentKind};

const MAGIC: &str = "#metarec-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: MetaState,
    pub fingerprint: String,
    pub config_hash: String,
}

pub fn write_checkpoint<W: Write>(
    mut out: W,
    state: &MetaState,
    topology: &NetworkTopology,
    config_hash: &str,
) -> Result<()> {
    if !state.theta0.matches_topology(topology) {
        return Err(Error::Checkpoint("parameters do not match the topology".into()));
    }
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "fingerprint {}", topology.fingerprint())?;
    writeln!(out, "config_hash {config_hash}")?;
    writeln!(out, "seed {}", state.rng_seed)?;
    writeln!(out, "outer_step {}", state.outer_step)?;
    writeln!(out, "segments {}", state.theta0.segments().len())?;
    for seg in state.theta0.segments() {
        writeln!(out, "segment {} {} {} {}", seg.layer.0, seg.kind, seg.rows, seg.cols)?;
        let mut first = true;
        for v in &seg.values {
            if !first {
                out.write_all(b" ")?;
            }
            write!(out, "{v}")?;
            first = false;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, state: &MetaState, topology: &NetworkTopology, config_hash: &str) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write_checkpoint(&mut out, state, topology, config_hash)?;
    out.flush()?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn field<'a>(line: Option<&'a str>, key: &str) -> Result<&'a str> {
    let line = line.ok_or_else(|| bad(format!("missing {key} line")))?;
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| bad(format!("expected {key}, got {line:?}")))
}

fn number<T: std::str::FromStr>(text: &str, what: &str) -> Result<T> {
    text.trim().parse().map_err(|_| bad(format!("bad {what}: {text:?}")))
}

/// Reads a checkpoint without checking it against a topology.
pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Checkpoint> {
    let lines: Vec<String> = input.lines().collect::<std::io::Result<_>>()?;
    let mut it = lines.iter().map(String::as_str);
    if it.next() != Some(MAGIC) {
        return Err(bad("not a metarec checkpoint"));
    }
    let fingerprint = field(it.next(), "fingerprint")?.to_string();
    let config_hash = field(it.next(), "config_hash")?.to_string();
    let rng_seed: u64 = number(field(it.next(), "seed")?, "seed")?;
    let outer_step: usize = number(field(it.next(), "outer_step")?, "outer_step")?;
    let count: usize = number(field(it.next(), "segments")?, "segment count")?;
    let mut segments = Vec::with_capacity(count);
    for _ in 0..count {
        let head: Vec<&str> = field(it.next(), "segment")?.split(' ').collect();
        if head.len() != 4 {
            return Err(bad("segment header needs layer, kind, rows and cols"));
        }
        let layer: u8 = number(head[0], "layer")?;
        let kind: SegmentKind = head[1].parse().map_err(|_| bad(format!("bad kind {:?}", head[1])))?;
        let rows: usize = number(head[2], "rows")?;
        let cols: usize = number(head[3], "cols")?;
        let body = it.next().ok_or_else(|| bad("missing segment values"))?;
        let values: Vec<f64> = if body.is_empty() {
            Vec::new()
        } else {
            body.split(' ').map(|v| number(v, "value")).collect::<Result<_>>()?
        };
        if values.len() != rows * cols {
            return Err(bad(format!(
                "segment {layer}/{kind} holds {} values, expected {}",
                values.len(),
                rows * cols
            )));
        }
        segments.push(Segment {
            layer: LayerId(layer),
            kind,
            rows,
            cols,
            values,
        });
    }
    if it.any(|l| !l.trim().is_empty()) {
        return Err(bad("trailing data after last segment"));
    }
    let theta0 = ParameterSet::from_segments(segments).map_err(|e| bad(e.to_string()))?;
    Ok(Checkpoint {
        state: MetaState {
            theta0,
            outer_step,
            rng_seed,
        },
        fingerprint,
        config_hash,
    })
}

/// Loads a checkpoint and checks it was written for `topology`.
pub fn load_checkpoint(path: &Path, topology: &NetworkTopology) -> Result<Checkpoint> {
    let ckpt = read_checkpoint(BufReader::new(fs::File::open(path)?))?;
    let expected = topology.fingerprint();
    if ckpt.fingerprint != expected {
        return Err(bad(format!(
            "topology fingerprint {} does not match {expected}",
            ckpt.fingerprint
        )));
    }
    if !ckpt.state.theta0.matches_topology(topology) {
        return Err(bad("segment layout does not match the topology"));
    }
    Ok(ckpt)
}
