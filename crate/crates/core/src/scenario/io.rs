//! JSON Lines scenario files: one standalone [`ScenarioFrame`] document per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::ScenarioFrame;
use crate::error::{Error, Result};

pub fn write_frames<W: Write>(mut out: W, frames: &[ScenarioFrame]) -> Result<()> {
    for f in frames {
        serde_json::to_writer(&mut out, f)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_frames(path: &Path, frames: &[ScenarioFrame]) -> Result<()> {
    write_frames(BufWriter::new(File::create(path)?), frames)
}

/// Parses frames; blank lines are skipped and errors carry 1-based line numbers.
pub fn parse_frames<R: Read>(input: R) -> Result<Vec<ScenarioFrame>> {
    let mut frames = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let frame: ScenarioFrame =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        frame.validate().map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        frames.push(frame);
    }
    Ok(frames)
}

pub fn load_frames(path: &Path) -> Result<Vec<ScenarioFrame>> {
    parse_frames(File::open(path)?)
}
