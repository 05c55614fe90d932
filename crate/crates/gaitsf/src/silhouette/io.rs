//! On-disk dataset layout: `manifest.jsonl` plus one binary PGM (P5) per
//! frame under `seqs/<seq_id>/frame_NNNN.pgm`. Foreground pixels are 255,
//! background 0.

use super::{Condition, GaitSequence, Silhouette, HEIGHT, WIDTH};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub seq_id: String,
    pub subject_id: u32,
    pub condition: Condition,
    pub view_deg: u16,
    pub n_frames: usize,
    pub path: String,
}

fn write_pgm(path: &Path, frame: &Silhouette) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "P5\n{WIDTH} {HEIGHT}\n255\n")?;
    let bytes: Vec<u8> = frame.bits().iter().map(|&b| if b != 0 { 255 } else { 0 }).collect();
    w.write_all(&bytes)?;
    Ok(())
}

fn read_pgm(path: &Path) -> Result<Silhouette> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    // header: three whitespace-separated tokens after the magic
    let mut pos = 0usize;
    let mut tokens = Vec::new();
    while tokens.len() < 4 && pos < data.len() {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(String::from_utf8_lossy(&data[start..pos]).into_owned());
    }
    if tokens.len() < 4 || tokens[0] != "P5" {
        return Err(Error::invalid("pgm", format!("bad header in {}", path.display())));
    }
    let width: usize = tokens[1].parse().map_err(|_| Error::invalid("pgm", "bad width"))?;
    let height: usize = tokens[2].parse().map_err(|_| Error::invalid("pgm", "bad height"))?;
    if width != WIDTH || height != HEIGHT {
        return Err(Error::Geometry(format!(
            "{}: expected {WIDTH}x{HEIGHT}, got {width}x{height}",
            path.display()
        )));
    }
    pos += 1; // single whitespace after maxval
    if data.len() < pos + WIDTH * HEIGHT {
        return Err(Error::invalid("pgm", format!("truncated pixel data in {}", path.display())));
    }
    let bits: Vec<u8> =
        data[pos..pos + WIDTH * HEIGHT].iter().map(|&b| u8::from(b >= 128)).collect();
    Silhouette::from_bits(bits)
}

/// Write a dataset directory: manifest.jsonl + per-sequence PGM frames.
pub fn write_dataset(dir: &Path, seqs: &[GaitSequence], manifest: &[ManifestEntry]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut mf = BufWriter::new(fs::File::create(dir.join("manifest.jsonl"))?);
    for entry in manifest {
        serde_json::to_writer(&mut mf, entry)?;
        mf.write_all(b"\n")?;
    }
    mf.flush()?;
    for seq in seqs {
        let seq_dir = dir.join("seqs").join(&seq.seq_id);
        fs::create_dir_all(&seq_dir)?;
        for (i, frame) in seq.frames.iter().enumerate() {
            write_pgm(&seq_dir.join(format!("frame_{i:04}.pgm")), frame)?;
        }
    }
    Ok(())
}

/// Read a dataset directory written by [`write_dataset`], in manifest order.
pub fn read_dataset(dir: &Path) -> Result<(Vec<GaitSequence>, Vec<ManifestEntry>)> {
    let mf_path = dir.join("manifest.jsonl");
    let reader = BufReader::new(fs::File::open(&mf_path)?);
    let mut manifest = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        manifest.push(serde_json::from_str::<ManifestEntry>(&line)?);
    }
    let mut seqs = Vec::with_capacity(manifest.len());
    for entry in &manifest {
        let seq_dir = dir.join(&entry.path);
        let mut frames = Vec::with_capacity(entry.n_frames);
        for i in 0..entry.n_frames {
            frames.push(read_pgm(&seq_dir.join(format!("frame_{i:04}.pgm")))?);
        }
        seqs.push(GaitSequence {
            seq_id: entry.seq_id.clone(),
            subject_id: entry.subject_id,
            condition: entry.condition,
            view_deg: entry.view_deg,
            frames,
        });
    }
    Ok((seqs, manifest))
}
