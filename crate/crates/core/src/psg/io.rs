//! Corpus and example files.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{PackConfig, PackedMember, PackedSequence, Seq2SeqExample};
use crate::attention::PackedBatch;
use crate::container::{Container, Entry, Payload};
use crate::{Error, Result};

pub const PACKED_FORMAT: &str = "tglobal-packed";
pub const PACKED_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(v);
    }
    Ok(out)
}

/// One `{"id": .., "text": ..}` object per line; blank lines are skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    read_lines(path)
}

pub fn parse_corpus(text: &str) -> Result<Vec<CorpusRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn examples_to_jsonl(examples: &[Seq2SeqExample]) -> Result<String> {
    let mut s = String::new();
    for e in examples {
        s.push_str(&serde_json::to_string(e)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_examples(path: &Path, examples: &[Seq2SeqExample]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(examples_to_jsonl(examples)?.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_examples(path: &Path) -> Result<Vec<Seq2SeqExample>> {
    read_lines(path)
}

fn u32_entry(name: String, data: &[u32]) -> Entry {
    Entry {
        name,
        shape: vec![data.len()],
        payload: Payload::U32(data.to_vec()),
    }
}

fn u32_field(c: &Container, name: &str) -> Result<Vec<u32>> {
    match c.entry(name).map(|e| &e.payload) {
        Some(Payload::U32(v)) => Ok(v.clone()),
        Some(_) => Err(Error::Format(format!("segment entry {name} is not u32"))),
        None => Err(Error::Format(format!("missing segment entry {name}"))),
    }
}

const FIELDS: [&str; 5] = ["tokens", "segment_ids", "positions", "targets", "target_segments"];

pub fn packed_to_container(seqs: &[PackedSequence], cfg: &PackConfig) -> Result<Container> {
    let mut header = serde_json::Map::new();
    header.insert("format".into(), json!(PACKED_FORMAT));
    header.insert("version".into(), json!(PACKED_VERSION));
    header.insert("pack".into(), serde_json::to_value(cfg)?);
    header.insert("sequences".into(), json!(seqs.len()));
    let members: Vec<&Vec<PackedMember>> = seqs.iter().map(|s| &s.members).collect();
    header.insert("members".into(), serde_json::to_value(members)?);
    let mut entries = Vec::with_capacity(seqs.len() * FIELDS.len());
    for (i, s) in seqs.iter().enumerate() {
        let data: [&[u32]; 5] = [
            &s.encoder.tokens,
            &s.encoder.segment_ids,
            &s.encoder.positions,
            &s.targets,
            &s.target_segments,
        ];
        for (f, d) in FIELDS.iter().zip(data) {
            entries.push(u32_entry(format!("{i}.{f}"), d));
        }
    }
    Ok(Container {
        header,
        directory: "segments".into(),
        entries,
    })
}

pub fn packed_from_container(c: &Container) -> Result<(Vec<PackedSequence>, PackConfig)> {
    if c.header.get("format") != Some(&json!(PACKED_FORMAT)) {
        return Err(Error::Format("not a packed-sequence file".into()));
    }
    if c.header.get("version") != Some(&json!(PACKED_VERSION)) {
        return Err(Error::Version(format!(
            "packed file version {:?}, expected {PACKED_VERSION}",
            c.header.get("version")
        )));
    }
    let get = |k: &str| c.header.get(k).cloned().unwrap_or(Value::Null);
    let cfg: PackConfig = serde_json::from_value(get("pack"))?;
    let members: Vec<Vec<PackedMember>> = serde_json::from_value(get("members"))?;
    let mut seqs = Vec::with_capacity(members.len());
    for (i, members) in members.into_iter().enumerate() {
        let f = |name: &str| u32_field(c, &format!("{i}.{name}"));
        let targets = f("targets")?;
        let target_segments = f("target_segments")?;
        if targets.len() != target_segments.len() {
            return Err(Error::Format(format!("sequence {i}: target arrays differ in length")));
        }
        seqs.push(PackedSequence {
            encoder: PackedBatch::new(f("tokens")?, f("segment_ids")?, f("positions")?)?,
            targets,
            target_segments,
            members,
        });
    }
    Ok((seqs, cfg))
}

pub fn write_packed(path: &Path, seqs: &[PackedSequence], cfg: &PackConfig) -> Result<()> {
    packed_to_container(seqs, cfg)?.write(path)
}

pub fn read_packed(path: &Path) -> Result<(Vec<PackedSequence>, PackConfig)> {
    packed_from_container(&Container::read(path, "segments")?)
}
