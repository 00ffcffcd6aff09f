//! Identifiers for nodes, raw files and chunks.
//!
//! All ids are totally ordered so that every planner can break ties by id and
//! stay deterministic. They serialize as compact strings (`n3`, `f3.7`,
//! `f3.7#12`) so they can be used as JSON map keys.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

/// A raw file: the `index`-th file stored in its entirety on `node`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FileId {
    pub node: NodeId,
    pub index: u32,
}

/// A chunk of one raw file. `seq` is allocated by the file's chunking and is
/// never reused, so a split always yields fresh ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChunkId {
    pub file: FileId,
    pub seq: u32,
}

impl FileId {
    pub fn new(node: u32, index: u32) -> Self {
        FileId {
            node: NodeId(node),
            index,
        }
    }
}

impl ChunkId {
    pub fn new(file: FileId, seq: u32) -> Self {
        ChunkId { file, seq }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl fmt::Display for FileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "f{}.{}", self.node.0, self.index)
    }
}

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.file, self.seq)
    }
}

fn parse_u32(s: &str, what: &str) -> Result<u32, Error> {
    s.parse()
        .map_err(|_| Error::format(format!("bad {what} in id: {s:?}")))
}

impl FromStr for NodeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let rest = s
            .strip_prefix('n')
            .ok_or_else(|| Error::format(format!("node id must start with 'n': {s:?}")))?;
        Ok(NodeId(parse_u32(rest, "node")?))
    }
}

impl FromStr for FileId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let rest = s
            .strip_prefix('f')
            .ok_or_else(|| Error::format(format!("file id must start with 'f': {s:?}")))?;
        let (node, index) = rest
            .split_once('.')
            .ok_or_else(|| Error::format(format!("file id missing '.': {s:?}")))?;
        Ok(FileId::new(parse_u32(node, "node")?, parse_u32(index, "file index")?))
    }
}

impl FromStr for ChunkId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let (file, seq) = s
            .split_once('#')
            .ok_or_else(|| Error::format(format!("chunk id missing '#': {s:?}")))?;
        Ok(ChunkId::new(file.parse()?, parse_u32(seq, "chunk seq")?))
    }
}

macro_rules! string_serde {
    ($($ty:ty),*) => {$(
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    )*};
}

string_serde!(NodeId, FileId, ChunkId);
