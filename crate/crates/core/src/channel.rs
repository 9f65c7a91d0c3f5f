//! File-backed record queue between the sampling allocator and the profiler.
//!
//! Notifications can be coalesced and lost, records cannot: every sampled
//! event is appended to `<dir>/miniprof-<pid>` and the profiler drains the
//! whole file whenever any memory notification arrives.
//!
//! Each record is one line of tab-separated fields:
//! `seq kind bytes frac footprint file line`, with `frac` printed to six
//! decimals. Backslash, tab and newline in file names are escaped.

use std::collections::HashSet;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Mutex, OnceLock};

use thiserror::Error;

use crate::vm::LineId;

pub const FILE_PREFIX: &str = "miniprof-";
pub const PPM: u32 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RecordKind {
    Malloc,
    Free,
    Copy,
}

impl RecordKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::Malloc => "malloc",
            RecordKind::Free => "free",
            RecordKind::Copy => "copy",
        }
    }
}

impl FromStr for RecordKind {
    type Err = DecodeError;

    fn from_str(s: &str) -> Result<Self, DecodeError> {
        match s {
            "malloc" => Ok(RecordKind::Malloc),
            "free" => Ok(RecordKind::Free),
            "copy" => Ok(RecordKind::Copy),
            _ => Err(DecodeError::Kind(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Record {
    pub seq: u64,
    pub kind: RecordKind,
    pub bytes: u64,
    /// Interpreter share in millionths; always 0 for copy records.
    pub python_fraction_ppm: u32,
    pub footprint: u64,
    pub line: LineId,
}

impl Record {
    pub fn python_fraction(&self) -> f64 {
        self.python_fraction_ppm as f64 / PPM as f64
    }

    /// Bytes attributed to the interpreter, rounded to the nearest byte.
    pub fn python_bytes(&self) -> u64 {
        ((self.bytes as u128 * self.python_fraction_ppm as u128 + PPM as u128 / 2) / PPM as u128) as u64
    }

    pub fn native_bytes(&self) -> u64 {
        self.bytes - self.python_bytes()
    }

    pub fn encode(&self) -> String {
        self.to_string()
    }

    pub fn decode(line: &str) -> Result<Record, DecodeError> {
        let fields: Vec<&str> = line.split('\t').collect();
        let [seq, kind, bytes, frac, footprint, file, lineno] = fields[..] else {
            return Err(DecodeError::FieldCount(fields.len()));
        };
        let int = |s: &str| s.parse::<u64>().map_err(|_| DecodeError::Number(s.to_string()));
        Ok(Record {
            seq: int(seq)?,
            kind: kind.parse()?,
            bytes: int(bytes)?,
            python_fraction_ppm: parse_fraction(frac)?,
            footprint: int(footprint)?,
            line: LineId::new(unescape(file)?, lineno.parse().map_err(|_| DecodeError::Number(lineno.to_string()))?),
        })
    }
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}.{:06}\t{}\t{}\t{}",
            self.seq,
            self.kind.as_str(),
            self.bytes,
            self.python_fraction_ppm / PPM,
            self.python_fraction_ppm % PPM,
            self.footprint,
            escape(&self.line.file),
            self.line.line
        )
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("expected 7 fields, found {0}")]
    FieldCount(usize),
    #[error("bad number {0:?}")]
    Number(String),
    #[error("unknown record kind {0:?}")]
    Kind(String),
    #[error("bad fraction {0:?}")]
    Fraction(String),
    #[error("bad escape in {0:?}")]
    Escape(String),
}

fn parse_fraction(s: &str) -> Result<u32, DecodeError> {
    let bad = || DecodeError::Fraction(s.to_string());
    let (whole, frac) = s.split_once('.').ok_or_else(bad)?;
    if frac.len() != 6 || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    let ppm = match whole {
        "0" => frac.parse::<u32>().map_err(|_| bad())?,
        "1" if frac == "000000" => PPM,
        _ => return Err(bad()),
    };
    Ok(ppm)
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String, DecodeError> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            _ => return Err(DecodeError::Escape(s.to_string())),
        }
    }
    Ok(out)
}

/// Destination for records. Implementations assign `seq`.
pub trait RecordSink {
    fn append(&mut self, record: Record) -> Result<u64, ChannelError>;
}

impl RecordSink for Vec<Record> {
    fn append(&mut self, mut record: Record) -> Result<u64, ChannelError> {
        record.seq = self.last().map_or(1, |r| r.seq + 1);
        let seq = record.seq;
        self.push(record);
        Ok(seq)
    }
}

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("channel file {0} is already open in this process")]
    InUse(PathBuf),
    #[error("channel I/O on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn open_paths() -> &'static Mutex<HashSet<PathBuf>> {
    static OPEN: OnceLock<Mutex<HashSet<PathBuf>>> = OnceLock::new();
    OPEN.get_or_init(Mutex::default)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub appended: u64,
    pub drained: u64,
    pub decode_errors: u64,
}

#[derive(Debug)]
pub struct Channel {
    path: PathBuf,
    file: File,
    next_seq: u64,
    stats: ChannelStats,
}

impl Channel {
    pub fn path_for(dir: &Path, pid: u32) -> PathBuf {
        dir.join(format!("{FILE_PREFIX}{pid}"))
    }

    /// Channel for the current process in the platform temporary directory.
    pub fn open_default() -> Result<Channel, ChannelError> {
        Self::open_in(&std::env::temp_dir(), std::process::id())
    }

    /// Creates (truncating) `<dir>/miniprof-<pid>`. The file is removed on drop.
    pub fn open_in(dir: &Path, pid: u32) -> Result<Channel, ChannelError> {
        let path = Self::path_for(dir, pid);
        if !open_paths().lock().unwrap().insert(path.clone()) {
            return Err(ChannelError::InUse(path));
        }
        let opened = OpenOptions::new().read(true).write(true).create(true).truncate(true).open(&path);
        match opened {
            Ok(file) => Ok(Channel { path, file, next_seq: 1, stats: ChannelStats::default() }),
            Err(source) => {
                open_paths().lock().unwrap().remove(&path);
                Err(ChannelError::Io { path, source })
            }
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn stats(&self) -> ChannelStats {
        self.stats
    }

    fn io(&self, source: io::Error) -> ChannelError {
        ChannelError::Io { path: self.path.clone(), source }
    }

    pub fn append_record(&mut self, mut record: Record) -> Result<u64, ChannelError> {
        record.seq = self.next_seq;
        let mut line = record.encode();
        line.push('\n');
        self.file.seek(SeekFrom::End(0)).map_err(|e| self.io(e))?;
        self.file.write_all(line.as_bytes()).map_err(|e| self.io(e))?;
        self.next_seq += 1;
        self.stats.appended += 1;
        Ok(record.seq)
    }

    /// Everything appended since the last drain, oldest first; the file is
    /// then truncated. Undecodable lines are skipped and counted.
    pub fn drain(&mut self) -> Result<Vec<Record>, ChannelError> {
        self.file.flush().map_err(|e| self.io(e))?;
        self.file.seek(SeekFrom::Start(0)).map_err(|e| self.io(e))?;
        let mut records = Vec::new();
        for line in BufReader::new(&self.file).lines() {
            let line = line.map_err(|e| self.io(e))?;
            match Record::decode(&line) {
                Ok(r) => records.push(r),
                Err(_) => self.stats.decode_errors += 1,
            }
        }
        self.file.set_len(0).map_err(|e| self.io(e))?;
        self.file.seek(SeekFrom::Start(0)).map_err(|e| self.io(e))?;
        self.stats.drained += records.len() as u64;
        Ok(records)
    }
}

impl RecordSink for Channel {
    fn append(&mut self, record: Record) -> Result<u64, ChannelError> {
        self.append_record(record)
    }
}

impl Drop for Channel {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
        open_paths().lock().unwrap().remove(&self.path);
    }
}
