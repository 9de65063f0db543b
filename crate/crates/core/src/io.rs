//! On-disk formats: the graph file, the parameter checkpoint and the model
//! bundle directory that combines them.
//!
//! Graph file (text, fields separated by tabs):
//!
//! ```text
//! dgow-graph<TAB>1
//! construction<TAB>dgow
//! window<TAB>2
//! min_count<TAB>2
//! keep_stopwords<TAB>false
//! vocab<TAB><n>
//! <word><TAB><frequency>          (n lines, word id = line order)
//! classes<TAB><P>
//! block<TAB><class><TAB><nodes><TAB><edges>
//! nodes<TAB><word id> <word id> ...
//! <src><TAB><dst><TAB><weight>       (edges lines, local node indices)
//! ```
//!
//! Checkpoint (little-endian binary): magic `DGOWCKPT`, `u32` version,
//! `u64` optimizer step, `u32` tensor count, then per tensor a `u16` name
//! length, the UTF-8 name, a `u8` group code and `u32` rows and cols; then all
//! tensor values as `f64` in table order.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DatasetProfile, VocabIndex, WordId};
use crate::error::{Error, Result};
use crate::graph::{Dgow, Edge, WordGraph};
use crate::model::{DgowGnn, ModelConfig};
use crate::nn::{Matrix, ParamGroup, ParameterStore};
use crate::spectral::Construction;

pub const GRAPH_MAGIC: &str = "dgow-graph";
pub const GRAPH_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DGOWCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");

/// A built graph together with everything needed to map raw text onto it.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphFile {
    pub construction: Construction,
    pub window: usize,
    pub vocabulary: VocabIndex,
    /// One name per block. An MGoW file has a single block named `*`.
    pub classes: Vec<String>,
    pub blocks: Vec<WordGraph>,
}

impl GraphFile {
    pub fn from_dgow(corpus: &Corpus, dgow: &Dgow) -> Self {
        Self {
            construction: Construction::Dgow,
            window: dgow.window(),
            vocabulary: corpus.vocabulary.clone(),
            classes: corpus.classes.clone(),
            blocks: dgow.blocks().to_vec(),
        }
    }

    pub fn from_mgow(corpus: &Corpus, graph: &WordGraph) -> Self {
        Self {
            construction: Construction::Mgow,
            window: graph.window(),
            vocabulary: corpus.vocabulary.clone(),
            classes: vec!["*".to_owned()],
            blocks: vec![graph.clone()],
        }
    }

    pub fn dgow(&self) -> Dgow {
        Dgow::from_blocks(self.blocks.clone())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let construction = match self.construction {
            Construction::Dgow => "dgow",
            Construction::Mgow => "mgow",
        };
        let _ = writeln!(out, "{GRAPH_MAGIC}\t{GRAPH_VERSION}");
        let _ = writeln!(out, "construction\t{construction}");
        let _ = writeln!(out, "window\t{}", self.window);
        let _ = writeln!(out, "min_count\t{}", self.vocabulary.min_count());
        let _ = writeln!(out, "keep_stopwords\t{}", self.vocabulary.profile().keep_stopwords);
        let _ = writeln!(out, "vocab\t{}", self.vocabulary.len());
        for (i, w) in self.vocabulary.words().iter().enumerate() {
            let _ = writeln!(out, "{w}\t{}", self.vocabulary.frequency(i as WordId));
        }
        let _ = writeln!(out, "classes\t{}", self.classes.len());
        for (name, block) in self.classes.iter().zip(&self.blocks) {
            let _ = writeln!(out, "block\t{name}\t{}\t{}", block.num_nodes(), block.num_edges());
            out.push_str("nodes\t");
            for (k, w) in block.words().iter().enumerate() {
                if k > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{w}");
            }
            out.push('\n');
            for e in block.edges() {
                let _ = writeln!(out, "{}\t{}\t{}", e.src, e.dst, e.weight);
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = Lines::new(text);
        let version: u32 = lines.keyed(GRAPH_MAGIC)?;
        if version != GRAPH_VERSION {
            return Err(Error::format("graph file", format!("unsupported version {version}")));
        }
        let construction: String = lines.keyed("construction")?;
        let construction: Construction = construction
            .parse()
            .map_err(|_| lines.error(format!("unknown construction {construction:?}")))?;
        let window: usize = lines.keyed("window")?;
        if window < 2 {
            return Err(lines.error("window must be at least 2"));
        }
        let min_count: usize = lines.keyed("min_count")?;
        let keep_stopwords: bool = lines.keyed("keep_stopwords")?;
        let vocab_len: usize = lines.keyed("vocab")?;
        let mut words = Vec::new();
        let mut freqs = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..vocab_len {
            let fields = lines.fields(2)?;
            let word = fields[0];
            if word.is_empty() || word.chars().any(char::is_whitespace) || !seen.insert(word) {
                return Err(lines.error(format!("invalid or duplicate word {word:?}")));
            }
            words.push(word.to_owned());
            freqs.push(lines.parse_field(fields[1])?);
        }
        if u32::try_from(words.len()).is_err() {
            return Err(lines.error("vocabulary too large"));
        }
        let vocabulary = VocabIndex::from_parts(words, freqs, min_count, DatasetProfile { keep_stopwords });
        let class_count: usize = lines.keyed("classes")?;
        if construction == Construction::Mgow && class_count != 1 {
            return Err(lines.error("an MGoW file has exactly one block"));
        }
        let mut classes = Vec::new();
        let mut blocks = Vec::new();
        for _ in 0..class_count {
            let header = lines.fields(4)?;
            if header[0] != "block" || header[1].is_empty() {
                return Err(lines.error("expected block header"));
            }
            let name = header[1].to_owned();
            let n_nodes: usize = lines.parse_field(header[2])?;
            let n_edges: usize = lines.parse_field(header[3])?;
            let node_line = lines.next_line()?;
            let ids = node_line
                .strip_prefix("nodes\t")
                .ok_or_else(|| lines.error("expected nodes line"))?;
            let nodes: Vec<WordId> = ids
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(|s| lines.parse_field(s))
                .collect::<Result<_>>()?;
            if nodes.len() != n_nodes {
                return Err(lines.error(format!("{} node ids, header says {n_nodes}", nodes.len())));
            }
            if let Some(&bad) = nodes.iter().find(|&&w| w as usize >= vocab_len) {
                return Err(lines.error(format!("word id {bad} outside the vocabulary")));
            }
            let mut edges = Vec::new();
            for _ in 0..n_edges {
                let f = lines.fields(3)?;
                edges.push(Edge {
                    src: lines.parse_field(f[0])?,
                    dst: lines.parse_field(f[1])?,
                    weight: lines.parse_field(f[2])?,
                });
            }
            classes.push(name);
            blocks.push(WordGraph::from_parts(window, nodes, edges)?);
        }
        if let Some(extra) = lines.remaining() {
            return Err(lines.error(format!("trailing content {extra:?}")));
        }
        let mut sorted = classes.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != classes.len() {
            return Err(Error::format("graph file", "duplicate class name"));
        }
        Ok(Self {
            construction,
            window,
            vocabulary,
            classes,
            blocks,
        })
    }
}

struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            iter: text.lines().enumerate(),
            line: 0,
        }
    }

    fn error(&self, detail: impl Into<String>) -> Error {
        Error::format("graph file", format!("line {}: {}", self.line, detail.into()))
    }

    fn next_line(&mut self) -> Result<&'a str> {
        match self.iter.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => Err(Error::format("graph file", "unexpected end of file")),
        }
    }

    fn fields(&mut self, n: usize) -> Result<Vec<&'a str>> {
        let l = self.next_line()?;
        let f: Vec<&str> = l.split('\t').collect();
        if f.len() != n {
            return Err(self.error(format!("expected {n} tab-separated fields")));
        }
        Ok(f)
    }

    fn parse_field<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        s.parse().map_err(|_| self.error(format!("cannot parse {s:?}")))
    }

    fn keyed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let f = self.fields(2)?;
        if f[0] != key {
            return Err(self.error(format!("expected {key:?}, found {:?}", f[0])));
        }
        self.parse_field(f[1])
    }

    fn remaining(&mut self) -> Option<&'a str> {
        self.iter.by_ref().map(|(_, l)| l).find(|l| !l.trim().is_empty())
    }
}

/// Serializes every parameter with its shape and group.
pub fn encode_checkpoint(store: &ParameterStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&store.step().to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.params() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.group.code());
        out.extend_from_slice(&(p.value().rows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.value().cols() as u32).to_le_bytes());
    }
    for p in store.params() {
        for x in p.value().data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format("checkpoint", format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParameterStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut table = Vec::new();
    let mut names = std::collections::HashSet::new();
    let mut total: usize = 0;
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?
            .to_owned();
        if !names.insert(name.clone()) {
            return Err(Error::format("checkpoint", format!("duplicate tensor {name}")));
        }
        let group = ParamGroup::from_code(r.u8()?)
            .ok_or_else(|| Error::format("checkpoint", format!("bad group code for {name}")))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::format("checkpoint", "tensor size overflows"))?;
        total = total
            .checked_add(n)
            .ok_or_else(|| Error::format("checkpoint", "tensor size overflows"))?;
        table.push((name, group, rows, cols));
    }
    let expected = total
        .checked_mul(8)
        .ok_or_else(|| Error::format("checkpoint", "tensor size overflows"))?;
    if bytes.len() - r.pos != expected {
        return Err(Error::format(
            "checkpoint",
            format!("{} data bytes, table needs {expected}", bytes.len() - r.pos),
        ));
    }
    let mut store = ParameterStore::new();
    for (name, group, rows, cols) in table {
        let data = r
            .take(rows * cols * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.add(name, group, Matrix::new(rows, cols, data));
    }
    store.set_step(step);
    Ok(store)
}

/// Writes through a temporary file in the same directory and renames it into
/// place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn read_graph_file(path: &Path) -> Result<GraphFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    GraphFile::parse(&text)
}

pub fn write_graph_file(path: &Path, graph: &GraphFile) -> Result<()> {
    write_atomic(path, graph.to_text().as_bytes())
}

pub const BUNDLE_GRAPH: &str = "graph.tsv";
pub const BUNDLE_PARAMS: &str = "params.bin";
pub const BUNDLE_MODEL: &str = "model.json";
pub const BUNDLE_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleMeta {
    pub schema_version: u32,
    pub library_version: String,
    pub config_hash: String,
    pub model: ModelConfig,
}

/// A trained model with the graph and vocabulary it was trained on.
#[derive(Clone, Debug)]
pub struct Bundle {
    pub graph: GraphFile,
    pub model: DgowGnn,
    pub meta: BundleMeta,
}

impl Bundle {
    pub fn new(graph: GraphFile, model: DgowGnn, config_hash: String) -> Self {
        let meta = BundleMeta {
            schema_version: BUNDLE_SCHEMA,
            library_version: LIBRARY_VERSION.to_owned(),
            config_hash,
            model: model.config().clone(),
        };
        Self { graph, model, meta }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_graph_file(&dir.join(BUNDLE_GRAPH), &self.graph)?;
        write_atomic(&dir.join(BUNDLE_PARAMS), &encode_checkpoint(self.model.params()))?;
        let json = serde_json::to_string_pretty(&self.meta)?;
        write_atomic(&dir.join(BUNDLE_MODEL), json.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let graph = read_graph_file(&dir.join(BUNDLE_GRAPH))?;
        if graph.construction != Construction::Dgow {
            return Err(Error::format("bundle", "the model graph must be a DGoW"));
        }
        let params_path: PathBuf = dir.join(BUNDLE_PARAMS);
        let bytes = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
        let store = decode_checkpoint(&bytes)?;
        let meta_path = dir.join(BUNDLE_MODEL);
        let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: BundleMeta = serde_json::from_str(&meta_text)?;
        if meta.schema_version != BUNDLE_SCHEMA {
            return Err(Error::format("bundle", format!("unsupported schema {}", meta.schema_version)));
        }
        let model = DgowGnn::from_parts(graph.dgow(), meta.model.clone(), store)?;
        Ok(Self { graph, model, meta })
    }
}
