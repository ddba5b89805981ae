//! Posterior draw archive.
//!
//! Line-delimited text, optionally gzip-compressed (chosen by a `.gz`
//! suffix):
//!
//! ```text
//! #vcbart-draws 1
//! {JSON header}
//! <chain>\t<iteration>\t<sigma>\t<ensemble 0>\t...\t<ensemble p>
//! ```
//!
//! Each ensemble field is `<eta index>;<log θ, comma separated>;<trees>` with
//! trees separated by `|` in their pre-order text encoding. Floats are written
//! in shortest round-trip form, so reading an archive back gives bit-identical
//! draws.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::data::{ColumnNames, ModifierScaling, OutcomeScale};
use crate::error::{Error, Result};
use crate::posterior::{Posterior, PosteriorDraw};
use crate::priors::{Hyperparameters, SparsityState};
use crate::sampler::{ChainState, ChainSummary};
use crate::tree::RegressionTree;

pub const MAGIC: &str = "#vcbart-draws";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub version: u32,
    pub config_hash: String,
    pub data_fingerprint: String,
    pub hyper: Hyperparameters,
    pub scale: OutcomeScale,
    pub scaling: ModifierScaling,
    pub names: ColumnNames,
    pub chains: Vec<ChainSummary>,
    pub n_draws: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Archive(msg.into())
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn encode_draw(d: &PosteriorDraw) -> String {
    let mut line = format!("{}\t{}\t{}", d.chain, d.iteration, d.state.sigma);
    for (ens, sp) in d.state.ensembles.iter().zip(&d.state.sparsity) {
        line.push('\t');
        line.push_str(&sp.eta_index.to_string());
        line.push(';');
        let lt: Vec<String> = sp.log_theta.iter().map(f64::to_string).collect();
        line.push_str(&lt.join(","));
        line.push(';');
        let trees: Vec<String> = ens.iter().map(RegressionTree::encode).collect();
        line.push_str(&trees.join("|"));
    }
    line
}

fn decode_draw(line: &str, n_coef: usize, r: usize) -> Result<PosteriorDraw> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 + n_coef {
        return Err(bad(format!("expected {} fields in a draw line, found {}", 3 + n_coef, fields.len())));
    }
    let chain = fields[0].parse().map_err(|_| bad("bad chain index"))?;
    let iteration = fields[1].parse().map_err(|_| bad("bad iteration"))?;
    let sigma: f64 = fields[2].parse().map_err(|_| bad("bad sigma"))?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(bad("sigma must be positive and finite"));
    }
    let mut ensembles = Vec::with_capacity(n_coef);
    let mut sparsity = Vec::with_capacity(n_coef);
    for f in &fields[3..] {
        let mut parts = f.splitn(3, ';');
        let (Some(eta), Some(lt), Some(trees)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad("bad ensemble field"));
        };
        let eta_index: usize = eta.parse().map_err(|_| bad("bad eta index"))?;
        if !crate::priors::ETA_GRID.contains(&eta_index) {
            return Err(bad(format!("eta index {eta_index} off the grid")));
        }
        let log_theta = lt.split(',').map(|v| v.parse::<f64>().map_err(|_| bad("bad log theta"))).collect::<Result<Vec<_>>>()?;
        if log_theta.len() != r {
            return Err(bad(format!("expected {r} splitting probabilities, found {}", log_theta.len())));
        }
        let ens = trees.split('|').map(RegressionTree::decode).collect::<Result<Vec<_>>>()?;
        if ens.iter().flat_map(|t| t.tree.rules()).any(|rule| rule.axis >= r) {
            return Err(bad("tree splits on a modifier that does not exist"));
        }
        ensembles.push(ens);
        sparsity.push(SparsityState::from_log_theta(log_theta, eta_index));
    }
    Ok(PosteriorDraw { chain, iteration, state: ChainState { ensembles, sigma, sparsity } })
}

fn write_to<W: Write>(mut w: W, post: &Posterior, config_hash: &str) -> Result<W> {
    let header = ArchiveHeader {
        version: FORMAT_VERSION,
        config_hash: config_hash.to_string(),
        data_fingerprint: post.data_fingerprint.clone(),
        hyper: post.hyper.clone(),
        scale: post.scale,
        scaling: post.scaling.clone(),
        names: post.names.clone(),
        chains: post.chains.clone(),
        n_draws: post.draws.len(),
    };
    writeln!(w, "{MAGIC} {FORMAT_VERSION}")?;
    writeln!(w, "{}", serde_json::to_string(&header).map_err(|e| bad(e.to_string()))?)?;
    for d in &post.draws {
        writeln!(w, "{}", encode_draw(d))?;
    }
    Ok(w)
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

/// Write an archive. The file is assembled under a temporary name and only
/// renamed into place once complete.
pub fn write_archive(path: &Path, post: &Posterior, config_hash: &str) -> Result<()> {
    let tmp = temp_path(path);
    let result = (|| -> Result<()> {
        let file = BufWriter::new(File::create(&tmp)?);
        if is_gz(path) {
            let enc = write_to(GzEncoder::new(file, Compression::default()), post, config_hash)?;
            enc.finish()?.flush()?;
        } else {
            write_to(file, post, config_hash)?.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result
}

fn open(path: &Path) -> Result<Box<dyn BufRead>> {
    let file = File::open(path).map_err(|e| bad(format!("cannot open {}: {e}", path.display())))?;
    let inner: Box<dyn Read> = if is_gz(path) { Box::new(GzDecoder::new(file)) } else { Box::new(file) };
    Ok(Box::new(BufReader::new(inner)))
}

fn read_header(lines: &mut impl Iterator<Item = std::io::Result<String>>) -> Result<ArchiveHeader> {
    let magic = lines.next().ok_or_else(|| bad("empty archive"))??;
    let version = magic
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| bad("not a draw archive"))?
        .parse::<u32>()
        .map_err(|_| bad("unreadable archive version"))?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("archive format version {version}, this build reads {FORMAT_VERSION}")));
    }
    let json = lines.next().ok_or_else(|| bad("missing archive header"))??;
    let header: ArchiveHeader = serde_json::from_str(&json).map_err(|e| bad(format!("bad archive header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(bad(format!("header version {} does not match format version", header.version)));
    }
    Ok(header)
}

/// Header only, without decoding any draws.
pub fn read_archive_header(path: &Path) -> Result<ArchiveHeader> {
    read_header(&mut open(path)?.lines())
}

pub fn read_archive(path: &Path) -> Result<(ArchiveHeader, Posterior)> {
    let mut lines = open(path)?.lines();
    let header = read_header(&mut lines)?;
    let n_coef = header.hyper.n_coefficients();
    let r = header.names.modifiers.len();
    let mut draws = Vec::with_capacity(header.n_draws);
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let d = decode_draw(&line, n_coef, r)?;
        if d.state.ensembles.iter().any(|e| e.len() != header.hyper.trees) {
            return Err(bad("ensemble size does not match the header"));
        }
        draws.push(d);
    }
    if draws.len() != header.n_draws {
        return Err(bad(format!("header promises {} draws, found {}", header.n_draws, draws.len())));
    }
    let post = Posterior {
        draws,
        hyper: header.hyper.clone(),
        scale: header.scale,
        scaling: header.scaling.clone(),
        names: header.names.clone(),
        data_fingerprint: header.data_fingerprint.clone(),
        chains: header.chains.clone(),
    };
    Ok((header, post))
}

/// Hex sha256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}
