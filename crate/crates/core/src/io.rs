//! Dataset directory format: manifest, one CSV per shop, contexts, and graphs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CausalGraph, ShopSample};
use crate::datagen::{GroundTruthDataset, SimConfig};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub n_shops: usize,
    pub n_channels: usize,
    pub length: usize,
    pub context_dim: usize,
    pub mode: String,
    pub seed: u64,
}

impl Manifest {
    /// `mode-nN-dD-TT-seedS`.
    pub fn dataset_id(&self) -> String {
        format!(
            "{}-n{}-d{}-T{}-seed{}",
            self.mode, self.n_shops, self.n_channels, self.length, self.seed
        )
    }
}

/// Generator provenance kept beside synthetic datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureRecord {
    pub assignment: Vec<usize>,
    pub templates: Vec<Vec<Vec<u8>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<ShopSample>,
    pub graphs: Option<Vec<CausalGraph>>,
    /// Generator settings when the directory was produced by `gen`.
    pub sim_config: Option<SimConfig>,
}

impl Dataset {
    pub fn from_generated(ds: &GroundTruthDataset) -> Self {
        let cfg = &ds.config;
        Dataset {
            manifest: Manifest {
                format_version: DATASET_FORMAT_VERSION,
                n_shops: cfg.n_shops,
                n_channels: cfg.n_channels,
                length: cfg.length,
                context_dim: cfg.context_dim,
                mode: cfg.mode.to_string(),
                seed: cfg.seed,
            },
            samples: ds.samples.clone(),
            graphs: Some(ds.graphs.clone()),
            sim_config: Some(cfg.clone()),
        }
    }

    pub fn dataset_id(&self) -> String {
        self.manifest.dataset_id()
    }

    /// Baseline lag default: the generator's lag window when known.
    pub fn known_lag(&self) -> Option<usize> {
        self.sim_config.as_ref().map(|c| c.narma_order)
    }

    /// Subset of shops (graphs follow along).
    pub fn select(&self, idx: &[usize]) -> (Vec<ShopSample>, Option<Vec<CausalGraph>>) {
        let samples = idx.iter().map(|&k| self.samples[k].clone()).collect();
        let graphs = self
            .graphs
            .as_ref()
            .map(|g| idx.iter().map(|&k| g[k].clone()).collect());
        (samples, graphs)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    s
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Real numbers with 17 significant digits.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn shop_path(dir: &Path, k: usize) -> PathBuf {
    dir.join("shops").join(format!("shop_{k}.csv"))
}

pub fn shop_csv(sample: &ShopSample) -> String {
    let d = sample.n_channels();
    let mut out = String::from("t");
    for j in 1..=d {
        out.push_str(&format!(",x{j}"));
    }
    out.push_str(",y\n");
    for t in 0..sample.len() {
        out.push_str(&t.to_string());
        for j in 0..d {
            out.push(',');
            out.push_str(&fmt_real(sample.x_at(t, j)));
        }
        out.push(',');
        out.push_str(&fmt_real(sample.y()[t]));
        out.push('\n');
    }
    out
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("shops")).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("manifest.json"), &to_json(&ds.manifest))?;
    for (k, s) in ds.samples.iter().enumerate() {
        write(&shop_path(dir, k), &shop_csv(s))?;
    }
    if ds.manifest.context_dim > 0 {
        let mut out = String::from("shop_id");
        for c in 1..=ds.manifest.context_dim {
            out.push_str(&format!(",c{c}"));
        }
        out.push('\n');
        for (k, s) in ds.samples.iter().enumerate() {
            out.push_str(&k.to_string());
            for v in s.context() {
                out.push(',');
                out.push_str(&fmt_real(*v));
            }
            out.push('\n');
        }
        write(&dir.join("contexts.csv"), &out)?;
    }
    if let Some(graphs) = &ds.graphs {
        let mats: Vec<_> = graphs.iter().map(CausalGraph::to_matrix).collect();
        write(&dir.join("graphs.json"), &to_json(&mats))?;
    }
    if let Some(cfg) = &ds.sim_config {
        write(&dir.join("sim_config.json"), &to_json(cfg))?;
    }
    Ok(())
}

/// Writes a generated dataset plus its structure assignment.
pub fn write_generated(ds: &GroundTruthDataset, dir: &Path) -> Result<()> {
    write_dataset(&Dataset::from_generated(ds), dir)?;
    let record = StructureRecord {
        assignment: ds.structure_assignment.clone(),
        templates: ds.templates.iter().map(CausalGraph::to_matrix).collect(),
    };
    write(&dir.join("structures.json"), &to_json(&record))
}

fn parse_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("{}:{line}: {msg}", path.display()))
}

fn parse_real(path: &Path, line: usize, field: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("not a number: {field:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite value {field:?}")));
    }
    Ok(v)
}

fn check_header(path: &Path, header: Option<&str>, expected: &[String]) -> Result<()> {
    let got: Vec<&str> = header.unwrap_or("").trim().split(',').map(str::trim).collect();
    if got != expected {
        return Err(parse_err(
            path,
            1,
            format!("header {got:?}, expected {expected:?}"),
        ));
    }
    Ok(())
}

fn read_shop(path: &Path, d: usize, length: usize, context: Vec<f64>) -> Result<ShopSample> {
    let text = read(path)?;
    let mut lines = text.lines();
    let mut expected = vec!["t".to_string()];
    expected.extend((1..=d).map(|j| format!("x{j}")));
    expected.push("y".into());
    check_header(path, lines.next(), &expected)?;
    let mut x = Vec::with_capacity(length * d);
    let mut y = Vec::with_capacity(length);
    for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let lineno = k + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 2 {
            return Err(parse_err(path, lineno, format!("{} fields, expected {}", fields.len(), d + 2)));
        }
        let t: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad step index {:?}", fields[0])))?;
        if t != y.len() {
            return Err(parse_err(path, lineno, format!("step {t} out of order")));
        }
        for f in &fields[1..=d] {
            x.push(parse_real(path, lineno, f)?);
        }
        y.push(parse_real(path, lineno, fields[d + 1])?);
    }
    if y.len() != length {
        return Err(Error::Contract(format!(
            "{}: {} rows, manifest says {length}",
            path.display(),
            y.len()
        )));
    }
    ShopSample::new(d, x, y, context)
}

fn read_contexts(path: &Path, n_shops: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    let text = read(path)?;
    let mut lines = text.lines();
    let mut expected = vec!["shop_id".to_string()];
    expected.extend((1..=dim).map(|c| format!("c{c}")));
    check_header(path, lines.next(), &expected)?;
    let mut out = vec![None; n_shops];
    for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let lineno = k + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(parse_err(path, lineno, format!("{} fields, expected {}", fields.len(), dim + 1)));
        }
        let id: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad shop id {:?}", fields[0])))?;
        if id >= n_shops {
            return Err(parse_err(path, lineno, format!("shop id {id} ≥ n_shops {n_shops}")));
        }
        let row = fields[1..]
            .iter()
            .map(|f| parse_real(path, lineno, f))
            .collect::<Result<Vec<_>>>()?;
        out[id] = Some(row);
    }
    out.into_iter()
        .enumerate()
        .map(|(k, c)| c.ok_or_else(|| Error::Contract(format!("{}: no context for shop {k}", path.display()))))
        .collect()
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = from_json(&dir.join("manifest.json"))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Contract(format!(
            "unsupported dataset format_version {}",
            manifest.format_version
        )));
    }
    if manifest.n_shops == 0 || manifest.n_channels == 0 {
        return Err(Error::Contract("manifest declares an empty dataset".into()));
    }
    let contexts = if manifest.context_dim > 0 {
        read_contexts(&dir.join("contexts.csv"), manifest.n_shops, manifest.context_dim)?
    } else {
        vec![Vec::new(); manifest.n_shops]
    };
    let samples = contexts
        .into_iter()
        .enumerate()
        .map(|(k, c)| read_shop(&shop_path(dir, k), manifest.n_channels, manifest.length, c))
        .collect::<Result<Vec<_>>>()?;
    let graphs_path = dir.join("graphs.json");
    let graphs = if graphs_path.exists() {
        let mats: Vec<Vec<Vec<u8>>> = from_json(&graphs_path)?;
        if mats.len() != manifest.n_shops {
            return Err(Error::Contract(format!(
                "graphs.json has {} graphs for {} shops",
                mats.len(),
                manifest.n_shops
            )));
        }
        let graphs = mats
            .iter()
            .map(|m| CausalGraph::from_matrix(m))
            .collect::<Result<Vec<_>>>()?;
        if graphs.iter().any(|g| g.n_nodes() != manifest.n_channels + 1) {
            return Err(Error::Contract("graph size does not match n_channels + 1".into()));
        }
        Some(graphs)
    } else {
        None
    };
    let sim_path = dir.join("sim_config.json");
    let sim_config = if sim_path.exists() { Some(from_json(&sim_path)?) } else { None };
    Ok(Dataset {
        manifest,
        samples,
        graphs,
        sim_config,
    })
}
