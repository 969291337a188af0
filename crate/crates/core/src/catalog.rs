//! Versioned catalog files for models, GPUs, machines and prices.
//!
//! A catalog directory has the layout
//!
//! ```text
//! models/<id>.toml     [model] table plus optional [provenance]
//! gpus/<id>.toml       [gpu] table
//! machines/<id>.toml   [machine] table, `gpu` refers to a gpu id
//! prices.toml          gpu and system prices, hardware lifespan
//! ```
//!
//! Every document carries `version = 1`; unknown fields are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost::PriceCatalog;
use crate::error::{Error, Result};
use crate::spec::{GpuSpec, MachineSpec, ModelSpec};

pub const CATALOG_VERSION: u32 = 1;

/// Environment variable naming a catalog directory that replaces the bundled one.
pub const CATALOG_DIR_ENV: &str = "PLANNER_CATALOG_DIR";

macro_rules! bundled {
    ($($path:literal),* $(,)?) => {
        &[$(($path, include_str!(concat!("../data/", $path)))),*]
    };
}

/// Every data file shipped with the crate, as (relative path, contents).
pub static BUNDLED_FILES: &[(&str, &str)] = bundled![
    "catalog/models/pythia-160m.toml",
    "catalog/models/pythia-410m.toml",
    "catalog/models/pythia-1b.toml",
    "catalog/models/pythia-2.8b.toml",
    "catalog/models/pythia-6.9b.toml",
    "catalog/models/roberta-large.toml",
    "catalog/models/mamba-2.8b.toml",
    "catalog/models/convnext-large.toml",
    "catalog/models/vit-large.toml",
    "catalog/gpus/rtx3090.toml",
    "catalog/gpus/a6000.toml",
    "catalog/gpus/a100.toml",
    "catalog/gpus/h100.toml",
    "catalog/machines/rtx3090-x1.toml",
    "catalog/machines/rtx3090-x2.toml",
    "catalog/machines/rtx3090-x4.toml",
    "catalog/machines/rtx3090-x8.toml",
    "catalog/machines/a6000-x1.toml",
    "catalog/machines/a6000-x2.toml",
    "catalog/machines/a6000-x4.toml",
    "catalog/machines/a6000-x8.toml",
    "catalog/machines/a100-x1.toml",
    "catalog/machines/a100-x2.toml",
    "catalog/machines/a100-x4.toml",
    "catalog/machines/a100-x8.toml",
    "catalog/machines/h100-x1.toml",
    "catalog/machines/h100-x2.toml",
    "catalog/machines/h100-x4.toml",
    "catalog/machines/h100-x8.toml",
    "catalog/prices.toml",
    "fixtures/table_optimal.csv",
    "fixtures/table_naive.csv",
    "fixtures/original_resources.csv",
    "perf_params.toml",
];

pub fn bundled_file(path: &str) -> Option<&'static str> {
    BUNDLED_FILES
        .iter()
        .find(|(p, _)| *p == path)
        .map(|(_, c)| *c)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    version: u32,
    model: ModelSpec,
    #[serde(default)]
    provenance: BTreeMap<String, String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GpuDoc {
    version: u32,
    gpu: GpuSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MachineEntry {
    id: String,
    gpu: String,
    n_gpus: u32,
    system_price_usd: f64,
    host_ram_bytes: u64,
    intra_node_bw_bytes: f64,
    host_device_bw_bytes: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MachineDoc {
    version: u32,
    machine: MachineEntry,
}

fn check_version(what: &str, found: u32) -> Result<()> {
    if found == CATALOG_VERSION {
        Ok(())
    } else {
        Err(Error::Version {
            what: what.to_string(),
            found,
            expected: CATALOG_VERSION,
        })
    }
}

pub fn parse_model(what: &str, text: &str) -> Result<(ModelSpec, BTreeMap<String, String>)> {
    let doc: ModelDoc = toml::from_str(text).map_err(|e| Error::parse(what, e))?;
    check_version(what, doc.version)?;
    doc.model.check()?;
    Ok((doc.model, doc.provenance))
}

pub fn parse_gpu(what: &str, text: &str) -> Result<GpuSpec> {
    let doc: GpuDoc = toml::from_str(text).map_err(|e| Error::parse(what, e))?;
    check_version(what, doc.version)?;
    doc.gpu.check()?;
    Ok(doc.gpu)
}

/// All entities known to the planner.
#[derive(Debug, Clone)]
pub struct Catalog {
    models: Vec<ModelSpec>,
    provenance: BTreeMap<String, BTreeMap<String, String>>,
    gpus: Vec<GpuSpec>,
    machines: Vec<MachineSpec>,
    prices: PriceCatalog,
}

impl Catalog {
    /// The catalog compiled into the crate.
    pub fn bundled() -> Self {
        let files = BUNDLED_FILES
            .iter()
            .filter_map(|(p, c)| p.strip_prefix("catalog/").map(|p| (p.to_string(), *c)));
        Self::from_files(files).expect("bundled catalog is valid")
    }

    /// Bundled catalog, or the directory named by [`CATALOG_DIR_ENV`].
    pub fn from_env() -> Result<Self> {
        match std::env::var_os(CATALOG_DIR_ENV) {
            Some(dir) => Self::load_dir(Path::new(&dir)),
            None => Ok(Self::bundled()),
        }
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut files = Vec::new();
        for sub in ["models", "gpus", "machines"] {
            let path = dir.join(sub);
            let entries = fs::read_dir(&path).map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?;
            let mut names: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "toml"))
                .collect();
            names.sort();
            for p in names {
                let text = read(&p)?;
                let name = p.file_name().unwrap().to_string_lossy().into_owned();
                files.push((format!("{sub}/{name}"), text));
            }
        }
        let prices = dir.join("prices.toml");
        files.push(("prices.toml".to_string(), read(&prices)?));
        Self::from_files(files.iter().map(|(p, c)| (p.clone(), c.as_str())))
    }

    fn from_files<'a>(files: impl IntoIterator<Item = (String, &'a str)>) -> Result<Self> {
        let mut models = Vec::new();
        let mut provenance = BTreeMap::new();
        let mut gpus: Vec<GpuSpec> = Vec::new();
        let mut machine_entries = Vec::new();
        let mut prices = None;
        for (path, text) in files {
            if path.starts_with("models/") {
                let (m, prov) = parse_model(&path, text)?;
                provenance.insert(m.id.clone(), prov);
                models.push(m);
            } else if path.starts_with("gpus/") {
                gpus.push(parse_gpu(&path, text)?);
            } else if path.starts_with("machines/") {
                let doc: MachineDoc = toml::from_str(text).map_err(|e| Error::parse(&path, e))?;
                check_version(&path, doc.version)?;
                machine_entries.push(doc.machine);
            } else if path == "prices.toml" {
                prices = Some(PriceCatalog::parse(&path, text)?);
            }
        }
        let mut machines = Vec::new();
        for e in machine_entries {
            let gpu = gpus
                .iter()
                .find(|g| g.id == e.gpu)
                .ok_or_else(|| Error::UnknownGpu(e.gpu.clone()))?
                .clone();
            let m = MachineSpec {
                id: e.id,
                gpu,
                n_gpus: e.n_gpus,
                system_price_usd: e.system_price_usd,
                host_ram_bytes: e.host_ram_bytes,
                intra_node_bw_bytes: e.intra_node_bw_bytes,
                host_device_bw_bytes: e.host_device_bw_bytes,
            };
            m.check()?;
            machines.push(m);
        }
        for (kind, ids) in [
            ("model", models.iter().map(|m| &m.id).collect::<Vec<_>>()),
            ("gpu", gpus.iter().map(|g| &g.id).collect()),
            ("machine", machines.iter().map(|m| &m.id).collect()),
        ] {
            let mut sorted = ids.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != ids.len() {
                return Err(Error::invalid("catalog", format!("duplicate {kind} id")));
            }
        }
        let prices = prices.ok_or_else(|| Error::invalid("catalog", "missing prices.toml"))?;
        models.sort_by(|a, b| a.id.cmp(&b.id));
        gpus.sort_by(|a, b| a.id.cmp(&b.id));
        machines.sort_by(|a, b| (&a.gpu.id, a.n_gpus).cmp(&(&b.gpu.id, b.n_gpus)));
        Ok(Self {
            models,
            provenance,
            gpus,
            machines,
            prices,
        })
    }

    pub fn models(&self) -> &[ModelSpec] {
        &self.models
    }

    pub fn gpus(&self) -> &[GpuSpec] {
        &self.gpus
    }

    pub fn machines(&self) -> &[MachineSpec] {
        &self.machines
    }

    pub fn prices(&self) -> &PriceCatalog {
        &self.prices
    }

    pub fn provenance(&self, model_id: &str) -> Option<&BTreeMap<String, String>> {
        self.provenance.get(model_id)
    }

    pub fn model(&self, id: &str) -> Result<&ModelSpec> {
        self.models
            .iter()
            .find(|m| m.id == id)
            .ok_or_else(|| Error::UnknownModel(id.to_string()))
    }

    pub fn gpu(&self, id: &str) -> Result<&GpuSpec> {
        self.gpus
            .iter()
            .find(|g| g.id == id)
            .ok_or_else(|| Error::UnknownGpu(id.to_string()))
    }

    pub fn machine(&self, gpu_id: &str, n_gpus: u32) -> Result<&MachineSpec> {
        self.gpu(gpu_id)?;
        self.machines
            .iter()
            .find(|m| m.gpu.id == gpu_id && m.n_gpus == n_gpus)
            .ok_or_else(|| Error::UnknownMachine {
                gpu: gpu_id.to_string(),
                n_gpus,
            })
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Write every bundled file under `dir`, returning the paths written.
pub fn export_bundled(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for (rel, text) in BUNDLED_FILES {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| Error::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        fs::write(&path, text).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        out.push(path);
    }
    Ok(out)
}
