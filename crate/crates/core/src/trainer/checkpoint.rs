use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::config::TrainConfig;
use super::model::{ENTITIES, RELATIONS, USERS};
use crate::compute::{Matrix, ParameterStore};
use crate::error::{Error, Result};
use crate::kv;

const MANIFEST: &str = "manifest.txt";
const FORMAT: &str = "kgdiv-checkpoint-1";

/// Sizes of the dataset a checkpoint was trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Counts {
    pub users: usize,
    pub items: usize,
    pub entities: usize,
    pub relations: usize,
}

/// Trained tables plus everything needed to rebuild the forward pass.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub counts: Counts,
    /// Epoch the tables were taken from (0 = initialisation).
    pub epoch: usize,
    /// Validation metric at that epoch.
    pub best_metric: f64,
    pub params: ParameterStore<f32>,
}

fn write_table(path: &Path, m: &Matrix<f32>) -> Result<()> {
    let bytes: Vec<u8> = m.as_slice().iter().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_table(path: &Path, rows: usize, cols: usize) -> Result<Matrix<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::Checkpoint(format!(
            "{}: {} bytes, expected {rows}x{cols} f32",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Matrix::from_vec(rows, cols, data)?)
}

impl Checkpoint {
    /// `manifest.txt` (resolved config and sizes) plus one little-endian
    /// f32 file per table.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = format!(
            "format={FORMAT}\n\
             meta.users={}\nmeta.items={}\nmeta.entities={}\nmeta.relations={}\n\
             meta.epoch={}\nmeta.best_metric={}\n",
            self.counts.users,
            self.counts.items,
            self.counts.entities,
            self.counts.relations,
            self.epoch,
            self.best_metric
        );
        manifest.push_str(&self.config.to_kv_text());
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        for name in [USERS, ENTITIES, RELATIONS] {
            let id = self
                .params
                .id_of(name)
                .ok_or_else(|| Error::Checkpoint(format!("table `{name}` missing")))?;
            write_table(&dir.join(format!("{name}.bin")), self.params.value(id))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let map = kv::parse(&text).map_err(Error::Checkpoint)?;
        if map.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(Error::Checkpoint(format!("{}: unknown format", path.display())));
        }
        let meta = |k: &str| -> Result<String> {
            map.get(&format!("meta.{k}"))
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("manifest lacks `meta.{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            meta(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad `meta.{k}`")))
        };
        let counts = Counts {
            users: num("users")?,
            items: num("items")?,
            entities: num("entities")?,
            relations: num("relations")?,
        };
        let epoch = num("epoch")?;
        let best_metric: f64 = meta("best_metric")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad `meta.best_metric`".into()))?;
        let settings: BTreeMap<String, String> = map
            .iter()
            .filter(|(k, _)| !k.starts_with("meta.") && k.as_str() != "format")
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let mut config = TrainConfig::default();
        config.apply_map(&settings)?;
        config.validate()?;
        let d = config.dim;
        let mut params = ParameterStore::new();
        for (name, rows) in [
            (USERS, counts.users),
            (ENTITIES, counts.entities),
            (RELATIONS, counts.relations),
        ] {
            params.add(name, read_table(&dir.join(format!("{name}.bin")), rows, d)?);
        }
        Ok(Checkpoint {
            config,
            counts,
            epoch,
            best_metric,
            params,
        })
    }
}
