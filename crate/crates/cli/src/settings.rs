//! Config-file loading and flag overrides shared by `train`, `ablate` and
//! `bench`.

use std::path::Path;

use dipformer::data::SegSample;
use dipformer::kv::KvMap;
use dipformer::model::{ModelConfig, IGNORE_LABEL};
use dipformer::train::TrainConfig;
use dipformer::{Error, Result};

use crate::RunArgs;

/// Config file split by key prefix.
#[derive(Default)]
pub struct ConfigFile {
    pub model: KvMap,
    pub train: KvMap,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let all = KvMap::parse(&text)?;
        let mut out = ConfigFile::default();
        for key in all.keys() {
            let value = all.get(key).unwrap_or_default();
            match key.split_once('.') {
                Some(("model", k)) => out.model.insert(k, value),
                Some(("train", k)) => out.train.insert(k, value),
                _ => {
                    return Err(Error::Config(format!(
                        "{}: key {key:?} needs a model. or train. prefix",
                        path.display()
                    )))
                }
            }
        }
        Ok(out)
    }
}

/// Model config from the file, with the image size and class count taken
/// from `data` unless the file sets them.
pub fn model_config(file: &ConfigFile, run: &RunArgs, data: &[SegSample]) -> Result<ModelConfig> {
    let mut kv = file.model.clone();
    if let Some(first) = data.first() {
        if kv.get("input_height").is_none() && kv.get("input_width").is_none() {
            kv.insert("input_height", first.height);
            kv.insert("input_width", first.width);
        }
    }
    if kv.get("n_cls").is_none() {
        let top = data
            .iter()
            .filter_map(|s| s.labels.as_deref())
            .flatten()
            .filter(|&&l| l != IGNORE_LABEL)
            .max();
        if let Some(&top) = top {
            kv.insert("n_cls", (top as usize + 1).max(2));
        }
    }
    if let Some(seed) = run.seed {
        kv.insert("seed", seed);
    }
    ModelConfig::from_kv(&kv)
}

pub fn train_config(file: &ConfigFile, run: &RunArgs) -> Result<TrainConfig> {
    let mut kv = file.train.clone();
    if let Some(steps) = run.steps {
        kv.insert("total_steps", steps);
        if kv.get("warmup_steps").is_none() {
            kv.insert("warmup_steps", steps / 10);
        }
        if kv.get("eval_every").is_none() {
            kv.insert("eval_every", steps);
        }
    }
    if let Some(lr) = run.lr {
        kv.insert("lr0", lr);
    }
    if let Some(b) = run.batch_size {
        kv.insert("batch_size", b);
    }
    if let Some(seed) = run.seed {
        kv.insert("seed", seed);
    }
    TrainConfig::from_kv(&kv)
}

/// Both configs as one prefixed `key=value` document.
pub fn render(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut kv = KvMap::default();
    let m = model.to_kv();
    for k in m.keys() {
        kv.insert(&format!("model.{k}"), m.get(k).unwrap_or_default());
    }
    let t = train.to_kv();
    for k in t.keys() {
        kv.insert(&format!("train.{k}"), t.get(k).unwrap_or_default());
    }
    kv.render()
}
