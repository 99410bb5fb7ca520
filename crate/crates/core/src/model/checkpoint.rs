use std::path::Path;

use serde_json::{json, Map, Value};

use super::{Adam, Model, ModelConfig, Params};
use crate::container::{Container, Entry, Payload};
use crate::numerics::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "tglobal-checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: Params<f64>,
    pub optimizer: Option<Adam>,
    /// Free-form run metadata echoed into the header.
    pub meta: Value,
}

impl Checkpoint {
    pub fn from_model(model: &Model, optimizer: Option<&Adam>, meta: Value) -> Self {
        Checkpoint {
            config: model.config.clone(),
            step: optimizer.map_or(0, |o| o.step),
            params: model.params.clone(),
            optimizer: optimizer.cloned(),
            meta,
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.config.clone(), self.params.clone())
    }

    pub fn to_container(&self) -> Container {
        let mut header = Map::new();
        header.insert("format".into(), json!(FORMAT));
        header.insert("version".into(), json!(CHECKPOINT_VERSION));
        header.insert(
            "config".into(),
            serde_json::to_value(&self.config).expect("config serialises"),
        );
        header.insert("config_hash".into(), json!(self.config.hash()));
        header.insert("step".into(), json!(self.step));
        header.insert("optimizer".into(), json!(self.optimizer.as_ref().map(|_| "adam")));
        header.insert("meta".into(), self.meta.clone());
        let entry = |name: String, t: &Tensor<f64>| Entry {
            name,
            shape: t.shape().to_vec(),
            payload: Payload::F64(t.data().to_vec()),
        };
        let mut entries: Vec<Entry> = self
            .params
            .names
            .iter()
            .zip(&self.params.tensors)
            .map(|(n, t)| entry(n.clone(), t))
            .collect();
        if let Some(opt) = &self.optimizer {
            for (n, t) in self.params.names.iter().zip(&opt.m) {
                entries.push(entry(format!("adam.m/{n}"), t));
            }
            for (n, t) in self.params.names.iter().zip(&opt.v) {
                entries.push(entry(format!("adam.v/{n}"), t));
            }
        }
        Container {
            header,
            directory: "tensors".into(),
            entries,
        }
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        let field = |h: &Map<String, Value>, k: &str| {
            h.get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("missing header field {k:?}")))
        };
        if field(&c.header, "format")? != json!(FORMAT) {
            return Err(Error::Format("not a checkpoint".into()));
        }
        let version = field(&c.header, "version")?;
        if version != json!(CHECKPOINT_VERSION) {
            return Err(Error::Version(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let config: ModelConfig = serde_json::from_value(field(&c.header, "config")?)?;
        let stored_hash = field(&c.header, "config_hash")?;
        if stored_hash != json!(config.hash()) {
            return Err(Error::Version(format!(
                "config hash {stored_hash} does not match the stored config"
            )));
        }
        let step = field(&c.header, "step")?
            .as_u64()
            .ok_or_else(|| Error::Format("step is not an integer".into()))?;
        let has_opt = !field(&c.header, "optimizer")?.is_null();
        let meta = c.header.remove("meta").unwrap_or(Value::Null);

        let model_layout = super::Layout::new(&config);
        let n = model_layout.len();
        let expected = if has_opt { 3 * n } else { n };
        if c.entries.len() != expected {
            return Err(Error::Format(format!(
                "{} tensors, expected {expected}",
                c.entries.len()
            )));
        }
        let mut tensors = Vec::with_capacity(c.entries.len());
        for e in c.entries {
            let Payload::F64(data) = e.payload else {
                return Err(Error::Format(format!("{}: expected f64 payload", e.name)));
            };
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        let mut it = tensors.into_iter();
        let mut take = |prefix: &str| -> Result<Vec<Tensor<f64>>> {
            let mut out = Vec::with_capacity(n);
            for want in &model_layout.names {
                let (name, t) = it.next().expect("count checked");
                if name != format!("{prefix}{want}") {
                    return Err(Error::Format(format!(
                        "unexpected tensor {name:?}, wanted {prefix}{want}"
                    )));
                }
                out.push(t);
            }
            Ok(out)
        };
        let params = Params {
            names: model_layout.names.clone(),
            tensors: take("")?,
        };
        params.check(&model_layout)?;
        let optimizer = if has_opt {
            Some(Adam {
                m: take("adam.m/")?,
                v: take("adam.v/")?,
                step,
            })
        } else {
            None
        };
        Ok(Checkpoint {
            config,
            step,
            params,
            optimizer,
            meta,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.to_container().write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_container(Container::read(path, "tensors")?)
}
