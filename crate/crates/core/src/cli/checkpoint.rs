//! Binary checkpoints: `SVCK`, a `u32` format version, a `u64` header
//! length, a JSON header, then every parameter, array and optimizer value as
//! little-endian `f64` in header order. Loading reproduces all values
//! bitwise.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::baselines::SupervisedClassifier;
use crate::contrastive::Normalization;
use crate::error::{Error, Result};
use crate::evalprobe::{FeatureScaler, LinearProbe, ProbeTask};
use crate::gradcon::ReferenceGradients;
use crate::models::{Autoencoder, Backbone, ClassifierHead};
use crate::numerics::{LayerSpec, Network, Sgd, Tensor};
use crate::seed::rng;
use crate::synthdata::N_BIOMARKERS;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub epoch: u64,
    pub seed: u64,
    pub config_hash: String,
    /// Small non-numeric facts (dimensions, normalization, task, ...).
    pub meta: Value,
    pub networks: Vec<(String, Network)>,
    pub arrays: Vec<(String, Tensor)>,
    pub optimizer: Option<Sgd>,
}

#[derive(Serialize, Deserialize)]
struct NetworkEntry {
    name: String,
    specs: Vec<LayerSpec>,
    values: usize,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    epoch: u64,
    seed: u64,
    config_hash: String,
    meta: Value,
    networks: Vec<NetworkEntry>,
    arrays: Vec<ArrayEntry>,
    optimizer: Option<OptimizerEntry>,
}

impl Checkpoint {
    pub fn new(kind: &str, epoch: u64, seed: u64, config_hash: &str) -> Self {
        Self {
            kind: kind.to_string(),
            epoch,
            seed,
            config_hash: config_hash.to_string(),
            meta: json!({}),
            networks: Vec::new(),
            arrays: Vec::new(),
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            epoch: self.epoch,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            meta: self.meta.clone(),
            networks: self
                .networks
                .iter()
                .map(|(name, net)| NetworkEntry {
                    name: name.clone(),
                    specs: net.specs(),
                    values: net.param_count(),
                })
                .collect(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, t)| ArrayEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerEntry {
                learning_rate: o.learning_rate,
                momentum: o.momentum,
                velocity: o.velocity().iter().map(|v| v.shape().to_vec()).collect(),
            }),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |values: &[f64]| {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (_, net) in &self.networks {
            put(&net.flat_params());
        }
        for (_, t) in &self.arrays {
            put(t.data());
        }
        if let Some(o) = &self.optimizer {
            for v in o.velocity() {
                put(v.data());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
        let payload = &bytes[header_end..];
        if payload.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut cursor = 0usize;
        let mut take = |n: usize| -> Result<&[f64]> {
            let slice = values.get(cursor..cursor + n).ok_or_else(|| bad("payload shorter than header"))?;
            cursor += n;
            Ok(slice)
        };
        let mut networks = Vec::with_capacity(header.networks.len());
        for entry in &header.networks {
            let mut net = Network::from_specs(&entry.specs, &mut rng(0))?;
            if net.param_count() != entry.values {
                return Err(bad(&format!("network {} parameter count disagrees with its layers", entry.name)));
            }
            net.load_flat_params(take(entry.values)?)?;
            networks.push((entry.name.clone(), net));
        }
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in &header.arrays {
            let n = entry.shape.iter().product();
            arrays.push((entry.name.clone(), Tensor::new(entry.shape.clone(), take(n)?.to_vec())?));
        }
        let optimizer = match &header.optimizer {
            None => None,
            Some(o) => {
                let mut sgd = Sgd::new(o.learning_rate, o.momentum)?;
                let velocity = o
                    .velocity
                    .iter()
                    .map(|shape| Tensor::new(shape.clone(), take(shape.iter().product())?.to_vec()))
                    .collect::<Result<Vec<_>>>()?;
                sgd.set_velocity(velocity);
                Some(sgd)
            }
        };
        if cursor != values.len() {
            return Err(bad("trailing payload values"));
        }
        Ok(Self {
            kind: header.kind,
            epoch: header.epoch,
            seed: header.seed,
            config_hash: header.config_hash,
            meta: header.meta,
            networks,
            arrays,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }

    fn format_error(&self, reason: String) -> Error {
        Error::Format {
            path: format!("<{} checkpoint>", self.kind).into(),
            reason,
        }
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(self.format_error(format!("expected a {kind} checkpoint")));
        }
        Ok(())
    }

    pub fn network(&self, name: &str) -> Result<Network> {
        self.networks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, net)| net.clone())
            .ok_or_else(|| self.format_error(format!("no network named {name}")))
    }

    pub fn array(&self, name: &str) -> Result<Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| self.format_error(format!("no array named {name}")))
    }

    pub fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| self.format_error(format!("missing metadata {key}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }
}

pub fn autoencoder_checkpoint(model: &Autoencoder, reference: &ReferenceGradients, base: Checkpoint) -> Checkpoint {
    let mut ck = Checkpoint { kind: "autoencoder".into(), ..base };
    ck.meta = json!({
        "image_side": model.image_side,
        "latent_dim": model.latent_dim,
        "reference_count": reference.count(),
    });
    ck.networks = vec![
        ("encoder".into(), model.encoder.clone()),
        ("decoder".into(), model.decoder.clone()),
    ];
    ck.arrays = reference
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| (format!("reference/{i}"), Tensor::vector(l.clone())))
        .collect();
    ck
}

pub fn load_autoencoder(ck: &Checkpoint) -> Result<(Autoencoder, ReferenceGradients)> {
    ck.expect_kind("autoencoder")?;
    let model = Autoencoder {
        encoder: ck.network("encoder")?,
        decoder: ck.network("decoder")?,
        image_side: ck.meta_field("image_side")?,
        latent_dim: ck.meta_field("latent_dim")?,
    };
    let layers = ck.arrays.iter().map(|(_, t)| t.data().to_vec()).collect();
    Ok((model, ReferenceGradients::from_parts(layers, ck.meta_field("reference_count")?)))
}

pub fn backbone_checkpoint(backbone: &Backbone, normalization: Normalization, base: Checkpoint) -> Checkpoint {
    let mut ck = Checkpoint { kind: "backbone".into(), ..base };
    ck.meta = json!({
        "image_side": backbone.image_side,
        "embedding_dim": backbone.embedding_dim,
        "normalization": normalization,
    });
    ck.networks = vec![("backbone".into(), backbone.net.clone())];
    ck
}

pub fn load_backbone(ck: &Checkpoint) -> Result<(Backbone, Normalization)> {
    ck.expect_kind("backbone")?;
    Ok((
        Backbone {
            net: ck.network("backbone")?,
            image_side: ck.meta_field("image_side")?,
            embedding_dim: ck.meta_field("embedding_dim")?,
        },
        ck.meta_field("normalization")?,
    ))
}

pub fn classifier_checkpoint(model: &SupervisedClassifier, base: Checkpoint) -> Checkpoint {
    let mut ck = Checkpoint { kind: "classifier".into(), ..base };
    ck.meta = json!({
        "image_side": model.backbone.image_side,
        "embedding_dim": model.backbone.embedding_dim,
        "normalization": model.normalization,
        "combos": model.combos,
    });
    ck.networks = vec![
        ("backbone".into(), model.backbone.net.clone()),
        ("multilabel".into(), model.multilabel.net.clone()),
        ("categorical".into(), model.categorical.net.clone()),
    ];
    ck
}

pub fn load_classifier(ck: &Checkpoint) -> Result<SupervisedClassifier> {
    ck.expect_kind("classifier")?;
    let combos: Vec<[bool; N_BIOMARKERS]> = ck.meta_field("combos")?;
    Ok(SupervisedClassifier {
        backbone: Backbone {
            net: ck.network("backbone")?,
            image_side: ck.meta_field("image_side")?,
            embedding_dim: ck.meta_field("embedding_dim")?,
        },
        multilabel: ClassifierHead {
            net: ck.network("multilabel")?,
        },
        categorical: ClassifierHead {
            net: ck.network("categorical")?,
        },
        combos,
        normalization: ck.meta_field("normalization")?,
    })
}

pub fn probe_checkpoint(probe: &LinearProbe, base: Checkpoint) -> Checkpoint {
    let mut ck = Checkpoint { kind: "probe".into(), ..base };
    ck.meta = json!({ "task": probe.task });
    ck.networks = vec![("head".into(), probe.head.net.clone())];
    ck.arrays = vec![
        ("scaler/mean".into(), Tensor::vector(probe.scaler.mean.clone())),
        ("scaler/std".into(), Tensor::vector(probe.scaler.std.clone())),
    ];
    ck
}

pub fn load_probe(ck: &Checkpoint) -> Result<LinearProbe> {
    ck.expect_kind("probe")?;
    let task: ProbeTask = ck.meta_field("task")?;
    Ok(LinearProbe {
        task,
        scaler: FeatureScaler {
            mean: ck.array("scaler/mean")?.into_data(),
            std: ck.array("scaler/std")?.into_data(),
        },
        head: ClassifierHead {
            net: ck.network("head")?,
        },
    })
}
