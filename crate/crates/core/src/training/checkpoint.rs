use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;
use crate::model::{Activation, BayesModel, Layer, LayerKind, Param};
use crate::tensor::Tensor;
use crate::variational::{IsotropicPrior, MfgPosterior, PsePosterior};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Hex SHA-256 of the canonical JSON of the producing configuration.
    pub config_hash: String,
    pub epoch: usize,
    pub seed: u64,
    /// Free-form stage label such as `map` or `finetune`.
    pub stage: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: BayesModel,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    family: String,
    shapes: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct LayerHeader {
    kind: LayerKind,
    activation: Activation,
    params: Vec<ParamHeader>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    input_shape: Vec<usize>,
    num_classes: usize,
    prior_lambda: f64,
    prior_n: usize,
    layers: Vec<LayerHeader>,
    meta: CheckpointMeta,
}

pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let layers = m
            .layers
            .iter()
            .map(|l| LayerHeader {
                kind: l.kind.clone(),
                activation: l.activation,
                params: l
                    .params
                    .iter()
                    .map(|p| ParamHeader {
                        family: p.family().to_string(),
                        shapes: p.tensors().iter().map(|t| t.shape().to_vec()).collect(),
                    })
                    .collect(),
            })
            .collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            input_shape: m.input_shape.clone(),
            num_classes: m.num_classes,
            prior_lambda: m.prior.lambda(),
            prior_n: m.prior.n(),
            layers,
            meta: self.meta.clone(),
        };
        let mut payload = Vec::with_capacity(m.num_parameters() * 8);
        for t in m.parameters() {
            io::push_f64s(&mut payload, t.data());
        }
        io::encode(io::CHECKPOINT_MAGIC, &serde_json::to_value(&header)?, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, mut payload) = io::decode(io::CHECKPOINT_MAGIC, bytes)?;
        let h: Header = serde_json::from_value(header)?;
        if h.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {} is not supported",
                h.format_version
            )));
        }
        let mut layers = Vec::with_capacity(h.layers.len());
        for lh in h.layers {
            let param_shapes = lh.kind.param_shapes();
            if param_shapes.len() != lh.params.len() {
                return Err(Error::Format(format!("{:?}: wrong parameter count", lh.kind)));
            }
            let mut params = Vec::with_capacity(lh.params.len());
            for (ph, pshape) in lh.params.into_iter().zip(param_shapes) {
                let mut ts = Vec::with_capacity(ph.shapes.len());
                for s in ph.shapes {
                    let n = s.iter().product();
                    ts.push(Tensor::new(s, io::take_f64s(&mut payload, n)?)?);
                }
                let count = ts.len();
                let wrong = || Error::Format(format!("{} parameter with {count} tensors", ph.family));
                let p = match (ph.family.as_str(), count) {
                    ("point", 1) => Param::Point(ts.pop().ok_or_else(wrong)?),
                    ("mfg", 2) => {
                        let psi = ts.pop().ok_or_else(wrong)?;
                        let mu = ts.pop().ok_or_else(wrong)?;
                        Param::Mfg(MfgPosterior::new(mu, psi)?)
                    }
                    ("pse", 3) => {
                        let r = ts.pop().ok_or_else(wrong)?;
                        let l = ts.pop().ok_or_else(wrong)?;
                        let w = ts.pop().ok_or_else(wrong)?;
                        Param::Pse(PsePosterior::new(w, l, r, pshape)?)
                    }
                    _ => return Err(wrong()),
                };
                params.push(p);
            }
            layers.push(Layer {
                kind: lh.kind,
                activation: lh.activation,
                params,
            });
        }
        if !payload.is_empty() {
            return Err(Error::Format("trailing bytes after parameter blocks".into()));
        }
        let prior = IsotropicPrior::from_lambda(h.prior_lambda, h.prior_n)?;
        let model = BayesModel::new(layers, prior, h.input_shape, h.num_classes)?;
        Ok(Checkpoint { model, meta: h.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let prior = IsotropicPrior::from_lambda(1e-3, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = ModelSpec::Mlp { hidden: vec![3] }.build(&[2], 2, prior, &mut rng).unwrap();
        let meta = CheckpointMeta { config_hash: "abc".into(), epoch: 4, seed: 9, stage: "map".into() };
        Checkpoint { model, meta }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn version_and_trailing_bytes_are_rejected() {
        let c = sample();
        let mut bytes = c.to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));

        let bytes = c.to_bytes().unwrap();
        let (mut header, payload) = io::decode(io::CHECKPOINT_MAGIC, &bytes).unwrap();
        header["format_version"] = serde_json::json!(FORMAT_VERSION + 1);
        let bumped = io::encode(io::CHECKPOINT_MAGIC, &header, payload).unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bumped), Err(Error::Format(_))));
    }

    #[test]
    fn config_hash_is_stable_hex() {
        let h = config_hash(&serde_json::json!({"a": 1})).unwrap();
        assert_eq!(h.len(), 64);
        assert_eq!(h, config_hash(&serde_json::json!({"a": 1})).unwrap());
        assert_ne!(h, config_hash(&serde_json::json!({"a": 2})).unwrap());
    }
}
