//! Binary checkpoints (`MTCK`): network widths, iteration, configuration
//! echo, parameters and optional optimizer state.
//!
//! Layout, little-endian: magic, `u32` version, `u32` field count and that
//! many `u32` widths, `u64` iteration, `u32` length and UTF-8 configuration,
//! `u8` Adam flag (followed by a `u64` step when set), `u32` tensor count and
//! the tensor records. Adam moments are stored as `adam.m.<name>` and
//! `adam.v.<name>` after the parameters.

use std::collections::HashMap;
use std::path::Path;

use crate::codec::{RawTensor, Reader, Writer};
use crate::error::{Error, Result};
use crate::network::{MtNetwork, NetworkWidths, SubnetParameters};
use crate::tensor::Tensor;
use crate::trainer::AdamState;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    /// Canonical `key=value` training configuration.
    pub config: String,
    pub network: MtNetwork<f32>,
    pub adam: Option<AdamState>,
}

fn moment_records(network: &MtNetwork<f32>, moments: &[Vec<Tensor<f32>>; 3], tag: &str) -> Vec<RawTensor> {
    let mut out = Vec::new();
    for (params, ms) in network.params.iter().zip(moments) {
        for (raw, m) in params.to_raw().into_iter().zip(ms) {
            let rank = raw.dims.len();
            out.push(RawTensor::from_tensor(format!("adam.{tag}.{}", raw.name), m, rank));
        }
    }
    out
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let fields = self.network.widths.to_fields();
        w.u32(fields.len() as u32);
        for f in fields {
            w.u32(f as u32);
        }
        w.u64(self.iteration);
        w.u32(self.config.len() as u32);
        w.bytes(self.config.as_bytes());
        let mut tensors: Vec<RawTensor> = self.network.params.iter().flat_map(SubnetParameters::to_raw).collect();
        match &self.adam {
            Some(a) => {
                w.u8(1);
                w.u64(a.step);
                tensors.extend(moment_records(&self.network, &a.m, "m"));
                tensors.extend(moment_records(&self.network, &a.v, "v"));
            }
            None => w.u8(0),
        }
        w.u32(tensors.len() as u32);
        for t in &tensors {
            w.tensor(t);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { what: "checkpoint", expected: CHECKPOINT_VERSION, found: version });
        }
        let nfields = r.u32()? as usize;
        if nfields > 64 {
            return Err(Error::Malformed { what: "checkpoint", detail: format!("{nfields} width fields") });
        }
        let fields = (0..nfields).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let widths = NetworkWidths::from_fields(&fields)?;
        let iteration = r.u64()?;
        let len = r.u32()? as usize;
        let config = r.utf8(len)?;
        let adam_step = match r.u8()? {
            0 => None,
            1 => Some(r.u64()?),
            other => {
                return Err(Error::Malformed { what: "checkpoint", detail: format!("optimizer flag {other}") })
            }
        };
        let count = r.u32()?;
        let tensors = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        r.finish()?;

        let mut seen = HashMap::new();
        for t in &tensors {
            if seen.insert(t.name.as_str(), ()).is_some() {
                return Err(Error::Malformed { what: "checkpoint", detail: format!("duplicate tensor {}", t.name) });
            }
        }
        let archs = crate::network::SubnetKind::ALL.map(|k| crate::network::SubnetArch::new(k, &widths));
        let mut params = Vec::with_capacity(3);
        for a in &archs {
            params.push(SubnetParameters::from_raw(a, &tensors)?);
        }
        let params: [SubnetParameters<f32>; 3] = params.try_into().map_err(|_| Error::shape("three subnets"))?;
        let network = MtNetwork { widths, params };

        let expected = network.params.iter().map(SubnetParameters::len).sum::<usize>()
            * if adam_step.is_some() { 3 } else { 1 };
        if tensors.len() != expected {
            return Err(Error::Malformed {
                what: "checkpoint",
                detail: format!("{} tensors, expected {expected}", tensors.len()),
            });
        }
        let adam = match adam_step {
            None => None,
            Some(step) => {
                let by_name: HashMap<&str, &RawTensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
                let moments = |tag: &str| -> Result<[Vec<Tensor<f32>>; 3]> {
                    let mut out: [Vec<Tensor<f32>>; 3] = Default::default();
                    for (slot, p) in out.iter_mut().zip(&network.params) {
                        for raw in p.to_raw() {
                            let key = format!("adam.{tag}.{}", raw.name);
                            let t = by_name.get(key.as_str()).ok_or_else(|| Error::MissingWeight(key.clone()))?;
                            if t.dims != raw.dims {
                                return Err(Error::DimensionMismatch {
                                    name: key,
                                    expected: raw.dims_usize(),
                                    found: t.dims_usize(),
                                });
                            }
                            slot.push(t.to_tensor()?);
                        }
                    }
                    Ok(out)
                };
                Some(AdamState { step, m: moments("m")?, v: moments("v")? })
            }
        };
        Ok(Checkpoint { iteration, config, network, adam })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(adam: bool) -> Checkpoint {
        let network = MtNetwork::init(NetworkWidths::divided(8).unwrap(), 5).unwrap();
        let adam = adam.then(|| {
            let mut a = AdamState::new(&network);
            a.step = 3;
            a.m[1][0].data_mut()[0] = 0.25;
            a
        });
        Checkpoint { iteration: 42, config: "seed=5\n".into(), network, adam }
    }

    #[test]
    fn byte_identical_round_trip() {
        for adam in [false, true] {
            let c = sample(adam);
            let bytes = c.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn rejects_tampering() {
        let bytes = sample(true).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Version { found: 9, .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Malformed { .. })));
    }
}
