//! Binary network checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "GDCK"
//! version    u32      1
//! spec_len   u32      length of the spec TOML that follows
//! spec       spec_len bytes of UTF-8 TOML (a `NetworkSpec`)
//! count      u32      number of blobs
//! blob*      name_len u16, name (UTF-8), rank u8, dims u32 × rank,
//!            values f64 × Π dims
//! ```
//!
//! Blob names are `<layer>.weight`, `<layer>.bias` and `<site>.gate`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::gates::GateParams;
use crate::network::{LayerParams, Network, NetworkSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GDCK";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_blob(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) -> Result<()> {
    let name_len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("blob name `{name}` too long")))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        put_u32(out, d, "dimension")?;
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn to_bytes(net: &Network) -> Result<Vec<u8>> {
    let spec = toml::to_string(net.spec()).map_err(|e| Error::Checkpoint(format!("spec serialization: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, spec.len(), "spec length")?;
    out.extend_from_slice(spec.as_bytes());

    let sites = net.gate_sites();
    put_u32(&mut out, 2 * net.layers.len() + sites.len(), "blob count")?;
    for (plan, l) in net.plans().iter().zip(&net.layers) {
        put_blob(&mut out, &format!("{}.weight", plan.name), l.weight.shape(), l.weight.data())?;
        put_blob(&mut out, &format!("{}.bias", plan.name), l.bias.shape(), l.bias.data())?;
    }
    for g in sites {
        put_blob(&mut out, &format!("{}.gate", g.site), &[g.len()], &g.k)?;
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated at offset {}: needed {n} bytes, {} left",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let spec_len = r.u32()?;
    let spec_text = std::str::from_utf8(r.take(spec_len)?)
        .map_err(|e| Error::Checkpoint(format!("spec is not UTF-8: {e}")))?;
    let spec: NetworkSpec =
        toml::from_str(spec_text).map_err(|e| Error::Checkpoint(format!("embedded spec: {e}")))?;

    let count = r.u32()?;
    let mut blobs = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("blob name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("blob too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if blobs.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate blob `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut take = |name: String| {
        blobs
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing blob `{name}`")))
    };
    let plans = spec.plan()?;
    let mut layers = Vec::with_capacity(plans.len());
    let mut layer_gates = Vec::with_capacity(plans.len());
    for (plan, ls) in plans.iter().zip(&spec.layers) {
        layers.push(LayerParams {
            weight: take(format!("{}.weight", plan.name))?,
            bias: take(format!("{}.bias", plan.name))?,
        });
        layer_gates.push(match &ls.gate {
            Some(g) => Some(GateParams::with_values(
                plan.name.clone(),
                g.granularity,
                &plan.out_shape,
                take(format!("{}.gate", plan.name))?.into_data(),
            )?),
            None => None,
        });
    }
    let input_gate = match &spec.input_gate {
        Some(g) => Some(GateParams::with_values(
            "input",
            g.granularity,
            &spec.input.dims(),
            take("input.gate".to_string())?.into_data(),
        )?),
        None => None,
    };
    if let Some(extra) = blobs.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected blob `{extra}`")));
    }
    Network::from_parts(&spec, layers, input_gate, layer_gates)
}

/// Writes the checkpoint and a readable `<path>.toml` copy of its spec.
pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(net)?).map_err(|e| Error::io(path, e))?;
    let sidecar = sidecar_path(path);
    let spec = toml::to_string(net.spec()).map_err(|e| Error::Checkpoint(format!("spec serialization: {e}")))?;
    std::fs::write(&sidecar, spec).map_err(|e| Error::io(&sidecar, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    s.into()
}
