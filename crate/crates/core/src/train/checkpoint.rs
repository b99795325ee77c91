use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{init_params, GraphSpec, InitScheme, LayerParams, Params};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"DKCP";
pub const VERSION: u16 = 1;

/// Everything needed to resume training or evaluate a model.
///
/// Layout (little-endian): magic, version, graph hash, then per layer in id order the
/// u32-length-prefixed f32 arrays (conv weight and bias; batch-norm gamma, beta, running
/// mean and running variance), a u32 moment count followed by the Adam first moments and
/// then the second moments, u32 epoch, f32 best validation accuracy. A trailer follows
/// with the u64 Adam step, the graph text and free-form `key = value` state lines, each
/// text u32-length-prefixed, and finally the trailer's byte length as a u32.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub graph: GraphSpec,
    pub params: Params,
    pub adam_t: u64,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    /// Completed epochs.
    pub epoch: u32,
    pub best_val_acc: f32,
    pub state: Vec<(String, String)>,
}

fn put_array(out: &mut Vec<u8>, data: &[f32]) {
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_text(out: &mut Vec<u8>, text: &str) {
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            expected: (self.pos + n) as u64,
            actual: self.bytes.len() as u64,
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn array(&mut self) -> Result<Vec<f32>> {
        let n = self.u32()? as usize;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("array length overflows".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("trailer text is not UTF-8".into()))
    }
}

fn fill(t: &mut Tensor, data: Vec<f32>, what: &str, id: usize) -> Result<()> {
    if data.len() != t.numel() {
        return Err(Error::Checkpoint(format!("node {id} {what}: {} values, graph expects {}", data.len(), t.numel())));
    }
    t.data_mut().copy_from_slice(&data);
    Ok(())
}

/// Offset of the trailer, whose length is the file's final u32.
fn trailer_start(bytes: &[u8]) -> Result<usize> {
    let header = 4 + 2 + 8;
    if bytes.len() < header + 4 {
        return Err(Error::Truncated { expected: (header + 4) as u64, actual: bytes.len() as u64 });
    }
    let len = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes")) as usize;
    (bytes.len() - 4)
        .checked_sub(len)
        .filter(|&s| s >= header)
        .ok_or_else(|| Error::Checkpoint(format!("trailer length {len} exceeds the file")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.graph.hash().to_le_bytes());
        for (_, layer) in self.params.layers() {
            match layer {
                LayerParams::Conv { weight, bias } => {
                    put_array(&mut out, weight.value.data());
                    put_array(&mut out, bias.value.data());
                }
                LayerParams::Bn { gamma, beta, state } => {
                    put_array(&mut out, gamma.value.data());
                    put_array(&mut out, beta.value.data());
                    put_array(&mut out, &state.running_mean);
                    put_array(&mut out, &state.running_var);
                }
            }
        }
        out.extend_from_slice(&(self.adam_m.len() as u32).to_le_bytes());
        for t in self.adam_m.iter().chain(&self.adam_v) {
            put_array(&mut out, t.data());
        }
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.best_val_acc.to_le_bytes());
        let trailer_at = out.len();
        out.extend_from_slice(&self.adam_t.to_le_bytes());
        put_text(&mut out, &self.graph.to_text());
        let state: String = self.state.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        put_text(&mut out, &state);
        let trailer = (out.len() - trailer_at) as u32;
        out.extend_from_slice(&trailer.to_le_bytes());
        out
    }

    /// Decodes a checkpoint. With `expected`, the stored graph hash must equal it.
    pub fn from_bytes(bytes: &[u8], expected: Option<u64>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, expected \"DKCP\"".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hash = r.u64()?;
        if let Some(want) = expected {
            if want != hash {
                return Err(Error::Checkpoint(format!("graph hash mismatch: file {hash:016x}, model {want:016x}")));
            }
        }
        let body_end = trailer_start(bytes)?;
        let mut t = Reader { bytes: &bytes[..bytes.len() - 4], pos: body_end };
        let adam_t = t.u64()?;
        let graph = GraphSpec::parse(&t.text()?).map_err(|e| Error::Checkpoint(format!("stored graph: {e}")))?;
        let state_text = t.text()?;
        if t.pos != t.bytes.len() {
            return Err(Error::Checkpoint("trailer length disagrees with its contents".into()));
        }
        if graph.hash() != hash {
            return Err(Error::Checkpoint(format!(
                "graph hash mismatch: header {hash:016x}, stored graph {:016x}",
                graph.hash()
            )));
        }

        let mut r = Reader { bytes: &bytes[..body_end], pos: r.pos };
        let mut params = init_params(&graph, InitScheme::UniformSmall, 0);
        let ids: Vec<usize> = params.layers().map(|(id, _)| id).collect();
        for id in ids {
            match params.get_mut(id).expect("listed id") {
                LayerParams::Conv { weight, bias } => {
                    fill(&mut weight.value, r.array()?, "weight", id)?;
                    fill(&mut bias.value, r.array()?, "bias", id)?;
                }
                LayerParams::Bn { gamma, beta, state } => {
                    fill(&mut gamma.value, r.array()?, "gamma", id)?;
                    fill(&mut beta.value, r.array()?, "beta", id)?;
                    let (m, v) = (r.array()?, r.array()?);
                    if m.len() != state.channels() || v.len() != state.channels() {
                        return Err(Error::Checkpoint(format!("node {id} running stats have the wrong length")));
                    }
                    state.running_mean = m;
                    state.running_var = v;
                }
            }
        }
        let count = r.u32()? as usize;
        let shapes: Vec<Shape> = params.trainable().map(|p| p.value.shape()).collect();
        if count != 0 && count != shapes.len() {
            return Err(Error::Checkpoint(format!("{count} Adam moments for {} trainable tensors", shapes.len())));
        }
        let read_moments = |r: &mut Reader| -> Result<Vec<Tensor>> {
            shapes[..count]
                .iter()
                .map(|&s| {
                    let data = r.array()?;
                    Tensor::from_vec(s, data).map_err(|e| Error::Checkpoint(format!("Adam moment: {e}")))
                })
                .collect()
        };
        let adam_m = read_moments(&mut r)?;
        let adam_v = read_moments(&mut r)?;
        let epoch = r.u32()?;
        let best_val_acc = r.f32()?;
        if r.pos != body_end {
            return Err(Error::Checkpoint(format!("{} unexpected bytes before the trailer", body_end - r.pos)));
        }
        let state = state_text
            .lines()
            .map(|l| {
                l.split_once(" = ")
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Checkpoint(format!("bad state line `{l}`")))
            })
            .collect::<Result<_>>()?;
        Ok(Checkpoint { graph, params, adam_t, adam_m, adam_v, epoch, best_val_acc, state })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))?;
        fs::rename(&tmp, path).map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, expected: Option<&GraphSpec>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))?;
        Checkpoint::from_bytes(&bytes, expected.map(GraphSpec::hash))
    }

    pub fn state_value(&self, key: &str) -> Option<&str> {
        self.state.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_network2, WidthPlan};
    use crate::rng::chacha;

    fn sample() -> Checkpoint {
        let g = build_network2(&WidthPlan::network2().scaled_down(16), 5).unwrap();
        let mut params = init_params(&g, InitScheme::VarianceScaling, 3);
        let mut rng = chacha(4);
        let ids: Vec<usize> = params.layers().map(|(id, _)| id).collect();
        for id in ids {
            if let Some(LayerParams::Bn { state, .. }) = params.get_mut(id) {
                state.running_mean.iter_mut().for_each(|v| *v = rand::Rng::random::<f32>(&mut rng));
                state.running_var.iter_mut().for_each(|v| *v = 0.5 + rand::Rng::random::<f32>(&mut rng));
            }
        }
        let adam_m: Vec<Tensor> =
            params.trainable().map(|p| Tensor::randn(p.value.shape(), 0.1, &mut rng).unwrap()).collect();
        let adam_v: Vec<Tensor> =
            params.trainable().map(|p| Tensor::uniform(p.value.shape(), 0.0, 1e-3, &mut rng).unwrap()).collect();
        Checkpoint {
            graph: g,
            params,
            adam_t: 77,
            adam_m,
            adam_v,
            epoch: 12,
            best_val_acc: 0.625,
            state: vec![("lr".into(), "1e-4".into()), ("segment".into(), "0,12".into())],
        }
    }

    #[test]
    fn round_trip_is_bit_exact_and_idempotent() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Some(ck.graph.hash())).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.state_value("segment"), Some("0,12"));

        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        ck.save(&a).unwrap();
        Checkpoint::load(&a, None).unwrap().save(&b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn fresh_optimizer_state_round_trips() {
        let mut ck = sample();
        ck.adam_m.clear();
        ck.adam_v.clear();
        ck.adam_t = 0;
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes(), None).unwrap(), ck);
    }

    #[test]
    fn refuses_tampering() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let mut bad = bytes.clone();
        bad[6] ^= 1;
        let msg = Checkpoint::from_bytes(&bad, None).unwrap_err().to_string();
        assert!(msg.contains("graph hash mismatch"), "{msg}");
        let other = build_network2(&WidthPlan::network2().scaled_down(16), 6).unwrap();
        let msg = Checkpoint::from_bytes(&bytes, Some(other.hash())).unwrap_err().to_string();
        assert!(msg.contains("graph hash mismatch"), "{msg}");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9], None).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, None).unwrap_err().to_string().contains("magic"));
        // Drop one f32 from the first array: lengths no longer line up.
        let mut bad = bytes[..14].to_vec();
        let n = u32::from_le_bytes(bytes[14..18].try_into().unwrap());
        bad.extend_from_slice(&(n - 1).to_le_bytes());
        bad.extend_from_slice(&bytes[18..18 + 4 * (n as usize - 1)]);
        bad.extend_from_slice(&bytes[18 + 4 * n as usize..]);
        assert!(Checkpoint::from_bytes(&bad, None).is_err());
    }
}
