//! Binary checkpoint format.
//!
//! ```text
//! "ORNC" | version: u16 | count: u32 | tensor × count        parameters
//!                       | count: u32 | tensor × count        optimizer state
//! tensor = name_len: u32 | name | rank: u32 | extents: u32 × rank | f32 × len
//! ```
//!
//! All integers and reals are little-endian. The first parameter record is
//! `meta`: the UTF-8 bytes of a `key=value` text block (one byte per element)
//! holding the network description, its fingerprint, the epoch counter and
//! the seed from which every RNG stream is derived.

use std::fs;
use std::path::Path;

use super::model::Network;
use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::optim::{AdadeltaState, DEFAULT_EPS, DEFAULT_RHO};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ORNC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Epoch with the best validation error seen so far.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestRecord {
    pub epoch: usize,
    pub val_err: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub fingerprint: String,
    /// Completed epochs.
    pub epoch: usize,
    /// Training RNG seed; epoch `e` draws from stream `e` of this seed.
    pub seed: u64,
    pub best: Option<BestRecord>,
    pub rho: f64,
    pub eps: f64,
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(
        net: &Network<T>,
        optimizer: &[AdadeltaState<T>],
        epoch: usize,
        seed: u64,
        best: Option<BestRecord>,
    ) -> Self {
        let params: Vec<(String, Tensor<f32>)> = net.parameters().into_iter().map(|(n, t)| (n, t.cast())).collect();
        let mut opt = Vec::with_capacity(2 * optimizer.len());
        for ((name, _), st) in params.iter().zip(optimizer) {
            opt.push((format!("{name}.sq_grad"), st.sq_grad.cast()));
            opt.push((format!("{name}.sq_update"), st.sq_update.cast()));
        }
        let (rho, eps) = optimizer.first().map_or((DEFAULT_RHO, DEFAULT_EPS), |s| (s.rho, s.eps));
        Self {
            spec: net.spec().clone(),
            fingerprint: net.spec().fingerprint(),
            epoch,
            seed,
            best,
            rho,
            eps,
            params,
            optimizer: opt,
        }
    }

    /// Rebuilds the network with the stored parameters.
    pub fn network<T: Scalar>(&self) -> Result<Network<T>> {
        let mut net = Network::<T>::new(&self.spec, 0)?;
        let names: Vec<String> = net.parameters().into_iter().map(|(n, _)| n).collect();
        if names.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameter tensors stored, network has {}",
                self.params.len(),
                names.len()
            )));
        }
        for ((dst, name), (stored, src)) in net.parameters_mut().into_iter().zip(&names).zip(&self.params) {
            if name != stored || dst.shape() != src.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{stored}' {:?} does not match '{name}' {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.cast();
        }
        Ok(net)
    }

    /// Optimizer accumulators, one per parameter tensor (fresh when absent).
    pub fn optimizer_states<T: Scalar>(&self) -> Result<Vec<AdadeltaState<T>>> {
        if self.optimizer.is_empty() {
            return Ok(self
                .params
                .iter()
                .map(|(_, p)| AdadeltaState::with_constants(p.shape(), self.rho, self.eps))
                .collect());
        }
        if self.optimizer.len() != 2 * self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} optimizer tensors for {} parameters",
                self.optimizer.len(),
                self.params.len()
            )));
        }
        self.params
            .iter()
            .zip(self.optimizer.chunks(2))
            .map(|((name, p), pair)| {
                let (g, u) = (&pair[0], &pair[1]);
                if g.0 != format!("{name}.sq_grad") || u.0 != format!("{name}.sq_update") {
                    return Err(Error::Checkpoint(format!("optimizer state out of order at '{}'", g.0)));
                }
                if g.1.shape() != p.shape() || u.1.shape() != p.shape() {
                    return Err(Error::Checkpoint(format!("optimizer state shape mismatch for '{name}'")));
                }
                let mut st = AdadeltaState::with_constants(p.shape(), self.rho, self.eps);
                st.sq_grad = g.1.cast();
                st.sq_update = u.1.cast();
                Ok(st)
            })
            .collect()
    }

    fn meta_text(&self) -> String {
        let best = self
            .best
            .map_or("none".to_string(), |b| format!("{},{:?},{:?}", b.epoch, b.val_err, b.val_loss));
        format!(
            "spec={}\nfingerprint={}\nepoch={}\nseed={}\nbest={}\nrho={:?}\neps={:?}\n",
            self.spec, self.fingerprint, self.epoch, self.seed, best, self.rho, self.eps
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta_bytes = self.meta_text().into_bytes();
        let meta = Tensor::new(&[meta_bytes.len()], meta_bytes.iter().map(|&b| b as f32).collect()).expect("rank 1");
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32 + 1).to_le_bytes());
        write_tensor(&mut out, "meta", &meta);
        for (name, t) in &self.params {
            write_tensor(&mut out, name, t);
        }
        out.extend_from_slice(&(self.optimizer.len() as u32).to_le_bytes());
        for (name, t) in &self.optimizer {
            write_tensor(&mut out, name, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected \"ORNC\"")));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            params.push(r.tensor()?);
        }
        let opt_count = r.u32()? as usize;
        let mut optimizer = Vec::with_capacity(opt_count);
        for _ in 0..opt_count {
            optimizer.push(r.tensor()?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if params.first().map(|(n, _)| n.as_str()) != Some("meta") {
            return Err(Error::Checkpoint("first record is not 'meta'".into()));
        }
        let (_, meta) = params.remove(0);
        let text: Vec<u8> = meta.data().iter().map(|&x| x as u8).collect();
        let text = String::from_utf8(text).map_err(|_| Error::Checkpoint("meta is not UTF-8".into()))?;
        let field = |key: &str| -> Result<&str> {
            text.lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| Error::Checkpoint(format!("meta lacks '{key}'")))
        };
        let num = |key: &str| -> Result<f64> {
            field(key)?.parse().map_err(|_| Error::Checkpoint(format!("bad '{key}' in meta")))
        };
        let spec: NetworkSpec = field("spec")?.parse()?;
        let fingerprint = field("fingerprint")?.to_string();
        if fingerprint != spec.fingerprint() {
            return Err(Error::Checkpoint("fingerprint does not match the stored network description".into()));
        }
        let best = match field("best")? {
            "none" => None,
            s => {
                let v: Vec<&str> = s.split(',').collect();
                let bad = || Error::Checkpoint(format!("bad best record '{s}'"));
                if v.len() != 3 {
                    return Err(bad());
                }
                Some(BestRecord {
                    epoch: v[0].parse().map_err(|_| bad())?,
                    val_err: v[1].parse().map_err(|_| bad())?,
                    val_loss: v[2].parse().map_err(|_| bad())?,
                })
            }
        };
        Ok(Self {
            spec,
            fingerprint,
            epoch: field("epoch")?.parse().map_err(|_| Error::Checkpoint("bad 'epoch' in meta".into()))?,
            seed: field("seed")?.parse().map_err(|_| Error::Checkpoint("bad 'seed' in meta".into()))?,
            best,
            rho: num("rho")?,
            eps: num("eps")?,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let data = self
            .take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::spec::Encoding;

    fn sample() -> (Network<f32>, Vec<AdadeltaState<f32>>) {
        let spec = NetworkSpec::orn(8, Encoding::OrAlign, 0.5).unwrap();
        let net = Network::<f32>::new(&spec, 9).unwrap();
        let states = net
            .parameters()
            .iter()
            .map(|(_, p)| {
                let mut s = AdadeltaState::new(p.shape());
                s.sq_grad = p.map(|x| x * x);
                s
            })
            .collect();
        (net, states)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (net, states) = sample();
        let best = Some(BestRecord {
            epoch: 3,
            val_err: 0.1234567890123,
            val_loss: 0.3,
        });
        let ck = Checkpoint::capture(&net, &states, 4, u64::MAX - 5, best);
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"ORNC");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let net2 = back.network::<f32>().unwrap();
        assert_eq!(net2.parameters(), net.parameters());
        assert_eq!(back.optimizer_states::<f32>().unwrap(), states);
    }

    #[test]
    fn corruption_is_reported() {
        let (net, states) = sample();
        let bytes = Checkpoint::capture(&net, &states, 1, 0, None).to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(matches!(Checkpoint::load("/nonexistent/ck.bin"), Err(Error::Io { .. })));
    }
}
