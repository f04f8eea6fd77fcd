//! Binary checkpoint format.
//!
//! All integers little-endian:
//!
//! ```text
//! magic  "NLEDN\0"            6 bytes
//! version                     u16
//! config                      u32 C, g, L; u32 count + u32 grids (encoder, decoder);
//!                             u8 nonlocal, dense, pooling; u32 num_blocks;
//!                             u8 affinity (0 softmax, 1 raw-sum); u64 seed
//! params                      u32 count, then per tensor:
//!                             u32 name length, UTF-8 name, u32 rank, u32 extents, f32 data
//! training state              u8 present; if 1: u64 step, u64 adam step, f64 lr,
//!                             u8 + f64 ema, f64 best, u64 since_best,
//!                             first moments and second moments as tensor lists
//! crc32                       u32 over every preceding byte
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{InitScheme, ModelConfig, NlednModel};
use crate::tensor::{AffinityMode, Tensor};
use crate::train::{AdamState, Plateau, TrainState};

pub const MAGIC: &[u8; 6] = b"NLEDN\0";
pub const VERSION: u16 = 1;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.u32(name.len());
        self.0.extend_from_slice(name.as_bytes());
        self.u32(t.shape().len());
        t.shape().iter().for_each(|&d| self.u32(d));
        t.data()
            .iter()
            .for_each(|v| self.0.extend_from_slice(&v.to_le_bytes()));
    }
    fn tensors<'a>(&mut self, items: impl ExactSizeIterator<Item = (String, &'a Tensor)>) {
        self.u32(items.len());
        items.for_each(|(n, t)| self.tensor(&n, t));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.bytes(1)?[0])
    }
    fn flag(&mut self) -> std::result::Result<bool, String> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(format!("invalid flag byte {b}")),
        }
    }
    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn grids(&mut self) -> std::result::Result<Vec<usize>, String> {
        let n = self.u32()?;
        if n > 64 {
            return Err(format!("implausible grid count {n}"));
        }
        (0..n).map(|_| self.u32()).collect()
    }
    fn tensor(&mut self) -> std::result::Result<(String, Tensor), String> {
        let len = self.u32()?;
        let name = std::str::from_utf8(self.bytes(len)?)
            .map_err(|_| "parameter name is not UTF-8".to_string())?
            .to_string();
        let rank = self.u32()?;
        if rank > 8 {
            return Err(format!("{name}: implausible rank {rank}"));
        }
        let shape = (0..rank)
            .map(|_| self.u32())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| format!("{name}: shape overflow"))?;
        let raw = self.bytes(numel.checked_mul(4).ok_or("shape overflow")?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| format!("{name}: {e}"))?;
        Ok((name, t))
    }
    fn tensors(&mut self) -> std::result::Result<Vec<(String, Tensor)>, String> {
        let n = self.u32()?;
        (0..n).map(|_| self.tensor()).collect()
    }
}

fn encode_config(w: &mut Writer, c: &ModelConfig) {
    w.u32(c.base_channels);
    w.u32(c.growth_rate);
    w.u32(c.dense_layers_per_block);
    for grids in [&c.encoder_grids, &c.decoder_grids] {
        w.u32(grids.len());
        grids.iter().for_each(|&g| w.u32(g));
    }
    w.u8(c.nonlocal_enabled as u8);
    w.u8(c.dense_connections_enabled as u8);
    w.u8(c.pooling_enabled as u8);
    w.u32(c.num_blocks);
    w.u8(match c.affinity_mode {
        AffinityMode::Softmax => 0,
        AffinityMode::RawSum => 1,
    });
    w.u64(c.seed);
}

fn decode_config(r: &mut Reader) -> std::result::Result<ModelConfig, String> {
    Ok(ModelConfig {
        base_channels: r.u32()?,
        growth_rate: r.u32()?,
        dense_layers_per_block: r.u32()?,
        encoder_grids: r.grids()?,
        decoder_grids: r.grids()?,
        nonlocal_enabled: r.flag()?,
        dense_connections_enabled: r.flag()?,
        pooling_enabled: r.flag()?,
        num_blocks: r.u32()?,
        affinity_mode: match r.u8()? {
            0 => AffinityMode::Softmax,
            1 => AffinityMode::RawSum,
            b => return Err(format!("unknown affinity mode byte {b}")),
        },
        seed: r.u64()?,
    })
}

pub fn encode(model: &NlednModel, state: Option<&TrainState>) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u16(VERSION);
    encode_config(&mut w, &model.config);
    w.tensors(model.params.entries().into_iter());
    match state {
        None => w.u8(0),
        Some(s) => {
            w.u8(1);
            w.u64(s.step);
            w.u64(s.adam.step);
            w.f64(s.plateau.lr);
            w.u8(s.plateau.ema.is_some() as u8);
            w.f64(s.plateau.ema.unwrap_or(0.0));
            w.f64(s.plateau.best);
            w.u64(s.plateau.since_best);
            let names: Vec<String> = model.params.entries().into_iter().map(|(n, _)| n).collect();
            for moments in [&s.adam.m, &s.adam.v] {
                w.tensors(names.iter().cloned().zip(moments.iter()));
            }
        }
    }
    let crc = crc32fast::hash(&w.0);
    w.0.extend_from_slice(&crc.to_le_bytes());
    w.0
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save(path: &Path, model: &NlednModel, state: Option<&TrainState>) -> Result<()> {
    let bytes = encode(model, state);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: NlednModel,
    pub state: Option<TrainState>,
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let fail = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < MAGIC.len() + 2 + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(fail("not an NLEDN checkpoint".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::CrcMismatch {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u16().map_err(fail)?;
    if version != VERSION {
        return Err(fail(format!("unsupported format version {version}")));
    }
    let config = decode_config(&mut r).map_err(fail)?;
    let mut model = NlednModel::init(config, InitScheme::ZeroResidual)
        .map_err(|e| fail(format!("stored config is invalid: {e}")))?;
    let stored = r.tensors().map_err(fail)?;
    let expected = model.params.entries().len();
    if stored.len() != expected {
        return Err(fail(format!(
            "{} tensors stored, config implies {expected}",
            stored.len()
        )));
    }
    let mut mismatch = None;
    let mut i = 0;
    model.params.visit_mut(|name, t| {
        let (sname, st) = &stored[i];
        if mismatch.is_none() && (sname != name || st.shape() != t.shape()) {
            mismatch = Some(format!(
                "expected {name} {:?}, found {sname} {:?}",
                t.shape(),
                st.shape()
            ));
        }
        *t = st.clone();
        i += 1;
    });
    if let Some(m) = mismatch {
        return Err(fail(m));
    }
    let state = if r.flag().map_err(fail)? {
        let read_state = |r: &mut Reader| -> std::result::Result<TrainState, String> {
            let step = r.u64()?;
            let adam_step = r.u64()?;
            let lr = r.f64()?;
            let has_ema = r.flag()?;
            let ema = r.f64()?;
            let best = r.f64()?;
            let since_best = r.u64()?;
            let shapes: Vec<Vec<usize>> = model
                .params
                .entries()
                .into_iter()
                .map(|(_, t)| t.shape().to_vec())
                .collect();
            let mut moments = Vec::new();
            for _ in 0..2 {
                let list = r.tensors()?;
                if list.len() != shapes.len()
                    || list
                        .iter()
                        .zip(&shapes)
                        .any(|((_, t), s)| t.shape() != s.as_slice())
                {
                    return Err("optimizer moments do not match the parameters".into());
                }
                moments.push(list.into_iter().map(|(_, t)| t).collect::<Vec<_>>());
            }
            let v = moments.pop().expect("two lists");
            let m = moments.pop().expect("two lists");
            Ok(TrainState {
                step,
                plateau: Plateau {
                    lr,
                    ema: has_ema.then_some(ema),
                    best,
                    since_best,
                },
                adam: AdamState {
                    step: adam_step,
                    m,
                    v,
                },
            })
        };
        Some(read_state(&mut r).map_err(fail)?)
    } else {
        None
    };
    if r.pos != body.len() {
        return Err(fail(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(Checkpoint { model, state })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::train::TrainConfig;

    fn model(v: Variant) -> NlednModel {
        NlednModel::init(v.configure(&ModelConfig::micro()), InitScheme::Randomized).unwrap()
    }

    #[test]
    fn roundtrip_with_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        for v in Variant::ALL {
            let m = model(v);
            let mut st = TrainState::new(&m, &TrainConfig::default());
            st.step = 17;
            st.plateau.ema = Some(0.25);
            st.adam.m[0].data_mut()[0] = 3.5;
            save(&path, &m, Some(&st)).unwrap();
            let ck = load(&path).unwrap();
            assert_eq!(ck.model, m);
            assert_eq!(ck.state.as_ref(), Some(&st));
        }
        let m = model(Variant::Rf);
        save(&path, &m, None).unwrap();
        assert!(load(&path).unwrap().state.is_none());
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&model(Variant::Ra), None);
        assert_eq!(&bytes[..6], b"NLEDN\0");
        assert_eq!(&bytes[6..8], &[1, 0]);
        assert_eq!(&bytes[8..12], &4u32.to_le_bytes());
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode(&model(Variant::Rb), None);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let err = decode(Path::new("x.ckpt"), &bytes).unwrap_err();
        assert!(matches!(err, Error::CrcMismatch { .. }), "{err}");
        assert!(err.to_string().contains("CRC"), "{err}");
        assert!(decode(Path::new("x"), b"PNG").is_err());
    }
}
