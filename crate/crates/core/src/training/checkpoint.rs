//! Binary checkpoint: magic `MOLC`, a `u32` version, a `u32` section count,
//! then named sections (`u32` name length, name, `u64` payload length,
//! payload). All integers and floats are little-endian; parameter values
//! and optimizer moments are stored as `f64` so a round trip is exact.

use std::fs;
use std::path::Path;

use super::adam::AdamState;
use super::config::TrainConfig;
use super::trainer::{EpochLog, Trainer};
use crate::error::{Error, Result};
use crate::model::{InputShape, Model};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MOLC";
pub const CHECKPOINT_VERSION: u32 = 1;

const SECTIONS: [&str; 7] = ["config", "hash", "input", "classes", "progress", "params", "log"];

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn matrix_data(&mut self, m: &Matrix) {
        for &v in m.as_slice() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(Error::Truncated { needed: n, available });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("section text is not UTF-8".into()))
    }
    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::Format(format!("matrix {rows}x{cols} is too large")))?;
        let bytes = self.take(n * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = Matrix::from_vec(rows, cols, data)?;
        m.ensure_finite("checkpoint payload")?;
        Ok(m)
    }
    fn finish(&self) -> Result<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            extra => Err(Error::TrailingBytes(extra)),
        }
    }
}

/// One tunable parameter with its optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub value: Matrix,
    pub m: Matrix,
    pub v: Matrix,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub config_hash: u64,
    pub input: InputShape,
    pub num_classes: usize,
    pub adam_step: u64,
    pub params: Vec<ParamRecord>,
    pub log: Vec<EpochLog>,
}

fn input_words(input: &InputShape) -> [u32; 6] {
    match *input {
        InputShape::Raw {
            image_tokens,
            image_raw_dim,
            text_tokens,
            text_raw_dim,
        } => [0, image_tokens as u32, image_raw_dim as u32, text_tokens as u32, text_raw_dim as u32, 0],
        InputShape::Encoded {
            image_tokens,
            image_dim,
            text_tokens,
            text_dim,
            num_layers,
        } => [
            1,
            image_tokens as u32,
            image_dim as u32,
            text_tokens as u32,
            text_dim as u32,
            num_layers as u32,
        ],
    }
}

fn input_from_words(w: [u32; 6]) -> Result<InputShape> {
    let u = |i: usize| w[i] as usize;
    match w[0] {
        0 => Ok(InputShape::Raw {
            image_tokens: u(1),
            image_raw_dim: u(2),
            text_tokens: u(3),
            text_raw_dim: u(4),
        }),
        1 => Ok(InputShape::Encoded {
            image_tokens: u(1),
            image_dim: u(2),
            text_tokens: u(3),
            text_dim: u(4),
            num_layers: u(5),
        }),
        t => Err(Error::Format(format!("unknown input kind {t}"))),
    }
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        let store = &t.model.store;
        let params = store
            .tunable_ids()
            .map(|id| ParamRecord {
                name: store.get(id).name.clone(),
                value: store.value(id).clone(),
                m: t.adam.m[id.index()].clone(),
                v: t.adam.v[id.index()].clone(),
            })
            .collect();
        Self {
            config_text: t.model.config.render(),
            config_hash: t.model.config.hash(),
            input: t.model.input,
            num_classes: t.model.num_classes,
            adam_step: t.adam.step,
            params,
            log: t.log.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut sections: Vec<(&str, Writer)> = Vec::new();
        let mut w = Writer::default();
        w.bytes(self.config_text.as_bytes());
        sections.push(("config", w));
        let mut w = Writer::default();
        w.u64(self.config_hash);
        sections.push(("hash", w));
        let mut w = Writer::default();
        for v in input_words(&self.input) {
            w.u32(v);
        }
        sections.push(("input", w));
        let mut w = Writer::default();
        w.u32(self.num_classes as u32);
        sections.push(("classes", w));
        let mut w = Writer::default();
        w.u64(self.adam_step);
        sections.push(("progress", w));
        let mut w = Writer::default();
        w.u32(self.params.len() as u32);
        for p in &self.params {
            w.str(&p.name);
            w.u32(p.value.rows() as u32);
            w.u32(p.value.cols() as u32);
            w.matrix_data(&p.value);
            w.matrix_data(&p.m);
            w.matrix_data(&p.v);
        }
        sections.push(("params", w));
        let mut w = Writer::default();
        w.u32(self.log.len() as u32);
        for e in &self.log {
            w.u64(e.epoch as u64);
            for v in [e.loss_total, e.loss_ce, e.loss_cca, e.train_acc] {
                w.f64(v);
            }
        }
        sections.push(("log", w));

        let mut out = Writer::default();
        out.bytes(&CHECKPOINT_MAGIC);
        out.u32(CHECKPOINT_VERSION);
        out.u32(sections.len() as u32);
        for (name, payload) in sections {
            out.str(name);
            out.u64(payload.0.len() as u64);
            out.bytes(&payload.0);
        }
        out.0
    }

    /// Parses and validates every section before returning anything.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::BadVersion {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let count = r.u32()? as usize;
        if count != SECTIONS.len() {
            return Err(Error::Format(format!("expected {} sections, found {count}", SECTIONS.len())));
        }
        let mut payloads: Vec<&[u8]> = Vec::with_capacity(count);
        for expected in SECTIONS {
            let name = r.str()?;
            if name != expected {
                return Err(Error::Format(format!("expected section {expected:?}, found {name:?}")));
            }
            let len = usize::try_from(r.u64()?).map_err(|_| Error::Format("section too large".into()))?;
            payloads.push(r.take(len)?);
        }
        r.finish()?;

        let config_text =
            String::from_utf8(payloads[0].to_vec()).map_err(|_| Error::Format("config section is not UTF-8".into()))?;

        let mut s = Reader::new(payloads[1]);
        let config_hash = s.u64()?;
        s.finish()?;

        let mut s = Reader::new(payloads[2]);
        let mut words = [0u32; 6];
        for w in &mut words {
            *w = s.u32()?;
        }
        s.finish()?;
        let input = input_from_words(words)?;

        let mut s = Reader::new(payloads[3]);
        let num_classes = s.u32()? as usize;
        s.finish()?;

        let mut s = Reader::new(payloads[4]);
        let adam_step = s.u64()?;
        s.finish()?;

        let mut s = Reader::new(payloads[5]);
        let n = s.u32()? as usize;
        let mut params = Vec::new();
        for _ in 0..n {
            let name = s.str()?;
            let rows = s.u32()? as usize;
            let cols = s.u32()? as usize;
            params.push(ParamRecord {
                name,
                value: s.matrix(rows, cols)?,
                m: s.matrix(rows, cols)?,
                v: s.matrix(rows, cols)?,
            });
        }
        s.finish()?;

        let mut s = Reader::new(payloads[6]);
        let n = s.u32()? as usize;
        let mut log = Vec::new();
        for _ in 0..n {
            let epoch = s.u64()? as usize;
            let mut vals = [0.0; 4];
            for v in &mut vals {
                *v = s.f64()?;
            }
            log.push(EpochLog {
                epoch,
                loss_total: vals[0],
                loss_ce: vals[1],
                loss_cca: vals[2],
                train_acc: vals[3],
            });
        }
        s.finish()?;

        Ok(Self {
            config_text,
            config_hash,
            input,
            num_classes,
            adam_step,
            params,
            log,
        })
    }

    /// Rebuilds the trainer. The stored hash must match the stored config,
    /// and `expected_hash`, when given, must match as well.
    pub fn into_trainer(self, expected_hash: Option<u64>) -> Result<Trainer> {
        let config = TrainConfig::parse(&self.config_text)?;
        let actual = config.hash();
        if self.config_hash != actual {
            return Err(Error::HashMismatch {
                stored: self.config_hash,
                expected: actual,
            });
        }
        if let Some(expected) = expected_hash {
            if expected != self.config_hash {
                return Err(Error::HashMismatch {
                    stored: self.config_hash,
                    expected,
                });
            }
        }
        let mut model = Model::new(config, self.input, self.num_classes)?;
        let mut adam = AdamState::new(&model.store);
        let tunable: Vec<_> = model.store.tunable_ids().collect();
        if tunable.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model has {} tunable",
                self.params.len(),
                tunable.len()
            )));
        }
        for rec in self.params {
            let id = model
                .store
                .id(&rec.name)
                .filter(|id| !model.store.is_frozen(*id))
                .ok_or_else(|| Error::Format(format!("unknown parameter {}", rec.name)))?;
            if model.store.value(id).shape() != rec.value.shape() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, model expects {:?}",
                    rec.name,
                    rec.value.shape(),
                    model.store.value(id).shape()
                )));
            }
            *model.store.value_mut(id) = rec.value;
            adam.m[id.index()] = rec.m;
            adam.v[id.index()] = rec.v;
        }
        adam.step = self.adam_step;
        Ok(Trainer {
            model,
            adam,
            log: self.log,
        })
    }
}

pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    let bytes = Checkpoint::from_trainer(trainer).to_bytes();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)?.into_trainer(None)
}
