//! Binary checkpoint: everything needed to evaluate a model or resume its
//! training run bit-for-bit.
//!
//! Layout (little-endian): magic `RLMCKPT\0`, version `u32`, then
//! length-prefixed UTF-8 sections for the model config (TOML), the run
//! config (TOML, possibly empty) and the vocabulary characters; iteration
//! `u64`; best validation loss `f64`; each parameter tensor in declaration
//! order as `u64` length plus `f32` values; optimizer global step, then per
//! tensor its step, first and second moments; finally the RNG states.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::optim::{Moments, OptimState};

const MAGIC: &[u8; 8] = b"RLMCKPT\0";
const VERSION: u32 = 1;

/// Serializable position of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// TOML of the run configuration that produced this checkpoint.
    pub run_config: String,
    pub vocab_chars: Vec<char>,
    pub iter: u64,
    pub best_val: f64,
    pub params: ModelParams<f32>,
    pub optim: OptimState<f32>,
    pub rngs: Vec<RngState>,
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u64::<LittleEndian>(s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = r.read_u64::<LittleEndian>()? as usize;
    if n > 1 << 24 {
        return Err(Error::Format("oversized text section".into()));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("text section is not UTF-8".into()))
}

fn write_f32s<W: Write>(w: &mut W, v: &[f32]) -> Result<()> {
    w.write_u64::<LittleEndian>(v.len() as u64)?;
    for &x in v {
        w.write_f32::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_f32s_into<R: Read>(r: &mut R, out: &mut [f32], what: &str) -> Result<()> {
    let n = r.read_u64::<LittleEndian>()? as usize;
    if n != out.len() {
        return Err(Error::Format(format!("{what}: {n} values, expected {}", out.len())));
    }
    r.read_f32_into::<LittleEndian>(out)?;
    Ok(())
}

impl Checkpoint {
    pub fn vocab(&self) -> Result<Vocab> {
        let bilingual = self.model.vocab_size == 2 * self.vocab_chars.len();
        Vocab::from_chars(self.vocab_chars.clone(), bilingual)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_u32::<LittleEndian>(VERSION)?;
            let model = toml::to_string(&self.model).map_err(|e| Error::Format(e.to_string()))?;
            write_str(&mut w, &model)?;
            write_str(&mut w, &self.run_config)?;
            write_str(&mut w, &self.vocab_chars.iter().collect::<String>())?;
            w.write_u64::<LittleEndian>(self.iter)?;
            w.write_f64::<LittleEndian>(self.best_val)?;
            for (_, t) in self.params.tensors() {
                write_f32s(&mut w, t)?;
            }
            w.write_u64::<LittleEndian>(self.optim.step)?;
            for s in &self.optim.slots {
                w.write_u64::<LittleEndian>(s.step)?;
                write_f32s(&mut w, &s.m)?;
                write_f32s(&mut w, &s.v)?;
            }
            w.write_u32::<LittleEndian>(self.rngs.len() as u32)?;
            for r in &self.rngs {
                w.write_all(&r.seed)?;
                w.write_u64::<LittleEndian>(r.stream)?;
                w.write_u128::<LittleEndian>(r.word_pos)?;
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let model: ModelConfig = toml::from_str(&read_str(&mut r)?).map_err(|e| Error::Format(e.to_string()))?;
        model.validate()?;
        let run_config = read_str(&mut r)?;
        let vocab_chars: Vec<char> = read_str(&mut r)?.chars().collect();
        let iter = r.read_u64::<LittleEndian>()?;
        let best_val = r.read_f64::<LittleEndian>()?;
        let mut params = ModelParams::<f32>::init(&model, 0)?;
        for (info, t) in params.tensors_mut() {
            read_f32s_into(&mut r, t, &info.name)?;
        }
        let mut optim = OptimState::new(&params);
        optim.step = r.read_u64::<LittleEndian>()?;
        for (k, s) in optim.slots.iter_mut().enumerate() {
            let Moments { m, v, step } = s;
            *step = r.read_u64::<LittleEndian>()?;
            read_f32s_into(&mut r, m, &format!("moment 1 of tensor {k}"))?;
            read_f32s_into(&mut r, v, &format!("moment 2 of tensor {k}"))?;
        }
        let n_rng = r.read_u32::<LittleEndian>()?;
        let mut rngs = Vec::with_capacity(n_rng as usize);
        for _ in 0..n_rng {
            let mut seed = [0u8; 32];
            r.read_exact(&mut seed)?;
            let stream = r.read_u64::<LittleEndian>()?;
            let word_pos = r.read_u128::<LittleEndian>()?;
            rngs.push(RngState { seed, stream, word_pos });
        }
        if r.read(&mut [0u8])? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { model, run_config, vocab_chars, iter, best_val, params, optim, rngs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn round_trip_preserves_everything() {
        let cfg = ModelConfig { separated_embeddings: true, weight_tying: false, ..ModelConfig::tiny(8) };
        let params = ModelParams::<f32>::init(&cfg, 5).unwrap();
        let mut optim = OptimState::new(&params);
        optim.step = 17;
        optim.slots[3].m[0] = 0.25;
        optim.slots[3].step = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _: u64 = rng.random();
        let ck = Checkpoint {
            model: cfg,
            run_config: "name = \"x\"\n".into(),
            vocab_chars: vec!['\n', ' ', 'a', 'b'],
            iter: 17,
            best_val: 1.5,
            params,
            optim,
            rngs: vec![RngState::capture(&rng)],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back.model, ck.model);
        assert_eq!(back.params.tensors(), ck.params.tensors());
        assert_eq!(back.optim, ck.optim);
        assert_eq!(back.vocab_chars, ck.vocab_chars);
        assert_eq!((back.iter, back.best_val), (17, 1.5));
        assert_eq!(back.run_config, ck.run_config);
        let mut a = back.rngs[0].restore();
        assert_eq!(a.random::<u64>(), rng.random::<u64>());
        assert!(back.vocab().unwrap().is_bilingual());

        std::fs::write(&path, b"nope").unwrap();
        assert!(Checkpoint::read(&path).is_err());
    }
}
