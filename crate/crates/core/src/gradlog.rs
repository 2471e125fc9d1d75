//! Decomposition of the embedding gradient into its input path (`G1`), the
//! target rows of the output head (`G2`) and the non-target rows (`G3`),
//! with per-step norm logging and the two ratio statistics.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::float::{mat, Scalar};

/// The three components, each `vocab×n_embd`.
#[derive(Clone, Debug)]
pub struct Decomposition<T> {
    pub g1: Vec<T>,
    pub g2: Vec<T>,
    pub g3: Vec<T>,
    pub vocab: usize,
    pub dim: usize,
}

/// Splits the embedding gradient.
///
/// `input_grad` is the gradient through the input lookup (from backward);
/// `h` the final hidden states and `dlogits` the loss gradient. With an
/// untied head, `g1` belongs to the input table and `g2`/`g3` to the head.
pub fn decompose_embedding_grads<T: Scalar>(
    input_grad: &[T],
    h: &[T],
    dlogits: &[T],
    targets: &[u16],
    vocab: usize,
    dim: usize,
) -> Result<Decomposition<T>> {
    let n = targets.len();
    if input_grad.len() != vocab * dim || h.len() != n * dim || dlogits.len() != n * vocab {
        return Err(Error::Shape("decomposition operands".into()));
    }
    let mut g2 = vec![T::zero(); vocab * dim];
    for (t, &tgt) in targets.iter().enumerate() {
        let i = tgt as usize;
        let c = dlogits[t * vocab + i];
        for (o, &x) in g2[i * dim..(i + 1) * dim].iter_mut().zip(&h[t * dim..(t + 1) * dim]) {
            *o += c * x;
        }
    }
    let mut off_target = dlogits.to_vec();
    for (t, &tgt) in targets.iter().enumerate() {
        off_target[t * vocab + tgt as usize] = T::zero();
    }
    let mut g3 = vec![T::zero(); vocab * dim];
    mat::matmul_tn(&off_target, h, &mut g3, vocab, n, dim, false);
    Ok(Decomposition { g1: input_grad.to_vec(), g2, g3, vocab, dim })
}

impl<T: Scalar> Decomposition<T> {
    /// Per-token `[‖G1‖, ‖G2‖, ‖G3‖]`.
    pub fn norms(&self) -> Vec<[f32; 3]> {
        let d = self.dim;
        (0..self.vocab)
            .map(|i| {
                let r = i * d..(i + 1) * d;
                [
                    mat::norm(&self.g1[r.clone()]).as_f64() as f32,
                    mat::norm(&self.g2[r.clone()]).as_f64() as f32,
                    mat::norm(&self.g3[r]).as_f64() as f32,
                ]
            })
            .collect()
    }
}

/// Append-only table of per-step, per-token component norms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradLog {
    pub vocab: usize,
    pub steps: Vec<u64>,
    /// `steps.len() × vocab` records.
    pub norms: Vec<[f32; 3]>,
    /// Per-step target occurrence counts, same layout.
    pub counts: Vec<u32>,
}

#[derive(Clone, Copy, Debug, Serialize)]
struct CsvRow {
    step: u64,
    token_id: usize,
    norm1: f32,
    norm2: f32,
    norm3: f32,
}

const MAGIC: &[u8; 4] = b"RLGL";
const VERSION: u32 = 1;
const HEADER_LEN: u64 = 12;

impl GradLog {
    pub fn new(vocab: usize) -> Self {
        GradLog { vocab, ..Default::default() }
    }

    pub fn push(&mut self, step: u64, norms: &[[f32; 3]], targets: &[u16]) -> Result<()> {
        if norms.len() != self.vocab {
            return Err(Error::Shape(format!("{} norm records for vocab {}", norms.len(), self.vocab)));
        }
        self.steps.push(step);
        self.norms.extend_from_slice(norms);
        let base = self.counts.len();
        self.counts.resize(base + self.vocab, 0);
        for &t in targets {
            self.counts[base + t as usize] += 1;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn record(&self, row: usize, token: usize) -> [f32; 3] {
        self.norms[row * self.vocab + token]
    }

    /// `(‖g1‖+‖g2‖, ‖g3‖)` over the steps where any component was nonzero.
    fn participating(&self, token: usize) -> Result<Vec<(f64, f64)>> {
        if token >= self.vocab {
            return Err(Error::TokenOutOfRange { id: token, limit: self.vocab });
        }
        let pts: Vec<(f64, f64)> = (0..self.len())
            .map(|s| self.record(s, token))
            .filter(|r| r.iter().any(|&x| x != 0.0))
            .map(|r| (r[0] as f64 + r[1] as f64, r[2] as f64))
            .collect();
        if pts.is_empty() {
            return Err(Error::InvalidArgument(format!("token {token} has no logged gradient")));
        }
        Ok(pts)
    }

    /// `avg_s(‖g1‖+‖g2‖) / avg_s(‖g3‖)`; `+∞` when the denominator is zero.
    pub fn ratio_of_average(&self, token: usize) -> Result<f64> {
        Ok(ratio_of_average(&self.participating(token)?))
    }

    /// `avg_s((‖g1‖+‖g2‖) / ‖g3‖)`, with `avg_s ‖g3‖` standing in for zero denominators.
    pub fn average_of_ratio(&self, token: usize) -> Result<f64> {
        Ok(average_of_ratio(&self.participating(token)?))
    }

    /// Total target occurrences of each token over the logged steps.
    pub fn total_counts(&self) -> Vec<u64> {
        let mut out = vec![0u64; self.vocab];
        for row in self.counts.chunks_exact(self.vocab.max(1)) {
            for (o, &c) in out.iter_mut().zip(row) {
                *o += c as u64;
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for (s, &step) in self.steps.iter().enumerate() {
            for token_id in 0..self.vocab {
                let [norm1, norm2, norm3] = self.record(s, token_id);
                w.serialize(CsvRow { step, token_id, norm1, norm2, norm3 })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let vocab = read_header(&mut r)?;
        let mut log = GradLog::new(vocab);
        let mut norms = vec![[0f32; 3]; vocab];
        let mut counts = vec![0u32; vocab];
        loop {
            let step = match r.read_u64::<LittleEndian>() {
                Ok(s) => s,
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            };
            for rec in norms.iter_mut() {
                for x in rec.iter_mut() {
                    *x = r.read_f32::<LittleEndian>()?;
                }
            }
            for c in counts.iter_mut() {
                *c = r.read_u32::<LittleEndian>()?;
            }
            log.steps.push(step);
            log.norms.extend_from_slice(&norms);
            log.counts.extend_from_slice(&counts);
        }
        Ok(log)
    }
}

pub fn ratio_of_average(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let num = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let den = pts.iter().map(|p| p.1).sum::<f64>() / n;
    if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

pub fn average_of_ratio(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let avg3 = pts.iter().map(|p| p.1).sum::<f64>() / n;
    if avg3 == 0.0 {
        return f64::INFINITY;
    }
    pts.iter().map(|&(a, b)| a / if b == 0.0 { avg3 } else { b }).sum::<f64>() / n
}

fn read_header<R: Read>(r: &mut R) -> Result<usize> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a gradient log".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!("gradient log version {version}")));
    }
    Ok(r.read_u32::<LittleEndian>()? as usize)
}

/// Streams records to a binary log as training proceeds.
pub struct GradLogWriter {
    out: BufWriter<File>,
    vocab: usize,
}

impl GradLogWriter {
    pub fn create(path: &Path, vocab: usize) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(VERSION)?;
        out.write_u32::<LittleEndian>(vocab as u32)?;
        Ok(GradLogWriter { out, vocab })
    }

    /// Reopens an existing log, dropping every record with `step >= keep_below`.
    pub fn resume(path: &Path, vocab: usize, keep_below: u64) -> Result<Self> {
        let mut f = OpenOptions::new().read(true).write(true).open(path)?;
        let found = read_header(&mut BufReader::new(&mut f))?;
        if found != vocab {
            return Err(Error::Format(format!("gradient log vocab {found}, expected {vocab}")));
        }
        let record = 8 + vocab as u64 * 16;
        let len = f.metadata()?.len();
        let mut keep = 0u64;
        while HEADER_LEN + (keep + 1) * record <= len {
            f.seek(SeekFrom::Start(HEADER_LEN + keep * record))?;
            if f.read_u64::<LittleEndian>()? >= keep_below {
                break;
            }
            keep += 1;
        }
        let end = HEADER_LEN + keep * record;
        f.set_len(end)?;
        f.seek(SeekFrom::Start(end))?;
        Ok(GradLogWriter { out: BufWriter::new(f), vocab })
    }

    pub fn append(&mut self, step: u64, norms: &[[f32; 3]], targets: &[u16]) -> Result<()> {
        if norms.len() != self.vocab {
            return Err(Error::Shape("norm records".into()));
        }
        self.out.write_u64::<LittleEndian>(step)?;
        for rec in norms {
            for &x in rec {
                self.out.write_f32::<LittleEndian>(x)?;
            }
        }
        let mut counts = vec![0u32; self.vocab];
        for &t in targets {
            counts[t as usize] += 1;
        }
        for c in counts {
            self.out.write_u32::<LittleEndian>(c)?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_examples() {
        let pts = [(2.0, 1.0), (2.0, 3.0)];
        assert_eq!(ratio_of_average(&pts), 1.0);
        assert!((average_of_ratio(&pts) - 4.0 / 3.0).abs() < 1e-15);
        let pts = [(1.0, 0.0), (1.0, 2.0)];
        assert!((average_of_ratio(&pts) - 0.75).abs() < 1e-15);
        let pts = [(1.0, 0.0), (2.0, 0.0)];
        assert!(ratio_of_average(&pts).is_infinite());
        assert!(average_of_ratio(&pts).is_infinite());
    }

    #[test]
    fn constant_norms_make_both_ratios_equal() {
        let pts = [(3.0, 1.5); 7];
        assert_eq!(ratio_of_average(&pts), average_of_ratio(&pts));
    }

    #[test]
    fn averages_skip_silent_steps() {
        let mut log = GradLog::new(2);
        log.push(0, &[[1.0, 1.0, 1.0], [0.0; 3]], &[0]).unwrap();
        log.push(1, &[[0.0; 3], [0.0; 3]], &[]).unwrap();
        log.push(2, &[[1.0, 1.0, 3.0], [0.0; 3]], &[0]).unwrap();
        assert_eq!(log.ratio_of_average(0).unwrap(), 1.0);
        assert!(log.ratio_of_average(1).is_err());
        assert_eq!(log.total_counts(), vec![2, 0]);
    }

    #[test]
    fn binary_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grad.bin");
        let mut w = GradLogWriter::create(&path, 3).unwrap();
        let mut mem = GradLog::new(3);
        for s in 0..5u64 {
            let rec = [[s as f32, 1.0, 2.0], [0.5, s as f32, 0.0], [0.0, 0.0, s as f32 * 0.25]];
            w.append(s, &rec, &[s as u16 % 3]).unwrap();
            mem.push(s, &rec, &[s as u16 % 3]).unwrap();
        }
        w.flush().unwrap();
        drop(w);
        assert_eq!(GradLog::read(&path).unwrap(), mem);

        let mut w = GradLogWriter::resume(&path, 3, 3).unwrap();
        w.append(3, &[[9.0; 3]; 3], &[]).unwrap();
        w.flush().unwrap();
        drop(w);
        let back = GradLog::read(&path).unwrap();
        assert_eq!(back.steps, vec![0, 1, 2, 3]);
        assert_eq!(back.record(3, 1), [9.0; 3]);
        assert_eq!(back.record(2, 0), [2.0, 1.0, 2.0]);
    }

    #[test]
    fn csv_export_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        let mut log = GradLog::new(2);
        log.push(7, &[[1.0, 2.0, 3.0], [0.0; 3]], &[0]).unwrap();
        log.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,token_id,norm1,norm2,norm3"));
        assert_eq!(lines.next(), Some("7,0,1.0,2.0,3.0"));
    }
}
