//! Per-track embedding tables and their text file format.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Cbow,
    Lsa,
    Random,
    Vae,
    Lyrics,
    Tags,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Cbow => "cbow",
            Provenance::Lsa => "lsa",
            Provenance::Random => "random",
            Provenance::Vae => "vae",
            Provenance::Lyrics => "lyrics",
            Provenance::Tags => "tags",
        })
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cbow" => Provenance::Cbow,
            "lsa" => Provenance::Lsa,
            "random" => Provenance::Random,
            "vae" => Provenance::Vae,
            "lyrics" => Provenance::Lyrics,
            "tags" => Provenance::Tags,
            other => return Err(Error::Format(format!("unknown provenance `{}`", other))),
        })
    }
}

/// `|V| x dim` table, one row per vocabulary index.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub table: Tensor,
    pub provenance: Provenance,
}

impl EmbeddingMatrix {
    pub fn new(table: Tensor, provenance: Provenance) -> Result<Self> {
        if table.rank() != 2 {
            return Err(Error::Shape(format!(
                "embedding table must be rank 2, got {:?}",
                table.shape()
            )));
        }
        table.ensure_finite("embedding table")?;
        Ok(EmbeddingMatrix { table, provenance })
    }

    pub fn zeros(rows: usize, dim: usize, provenance: Provenance) -> Self {
        EmbeddingMatrix {
            table: Tensor::zeros(&[rows, dim]),
            provenance,
        }
    }

    /// Rows drawn from `uniform(-0.5/dim, 0.5/dim)`.
    pub fn random(rows: usize, dim: usize, rng: &mut SeededRng) -> Self {
        let bound = 0.5 / dim as f64;
        EmbeddingMatrix {
            table: Tensor::from_fn(&[rows, dim], |_| rng.uniform(-bound, bound)),
            provenance: Provenance::Random,
        }
    }

    pub fn rows(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.table.row(i)
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        self.table.row_mut(i)
    }

    /// Writes `dim=<d> provenance=<tag> vocab_hash=<hex>` followed by one
    /// `index v1 .. vd` line per row. Values use shortest round-trip
    /// formatting, so reading back is bit-exact.
    pub fn write<W: Write>(&self, mut w: W, vocab_hash: &str) -> Result<()> {
        writeln!(
            w,
            "dim={} provenance={} vocab_hash={}",
            self.dim(),
            self.provenance,
            vocab_hash
        )?;
        let mut line = String::new();
        for i in 0..self.rows() {
            line.clear();
            line.push_str(&i.to_string());
            for v in self.row(i) {
                line.push(' ');
                line.push_str(&format!("{:?}", v));
            }
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    /// Reads the format produced by [`write`](Self::write); returns the matrix
    /// and the vocabulary hash recorded in the header.
    pub fn read<R: BufRead>(r: R) -> Result<(Self, String)> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(1, "missing header"))??;
        let fields = header_fields(&header, 1)?;
        let dim: usize = lookup(&fields, "dim", 1)?
            .parse()
            .map_err(|_| Error::parse(1, "bad dim"))?;
        let provenance: Provenance = lookup(&fields, "provenance", 1)?
            .parse()
            .map_err(|e: Error| Error::parse(1, e.to_string()))?;
        let hash = lookup(&fields, "vocab_hash", 1)?.to_string();
        let mut data = Vec::new();
        let mut rows = 0;
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let idx: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::parse(lineno, "bad row index"))?;
            if idx != rows {
                return Err(Error::parse(
                    lineno,
                    format!("expected row {}, found {}", rows, idx),
                ));
            }
            let before = data.len();
            for p in parts {
                let v: f64 = p
                    .parse()
                    .map_err(|_| Error::parse(lineno, format!("bad value `{}`", p)))?;
                if !v.is_finite() {
                    return Err(Error::parse(lineno, "non-finite value"));
                }
                data.push(v);
            }
            if data.len() - before != dim {
                return Err(Error::parse(
                    lineno,
                    format!("expected {} values, found {}", dim, data.len() - before),
                ));
            }
            rows += 1;
        }
        let table = Tensor::from_vec(&[rows, dim], data)?;
        Ok((EmbeddingMatrix { table, provenance }, hash))
    }
}

pub(crate) fn header_fields(header: &str, line: usize) -> Result<Vec<(String, String)>> {
    header
        .split_whitespace()
        .map(|f| {
            f.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::parse(line, format!("malformed header field `{}`", f)))
        })
        .collect()
}

pub(crate) fn lookup<'a>(fields: &'a [(String, String)], key: &str, line: usize) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::parse(line, format!("header lacks `{}`", key)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_headers_and_rows() {
        assert!(EmbeddingMatrix::read("dim=2 provenance=cbow\n0 1 2\n".as_bytes()).is_err());
        assert!(EmbeddingMatrix::read("dim=x provenance=cbow vocab_hash=ab\n".as_bytes()).is_err());
        assert!(EmbeddingMatrix::read("garbage\n".as_bytes()).is_err());
        assert!(EmbeddingMatrix::read(
            "dim=2 provenance=cbow vocab_hash=ab\n0 1 2\n2 1 2\n".as_bytes()
        )
        .is_err());
        assert!(
            EmbeddingMatrix::read("dim=2 provenance=cbow vocab_hash=ab\n0 1\n".as_bytes()).is_err()
        );
    }

    proptest! {
        #[test]
        fn write_read_is_bit_exact(
            values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, 1..60),
            dim in 1usize..6,
        ) {
            let rows = values.len() / dim;
            prop_assume!(rows > 0);
            let table = Tensor::from_vec(&[rows, dim], values[..rows * dim].to_vec()).unwrap();
            let m = EmbeddingMatrix::new(table, Provenance::Lsa).unwrap();
            let mut buf = Vec::new();
            m.write(&mut buf, "deadbeef").unwrap();
            let (back, hash) = EmbeddingMatrix::read(buf.as_slice()).unwrap();
            prop_assert_eq!(hash, "deadbeef");
            prop_assert_eq!(back.provenance, Provenance::Lsa);
            let a: Vec<u64> = m.table.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.table.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
