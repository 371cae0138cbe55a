//! Chain files: `LGCPCHN1`, a little-endian u64 header length, the JSON
//! header, then one fixed-width record per stored sample.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ChainMeta, ChainSample, PosteriorChain};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LGCPCHN1";

#[derive(Serialize, Deserialize)]
struct Header {
    meta: ChainMeta,
    n_samples: usize,
}

pub(crate) fn encode<W: Write>(chain: &PosteriorChain, out: &mut W) -> Result<()> {
    let header = serde_json::to_vec(&Header { meta: chain.meta.clone(), n_samples: chain.len() })?;
    out.write_all(MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    let mut rec = Vec::new();
    for s in &chain.samples {
        rec.clear();
        for b in &s.beta {
            rec.extend_from_slice(&b.to_le_bytes());
        }
        for t in &s.theta {
            rec.extend_from_slice(&t.to_le_bytes());
        }
        for f in &s.fields {
            for v in f {
                rec.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.write_all(&rec)?;
    }
    Ok(())
}

pub(crate) fn decode(bytes: &[u8]) -> Result<PosteriorChain> {
    let bad = |m: &str| Error::Config(format!("corrupt chain file: {m}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let meta = header.meta;
    let (p, n, nf) = (meta.p, meta.n_vertices, meta.field_names.len());
    let rec_len = 8 * (p + 2) + 4 * n * nf;
    let mut data = &bytes[16 + hlen..];
    if data.len() != rec_len * header.n_samples {
        return Err(bad("record stream length mismatch"));
    }
    let f64s = |k: usize, data: &mut &[u8]| -> Vec<f64> {
        let (head, tail) = data.split_at(8 * k);
        *data = tail;
        head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
    };
    let mut samples = Vec::with_capacity(header.n_samples);
    for _ in 0..header.n_samples {
        let beta = f64s(p, &mut data);
        let th = f64s(2, &mut data);
        let mut fields = Vec::with_capacity(nf);
        for _ in 0..nf {
            let (head, tail) = data.split_at(4 * n);
            data = tail;
            fields.push(head.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect());
        }
        samples.push(ChainSample { beta, theta: [th[0], th[1]], fields });
    }
    Ok(PosteriorChain { meta, samples })
}

pub fn write_chain(chain: &PosteriorChain, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    encode(chain, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_chain(path: &Path) -> Result<PosteriorChain> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Flat CSV: β, θ, derived hyperparameters, then every field weight.
pub fn export_csv<W: Write>(chain: &PosteriorChain, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let meta = &chain.meta;
    let mut header: Vec<String> = (0..meta.p).map(|j| format!("beta_{j}")).collect();
    header.extend(["theta1", "theta2", "kappa2", "xi2", "rho", "sigma2"].map(String::from));
    for name in &meta.field_names {
        header.extend((0..meta.n_vertices).map(|i| format!("{name}_{i}")));
    }
    w.write_record(&header)?;
    for (i, s) in chain.samples.iter().enumerate() {
        let h = chain.hyper(i);
        let mut row: Vec<String> = s.beta.iter().map(|b| b.to_string()).collect();
        row.extend([s.theta[0], s.theta[1], h.kappa2, h.xi2, h.rho(), h.sigma2()].map(|v| v.to_string()));
        for f in &s.fields {
            row.extend(f.iter().map(|v| v.to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
