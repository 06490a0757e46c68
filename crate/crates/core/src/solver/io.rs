//! Binary trajectory files and diagnostics CSV.
//!
//! Layout (all little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8 | magic `MEMHEAT\0` |
//! | 2 | format version |
//! | 4 | endianness tag `0x0A0B0C0D` |
//! | 8 | config hash |
//! | 8 | seed |
//! | 8 | sample index |
//! | 8 | eps |
//! | 8 | dt |
//! | 4 | n_modes |
//! | 8 | rows |
//! | rows * n_modes * 8 | coefficients, row-major |

use super::{Scheme, StepDiagnostics, Trajectory, TrajectoryMeta};
use crate::Field;
use std::io::{self, Read, Write};

pub const MAGIC: [u8; 8] = *b"MEMHEAT\0";
pub const VERSION: u16 = 1;
pub const ENDIAN_TAG: u32 = 0x0A0B_0C0D;

/// Header fields recovered from a trajectory file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryFile {
    pub config_hash: u64,
    pub seed: u64,
    pub sample: u64,
    pub eps: f64,
    pub dt: f64,
    pub states: Vec<Field>,
}

pub fn write_trajectory<W: Write>(traj: &Trajectory, mut w: W) -> io::Result<()> {
    let m = &traj.meta;
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&ENDIAN_TAG.to_le_bytes())?;
    w.write_all(&m.config_hash.to_le_bytes())?;
    w.write_all(&m.seed.to_le_bytes())?;
    w.write_all(&m.sample.to_le_bytes())?;
    w.write_all(&m.eps.to_le_bytes())?;
    w.write_all(&traj.dt.to_le_bytes())?;
    w.write_all(&(traj.n_modes() as u32).to_le_bytes())?;
    w.write_all(&(traj.states.len() as u64).to_le_bytes())?;
    for s in &traj.states {
        for c in s.coeffs() {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn bad(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

pub fn read_trajectory<R: Read>(mut r: R) -> io::Result<TrajectoryFile> {
    if read_array::<8, _>(&mut r)? != MAGIC {
        return Err(bad("not a trajectory file"));
    }
    let version = u16::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(bad("unsupported trajectory version"));
    }
    if u32::from_le_bytes(read_array(&mut r)?) != ENDIAN_TAG {
        return Err(bad("endianness tag mismatch"));
    }
    let config_hash = u64::from_le_bytes(read_array(&mut r)?);
    let seed = u64::from_le_bytes(read_array(&mut r)?);
    let sample = u64::from_le_bytes(read_array(&mut r)?);
    let eps = f64::from_le_bytes(read_array(&mut r)?);
    let dt = f64::from_le_bytes(read_array(&mut r)?);
    let n_modes = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let rows = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let mut states = Vec::with_capacity(rows);
    for _ in 0..rows {
        let coeffs = (0..n_modes)
            .map(|_| read_array(&mut r).map(f64::from_le_bytes))
            .collect::<io::Result<Vec<f64>>>()?;
        states.push(Field::new(coeffs).map_err(|_| bad("non-finite coefficient"))?);
    }
    Ok(TrajectoryFile {
        config_hash,
        seed,
        sample,
        eps,
        dt,
        states,
    })
}

pub const DIAGNOSTICS_HEADER: &str = "step,t,l2,h1,lq,jumps";

pub fn write_diagnostics_csv<W: Write>(diags: &[StepDiagnostics], mut w: W) -> io::Result<()> {
    writeln!(w, "{DIAGNOSTICS_HEADER}")?;
    for (k, d) in diags.iter().enumerate() {
        writeln!(w, "{k},{:?},{:?},{:?},{:?},{}", d.t, d.l2, d.h1, d.lq, d.jumps)?;
    }
    Ok(())
}

pub fn read_diagnostics_csv(text: &str) -> io::Result<Vec<StepDiagnostics>> {
    let mut lines = text.lines();
    if lines.next() != Some(DIAGNOSTICS_HEADER) {
        return Err(bad("unexpected diagnostics header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad("diagnostics row must have 6 fields"));
            }
            let p = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            Ok(StepDiagnostics {
                t: p(f[1])?,
                l2: p(f[2])?,
                h1: p(f[3])?,
                lq: p(f[4])?,
                jumps: f[5].parse().map_err(|_| bad("bad jump count"))?,
            })
        })
        .collect()
}

impl TrajectoryFile {
    /// Rebuild a trajectory with the given diagnostics and `q`.
    pub fn into_trajectory(self, diagnostics: Vec<StepDiagnostics>, scheme: Scheme, q: f64) -> Trajectory {
        Trajectory {
            dt: self.dt,
            states: self.states,
            diagnostics,
            meta: TrajectoryMeta {
                seed: self.seed,
                sample: self.sample,
                eps: self.eps,
                scheme,
                config_hash: self.config_hash,
                q,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Trajectory {
        let states: Vec<Field> = (0..3)
            .map(|k| Field::new(vec![k as f64, -0.5 * k as f64]).unwrap())
            .collect();
        let diagnostics = states
            .iter()
            .enumerate()
            .map(|(k, s)| StepDiagnostics {
                t: k as f64 * 0.1,
                l2: s.l2_norm(),
                h1: s.h1_norm(),
                lq: 0.1 * k as f64,
                jumps: k,
            })
            .collect();
        Trajectory {
            dt: 0.1,
            states,
            diagnostics,
            meta: TrajectoryMeta {
                seed: 9,
                sample: 2,
                eps: 0.01,
                scheme: Scheme::SemiImplicitEuler,
                config_hash: 0xdead_beef,
                q: 4.0,
            },
        }
    }

    #[test]
    fn binary_round_trip() {
        let t = sample();
        let mut buf = Vec::new();
        write_trajectory(&t, &mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 2 + 4 + 8 * 5 + 4 + 8 + 3 * 2 * 8);
        let back = read_trajectory(buf.as_slice()).unwrap();
        assert_eq!(back.states, t.states);
        assert_eq!((back.seed, back.sample, back.config_hash), (9, 2, 0xdead_beef));
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_trajectory(bad_magic.as_slice()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let t = sample();
        let mut buf = Vec::new();
        write_diagnostics_csv(&t.diagnostics, &mut buf).unwrap();
        let back = read_diagnostics_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, t.diagnostics);
    }
}
