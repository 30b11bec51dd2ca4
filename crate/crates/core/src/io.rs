//! Snapshots, diagnostics CSV and the run manifest.
//!
//! Snapshot layout (all integers and floats little-endian):
//!
//! ```text
//! "SVPM" | version: u32 | header_len: u32 | header: UTF-8 JSON (header_len bytes)
//!        | x1[N] x2[N] x3[N] v1[N] v2[N] v3[N] [p1[N] p2[N] p3[N]]   (f64)
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::SimConfig;
use crate::diagnostics::{ConservationLedger, LedgerRow, Trajectory};
use crate::ensemble::{ParticleEnsemble, SpeciesParams};
use crate::error::{Error, Result};
use crate::Vec3;

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"SVPM";
pub const SNAPSHOT_VERSION: u32 = 1;
/// Bumped whenever the diagnostics CSV columns change.
pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub time: f64,
    pub step: u64,
    pub config_hash: String,
    pub seed: u64,
    pub n_particles: usize,
    pub species: SpeciesParams,
    pub has_momenta: bool,
}

pub fn encode_snapshot(ens: &ParticleEnsemble, meta: &SnapshotMeta) -> Result<Vec<u8>> {
    if meta.n_particles != ens.len() || meta.has_momenta != ens.momenta.is_some() {
        return Err(Error::Snapshot("metadata does not describe this ensemble".into()));
    }
    let header = serde_json::to_vec(meta)?;
    let header_len = u32::try_from(header.len()).map_err(|_| Error::Snapshot("header too large".into()))?;
    let cols = if ens.momenta.is_some() { 9 } else { 6 };
    let mut out = Vec::with_capacity(12 + header.len() + cols * ens.len() * 8);
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    let mut column = |data: &[Vec3], k: usize| {
        for v in data {
            out.extend_from_slice(&v[k].to_le_bytes());
        }
    };
    for k in 0..3 {
        column(&ens.positions, k);
    }
    for k in 0..3 {
        column(&ens.velocities, k);
    }
    if let Some(p) = &ens.momenta {
        for k in 0..3 {
            column(p, k);
        }
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Snapshot(format!("truncated before {what}")))
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<(ParticleEnsemble, SnapshotMeta)> {
    if bytes.get(..4) != Some(SNAPSHOT_MAGIC.as_slice()) {
        return Err(Error::Snapshot("bad magic (not an SVPM snapshot)".into()));
    }
    let version = read_u32(bytes, 4, "the format version")?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::Snapshot(format!(
            "unsupported format version {version} (expected {SNAPSHOT_VERSION})"
        )));
    }
    let header_len = read_u32(bytes, 8, "the header length")? as usize;
    let header = bytes
        .get(12..12 + header_len)
        .ok_or_else(|| Error::Snapshot(format!("truncated header (declared length {header_len})")))?;
    let meta: SnapshotMeta = serde_json::from_slice(header)?;
    let n = meta.n_particles;
    if n == 0 {
        return Err(Error::Snapshot("snapshot holds no particles".into()));
    }
    let cols = if meta.has_momenta { 9 } else { 6 };
    let payload = &bytes[12 + header_len..];
    let expected = cols * n * 8;
    if payload.len() != expected {
        return Err(Error::Snapshot(format!(
            "payload length {} does not match {cols} columns of {n} particles ({expected} bytes)",
            payload.len()
        )));
    }
    let value = |c: usize, a: usize| {
        let at = (c * n + a) * 8;
        f64::from_le_bytes(payload[at..at + 8].try_into().expect("8 bytes"))
    };
    let gather = |c0: usize| -> Vec<Vec3> {
        (0..n)
            .map(|a| Vec3::new(value(c0, a), value(c0 + 1, a), value(c0 + 2, a)))
            .collect()
    };
    let positions = gather(0);
    let velocities = gather(3);
    let momenta = meta.has_momenta.then(|| gather(6));
    // Built directly so that the payload survives bit for bit.
    let ens = ParticleEnsemble {
        weight: meta.species.n_total / n as f64,
        positions,
        velocities,
        momenta,
    };
    Ok((ens, meta))
}

pub fn write_snapshot(path: &Path, ens: &ParticleEnsemble, meta: &SnapshotMeta) -> Result<()> {
    fs::write(path, encode_snapshot(ens, meta)?)?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<(ParticleEnsemble, SnapshotMeta)> {
    decode_snapshot(&fs::read(path)?)
}

pub fn write_ledger_csv(path: &Path, ledger: &ConservationLedger) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", LedgerRow::CSV_HEADER)?;
    for row in &ledger.rows {
        writeln!(w, "{}", row.to_csv())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ledger_csv(path: &Path) -> Result<Vec<LedgerRow>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != LedgerRow::CSV_HEADER {
        return Err(Error::param(format!("unexpected diagnostics header `{header}`")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let f: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::param(format!("diagnostics row {}: {e}", i + 1)))?;
        if f.len() != 9 {
            return Err(Error::param(format!(
                "diagnostics row {} has {} columns",
                i + 1,
                f.len()
            )));
        }
        rows.push(LedgerRow {
            t: f[0],
            kinetic_energy: f[1],
            field_energy: f[2],
            total_momentum: Vec3::new(f[3], f[4], f[5]),
            mean_speed: f[6],
            min_speed: f[7],
            max_speed: f[8],
        });
    }
    Ok(rows)
}

pub const TRAJECTORY_HEADER: &str = "step,t,particle,x1,x2,x3,v1,v2,v3,dw1,dw2,dw3";

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for frame in &traj.frames {
        for (i, &a) in traj.particles.iter().enumerate() {
            let (x, v) = (frame.positions[i], frame.velocities[i]);
            let dw = frame.noise.get(i).copied().unwrap_or([0.0; 3]);
            write!(w, "{},{:.16e},{a}", frame.step, frame.t)?;
            for c in x.iter().chain(v.iter()).chain(dw.iter()) {
                write!(w, ",{c:.16e}")?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

impl FileEntry {
    pub fn describe(path: &Path, root: &Path) -> Result<Self> {
        let data = fs::read(path)?;
        Ok(Self {
            path: path.strip_prefix(root).unwrap_or(path).to_path_buf(),
            bytes: data.len() as u64,
            sha256: hex(&Sha256::digest(&data)),
        })
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    pub snapshot_version: u32,
    pub csv_schema_version: u32,
    pub config: SimConfig,
    pub config_hash: String,
    pub seed: u64,
    pub start_step: u64,
    pub restart_from: Option<PathBuf>,
    pub files: Vec<FileEntry>,
    pub warnings: Vec<String>,
    pub wall_clock: Option<crate::sde::WallClock>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::InitialDistribution;

    fn sample(n: usize, momenta: bool) -> (ParticleEnsemble, SnapshotMeta) {
        let species = SpeciesParams::new(-1.0, 2.0, 1e6).unwrap();
        let dist = InitialDistribution::Maxwellian {
            thermal_speed: 1.0,
            drift: Vec3::zeros(),
            position_spread: 1.0,
        };
        let mut ens = ParticleEnsemble::sample(n, &dist, &species, 3).unwrap();
        if momenta {
            ens.init_momenta(&species, |x| x * 0.5);
        }
        let meta = SnapshotMeta {
            time: 0.125,
            step: 17,
            config_hash: "ab".repeat(32),
            seed: 3,
            n_particles: n,
            species,
            has_momenta: momenta,
        };
        (ens, meta)
    }

    #[test]
    fn snapshot_round_trip_is_bit_exact() {
        for momenta in [false, true] {
            let (ens, meta) = sample(50, momenta);
            let bytes = encode_snapshot(&ens, &meta).unwrap();
            let (back, meta2) = decode_snapshot(&bytes).unwrap();
            assert_eq!(meta2, meta);
            let bits = |v: &[Vec3]| v.iter().flat_map(|x| x.iter().map(|c| c.to_bits())).collect::<Vec<_>>();
            assert_eq!(bits(&back.positions), bits(&ens.positions));
            assert_eq!(bits(&back.velocities), bits(&ens.velocities));
            assert_eq!(back.momenta.as_deref().map(bits), ens.momenta.as_deref().map(bits));
        }
    }

    #[test]
    fn snapshot_layout_is_columnar() {
        let (ens, meta) = sample(2, false);
        let bytes = encode_snapshot(&ens, &meta).unwrap();
        assert_eq!(&bytes[..4], b"SVPM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), SNAPSHOT_VERSION);
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let payload = &bytes[12 + h..];
        assert_eq!(payload.len(), 6 * 2 * 8);
        // Second value of the first column is x1 of particle 1.
        assert_eq!(
            f64::from_le_bytes(payload[8..16].try_into().unwrap()),
            ens.positions[1][0]
        );
        // Column 3 starts with v1 of particle 0.
        assert_eq!(
            f64::from_le_bytes(payload[48..56].try_into().unwrap()),
            ens.velocities[0][0]
        );
    }

    #[test]
    fn truncated_or_foreign_files_are_rejected() {
        let (ens, meta) = sample(10, true);
        let bytes = encode_snapshot(&ens, &meta).unwrap();
        for cut in [0, 3, 6, 10, 20, bytes.len() - 1] {
            assert!(matches!(
                decode_snapshot(&bytes[..cut]),
                Err(Error::Snapshot(_) | Error::Json(_))
            ));
        }
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        let err = decode_snapshot(&wrong).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(decode_snapshot(&magic).is_err());
    }

    #[test]
    fn ledger_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let mut ledger = ConservationLedger::new();
        for i in 0..5 {
            ledger
                .push(LedgerRow {
                    t: 0.1 * f64::from(i) + 1.0 / 3.0,
                    kinetic_energy: std::f64::consts::PI * f64::from(i),
                    field_energy: 1e-300,
                    total_momentum: Vec3::new(-1.0 / 7.0, 2e10, f64::EPSILON),
                    mean_speed: 0.1,
                    min_speed: 0.0,
                    max_speed: 1.0 / 9.0,
                })
                .unwrap();
        }
        write_ledger_csv(&path, &ledger).unwrap();
        assert_eq!(read_ledger_csv(&path).unwrap(), ledger.rows);
    }
}
