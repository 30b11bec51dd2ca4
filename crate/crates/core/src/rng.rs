//! Counter-based Brownian increments.
//!
//! Every increment is addressed by `(seed, step, particle, channel)` and
//! computed from a Philox4x32-10 block cipher keyed by the seed, so any entry
//! can be regenerated in isolation and the result never depends on thread
//! count or evaluation order. Standard normals come from the ziggurat sampler
//! in `rand_distr`, fed by a per-(particle, step) Philox stream; channels are
//! drawn from that stream in increasing order.

use rand_core::RngCore;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

/// The Philox4x32 bijection with 10 rounds.
#[inline]
pub fn philox4x32_10(mut ctr: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let (mut k0, mut k1) = (key[0], key[1]);
    for _ in 0..10 {
        let p0 = u64::from(PHILOX_M0) * u64::from(ctr[0]);
        let p1 = u64::from(PHILOX_M1) * u64::from(ctr[2]);
        let (hi0, lo0) = ((p0 >> 32) as u32, p0 as u32);
        let (hi1, lo1) = ((p1 >> 32) as u32, p1 as u32);
        ctr = [hi1 ^ ctr[1] ^ k0, lo1, hi0 ^ ctr[3] ^ k1, lo0];
        k0 = k0.wrapping_add(PHILOX_W0);
        k1 = k1.wrapping_add(PHILOX_W1);
    }
    ctr
}

/// Two consecutive counters through [`philox4x32_10`], rounds interleaved so
/// the multiply chains overlap.
#[inline]
fn philox4x32_10_pair(c0: [u32; 4], c1: [u32; 4], key: [u32; 2]) -> ([u32; 4], [u32; 4]) {
    let (mut a, mut b) = (c0, c1);
    let (mut k0, mut k1) = (key[0], key[1]);
    for _ in 0..10 {
        let pa0 = u64::from(PHILOX_M0) * u64::from(a[0]);
        let pa1 = u64::from(PHILOX_M1) * u64::from(a[2]);
        let pb0 = u64::from(PHILOX_M0) * u64::from(b[0]);
        let pb1 = u64::from(PHILOX_M1) * u64::from(b[2]);
        a = [
            (pa1 >> 32) as u32 ^ a[1] ^ k0,
            pa1 as u32,
            (pa0 >> 32) as u32 ^ a[3] ^ k1,
            pa0 as u32,
        ];
        b = [
            (pb1 >> 32) as u32 ^ b[1] ^ k0,
            pb1 as u32,
            (pb0 >> 32) as u32 ^ b[3] ^ k1,
            pb0 as u32,
        ];
        k0 = k0.wrapping_add(PHILOX_W0);
        k1 = k1.wrapping_add(PHILOX_W1);
    }
    (a, b)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent key families for the different consumers of randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Domain {
    Wiener,
    Bridge { depth: u32, node: u64 },
    Initial,
    Aux(u64),
}

pub(crate) fn derive_key(seed: u64, domain: Domain) -> [u32; 2] {
    let (tag, a, b) = match domain {
        Domain::Wiener => (1u64, 0u64, 0u64),
        Domain::Bridge { depth, node } => (2, u64::from(depth), node),
        Domain::Initial => (3, 0, 0),
        Domain::Aux(x) => (4, x, 0),
    };
    let k = splitmix64(seed ^ splitmix64(tag ^ splitmix64(a ^ splitmix64(b))));
    [k as u32, (k >> 32) as u32]
}

/// Sequential view of the Philox counter space for one `(particle, step)` address.
#[derive(Debug, Clone)]
pub struct PhiloxStream {
    key: [u32; 2],
    ctr: [u32; 4],
    /// Output of two consecutive counter values.
    buf: [u32; 8],
    used: usize,
}

impl PhiloxStream {
    pub(crate) fn new(key: [u32; 2], particle: u64, step: u64) -> Self {
        assert!(particle <= u64::from(u32::MAX), "particle index exceeds 32 bits");
        Self {
            key,
            ctr: [0, (step >> 32) as u32, particle as u32, step as u32],
            buf: [0; 8],
            used: 8,
        }
    }

    #[inline]
    fn refill(&mut self) {
        let mut next = self.ctr;
        next[0] = next[0].wrapping_add(1);
        let (a, b) = philox4x32_10_pair(self.ctr, next, self.key);
        self.buf[..4].copy_from_slice(&a);
        self.buf[4..].copy_from_slice(&b);
        self.ctr[0] = self.ctr[0].wrapping_add(2);
        self.used = 0;
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }
}

impl RngCore for PhiloxStream {
    #[inline(always)]
    fn next_u32(&mut self) -> u32 {
        if self.used == 8 {
            self.refill();
        }
        let x = self.buf[self.used];
        self.used += 1;
        x
    }

    #[inline(always)]
    fn next_u64(&mut self) -> u64 {
        // Same words, in the same order, as two `next_u32` calls.
        if self.used <= 6 {
            let (lo, hi) = (self.buf[self.used], self.buf[self.used + 1]);
            self.used += 2;
            return (u64::from(hi) << 32) | u64::from(lo);
        }
        let lo = u64::from(self.next_u32());
        let hi = u64::from(self.next_u32());
        (hi << 32) | lo
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(4) {
            let bytes = self.next_u32().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

/// Where a batch sits in the Brownian-bridge refinement tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseOrigin {
    pub seed: u64,
    pub step: u64,
    pub depth: u32,
    pub node: u64,
}

/// Brownian increments `ΔW_a^ν` for every particle and channel over one step.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerBatch {
    dt: f64,
    n_particles: usize,
    m_channels: usize,
    increments: Vec<f64>,
    origin: NoiseOrigin,
}

impl WienerBatch {
    /// Builds a batch from explicit increments (row-major `N×M`).
    pub fn from_increments(
        dt: f64,
        n_particles: usize,
        m_channels: usize,
        increments: Vec<f64>,
        origin: NoiseOrigin,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::param(format!("dt must be positive, got {dt}")));
        }
        if increments.len() != n_particles * m_channels {
            return Err(Error::param(format!(
                "expected {}x{} increments, got {}",
                n_particles,
                m_channels,
                increments.len()
            )));
        }
        Ok(Self {
            dt,
            n_particles,
            m_channels,
            increments,
            origin,
        })
    }

    pub fn zeros(dt: f64, n_particles: usize, m_channels: usize) -> Self {
        Self {
            dt,
            n_particles,
            m_channels,
            increments: vec![0.0; n_particles * m_channels],
            origin: NoiseOrigin {
                seed: 0,
                step: 0,
                depth: 0,
                node: 0,
            },
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn m_channels(&self) -> usize {
        self.m_channels
    }

    pub fn origin(&self) -> NoiseOrigin {
        self.origin
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    #[inline]
    pub fn particle(&self, a: usize) -> &[f64] {
        &self.increments[a * self.m_channels..(a + 1) * self.m_channels]
    }

    #[inline]
    pub fn get(&self, a: usize, nu: usize) -> f64 {
        self.increments[a * self.m_channels + nu]
    }

    /// Entrywise sum of two batches covering consecutive sub-intervals.
    pub fn merged(&self, other: &WienerBatch) -> Result<WienerBatch> {
        if self.n_particles != other.n_particles || self.m_channels != other.m_channels {
            return Err(Error::param("cannot merge batches of different shape"));
        }
        let increments = self
            .increments
            .iter()
            .zip(&other.increments)
            .map(|(a, b)| a + b)
            .collect();
        Ok(WienerBatch {
            dt: self.dt + other.dt,
            n_particles: self.n_particles,
            m_channels: self.m_channels,
            increments,
            origin: NoiseOrigin {
                depth: self.origin.depth.saturating_sub(1),
                node: self.origin.node / 2,
                ..self.origin
            },
        })
    }
}

fn check_shape(n_particles: usize, m_channels: usize, dt: f64) -> Result<()> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::param(format!("dt must be positive and finite, got {dt}")));
    }
    if m_channels == 0 {
        return Err(Error::param("m_channels must be at least 1"));
    }
    if n_particles as u64 > u64::from(u32::MAX) {
        return Err(Error::param("at most 2^32 particles are addressable"));
    }
    Ok(())
}

/// Stateless increments: entry `(a, ν)` depends only on `(seed, step_index, a, ν)`.
pub fn wiener_increments(
    seed: u64,
    step_index: u64,
    n_particles: usize,
    m_channels: usize,
    dt: f64,
) -> Result<WienerBatch> {
    let mut batch = WienerBatch::zeros(dt, 0, m_channels);
    fill_wiener_increments(seed, step_index, n_particles, m_channels, dt, &mut batch)?;
    Ok(batch)
}

/// Particles per parallel task; a single row is too little work to schedule.
const ROWS_PER_TASK: usize = 1024;

/// [`wiener_increments`] into an existing batch, reusing its storage.
pub fn fill_wiener_increments(
    seed: u64,
    step_index: u64,
    n_particles: usize,
    m_channels: usize,
    dt: f64,
    batch: &mut WienerBatch,
) -> Result<()> {
    check_shape(n_particles, m_channels, dt)?;
    let key = derive_key(seed, Domain::Wiener);
    let scale = dt.sqrt();
    batch.increments.resize(n_particles * m_channels, 0.0);
    batch
        .increments
        .par_chunks_mut(ROWS_PER_TASK * m_channels)
        .enumerate()
        .for_each(|(chunk, rows)| {
            for (i, row) in rows.chunks_mut(m_channels).enumerate() {
                let a = (chunk * ROWS_PER_TASK + i) as u64;
                let mut stream = PhiloxStream::new(key, a, step_index);
                for w in row.iter_mut() {
                    *w = scale * stream.normal();
                }
            }
        });
    batch.dt = dt;
    batch.n_particles = n_particles;
    batch.m_channels = m_channels;
    batch.origin = NoiseOrigin {
        seed,
        step: step_index,
        depth: 0,
        node: 0,
    };
    Ok(())
}

/// Standard normals used to split a batch at its midpoint.
fn bridge_normals(batch: &WienerBatch) -> Vec<f64> {
    let o = batch.origin;
    let key = derive_key(
        o.seed,
        Domain::Bridge {
            depth: o.depth,
            node: o.node,
        },
    );
    let m = batch.m_channels;
    let mut z = vec![0.0; batch.increments.len()];
    z.par_chunks_mut(m).enumerate().for_each(|(a, row)| {
        let mut stream = PhiloxStream::new(key, a as u64, o.step);
        for w in row.iter_mut() {
            *w = stream.normal();
        }
    });
    z
}

/// Brownian-bridge halving: the two children sum to the parent entrywise.
pub fn refine_increments(batch: &WienerBatch) -> (WienerBatch, WienerBatch) {
    let z = bridge_normals(batch);
    refine_increments_with(batch, &z)
}

/// Bridge halving with caller-supplied standard normals (one per entry).
pub fn refine_increments_with(batch: &WienerBatch, normals: &[f64]) -> (WienerBatch, WienerBatch) {
    assert_eq!(normals.len(), batch.increments.len(), "one bridge normal per entry");
    let half_sd = 0.5 * batch.dt.sqrt();
    let first: Vec<f64> = batch
        .increments
        .iter()
        .zip(normals)
        .map(|(w, z)| 0.5 * w + half_sd * z)
        .collect();
    let second: Vec<f64> = batch.increments.iter().zip(&first).map(|(w, f)| w - f).collect();
    let o = batch.origin;
    let child = |increments, node| WienerBatch {
        dt: 0.5 * batch.dt,
        n_particles: batch.n_particles,
        m_channels: batch.m_channels,
        increments,
        origin: NoiseOrigin {
            depth: o.depth + 1,
            node,
            ..o
        },
    };
    (child(first, 2 * o.node), child(second, 2 * o.node + 1))
}

/// Supplies the batch for each simulation step.
///
/// `Bridged { depth }` runs at `dt = coarse_dt / 2^depth` on the same Brownian
/// path as the coarse run, which is what couples the levels of a convergence
/// study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseSource {
    Direct { seed: u64 },
    Bridged { seed: u64, depth: u32 },
}

impl NoiseSource {
    pub fn seed(&self) -> u64 {
        match *self {
            NoiseSource::Direct { seed } | NoiseSource::Bridged { seed, .. } => seed,
        }
    }

    /// Like [`NoiseSource::batch`], reusing `out`'s storage where possible.
    pub fn fill_batch(
        &self,
        step: u64,
        n_particles: usize,
        m_channels: usize,
        dt: f64,
        out: &mut WienerBatch,
    ) -> Result<()> {
        match *self {
            NoiseSource::Direct { seed } => fill_wiener_increments(seed, step, n_particles, m_channels, dt, out),
            NoiseSource::Bridged { .. } => {
                *out = self.batch(step, n_particles, m_channels, dt)?;
                Ok(())
            }
        }
    }

    pub fn batch(&self, step: u64, n_particles: usize, m_channels: usize, dt: f64) -> Result<WienerBatch> {
        match *self {
            NoiseSource::Direct { seed } => wiener_increments(seed, step, n_particles, m_channels, dt),
            NoiseSource::Bridged { seed, depth } => {
                let coarse_dt = dt * f64::from(1u32 << depth);
                let mut batch = wiener_increments(seed, step >> depth, n_particles, m_channels, coarse_dt)?;
                for level in (0..depth).rev() {
                    let (left, right) = refine_increments(&batch);
                    batch = if (step >> level) & 1 == 0 { left } else { right };
                }
                // Restore the exact requested dt (the halvings are exact in binary anyway).
                batch.dt = dt;
                Ok(batch)
            }
        }
    }
}

/// Standard normal deviates for auxiliary uses (initial conditions, bootstrap).
pub(crate) fn aux_stream(seed: u64, tag: u64, index: u64) -> PhiloxStream {
    PhiloxStream::new(derive_key(seed, Domain::Aux(tag)), index, 0)
}

pub(crate) fn initial_stream(seed: u64, particle: u64) -> PhiloxStream {
    PhiloxStream::new(derive_key(seed, Domain::Initial), particle, 0)
}

/// Uniform deviate in `[0, 1)` with 53 random bits.
pub(crate) fn uniform(stream: &mut PhiloxStream) -> f64 {
    (stream.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
