//! Compact on-disk form of a random-switch candidate set.
//!
//! A candidate set shares one frozen weight tensor (reconstructible from the
//! init spec, or stored once for trained-ticket sets); what each ticket adds
//! is its mask. Low-ratio masks are sparse, so the file stores each layer's
//! bitset as Golomb-Rice-coded gaps between set (or cleared, whichever side
//! is sparser) positions, falling back to raw words when that is smaller.
//! The Rice parameter is brute-forced per layer, so the payload is never
//! larger than the best of the tried encodings.
//!
//! Raw element bitsets cost 1 bit per weight per ticket; against f64 weights
//! a six-ticket set would be 6/64 = 9.4% overhead. Gap coding brings a
//! low-ratio set under 5%, which is the storage contract the switch defense
//! advertises.

use std::path::Path;

use rst_core::{checkpoint::crc32, BitMask, InitSpec, Provenance, TicketCheckpoint};

use crate::error::{Result, WorkbenchError};

const MAGIC: &[u8; 4] = b"R2SC";
const VERSION: u16 = 1;

const ENC_RAW: u8 = 0;
const ENC_RICE_ONES: u8 = 1;
const ENC_RICE_ZEROS: u8 = 2;

struct BitWriter {
    bytes: Vec<u8>,
    used: u8,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter {
            bytes: Vec::new(),
            used: 0,
        }
    }

    fn push_bit(&mut self, bit: bool) {
        if self.used == 0 {
            self.bytes.push(0);
        }
        if bit {
            let last = self.bytes.last_mut().expect("pushed above");
            *last |= 1 << self.used;
        }
        self.used = (self.used + 1) % 8;
    }

    fn push_low_bits(&mut self, value: u32, n: u8) {
        for i in 0..n {
            self.push_bit((value >> i) & 1 == 1);
        }
    }

    fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl BitReader<'_> {
    fn read_bit(&mut self) -> Option<bool> {
        let byte = self.pos / 8;
        if byte >= self.bytes.len() {
            return None;
        }
        let bit = (self.bytes[byte] >> (self.pos % 8)) & 1 == 1;
        self.pos += 1;
        Some(bit)
    }

    fn read_low_bits(&mut self, n: u8) -> Option<u32> {
        let mut v = 0u32;
        for i in 0..n {
            if self.read_bit()? {
                v |= 1 << i;
            }
        }
        Some(v)
    }
}

fn rice_encode(gaps: &[u32], m: u8) -> Vec<u8> {
    let mut w = BitWriter::new();
    for &g in gaps {
        let q = g >> m;
        for _ in 0..q {
            w.push_bit(true);
        }
        w.push_bit(false);
        w.push_low_bits(g, m);
    }
    w.finish()
}

fn rice_decode(bytes: &[u8], count: usize, m: u8) -> Option<Vec<u32>> {
    let mut r = BitReader { bytes, pos: 0 };
    let mut gaps = Vec::with_capacity(count);
    for _ in 0..count {
        let mut q = 0u32;
        while r.read_bit()? {
            q += 1;
            if q > 1 << 24 {
                return None;
            }
        }
        let low = r.read_low_bits(m)?;
        gaps.push((q << m) | low);
    }
    Some(gaps)
}

fn rice_cost_bits(gaps: &[u32], m: u8) -> u64 {
    gaps.iter()
        .map(|&g| (g >> m) as u64 + 1 + m as u64)
        .sum()
}

fn positions_to_gaps(positions: &[u32]) -> Vec<u32> {
    let mut gaps = Vec::with_capacity(positions.len());
    let mut prev: i64 = -1;
    for &p in positions {
        gaps.push((p as i64 - prev - 1) as u32);
        prev = p as i64;
    }
    gaps
}

fn gaps_to_positions(gaps: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(gaps.len());
    let mut prev: i64 = -1;
    for &g in gaps {
        let p = prev + 1 + g as i64;
        out.push(p as u32);
        prev = p;
    }
    out
}

/// Best encoding of one mask: (encoding tag, rice parameter, payload).
fn encode_mask(mask: &BitMask) -> (u8, u8, Vec<u8>) {
    let groups = mask.len();
    let ones: Vec<u32> = (0..groups).filter(|&g| mask.get(g)).map(|g| g as u32).collect();
    let sparse_side_ones = ones.len() * 2 <= groups;
    let positions: Vec<u32> = if sparse_side_ones {
        ones
    } else {
        (0..groups).filter(|&g| !mask.get(g)).map(|g| g as u32).collect()
    };
    let gaps = positions_to_gaps(&positions);

    let raw_bytes = groups.div_ceil(8) as u64;
    let mut best_m = 0u8;
    let mut best_bits = u64::MAX;
    for m in 0..=15u8 {
        let bits = rice_cost_bits(&gaps, m);
        if bits < best_bits {
            best_bits = bits;
            best_m = m;
        }
    }
    if best_bits.div_ceil(8) < raw_bytes {
        let enc = if sparse_side_ones {
            ENC_RICE_ONES
        } else {
            ENC_RICE_ZEROS
        };
        (enc, best_m, rice_encode(&gaps, best_m))
    } else {
        // Raw little-endian bitset bytes.
        let mut bytes = vec![0u8; groups.div_ceil(8)];
        for g in 0..groups {
            if mask.get(g) {
                bytes[g / 8] |= 1 << (g % 8);
            }
        }
        (ENC_RAW, 0, bytes)
    }
}

fn decode_mask(enc: u8, m: u8, payload: &[u8], groups: usize, count: usize) -> Option<BitMask> {
    match enc {
        ENC_RAW => {
            if payload.len() != groups.div_ceil(8) {
                return None;
            }
            let mut mask = BitMask::zeros(groups);
            for g in 0..groups {
                if (payload[g / 8] >> (g % 8)) & 1 == 1 {
                    mask.set(g, true);
                }
            }
            Some(mask)
        }
        ENC_RICE_ONES | ENC_RICE_ZEROS => {
            let n = if enc == ENC_RICE_ONES {
                count
            } else {
                groups - count
            };
            let gaps = rice_decode(payload, n, m)?;
            let positions = gaps_to_positions(&gaps);
            if positions.iter().any(|&p| p as usize >= groups) {
                return None;
            }
            let mut mask = if enc == ENC_RICE_ONES {
                BitMask::zeros(groups)
            } else {
                BitMask::ones(groups)
            };
            for &p in &positions {
                mask.set(p as usize, enc == ENC_RICE_ONES);
            }
            Some(mask)
        }
        _ => None,
    }
}

/// Byte accounting for a stored candidate set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateStats {
    /// Mask storage: payloads plus their per-layer headers.
    pub mask_bytes: usize,
    /// Whole file size.
    pub file_bytes: usize,
    /// Bytes of the shared dense weights at this build's precision.
    pub dense_weight_bytes: usize,
}

impl CandidateStats {
    pub fn overhead_ratio(&self) -> f64 {
        self.mask_bytes as f64 / self.dense_weight_bytes as f64
    }
}

fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_bits().to_le_bytes());
}

/// Writes a candidate set. All tickets must share the network id, init
/// spec, pattern, and (when present) the dense weight payload, which is
/// stored once.
pub fn save(path: &Path, tickets: &[TicketCheckpoint]) -> Result<CandidateStats> {
    if tickets.is_empty() {
        return Err(WorkbenchError::Config("empty candidate set".into()));
    }
    let first = &tickets[0];
    for t in tickets {
        if t.net_id != first.net_id
            || t.init != first.init
            || t.pattern != first.pattern
            || t.weights != first.weights
        {
            return Err(WorkbenchError::Config(
                "candidate tickets must share network, init, pattern, and weights".into(),
            ));
        }
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u16(&mut buf, VERSION);
    let id = first.net_id.as_bytes();
    put_u16(&mut buf, id.len() as u16);
    buf.extend_from_slice(id);
    buf.push(match first.init.method {
        rst_core::InitMethod::SignedKaimingConstant => 0,
        rst_core::InitMethod::KaimingNormal => 1,
        rst_core::InitMethod::KaimingUniform => 2,
        rst_core::InitMethod::XavierNormal => 3,
    });
    put_u64(&mut buf, first.init.seed);
    buf.push(match first.pattern {
        rst_core::SparsityPattern::Element => 0,
        rst_core::SparsityPattern::Row => 1,
        rst_core::SparsityPattern::Kernel => 2,
        rst_core::SparsityPattern::Channel => 3,
    });

    // Shared dense weights, stored once (trained-ticket sets).
    match &first.weights {
        None => buf.push(0),
        Some(layers) => {
            buf.push(1);
            put_u16(&mut buf, layers.len() as u16);
            for layer in layers {
                put_u32(&mut buf, layer.len() as u32);
                for &v in layer {
                    put_f64(&mut buf, v as f64);
                }
            }
        }
    }

    put_u16(&mut buf, tickets.len() as u16);
    let mut mask_bytes = 0usize;
    for t in tickets {
        buf.push(provenance_tag(t.provenance));
        put_f64(&mut buf, t.ratio);
        put_u16(&mut buf, t.masks.len() as u16);
        for mask in &t.masks {
            let (enc, m, payload) = encode_mask(mask);
            put_u32(&mut buf, mask.len() as u32);
            buf.push(enc);
            buf.push(m);
            put_u32(&mut buf, payload.len() as u32);
            buf.extend_from_slice(&payload);
            // Headers count toward mask storage: groups + enc + m + len.
            mask_bytes += 4 + 1 + 1 + 4 + payload.len();
        }
        // Per-ticket norm statistics ride along (needed for evaluation) but
        // are not part of the mask accounting.
        put_u16(&mut buf, t.norm_stats.len() as u16);
        for stats in &t.norm_stats {
            put_u32(&mut buf, stats.mean.len() as u32);
            for &v in &stats.mean {
                put_f64(&mut buf, v as f64);
            }
            for &v in &stats.var {
                put_f64(&mut buf, v as f64);
            }
        }
    }
    let crc = crc32(&buf);
    put_u32(&mut buf, crc);

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| WorkbenchError::io(parent, e))?;
    }
    std::fs::write(path, &buf).map_err(|e| WorkbenchError::io(path, e))?;

    let dense_weight_bytes = dense_bytes(first)?;
    Ok(CandidateStats {
        mask_bytes,
        file_bytes: buf.len(),
        dense_weight_bytes,
    })
}

fn provenance_tag(p: Provenance) -> u8 {
    match p {
        Provenance::Rst => 0,
        Provenance::NaturalRtt => 1,
        Provenance::AdversarialRtt => 2,
        Provenance::FinetunedInherit => 3,
        Provenance::FinetunedReinit => 4,
        Provenance::DenseNatural => 5,
        Provenance::DenseAdversarial => 6,
    }
}

fn provenance_from(tag: u8) -> Option<Provenance> {
    Some(match tag {
        0 => Provenance::Rst,
        1 => Provenance::NaturalRtt,
        2 => Provenance::AdversarialRtt,
        3 => Provenance::FinetunedInherit,
        4 => Provenance::FinetunedReinit,
        5 => Provenance::DenseNatural,
        6 => Provenance::DenseAdversarial,
        _ => return None,
    })
}

/// Dense weight bytes of the shared network at this build's precision.
pub fn dense_bytes(ticket: &TicketCheckpoint) -> Result<usize> {
    let net = ticket
        .instantiate()
        .map_err(WorkbenchError::core("candidates"))?;
    Ok(net.dense_weight_bytes())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(WorkbenchError::BadFormat {
                path: self.path.into(),
                what: format!("wanted {n} bytes, {} remain", self.buf.len() - self.pos),
                offset: self.pos,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn bad(&self, what: &str) -> WorkbenchError {
        WorkbenchError::BadFormat {
            path: self.path.into(),
            what: what.into(),
            offset: self.pos,
        }
    }
}

/// Reads a candidate set back into full ticket checkpoints.
pub fn load(path: &Path) -> Result<Vec<TicketCheckpoint>> {
    let buf = std::fs::read(path).map_err(|e| WorkbenchError::io(path, e))?;
    if buf.len() < 12 {
        return Err(WorkbenchError::BadFormat {
            path: path.into(),
            what: "truncated candidate file".into(),
            offset: 0,
        });
    }
    let (body, crc_bytes) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if stored != crc32(body) {
        return Err(WorkbenchError::BadFormat {
            path: path.into(),
            what: "crc mismatch".into(),
            offset: buf.len() - 4,
        });
    }
    let mut r = Reader {
        buf: body,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(r.bad("bad magic"));
    }
    if r.u16()? != VERSION {
        return Err(r.bad("unsupported version"));
    }
    let id_len = r.u16()? as usize;
    let net_id = String::from_utf8(r.take(id_len)?.to_vec()).map_err(|_| r.bad("id not utf-8"))?;
    let method = match r.u8()? {
        0 => rst_core::InitMethod::SignedKaimingConstant,
        1 => rst_core::InitMethod::KaimingNormal,
        2 => rst_core::InitMethod::KaimingUniform,
        3 => rst_core::InitMethod::XavierNormal,
        _ => return Err(r.bad("unknown init tag")),
    };
    let seed = r.u64()?;
    let pattern = match r.u8()? {
        0 => rst_core::SparsityPattern::Element,
        1 => rst_core::SparsityPattern::Row,
        2 => rst_core::SparsityPattern::Kernel,
        3 => rst_core::SparsityPattern::Channel,
        _ => return Err(r.bad("unknown pattern tag")),
    };
    let weights = match r.u8()? {
        0 => None,
        1 => {
            let n = r.u16()? as usize;
            let mut layers = Vec::with_capacity(n);
            for _ in 0..n {
                let numel = r.u32()? as usize;
                let mut data = Vec::with_capacity(numel);
                for _ in 0..numel {
                    data.push(r.f64()? as rst_core::Real);
                }
                layers.push(data);
            }
            Some(layers)
        }
        _ => return Err(r.bad("bad weight flag")),
    };

    let n_tickets = r.u16()? as usize;
    let mut tickets = Vec::with_capacity(n_tickets);
    for _ in 0..n_tickets {
        let provenance = provenance_from(r.u8()?).ok_or_else(|| r.bad("unknown provenance"))?;
        let ratio = r.f64()?;
        let n_layers = r.u16()? as usize;
        let mut masks = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let groups = r.u32()? as usize;
            let enc = r.u8()?;
            let m = r.u8()?;
            let plen = r.u32()? as usize;
            let payload = r.take(plen)?;
            let count = rst_core::mask::kept_count(ratio, groups)
                .map_err(WorkbenchError::core("candidates"))?;
            let mask = decode_mask(enc, m, payload, groups, count)
                .ok_or_else(|| r.bad("undecodable mask payload"))?;
            if mask.popcount() != count {
                return Err(r.bad("mask popcount does not match its ratio"));
            }
            masks.push(mask);
        }
        let n_norms = r.u16()? as usize;
        let mut norm_stats = Vec::with_capacity(n_norms);
        for _ in 0..n_norms {
            let c = r.u32()? as usize;
            let mut mean = Vec::with_capacity(c);
            for _ in 0..c {
                mean.push(r.f64()? as rst_core::Real);
            }
            let mut var = Vec::with_capacity(c);
            for _ in 0..c {
                var.push(r.f64()? as rst_core::Real);
            }
            norm_stats.push(rst_core::NormStats { mean, var });
        }
        tickets.push(TicketCheckpoint {
            net_id: net_id.clone(),
            init: InitSpec::new(method, seed),
            ratio,
            pattern,
            provenance,
            masks,
            norm_stats,
            weights: weights.clone(),
        });
    }
    if r.pos != body.len() {
        return Err(r.bad("trailing bytes"));
    }
    Ok(tickets)
}
