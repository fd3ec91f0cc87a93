//! STTRAM program memory, attack sensors and the EPROM.
//!
//! Rows whose index is a multiple of `sensor_interval` are sensor rows. They
//! hold the alternating pattern `1,0,1,0,…` (column 0 is `1`) and are never
//! part of the firmware address space. Firmware bytes are laid out row-major
//! over the remaining data rows, bits LSB-first within a byte.

use std::collections::HashMap;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::magnetics::{simulate_exposure, Bit, ExposureOutcome, FieldKind, FieldProfile, MagneticsError, MtjParams};

pub const DEFAULT_SENSOR_INTERVAL: usize = 1024;
pub const DEFAULT_ROWS: usize = 4096;
pub const DEFAULT_COLS: usize = 64;
/// A pristine sensor byte: even columns hold `1`.
pub const SENSOR_PATTERN: u8 = 0x55;
/// FNV-1a 64-bit offset basis, the digest of no bytes.
pub const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;

pub const EPROM_SIZE: usize = 1024;
pub const BOOTROM_SIZE: usize = 64;
pub const SUPPORT_REQUEST_LEN: usize = 5;
pub const SUPPORT_ASSIST_LEN: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemoryError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("firmware of {needed} bytes exceeds data capacity of {capacity} bytes")]
    CapacityExceeded { needed: u64, capacity: u64 },
    #[error("attack duration must be positive, got {0}")]
    InvalidDuration(f64),
    #[error(transparent)]
    Magnetics(#[from] MagneticsError),
    #[error("cannot read firmware file {path}: {reason}")]
    Io { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, MemoryError>;

/// FNV-1a 64 over the concatenation of `parts`.
pub fn fnv1a64<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> u64 {
    let mut h = FnvHasher::default();
    for p in parts {
        h.write(p);
    }
    h.finish()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellClass {
    Data,
    Sensor,
}

/// A set of bit positions over a whole array, indexed `row * cols + col`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMask {
    words: Vec<u64>,
    len: usize,
}

impl BitMask {
    pub fn new(len: usize) -> Self {
        BitMask { words: vec![0; len.div_ceil(64)], len }
    }

    pub fn insert(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn contains(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn count(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(move |(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let b = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * 64 + b)
            })
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }
}

/// Bootloader and application program as one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FirmwareImage {
    pub bootloader: Vec<u8>,
    pub program: Vec<u8>,
    pub digest: u64,
}

impl FirmwareImage {
    pub fn new(bootloader: Vec<u8>, program: Vec<u8>) -> Self {
        let digest = fnv1a64([bootloader.as_slice(), program.as_slice()]);
        FirmwareImage { bootloader, program, digest }
    }

    /// Splits a raw binary at `bootloader_len`.
    pub fn from_raw(mut bytes: Vec<u8>, bootloader_len: usize) -> Self {
        let split = bootloader_len.min(bytes.len());
        let program = bytes.split_off(split);
        FirmwareImage::new(bytes, program)
    }

    pub fn load(path: &Path, bootloader_len: usize) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| MemoryError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Ok(FirmwareImage::from_raw(bytes, bootloader_len))
    }

    /// Reproducible pseudo-random image.
    pub fn generated(size: usize, bootloader_len: usize, seed: u64) -> Self {
        let mut bytes = vec![0u8; size];
        rand::RngCore::fill_bytes(&mut ChaCha8Rng::seed_from_u64(seed), &mut bytes);
        FirmwareImage::from_raw(bytes, bootloader_len)
    }

    pub fn len(&self) -> usize {
        self.bootloader.len() + self.program.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn verify(&self) -> bool {
        fnv1a64([self.bootloader.as_slice(), self.program.as_slice()]) == self.digest
    }
}

/// Firmware known only by size and seed. Content is generated on demand so a
/// 100 MB image never needs to be held in memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SyntheticFirmware {
    pub size: u64,
    pub seed: u64,
}

impl SyntheticFirmware {
    /// Identity digest standing in for a content hash.
    pub fn digest(&self) -> u64 {
        fnv1a64([b"synthetic".as_slice(), &self.size.to_le_bytes(), &self.seed.to_le_bytes()])
    }

    fn word(&self, index: u64) -> u64 {
        // splitmix64 over (seed, word index)
        let mut z = self
            .seed
            .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Bytes `[offset, offset + len)`, clipped to the image.
    pub fn read(&self, offset: u64, len: usize) -> Vec<u8> {
        let end = (offset + len as u64).min(self.size);
        let mut out = Vec::with_capacity(end.saturating_sub(offset) as usize);
        let mut i = offset;
        while i < end {
            let w = self.word(i / 8).to_le_bytes();
            let lo = (i % 8) as usize;
            let hi = (8).min(lo + (end - i) as usize);
            out.extend_from_slice(&w[lo..hi]);
            i += (hi - lo) as u64;
        }
        out
    }
}

/// Contents of the persistent EPROM segment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionState {
    pub program_counter: u64,
    pub register_snapshot: Vec<u8>,
    pub valid: bool,
}

impl ExecutionState {
    pub fn new(program_counter: u64, register_snapshot: Vec<u8>) -> Self {
        ExecutionState { program_counter, register_snapshot, valid: true }
    }
}

/// Support Request routine, one byte per instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum RequestOp {
    SendRequest = 0x51,
    ReceiveByte = 0x52,
    WriteByte = 0x53,
    IncrementIndex = 0x54,
    Reboot = 0x55,
}

impl RequestOp {
    pub const ROUTINE: [RequestOp; SUPPORT_REQUEST_LEN] = [
        RequestOp::SendRequest,
        RequestOp::ReceiveByte,
        RequestOp::WriteByte,
        RequestOp::IncrementIndex,
        RequestOp::Reboot,
    ];

    pub fn decode(b: u8) -> Option<Self> {
        Self::ROUTINE.into_iter().find(|op| *op as u8 == b)
    }
}

/// Support Assist routine, one byte per instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum AssistOp {
    ReadByte = 0x41,
    SendByte = 0x42,
    IncrementIndex = 0x43,
    Reboot = 0x44,
}

impl AssistOp {
    pub const ROUTINE: [AssistOp; SUPPORT_ASSIST_LEN] =
        [AssistOp::ReadByte, AssistOp::SendByte, AssistOp::IncrementIndex, AssistOp::Reboot];

    pub fn decode(b: u8) -> Option<Self> {
        Self::ROUTINE.into_iter().find(|op| *op as u8 == b)
    }
}

/// Four segments: write-protected bootrom, Support Assist, Support Request,
/// and the persistent region that holds at most one saved state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpromLayout {
    bootrom: Box<[u8]>,
    support_assist: [u8; SUPPORT_ASSIST_LEN],
    support_request: [u8; SUPPORT_REQUEST_LEN],
    persistent: Option<ExecutionState>,
}

impl Default for EpromLayout {
    fn default() -> Self {
        let mut rom = [0u8; BOOTROM_SIZE];
        rom[..8].copy_from_slice(b"BOOTROM1");
        EpromLayout::new(&rom)
    }
}

impl EpromLayout {
    pub fn new(bootrom: &[u8]) -> Self {
        EpromLayout {
            bootrom: bootrom.into(),
            support_assist: AssistOp::ROUTINE.map(|op| op as u8),
            support_request: RequestOp::ROUTINE.map(|op| op as u8),
            persistent: None,
        }
    }

    pub fn bootrom(&self) -> &[u8] {
        &self.bootrom
    }

    pub fn support_request(&self) -> &[u8] {
        &self.support_request
    }

    pub fn support_assist(&self) -> &[u8] {
        &self.support_assist
    }

    pub fn request_routine(&self) -> Vec<RequestOp> {
        self.support_request.iter().filter_map(|&b| RequestOp::decode(b)).collect()
    }

    pub fn assist_routine(&self) -> Vec<AssistOp> {
        self.support_assist.iter().filter_map(|&b| AssistOp::decode(b)).collect()
    }

    /// Bytes left for application use after the three fixed segments.
    pub fn persistent_capacity(&self) -> usize {
        EPROM_SIZE - self.bootrom.len() - self.support_assist.len() - self.support_request.len()
    }

    /// Overwrites any previous state. Panics on an invalid or oversized
    /// snapshot.
    pub fn save_state(&mut self, s: ExecutionState) {
        assert!(s.valid, "only valid snapshots are saved");
        assert!(
            s.register_snapshot.len() + 8 <= self.persistent_capacity(),
            "register snapshot does not fit the persistent segment"
        );
        self.persistent = Some(s);
    }

    pub fn load_state(&self) -> Option<&ExecutionState> {
        self.persistent.as_ref()
    }

    pub fn erase_state(&mut self) {
        self.persistent = None;
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityReport {
    pub passed: bool,
    pub corrupted_sensor_rows: Vec<usize>,
    pub corrupted_sensor_bits: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    Exhaustive,
    Statistical { sample_size: usize, seed: u64 },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttackEffect {
    pub data_bits_flipped: u64,
    pub sensor_bits_flipped: u64,
    /// Earliest time any data cell read out a changed value, even briefly.
    pub data_onset: Option<f64>,
    pub sensor_onset: Option<f64>,
    /// Statistical mode only: up to `sample_size` flipped data bits as
    /// `(row, col)`, in a seed-determined order.
    pub sampled_data_bits: Vec<(usize, usize)>,
}

/// Outcomes for the four (cell class, stored bit) groups of one exposure.
#[derive(Clone, Debug, PartialEq)]
pub struct ExposureTable {
    outcomes: [ExposureOutcome; 4],
}

impl ExposureTable {
    fn slot(class: CellClass, bit: Bit) -> usize {
        (class == CellClass::Sensor) as usize * 2 + bit.is_one() as usize
    }

    pub fn get(&self, class: CellClass, bit: Bit) -> &ExposureOutcome {
        &self.outcomes[Self::slot(class, bit)]
    }

    pub fn groups() -> [(CellClass, Bit); 4] {
        [
            (CellClass::Data, Bit::Zero),
            (CellClass::Data, Bit::One),
            (CellClass::Sensor, Bit::Zero),
            (CellClass::Sensor, Bit::One),
        ]
    }
}

/// Memo of exposure outcomes keyed on the exact inputs. Outcomes are pure
/// functions of those inputs, so a hit is indistinguishable from a rerun.
#[derive(Debug, Default)]
pub struct ExposureCache {
    map: HashMap<Vec<u64>, ExposureOutcome>,
    hits: u64,
}

impl ExposureCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(bit: Bit, p: &MtjParams, profile: &FieldProfile, duration: f64) -> Vec<u64> {
        let v = |v: crate::magnetics::Vec3| [v.x.to_bits(), v.y.to_bits(), v.z.to_bits()];
        let mut k = vec![bit.is_one() as u64, p.gamma.to_bits(), p.alpha.to_bits(), p.h_k.to_bits()];
        k.extend(v(p.easy_axis));
        k.extend(p.h_demag.map(f64::to_bits));
        k.push(p.demag_scale.to_bits());
        k.extend(v(p.h_exchange));
        k.extend(v(p.e_p));
        k.push(p.susceptibility_factor.to_bits());
        k.push(match profile.kind {
            FieldKind::Dc => 1,
            FieldKind::Ac => 2,
            FieldKind::RampAc => 3,
            FieldKind::None => 4,
        });
        k.push(profile.amplitude.to_bits());
        k.extend(v(profile.direction));
        k.push(profile.frequency.to_bits());
        k.push(profile.ramp_time.to_bits());
        k.push(duration.to_bits());
        k
    }

    pub fn exposure(
        &mut self,
        bit: Bit,
        p: &MtjParams,
        profile: &FieldProfile,
        duration: f64,
    ) -> std::result::Result<ExposureOutcome, MagneticsError> {
        let key = Self::key(bit, p, profile, duration);
        if let Some(o) = self.map.get(&key) {
            self.hits += 1;
            return Ok(o.clone());
        }
        let o = simulate_exposure(bit, p, profile, duration)?;
        self.map.insert(key, o.clone());
        Ok(o)
    }

    pub fn table(
        &mut self,
        data: &MtjParams,
        sensor: &MtjParams,
        profile: &FieldProfile,
        duration: f64,
    ) -> std::result::Result<ExposureTable, MagneticsError> {
        let missing: Vec<(CellClass, Bit)> = ExposureTable::groups()
            .into_iter()
            .filter(|&(c, b)| {
                let p = if c == CellClass::Data { data } else { sensor };
                !self.map.contains_key(&Self::key(b, p, profile, duration))
            })
            .collect();
        let fresh: Vec<_> = missing
            .par_iter()
            .map(|&(c, b)| {
                let p = if c == CellClass::Data { data } else { sensor };
                simulate_exposure(b, p, profile, duration).map(|o| (Self::key(b, p, profile, duration), o))
            })
            .collect();
        for r in fresh {
            let (k, o) = r?;
            self.map.insert(k, o);
        }
        let get = |c: CellClass, b: Bit| {
            let p = if c == CellClass::Data { data } else { sensor };
            self.map[&Self::key(b, p, profile, duration)].clone()
        };
        Ok(ExposureTable {
            outcomes: [
                get(CellClass::Data, Bit::Zero),
                get(CellClass::Data, Bit::One),
                get(CellClass::Sensor, Bit::Zero),
                get(CellClass::Sensor, Bit::One),
            ],
        })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SttramArray {
    rows: usize,
    cols: usize,
    sensor_interval: usize,
    bytes: Vec<u8>,
    data_params: MtjParams,
    sensor_params: MtjParams,
    bootloader_len: u64,
    firmware_len: u64,
}

/// Builds an array with zeroed data rows and pristine sensor rows.
pub fn new_array(
    rows: usize,
    cols: usize,
    sensor_interval: usize,
    data_params: MtjParams,
    sensor_params: MtjParams,
) -> Result<SttramArray> {
    let bad = |m: String| Err(MemoryError::InvalidGeometry(m));
    if sensor_interval < 2 {
        return bad(format!("sensor interval {sensor_interval} leaves no data rows"));
    }
    if rows < sensor_interval {
        return bad(format!("{rows} rows is fewer than the sensor interval {sensor_interval}"));
    }
    if cols < 8 || cols % 8 != 0 {
        return bad(format!("{cols} columns is not a positive multiple of 8"));
    }
    data_params
        .validate()
        .and_then(|_| sensor_params.validate())
        .map_err(|e| MemoryError::InvalidGeometry(e.to_string()))?;
    if sensor_params.susceptibility_factor <= data_params.susceptibility_factor {
        return bad("sensor cells must be more susceptible than data cells".into());
    }
    let row_bytes = cols / 8;
    let mut bytes = vec![0u8; rows * row_bytes];
    for r in (0..rows).step_by(sensor_interval) {
        bytes[r * row_bytes..(r + 1) * row_bytes].fill(SENSOR_PATTERN);
    }
    Ok(SttramArray {
        rows,
        cols,
        sensor_interval,
        bytes,
        data_params,
        sensor_params,
        bootloader_len: 0,
        firmware_len: 0,
    })
}

impl SttramArray {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn sensor_interval(&self) -> usize {
        self.sensor_interval
    }

    pub fn data_params(&self) -> &MtjParams {
        &self.data_params
    }

    pub fn sensor_params(&self) -> &MtjParams {
        &self.sensor_params
    }

    fn row_bytes(&self) -> usize {
        self.cols / 8
    }

    pub fn is_sensor_row(&self, row: usize) -> bool {
        row % self.sensor_interval == 0
    }

    pub fn class_of(&self, row: usize) -> CellClass {
        if self.is_sensor_row(row) {
            CellClass::Sensor
        } else {
            CellClass::Data
        }
    }

    pub fn sensor_rows(&self) -> impl Iterator<Item = usize> {
        (0..self.rows).step_by(self.sensor_interval)
    }

    pub fn data_row_count(&self) -> usize {
        self.rows - self.rows.div_ceil(self.sensor_interval)
    }

    /// Bytes available to firmware.
    pub fn data_capacity(&self) -> u64 {
        (self.data_row_count() * self.row_bytes()) as u64
    }

    /// Physical row of the `n`-th data row.
    fn data_row(&self, n: usize) -> usize {
        let per_block = self.sensor_interval - 1;
        (n / per_block) * self.sensor_interval + 1 + n % per_block
    }

    pub fn bit(&self, row: usize, col: usize) -> Bit {
        let b = self.bytes[row * self.row_bytes() + col / 8];
        Bit::from_bool(b >> (col % 8) & 1 == 1)
    }

    pub fn set_bit(&mut self, row: usize, col: usize, bit: Bit) {
        let rb = self.row_bytes();
        let byte = &mut self.bytes[row * rb + col / 8];
        if bit.is_one() {
            *byte |= 1 << (col % 8);
        } else {
            *byte &= !(1 << (col % 8));
        }
    }

    pub fn flip_bit(&mut self, row: usize, col: usize) {
        let rb = self.row_bytes();
        self.bytes[row * rb + col / 8] ^= 1 << (col % 8);
    }

    pub fn row_bytes_of(&self, row: usize) -> &[u8] {
        let rb = self.row_bytes();
        &self.bytes[row * rb..(row + 1) * rb]
    }

    /// Visits the data region `[offset, offset + len)` as contiguous slices.
    fn data_spans(&self, offset: u64, len: u64) -> Vec<(usize, usize)> {
        let rb = self.row_bytes() as u64;
        let mut spans = Vec::new();
        let mut pos = offset;
        let end = offset + len;
        while pos < end {
            let n = (pos / rb) as usize;
            let within = pos % rb;
            let take = (rb - within).min(end - pos);
            let start = self.data_row(n) * rb as usize + within as usize;
            spans.push((start, start + take as usize));
            pos += take;
        }
        spans
    }

    /// Writes `bytes` at data address `offset` without touching the firmware
    /// extent.
    pub fn write_data(&mut self, offset: u64, bytes: &[u8]) -> Result<()> {
        let needed = offset + bytes.len() as u64;
        if needed > self.data_capacity() {
            return Err(MemoryError::CapacityExceeded { needed, capacity: self.data_capacity() });
        }
        let mut src = 0;
        for (a, b) in self.data_spans(offset, bytes.len() as u64) {
            self.bytes[a..b].copy_from_slice(&bytes[src..src + (b - a)]);
            src += b - a;
        }
        Ok(())
    }

    pub fn read_data(&self, offset: u64, len: usize) -> Vec<u8> {
        let len = (len as u64).min(self.data_capacity().saturating_sub(offset));
        let mut out = Vec::with_capacity(len as usize);
        for (a, b) in self.data_spans(offset, len) {
            out.extend_from_slice(&self.bytes[a..b]);
        }
        out
    }

    pub fn program_firmware(&mut self, img: &FirmwareImage) -> Result<()> {
        let needed = img.len() as u64;
        if needed > self.data_capacity() {
            return Err(MemoryError::CapacityExceeded { needed, capacity: self.data_capacity() });
        }
        self.write_data(0, &img.bootloader)?;
        self.write_data(img.bootloader.len() as u64, &img.program)?;
        self.set_firmware_extent(img.bootloader.len() as u64, needed);
        Ok(())
    }

    pub fn set_firmware_extent(&mut self, bootloader_len: u64, total_len: u64) {
        assert!(bootloader_len <= total_len && total_len <= self.data_capacity());
        self.bootloader_len = bootloader_len;
        self.firmware_len = total_len;
    }

    pub fn firmware_len(&self) -> u64 {
        self.firmware_len
    }

    pub fn bootloader_len(&self) -> u64 {
        self.bootloader_len
    }

    pub fn read_firmware(&self) -> FirmwareImage {
        let all = self.read_data(0, self.firmware_len as usize);
        FirmwareImage::from_raw(all, self.bootloader_len as usize)
    }

    /// FNV-1a 64 over the programmed firmware bytes in layout order.
    pub fn firmware_digest(&self) -> u64 {
        let spans = self.data_spans(0, self.firmware_len);
        fnv1a64(spans.into_iter().map(|(a, b)| &self.bytes[a..b]))
    }

    pub fn check_integrity(&self) -> IntegrityReport {
        let mut rows = Vec::new();
        let mut bits = 0u64;
        for r in self.sensor_rows() {
            let bad: u64 = self.row_bytes_of(r).iter().map(|b| (b ^ SENSOR_PATTERN).count_ones() as u64).sum();
            if bad > 0 {
                rows.push(r);
                bits += bad;
            }
        }
        IntegrityReport { passed: bits == 0, corrupted_sensor_rows: rows, corrupted_sensor_bits: bits }
    }

    pub fn reset_sensors(&mut self) {
        let rb = self.row_bytes();
        let rows: Vec<usize> = self.sensor_rows().collect();
        for r in rows {
            self.bytes[r * rb..(r + 1) * rb].fill(SENSOR_PATTERN);
        }
    }

    fn bit_index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    /// Positions of all bits of `class` currently storing `bit`.
    pub fn group_mask(&self, class: CellClass, bit: Bit) -> BitMask {
        let mut mask = BitMask::new(self.rows * self.cols);
        for row in (0..self.rows).filter(|&r| self.class_of(r) == class) {
            for (bi, &byte) in self.row_bytes_of(row).iter().enumerate() {
                let ones = if bit.is_one() { byte } else { !byte };
                for k in 0..8 {
                    if ones >> k & 1 == 1 {
                        mask.insert(self.bit_index(row, bi * 8 + k));
                    }
                }
            }
        }
        mask
    }

    /// Toggles every bit in `mask`; returns how many were toggled.
    pub fn xor_mask(&mut self, mask: &BitMask) -> u64 {
        assert_eq!(mask.len(), self.rows * self.cols);
        let mut n = 0;
        for i in mask.iter() {
            self.flip_bit(i / self.cols, i % self.cols);
            n += 1;
        }
        n
    }

    fn bits(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.rows).flat_map(move |r| (0..self.cols).map(move |c| (r, c)))
    }

    fn params_for(&self, class: CellClass) -> &MtjParams {
        match class {
            CellClass::Data => &self.data_params,
            CellClass::Sensor => &self.sensor_params,
        }
    }

    /// Exposes every cell to `profile` for `duration` and applies the final
    /// read-out. The statistical path draws its per-group outcomes from
    /// `cache`; the exhaustive path always integrates each bit.
    pub fn apply_attack(
        &mut self,
        profile: &FieldProfile,
        duration: f64,
        sampling: Sampling,
        cache: &mut ExposureCache,
    ) -> Result<AttackEffect> {
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(MemoryError::InvalidDuration(duration));
        }
        profile.validate()?;
        match sampling {
            Sampling::Exhaustive => self.apply_exhaustive(profile, duration),
            Sampling::Statistical { sample_size, seed } => {
                let table = cache.table(&self.data_params, &self.sensor_params, profile, duration)?;
                Ok(self.apply_table(&table, sample_size, seed))
            }
        }
    }

    fn apply_exhaustive(&mut self, profile: &FieldProfile, duration: f64) -> Result<AttackEffect> {
        let cells: Vec<(usize, usize, CellClass, Bit)> =
            self.bits().map(|(r, c)| (r, c, self.class_of(r), self.bit(r, c))).collect();
        let outcomes: Vec<std::result::Result<ExposureOutcome, MagneticsError>> = cells
            .par_iter()
            .map(|&(_, _, class, bit)| simulate_exposure(bit, self.params_for(class), profile, duration))
            .collect();
        let mut effect = AttackEffect::default();
        for (&(r, c, class, _), out) in cells.iter().zip(outcomes) {
            let out = out?;
            let (count, onset) = match class {
                CellClass::Data => (&mut effect.data_bits_flipped, &mut effect.data_onset),
                CellClass::Sensor => (&mut effect.sensor_bits_flipped, &mut effect.sensor_onset),
            };
            if let Some(t) = out.first_change_time {
                *onset = Some(onset.map_or(t, |o: f64| o.min(t)));
            }
            if out.flipped {
                *count += 1;
                self.flip_bit(r, c);
            }
        }
        Ok(effect)
    }

    fn apply_table(&mut self, table: &ExposureTable, sample_size: usize, seed: u64) -> AttackEffect {
        let mut effect = AttackEffect::default();
        let mut flipped_data = Vec::new();
        // Group membership is fixed by the contents before the exposure.
        let masks: Vec<_> = ExposureTable::groups()
            .into_iter()
            .map(|(class, bit)| (class, bit, self.group_mask(class, bit)))
            .collect();
        for (class, bit, mask) in masks {
            let out = table.get(class, bit);
            if mask.is_empty() {
                continue;
            }
            let onset = match class {
                CellClass::Data => &mut effect.data_onset,
                CellClass::Sensor => &mut effect.sensor_onset,
            };
            if let Some(t) = out.first_change_time {
                *onset = Some(onset.map_or(t, |o: f64| o.min(t)));
            }
            if !out.flipped {
                continue;
            }
            match class {
                CellClass::Data => {
                    effect.data_bits_flipped += mask.count();
                    flipped_data.extend(mask.iter());
                }
                CellClass::Sensor => effect.sensor_bits_flipped += mask.count(),
            }
            self.xor_mask(&mask);
        }
        flipped_data.sort_unstable();
        let take = sample_size.min(flipped_data.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        effect.sampled_data_bits = sample(&mut rng, flipped_data.len(), take)
            .into_iter()
            .map(|k| (flipped_data[k] / self.cols, flipped_data[k] % self.cols))
            .collect();
        effect
    }
}
