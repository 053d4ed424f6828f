//! The dynamic-filter abstraction and three reference implementations.
//!
//! A filter's mutable state is a fixed-length bit string (its *memory*);
//! operations may read only the memory, the key argument, and the random
//! tape. The current true key set is tracked separately as a harness-side
//! shadow ([`FilterInstance`]) that enforces the operation contract
//! (no duplicate inserts, no ghost deletes, no capacity overflow) but is
//! invisible to filter logic.
//!
//! Implementations:
//! - `bitmap_exact`: one bit per universe key; zero false positives.
//! - `fingerprint`: a multiset of hashed fingerprints in `[0, ceil(n/eps))`;
//!   the paradigm whose space floor the protocols probe.
//! - `sticky_toy`: fingerprint plus a register remembering the most recently
//!   deleted fingerprint, which the query also accepts. A deliberately
//!   history-dependent, non-monotone witness.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::{bits_for, BitBuf};
use crate::tape::{domain, RandomTape};

/// Default cap on enumerable universes (see `FilterParams::validate`).
pub const DEFAULT_UNIVERSE_CAP: u64 = 1 << 22;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FilterError {
    #[error("unknown filter implementation `{0}`")]
    UnknownImpl(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("key {key} out of range for universe size {universe}")]
    KeyOutOfRange { key: u64, universe: u64 },
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("universe size {0} exceeds the enumeration cap {1}")]
    UniverseTooLarge(u64, u64),
}

/// False-positive rate as an exact rational in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ErrorRate {
    pub num: u64,
    pub den: u64,
}

impl ErrorRate {
    pub fn new(num: u64, den: u64) -> Result<Self, FilterError> {
        if num == 0 || den == 0 || num >= den {
            return Err(FilterError::InvalidParams(format!(
                "error rate {num}/{den} must lie strictly in (0, 1)"
            )));
        }
        if den > 1 << 40 {
            return Err(FilterError::InvalidParams(format!(
                "error rate denominator {den} too large"
            )));
        }
        Ok(ErrorRate { num, den })
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// ceil(k / eps) in exact integer arithmetic.
    fn ceil_div_eps(&self, k: u64) -> u64 {
        let prod = k as u128 * self.den as u128;
        (prod.div_ceil(self.num as u128)) as u64
    }
}

impl fmt::Display for ErrorRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for ErrorRate {
    type Err = FilterError;

    /// Accepts `p/q` or a terminating decimal such as `0.0625`.
    fn from_str(s: &str) -> Result<Self, FilterError> {
        let bad = |_| FilterError::InvalidParams(format!("cannot parse error rate `{s}`"));
        if let Some((p, q)) = s.split_once('/') {
            let num: u64 = p.trim().parse().map_err(bad)?;
            let den: u64 = q.trim().parse().map_err(bad)?;
            return ErrorRate::new(num, den);
        }
        if let Some((int, frac)) = s.split_once('.') {
            if frac.len() > 12 {
                return Err(FilterError::InvalidParams(format!(
                    "decimal `{s}` has too many digits; use p/q"
                )));
            }
            let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(bad)? };
            let frac_val: u64 = frac.parse().map_err(bad)?;
            let den = 10u64.pow(frac.len() as u32);
            let num = int * den + frac_val;
            let g = gcd(num, den);
            return ErrorRate::new(num / g, den / g);
        }
        Err(FilterError::InvalidParams(format!(
            "cannot parse error rate `{s}`; use p/q or a decimal"
        )))
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// Filter parameters: universe `[0, u)`, capacity `n`, error rate `eps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterParams {
    pub universe_size: u64,
    pub capacity: u64,
    pub error_rate: ErrorRate,
}

impl FilterParams {
    pub fn new(universe_size: u64, capacity: u64, error_rate: ErrorRate) -> Result<Self, FilterError> {
        let p = FilterParams { universe_size, capacity, error_rate };
        p.validate(DEFAULT_UNIVERSE_CAP)?;
        Ok(p)
    }

    pub fn validate(&self, universe_cap: u64) -> Result<(), FilterError> {
        if self.capacity == 0 {
            return Err(FilterError::InvalidParams("capacity must be at least 1".into()));
        }
        if self.universe_size <= self.capacity {
            return Err(FilterError::InvalidParams(format!(
                "universe size {} must exceed capacity {}",
                self.universe_size, self.capacity
            )));
        }
        if self.universe_size > universe_cap {
            return Err(FilterError::UniverseTooLarge(self.universe_size, universe_cap));
        }
        Ok(())
    }

    pub fn eps(&self) -> f64 {
        self.error_rate.value()
    }

    /// Fingerprint range `m = ceil(n / eps)`.
    pub fn fingerprint_range(&self) -> u64 {
        self.error_rate.ceil_div_eps(self.capacity)
    }

    /// Sticky-toy fingerprint range `ceil((n + 1) / eps)`: the register can
    /// hold one extra accepted fingerprint, so the range grows by one slot's
    /// worth to keep the false-positive rate at most eps.
    pub fn sticky_range(&self) -> u64 {
        self.error_rate.ceil_div_eps(self.capacity + 1)
    }

    /// `(1 - eps) * n + eps * u`, the normalizer for a-vectors.
    pub fn normalizer(&self) -> f64 {
        let eps = self.eps();
        (1.0 - eps) * self.capacity as f64 + eps * self.universe_size as f64
    }
}

/// Registry of reference implementations, keyed by string id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImplId {
    Fingerprint,
    BitmapExact,
    StickyToy,
}

impl ImplId {
    pub const ALL: [ImplId; 3] = [ImplId::Fingerprint, ImplId::BitmapExact, ImplId::StickyToy];

    pub fn name(&self) -> &'static str {
        match self {
            ImplId::Fingerprint => "fingerprint",
            ImplId::BitmapExact => "bitmap_exact",
            ImplId::StickyToy => "sticky_toy",
        }
    }

    /// History independence: memory is a function of (true set, tape) only.
    pub fn is_history_independent(&self) -> bool {
        !matches!(self, ImplId::StickyToy)
    }

    /// Monotone in the generalized (self-contained suffix) sense.
    pub fn is_monotone(&self) -> bool {
        !matches!(self, ImplId::StickyToy)
    }
}

impl fmt::Display for ImplId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ImplId {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self, FilterError> {
        match s {
            "fingerprint" => Ok(ImplId::Fingerprint),
            "bitmap_exact" => Ok(ImplId::BitmapExact),
            "sticky_toy" => Ok(ImplId::StickyToy),
            other => Err(FilterError::UnknownImpl(other.to_string())),
        }
    }
}

/// One insert or delete, the unit of operational sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FilterOp {
    Insert(u64),
    Delete(u64),
}

impl FilterOp {
    pub fn key(&self) -> u64 {
        match self {
            FilterOp::Insert(x) | FilterOp::Delete(x) => *x,
        }
    }

    pub fn is_insert(&self) -> bool {
        matches!(self, FilterOp::Insert(_))
    }
}

/// Tabulated random hash `U -> [0, m)`, realized by dedicated per-key tape
/// bits. Rejection sampling on `ceil(log2 m)`-bit reads keeps the
/// distribution exactly uniform for every `m`.
#[derive(Debug)]
struct HashTable {
    values: Vec<u32>,
}

impl HashTable {
    fn build(tape: &RandomTape, dom: u64, universe: u64, range: u64) -> Self {
        let values = (0..universe)
            .map(|x| tape.item_reader(dom, x).uniform_below(range) as u32)
            .collect();
        HashTable { values }
    }

    #[inline]
    fn value(&self, key: u64) -> u32 {
        self.values[key as usize]
    }
}

#[derive(Debug, Clone)]
enum ImplState {
    Bitmap { bits: BitBuf },
    Fingerprint { counts: Vec<u32> },
    Sticky { counts: Vec<u32>, register: u32 },
}

/// Raw filter state plus tape handle. Operations here perform no contract
/// checking (out-of-contract calls leave the state undefined); use
/// [`FilterInstance`] anywhere the true set is known.
#[derive(Clone)]
pub struct FilterCore {
    params: FilterParams,
    impl_id: ImplId,
    tape: RandomTape,
    state: ImplState,
    hash: Option<Arc<HashTable>>,
    ops: u64,
}

impl fmt::Debug for FilterCore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FilterCore")
            .field("impl_id", &self.impl_id)
            .field("params", &self.params)
            .field("ops", &self.ops)
            .finish()
    }
}

impl FilterCore {
    fn new_empty(params: FilterParams, tape: RandomTape, impl_id: ImplId) -> Result<Self, FilterError> {
        params.validate(DEFAULT_UNIVERSE_CAP)?;
        let (state, hash) = match impl_id {
            ImplId::BitmapExact => {
                let mut bits = BitBuf::with_capacity_bits(params.universe_size);
                for _ in 0..params.universe_size {
                    bits.push_bit(false);
                }
                (ImplState::Bitmap { bits }, None)
            }
            ImplId::Fingerprint => {
                let m = params.fingerprint_range();
                if m > params.universe_size {
                    return Err(FilterError::InvalidParams(format!(
                        "fingerprint requires ceil(n/eps) = {m} <= u = {}",
                        params.universe_size
                    )));
                }
                let hash = HashTable::build(&tape, domain::FINGERPRINT_HASH, params.universe_size, m);
                (ImplState::Fingerprint { counts: vec![0; m as usize] }, Some(Arc::new(hash)))
            }
            ImplId::StickyToy => {
                let m = params.sticky_range();
                let hash = HashTable::build(&tape, domain::STICKY_HASH, params.universe_size, m);
                (
                    ImplState::Sticky { counts: vec![0; m as usize], register: 0 },
                    Some(Arc::new(hash)),
                )
            }
        };
        Ok(FilterCore { params, impl_id, tape, state, hash, ops: 0 })
    }

    pub fn params(&self) -> &FilterParams {
        &self.params
    }

    pub fn impl_id(&self) -> ImplId {
        self.impl_id
    }

    pub fn tape(&self) -> &RandomTape {
        &self.tape
    }

    /// Lifetime operation count of this state chain (inherited by clones).
    pub fn ops(&self) -> u64 {
        self.ops
    }

    /// Zeroes the operation counter: receiving a transferred state is not
    /// itself filter work.
    pub fn with_ops_reset(mut self) -> Self {
        self.ops = 0;
        self
    }

    fn check_key(&self, key: u64) -> Result<(), FilterError> {
        if key >= self.params.universe_size {
            Err(FilterError::KeyOutOfRange { key, universe: self.params.universe_size })
        } else {
            Ok(())
        }
    }

    #[inline]
    fn fp(&self, key: u64) -> u32 {
        self.hash.as_ref().expect("hashed impl").value(key)
    }

    pub fn query(&self, key: u64) -> Result<bool, FilterError> {
        self.check_key(key)?;
        Ok(match &self.state {
            ImplState::Bitmap { bits } => bits.bit(key),
            ImplState::Fingerprint { counts } => counts[self.fp(key) as usize] > 0,
            ImplState::Sticky { counts, register } => {
                let fp = self.fp(key);
                counts[fp as usize] > 0 || *register == fp + 1
            }
        })
    }

    /// Insert without contract checks. Behavior on a duplicate insert is
    /// whatever the state machine does.
    pub fn insert_raw(&mut self, key: u64) -> Result<(), FilterError> {
        self.check_key(key)?;
        self.ops += 1;
        match &mut self.state {
            ImplState::Bitmap { bits } => {
                bits.set_bit(key, true);
            }
            ImplState::Fingerprint { counts } => {
                let fp = self.hash.as_ref().unwrap().value(key);
                counts[fp as usize] += 1;
            }
            ImplState::Sticky { counts, .. } => {
                let fp = self.hash.as_ref().unwrap().value(key);
                counts[fp as usize] += 1;
            }
        }
        Ok(())
    }

    /// Delete without contract checks.
    pub fn delete_raw(&mut self, key: u64) -> Result<(), FilterError> {
        self.check_key(key)?;
        self.ops += 1;
        match &mut self.state {
            ImplState::Bitmap { bits } => {
                bits.set_bit(key, false);
            }
            ImplState::Fingerprint { counts } => {
                let fp = self.hash.as_ref().unwrap().value(key);
                if counts[fp as usize] == 0 {
                    return Err(FilterError::ContractViolation(format!(
                        "delete of key {key} with absent fingerprint"
                    )));
                }
                counts[fp as usize] -= 1;
            }
            ImplState::Sticky { counts, register } => {
                let fp = self.hash.as_ref().unwrap().value(key);
                if counts[fp as usize] == 0 {
                    return Err(FilterError::ContractViolation(format!(
                        "delete of key {key} with absent fingerprint"
                    )));
                }
                counts[fp as usize] -= 1;
                *register = fp + 1;
            }
        }
        Ok(())
    }

    pub fn apply_raw(&mut self, op: FilterOp) -> Result<(), FilterError> {
        match op {
            FilterOp::Insert(x) => self.insert_raw(x),
            FilterOp::Delete(x) => self.delete_raw(x),
        }
    }

    /// The filter's entire mutable state as a fixed-length bit string.
    pub fn memory_bits(&self) -> BitBuf {
        match &self.state {
            ImplState::Bitmap { bits } => bits.clone(),
            ImplState::Fingerprint { counts } => {
                let cw = counter_width(&self.params);
                let mut out = BitBuf::with_capacity_bits(counts.len() as u64 * u64::from(cw));
                for &c in counts {
                    out.push_bits(u64::from(c), cw);
                }
                out
            }
            ImplState::Sticky { counts, register } => {
                let cw = counter_width(&self.params);
                let rw = bits_for(self.params.sticky_range() + 1);
                let mut out = BitBuf::with_capacity_bits(
                    counts.len() as u64 * u64::from(cw) + u64::from(rw),
                );
                for &c in counts {
                    out.push_bits(u64::from(c), cw);
                }
                out.push_bits(u64::from(*register), rw);
                out
            }
        }
    }

    /// Canonical byte layout: little-endian length-prefixed memory bits.
    pub fn serialize_canonical(&self) -> Vec<u8> {
        self.memory_bits().serialize()
    }

    pub(crate) fn fingerprint_counts(&self) -> Option<&[u32]> {
        match &self.state {
            ImplState::Fingerprint { counts } => Some(counts),
            ImplState::Sticky { counts, .. } => Some(counts),
            ImplState::Bitmap { .. } => None,
        }
    }

    /// Rebuilds a filter from a canonical memory image, as a state-transfer
    /// decoder does. The image length must match the implementation layout.
    pub fn from_memory_bits(
        params: FilterParams,
        tape: RandomTape,
        impl_id: ImplId,
        memory: &BitBuf,
    ) -> Result<Self, FilterError> {
        let mut core = FilterCore::new_empty(params, tape, impl_id)?;
        if memory.len_bits() != memory_len_bits(impl_id, &params) {
            return Err(FilterError::InvalidParams(format!(
                "memory image of {} bits does not match layout of {} bits",
                memory.len_bits(),
                memory_len_bits(impl_id, &params)
            )));
        }
        match &mut core.state {
            ImplState::Bitmap { bits } => *bits = memory.clone(),
            ImplState::Fingerprint { counts } => {
                let cw = counter_width(&params);
                for (j, c) in counts.iter_mut().enumerate() {
                    *c = memory.bits(j as u64 * u64::from(cw), cw) as u32;
                }
            }
            ImplState::Sticky { counts, register } => {
                let cw = counter_width(&params);
                for (j, c) in counts.iter_mut().enumerate() {
                    *c = memory.bits(j as u64 * u64::from(cw), cw) as u32;
                }
                let rw = bits_for(params.sticky_range() + 1);
                *register = memory.bits(counts.len() as u64 * u64::from(cw), rw) as u32;
            }
        }
        Ok(core)
    }

    pub(crate) fn from_fingerprint_counts(
        params: FilterParams,
        tape: RandomTape,
        counts: Vec<u32>,
    ) -> Result<Self, FilterError> {
        let mut core = FilterCore::new_empty(params, tape, ImplId::Fingerprint)?;
        match &mut core.state {
            ImplState::Fingerprint { counts: c } => {
                if counts.len() != c.len() {
                    return Err(FilterError::InvalidParams("fingerprint count length mismatch".into()));
                }
                *c = counts;
            }
            _ => unreachable!(),
        }
        Ok(core)
    }
}

/// Counter field width for the multiset encodings: values 0..=n.
fn counter_width(params: &FilterParams) -> u32 {
    bits_for(params.capacity + 1)
}

/// Memory length in bits for a given implementation and parameters; fixed
/// for the lifetime of an instance.
pub fn memory_len_bits(impl_id: ImplId, params: &FilterParams) -> u64 {
    match impl_id {
        ImplId::BitmapExact => params.universe_size,
        ImplId::Fingerprint => params.fingerprint_range() * u64::from(counter_width(params)),
        ImplId::StickyToy => {
            let m = params.sticky_range();
            m * u64::from(counter_width(params)) + u64::from(bits_for(m + 1))
        }
    }
}

/// log2 of the number of multisets of size at most `n` over `m` symbols,
/// i.e. log2 of sum_{k=0}^{n} C(m+k-1, k).
pub fn log2_multiset_count_le(m: u64, n: u64) -> f64 {
    // log2 C(m+k-1, k) grows by log2((m-1+k)/k) per step; log-sum-exp keeps
    // the total stable for large m.
    let mut log_terms = Vec::with_capacity(n as usize + 1);
    let mut log_c = 0.0f64;
    log_terms.push(log_c);
    for k in 1..=n {
        log_c += ((m - 1 + k) as f64 / k as f64).log2();
        log_terms.push(log_c);
    }
    let max = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = log_terms.iter().map(|&t| (t - max).exp2()).sum();
    max + sum.log2()
}

/// Accounted state size in bits: log2 of the reachable-state count for the
/// multiset-based fingerprint filter, the literal memory length otherwise.
pub fn space_bits(impl_id: ImplId, params: &FilterParams) -> f64 {
    match impl_id {
        ImplId::BitmapExact => params.universe_size as f64,
        ImplId::Fingerprint => log2_multiset_count_le(params.fingerprint_range(), params.capacity),
        ImplId::StickyToy => memory_len_bits(ImplId::StickyToy, params) as f64,
    }
}

/// A filter together with its harness-side shadow of the true key set.
/// Insert/delete enforce the operation contract and raise errors on
/// violations instead of silently corrupting state.
#[derive(Debug, Clone)]
pub struct FilterInstance {
    core: FilterCore,
    true_set: BTreeSet<u64>,
}

/// Creates an empty filter of the named implementation.
pub fn initialize(params: FilterParams, tape: RandomTape, impl_id: ImplId) -> Result<FilterInstance, FilterError> {
    Ok(FilterInstance {
        core: FilterCore::new_empty(params, tape, impl_id)?,
        true_set: BTreeSet::new(),
    })
}

/// `initialize` with the implementation given by its registry id string.
pub fn initialize_by_name(params: FilterParams, tape: RandomTape, impl_name: &str) -> Result<FilterInstance, FilterError> {
    initialize(params, tape, impl_name.parse()?)
}

impl FilterInstance {
    pub fn core(&self) -> &FilterCore {
        &self.core
    }

    pub fn into_core(self) -> FilterCore {
        self.core
    }

    pub fn params(&self) -> &FilterParams {
        self.core.params()
    }

    pub fn impl_id(&self) -> ImplId {
        self.core.impl_id()
    }

    pub fn true_set(&self) -> &BTreeSet<u64> {
        &self.true_set
    }

    pub fn len(&self) -> u64 {
        self.true_set.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.true_set.is_empty()
    }

    pub fn ops(&self) -> u64 {
        self.core.ops()
    }

    pub fn query(&self, key: u64) -> Result<bool, FilterError> {
        self.core.query(key)
    }

    pub fn insert(&mut self, key: u64) -> Result<(), FilterError> {
        if self.true_set.contains(&key) {
            return Err(FilterError::ContractViolation(format!("duplicate insert of key {key}")));
        }
        if self.true_set.len() as u64 >= self.core.params.capacity {
            return Err(FilterError::ContractViolation(format!(
                "insert of key {key} beyond capacity {}",
                self.core.params.capacity
            )));
        }
        self.core.insert_raw(key)?;
        self.true_set.insert(key);
        Ok(())
    }

    pub fn delete(&mut self, key: u64) -> Result<(), FilterError> {
        if !self.true_set.contains(&key) {
            return Err(FilterError::ContractViolation(format!("delete of non-member key {key}")));
        }
        self.core.delete_raw(key)?;
        self.true_set.remove(&key);
        Ok(())
    }

    pub fn apply(&mut self, op: FilterOp) -> Result<(), FilterError> {
        match op {
            FilterOp::Insert(x) => self.insert(x),
            FilterOp::Delete(x) => self.delete(x),
        }
    }

    pub fn memory_bits(&self) -> BitBuf {
        self.core.memory_bits()
    }

    pub fn serialize_canonical(&self) -> Vec<u8> {
        self.core.serialize_canonical()
    }
}

/// Convenience: an instance with the given keys inserted in order.
pub fn with_keys(
    params: FilterParams,
    tape: RandomTape,
    impl_id: ImplId,
    keys: &[u64],
) -> Result<FilterInstance, FilterError> {
    let mut f = initialize(params, tape, impl_id)?;
    for &k in keys {
        f.insert(k)?;
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(u: u64, n: u64, num: u64, den: u64) -> FilterParams {
        FilterParams::new(u, n, ErrorRate::new(num, den).unwrap()).unwrap()
    }

    #[test]
    fn error_rate_parsing() {
        assert_eq!("1/16".parse::<ErrorRate>().unwrap(), ErrorRate::new(1, 16).unwrap());
        assert_eq!("0.0625".parse::<ErrorRate>().unwrap(), ErrorRate::new(1, 16).unwrap());
        assert_eq!("0.25".parse::<ErrorRate>().unwrap(), ErrorRate::new(1, 4).unwrap());
        assert!("5/4".parse::<ErrorRate>().is_err());
        assert!("0".parse::<ErrorRate>().is_err());
    }

    #[test]
    fn params_invariants() {
        assert!(FilterParams::new(16, 16, ErrorRate::new(1, 4).unwrap()).is_err());
        assert!(FilterParams::new(16, 0, ErrorRate::new(1, 4).unwrap()).is_err());
        assert!(FilterParams::new(1 << 23, 4, ErrorRate::new(1, 4).unwrap()).is_err());
    }

    #[test]
    fn bitmap_empty_state_is_zero_memory() {
        let p = params(16, 2, 1, 4);
        let f = initialize(p, RandomTape::new(7), ImplId::BitmapExact).unwrap();
        let mem = f.memory_bits();
        assert_eq!(mem.len_bits(), 16);
        assert!((0..16).all(|i| !mem.bit(i)));
    }

    #[test]
    fn fingerprint_empty_state_has_empty_multiset() {
        let p = params(4096, 16, 1, 16);
        let f = initialize(p, RandomTape::new(1), ImplId::Fingerprint).unwrap();
        assert!(f.core().fingerprint_counts().unwrap().iter().all(|&c| c == 0));
        for x in [0u64, 17, 4095] {
            assert!(!f.query(x).unwrap());
        }
    }

    #[test]
    fn initialize_rejects_unknown_impl_and_bad_range() {
        let p = params(16, 2, 1, 4);
        assert!(matches!(
            initialize_by_name(p, RandomTape::new(0), "bloom"),
            Err(FilterError::UnknownImpl(_))
        ));
        // fingerprint needs ceil(n/eps) <= u: n=8, eps=1/4 gives m=32 > u=16
        let p2 = params(16, 8, 1, 4);
        assert!(initialize(p2, RandomTape::new(0), ImplId::Fingerprint).is_err());
    }

    #[test]
    fn bitmap_insert_sets_exact_bit_and_delete_restores_empty() {
        let p = params(16, 2, 1, 4);
        let mut f = initialize(p, RandomTape::new(7), ImplId::BitmapExact).unwrap();
        let empty = f.serialize_canonical();
        f.insert(3).unwrap();
        let mem = f.memory_bits();
        assert!(mem.bit(3));
        assert_eq!((0..16).filter(|&i| mem.bit(i)).count(), 1);
        assert!(f.query(3).unwrap());
        assert!(!f.query(5).unwrap());
        f.delete(3).unwrap();
        assert_eq!(f.serialize_canonical(), empty);
    }

    #[test]
    fn fingerprint_insert_delete_returns_to_empty() {
        let p = params(4096, 16, 1, 16);
        let mut f = initialize(p, RandomTape::new(9), ImplId::Fingerprint).unwrap();
        let empty = f.serialize_canonical();
        f.insert(3).unwrap();
        assert!(f.query(3).unwrap());
        f.delete(3).unwrap();
        assert_eq!(f.serialize_canonical(), empty);
    }

    /// Finds two keys with equal fingerprints by probing queries against a
    /// single-key filter, then checks multiset semantics under deletion.
    #[test]
    fn fingerprint_colliding_pair_survives_one_delete() {
        let p = params(256, 2, 1, 2); // m = 4: collisions guaranteed
        let tape = RandomTape::new(3);
        let mut probe = initialize(p, tape, ImplId::Fingerprint).unwrap();
        probe.insert(0).unwrap();
        let b = (1..256).find(|&x| probe.query(x).unwrap()).expect("collision exists");
        let mut f = initialize(p, tape, ImplId::Fingerprint).unwrap();
        f.insert(0).unwrap();
        f.insert(b).unwrap();
        f.delete(0).unwrap();
        assert!(f.query(b).unwrap(), "one fingerprint copy must remain");
        // query(y) true for every y colliding with an inserted key
        for y in 0..256 {
            if probe.query(y).unwrap() {
                assert!(f.query(y).unwrap());
            }
        }
    }

    #[test]
    fn sticky_toy_is_history_dependent() {
        let p = params(16, 2, 1, 4);
        let mut f = initialize(p, RandomTape::new(7), ImplId::StickyToy).unwrap();
        let empty = f.serialize_canonical();
        f.insert(3).unwrap();
        f.delete(3).unwrap();
        assert_ne!(f.serialize_canonical(), empty, "register must remember the deletion");
        assert!(f.query(3).unwrap(), "recently deleted key stays accepted");
    }

    #[test]
    fn contract_violations_raise_harness_errors() {
        let p = params(16, 2, 1, 4);
        let mut f = initialize(p, RandomTape::new(7), ImplId::BitmapExact).unwrap();
        f.insert(1).unwrap();
        assert!(matches!(f.insert(1), Err(FilterError::ContractViolation(_))));
        assert!(matches!(f.delete(2), Err(FilterError::ContractViolation(_))));
        f.insert(2).unwrap();
        assert!(matches!(f.insert(3), Err(FilterError::ContractViolation(_))));
        assert!(matches!(f.query(99), Err(FilterError::KeyOutOfRange { .. })));
    }

    #[test]
    fn memory_length_is_fixed_across_operations() {
        for impl_id in ImplId::ALL {
            let p = params(64, 4, 1, 8);
            let mut f = initialize(p, RandomTape::new(5), impl_id).unwrap();
            let expected = memory_len_bits(impl_id, &p);
            assert_eq!(f.memory_bits().len_bits(), expected);
            for k in [3u64, 9, 12, 40] {
                f.insert(k).unwrap();
                assert_eq!(f.memory_bits().len_bits(), expected);
            }
            for k in [9u64, 3] {
                f.delete(k).unwrap();
                assert_eq!(f.memory_bits().len_bits(), expected);
            }
        }
    }

    #[test]
    fn space_bits_examples() {
        // bitmap: one bit per universe element
        let p = params(16, 2, 1, 4);
        assert_eq!(space_bits(ImplId::BitmapExact, &p), 16.0);
        // fingerprint n=1, eps=1/16: multisets of size <= 1 over 16 values
        let p1 = FilterParams::new(64, 1, ErrorRate::new(1, 16).unwrap()).unwrap();
        let got = space_bits(ImplId::Fingerprint, &p1);
        assert!((got - 17f64.log2()).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn space_bits_matches_brute_force_multiset_count() {
        // Oracle: count multisets of size <= n over m symbols by dynamic
        // programming, independently of the log-space formula.
        fn count_multisets(m: u64, n: u64) -> u64 {
            // ways[k] = number of multisets of size exactly k
            let mut ways = vec![0u64; n as usize + 1];
            ways[0] = 1;
            for _sym in 0..m {
                for k in 1..=n as usize {
                    // allow any multiplicity: classic stars-and-bars recurrence
                    ways[k] += ways[k - 1];
                }
            }
            ways.iter().sum()
        }
        for (m, n) in [(8u64, 2u64), (16, 1), (16, 3), (5, 5)] {
            let oracle = count_multisets(m, n) as f64;
            let got = log2_multiset_count_le(m, n);
            assert!((got - oracle.log2()).abs() < 1e-9, "m={m} n={n}: {got} vs {}", oracle.log2());
        }
    }

    #[test]
    fn determinism_same_seed_same_memory() {
        let p = params(4096, 16, 1, 16);
        let seq = [5u64, 99, 1000, 7];
        for impl_id in ImplId::ALL {
            let run = |seed: u64| {
                let mut f = initialize(p, RandomTape::new(seed), impl_id).unwrap();
                for &k in &seq {
                    f.insert(k).unwrap();
                }
                f.delete(99).unwrap();
                f.serialize_canonical()
            };
            assert_eq!(run(77), run(77));
        }
    }
}
