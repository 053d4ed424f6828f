//! The warmup one-way protocol for history-independent monotone filters.
//!
//! Alice holds n distinct keys. She transfers a filter built over all of
//! them, then sends each key conditioned on a pair of filter states in
//! Bob's hands: an indicator for whether the key already falls in the
//! smaller state's accepted set, then either its rank inside the accepted
//! set difference or the raw key. For the first s rounds Bob grows a second
//! filter by insertion; for the rest he shrinks the transferred one by
//! deletion. Decoding needs only the transcript, the shared tape, and
//! Bob's own filter replicas; subtracting the decoded message's ideal cost
//! from the key sequence's information content yields an empirical lower
//! estimate of the filter's space.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accepted::{enumerate_accepted, AcceptedError, AcceptedSet};
use crate::coding::{
    self, code_indicator, code_raw, code_rank, decode_filter_transfer, decode_rank,
    filter_transfer_segment, fixed_width_for, log_falling_factorial, CodingError, SegmentKind,
    StreamDecoder, StreamEncoder, StreamPayload, Transcript,
};
use crate::filter::{self, FilterCore, FilterError, FilterParams, ImplId};
use crate::tape::{domain, RandomTape};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Accepted(#[from] AcceptedError),
    #[error(transparent)]
    Coding(#[from] CodingError),
    #[error("protocol requires a history-independent monotone implementation, got {0}")]
    UnsupportedImpl(ImplId),
    #[error("invalid schedule: {0}")]
    BadSchedule(String),
    #[error("monotonicity violated at round {round}: accepted set of G is not inside F")]
    MonotonicityViolation { round: u64 },
    #[error("filter bug at round {round}: key {key} missing from the coding set")]
    FilterBug { round: u64, key: u64 },
    #[error("decode failure: {0}")]
    DecodeFailure(String),
    #[error("divisibility: {0}")]
    Divisibility(String),
    #[error("operation budget exceeded: used {used}, budget {budget}")]
    BudgetExceeded { used: u64, budget: u64 },
}

/// Ideal accounting only, or ideal plus a real decodable bitstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccountingMode {
    Ideal,
    Stream,
}

impl std::str::FromStr for AccountingMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ideal" => Ok(AccountingMode::Ideal),
            "stream" => Ok(AccountingMode::Stream),
            other => Err(format!("unknown accounting mode `{other}`")),
        }
    }
}

/// Per-round filter indices: in round k Alice codes against states
/// (F_{r_k}, G_{l_k}) with l_k < k <= r_k.
#[derive(Debug, Clone, Copy)]
pub struct ScheduleParams {
    pub n: u64,
    pub s: u64,
}

impl ScheduleParams {
    pub fn new(n: u64, s: u64) -> Result<Self, ProtocolError> {
        if s > n {
            return Err(ProtocolError::BadSchedule(format!("s = {s} exceeds n = {n}")));
        }
        Ok(ScheduleParams { n, s })
    }

    pub fn ell(&self, k: u64) -> u64 {
        debug_assert!(k >= 1 && k <= self.n);
        if k <= self.s { k - 1 } else { self.s }
    }

    pub fn r(&self, k: u64) -> u64 {
        debug_assert!(k >= 1 && k <= self.n);
        if k <= self.s { self.n } else { k }
    }

    /// Round order: ascending through the insertion stage, then descending
    /// through the deletion stage.
    pub fn rounds(&self) -> Vec<u64> {
        (1..=self.s).chain((self.s + 1..=self.n).rev()).collect()
    }
}

/// One completed warmup run.
#[derive(Debug)]
pub struct WarmupRun {
    pub impl_id: ImplId,
    pub params: FilterParams,
    pub s: u64,
    pub seed: u64,
    pub mode: AccountingMode,
    pub keys: Vec<u64>,
    pub transcript: Transcript,
    /// log2 of the falling factorial u^(n): the information content of the
    /// key sequence.
    pub info_bound: f64,
    /// Accounted filter-transfer cost (space_bits).
    pub filter_bits: f64,
    /// Ideal message bits excluding the filter transfer.
    pub payload_bits: f64,
    /// info_bound - payload_bits when the decoder succeeded, NaN otherwise.
    pub derived_bound: f64,
    pub decode_ok: bool,
    /// (round index k, indicator) per round, in send order.
    pub indicators: Vec<(u64, bool)>,
    /// Filter operations executed by encoder and decoder together.
    pub ops_total: u64,
    pub stream_total_bits: Option<u64>,
}

/// Empirical lower bound for the filter's space from one decoded run.
pub fn derive_bound(run: &WarmupRun) -> Result<f64, ProtocolError> {
    if !run.decode_ok {
        return Err(ProtocolError::DecodeFailure(
            "derived bound is meaningless without decodability".into(),
        ));
    }
    Ok(run.info_bound - run.payload_bits)
}

struct SendOutcome {
    z: bool,
}

/// Alice's side of one Send: emits indicator plus rank or raw key.
#[allow(clippy::too_many_arguments)]
fn encode_send(
    x: u64,
    a_f: &AcceptedSet,
    a_g: &AcceptedSet,
    params: &FilterParams,
    round: u64,
    transcript: &mut Transcript,
    stream: &mut Option<StreamEncoder>,
) -> Result<SendOutcome, ProtocolError> {
    if !a_g.is_subset_of(a_f) {
        return Err(ProtocolError::MonotonicityViolation { round });
    }
    let z = a_g.contains(x);
    let mut ind = code_indicator(z, params.eps())?;
    if let Some(enc) = stream.as_mut() {
        ind.stream_bits = Some(enc.put_indicator(z));
    }
    transcript.push(ind);
    if !z {
        let diff = a_f.difference_members(a_g);
        let mut seg = code_rank(x, &diff).map_err(|e| match e {
            CodingError::NotInSet(key) => ProtocolError::FilterBug { round, key },
            other => ProtocolError::Coding(other),
        })?;
        let width = fixed_width_for(diff.len() as u64);
        if let Some(enc) = stream.as_mut() {
            seg.stream_bits = Some(enc.put_fixed(seg.payload, width));
        }
        transcript.push(seg);
    } else {
        let mut seg = code_raw(x, params.universe_size)?;
        let width = fixed_width_for(params.universe_size);
        if let Some(enc) = stream.as_mut() {
            seg.stream_bits = Some(enc.put_fixed(seg.payload, width));
        }
        transcript.push(seg);
    }
    Ok(SendOutcome { z })
}

/// Bob's side of one Send: reads the indicator and key code from the
/// transcript (ideal mode) or the bitstream (stream mode), then maps it
/// back to a key through his own accepted sets.
fn decode_send(
    a_f: &AcceptedSet,
    a_g: &AcceptedSet,
    params: &FilterParams,
    segments: &mut std::slice::Iter<'_, coding::TranscriptSegment>,
    stream: &mut Option<StreamDecoder<'_>>,
) -> Result<u64, ProtocolError> {
    fn next<'a>(
        it: &mut std::slice::Iter<'a, coding::TranscriptSegment>,
    ) -> Result<&'a coding::TranscriptSegment, ProtocolError> {
        it.next().ok_or_else(|| ProtocolError::DecodeFailure("transcript exhausted".into()))
    }
    let ind_seg = next(segments)?;
    if ind_seg.kind != SegmentKind::Indicator {
        return Err(ProtocolError::DecodeFailure("expected indicator segment".into()));
    }
    let z = match stream.as_mut() {
        Some(dec) => dec.get_indicator(),
        None => ind_seg.payload == 1,
    };
    if z != (ind_seg.payload == 1) {
        return Err(ProtocolError::DecodeFailure("indicator mismatch against transcript".into()));
    }
    let key_seg = next(segments)?;
    if !z {
        if key_seg.kind != SegmentKind::RankInSet {
            return Err(ProtocolError::DecodeFailure("expected rank segment".into()));
        }
        let diff = a_f.difference_members(a_g);
        let rank = match stream.as_mut() {
            Some(dec) => dec.get_fixed(fixed_width_for(diff.len() as u64))?,
            None => key_seg.payload,
        };
        if rank != key_seg.payload {
            return Err(ProtocolError::DecodeFailure("rank mismatch against transcript".into()));
        }
        Ok(decode_rank(rank, &diff)?)
    } else {
        if key_seg.kind != SegmentKind::RawKey {
            return Err(ProtocolError::DecodeFailure("expected raw segment".into()));
        }
        let key = match stream.as_mut() {
            Some(dec) => dec.get_fixed(fixed_width_for(params.universe_size))?,
            None => key_seg.payload,
        };
        if key != key_seg.payload {
            return Err(ProtocolError::DecodeFailure("raw key mismatch against transcript".into()));
        }
        Ok(key)
    }
}

/// Runs protocol P_s end to end: encode, then decode through Bob's replay,
/// and assemble the run record.
pub fn run_warmup(
    impl_id: ImplId,
    params: FilterParams,
    s: u64,
    seed: u64,
    mode: AccountingMode,
) -> Result<WarmupRun, ProtocolError> {
    if !impl_id.is_monotone() || !impl_id.is_history_independent() {
        return Err(ProtocolError::UnsupportedImpl(impl_id));
    }
    let n = params.capacity;
    let schedule = ScheduleParams::new(n, s)?;
    let tape = RandomTape::new(seed);

    // Alice's private key sequence: tape-driven Fisher-Yates, a domain the
    // decoder never reads.
    let mut key_reader = tape.reader(domain::ALICE_KEYS);
    let mut universe: Vec<u64> = (0..params.universe_size).collect();
    let keys = key_reader.sample_distinct(&mut universe, n as usize);

    let mut alice_f = filter::with_keys(params, tape, impl_id, &keys)?;
    let mut transcript = Transcript::new();
    let mut stream_enc =
        if mode == AccountingMode::Stream { Some(StreamEncoder::new(params.eps())) } else { None };
    transcript.push(filter_transfer_segment(alice_f.core(), stream_enc.as_mut())?);

    // Encoder-side simulation of Bob's replicas (shared tape makes these
    // bit-identical to what the decoder will hold).
    let received_state = alice_f.core().clone().with_ops_reset();
    let mut bob_g = filter::initialize(params, tape, impl_id)?;
    let a_f_full = enumerate_accepted(alice_f.core())?;
    let mut a_g_cur = enumerate_accepted(bob_g.core())?;
    let mut indicators = Vec::with_capacity(n as usize);

    for k in 1..=s {
        let x = keys[(k - 1) as usize];
        let out = encode_send(x, &a_f_full, &a_g_cur, &params, k, &mut transcript, &mut stream_enc)?;
        indicators.push((k, out.z));
        bob_g.insert(x)?;
        a_g_cur = enumerate_accepted(bob_g.core())?;
    }
    let a_g_frozen = a_g_cur;
    for k in (s + 1..=n).rev() {
        let x = keys[(k - 1) as usize];
        let a_f = enumerate_accepted(alice_f.core())?;
        let out = encode_send(x, &a_f, &a_g_frozen, &params, k, &mut transcript, &mut stream_enc)?;
        indicators.push((k, out.z));
        alice_f.delete(x)?;
        debug_assert_eq!(schedule.r(k), if k <= s { n } else { k });
    }
    let stream_payload = stream_enc.map(StreamEncoder::finish);
    let encoder_ops = alice_f.ops() + bob_g.ops();

    // Decoder: only the transcript/bitstream, the shared tape, the
    // transferred state, and its own replicas.
    let decode = decode_warmup(impl_id, params, schedule, tape, received_state, &transcript, stream_payload.as_ref());
    let (decoded, decoder_ops) = decode.unwrap_or_default();
    let decode_ok = decoded == keys;

    let info_bound = log_falling_factorial(params.universe_size, n)?;
    let payload_bits = transcript.payload_ideal();
    let filter_bits = transcript.ideal_of(SegmentKind::FilterTransfer);
    transcript.info_lower_bound = info_bound;
    transcript.stream_total_bits = stream_payload.as_ref().map(StreamPayload::total_bits);

    let ops_total = encoder_ops + decoder_ops;
    let budget = 3 * n;
    if ops_total > budget {
        return Err(ProtocolError::BudgetExceeded { used: ops_total, budget });
    }

    Ok(WarmupRun {
        impl_id,
        params,
        s,
        seed,
        mode,
        keys,
        info_bound,
        filter_bits,
        payload_bits,
        derived_bound: if decode_ok { info_bound - payload_bits } else { f64::NAN },
        decode_ok,
        indicators,
        ops_total,
        stream_total_bits: transcript.stream_total_bits,
        transcript,
    })
}

fn decode_warmup(
    impl_id: ImplId,
    params: FilterParams,
    schedule: ScheduleParams,
    tape: RandomTape,
    received: FilterCore,
    transcript: &Transcript,
    stream_payload: Option<&StreamPayload>,
) -> Result<(Vec<u64>, u64), ProtocolError> {
    let n = schedule.n;
    let s = schedule.s;
    let mut segments = transcript.segments.iter();
    let transfer = segments
        .next()
        .ok_or_else(|| ProtocolError::DecodeFailure("missing filter transfer".into()))?;
    if transfer.kind != SegmentKind::FilterTransfer {
        return Err(ProtocolError::DecodeFailure("first segment must be the filter transfer".into()));
    }
    let mut stream_dec = stream_payload.map(|p| StreamDecoder::new(p, params.eps()));
    // Stream mode reconstructs the state from bits; ideal mode models the
    // transfer as handing over the state itself.
    let mut f_state = match stream_dec.as_mut() {
        Some(dec) => decode_filter_transfer(impl_id, params, tape, dec)?,
        None => received,
    };
    if coding::fnv64(&f_state.serialize_canonical()) != transfer.payload {
        return Err(ProtocolError::DecodeFailure("transferred state digest mismatch".into()));
    }

    let mut g = filter::initialize(params, tape, impl_id)?;
    let mut decoded = vec![u64::MAX; n as usize];
    let a_f_full = enumerate_accepted(&f_state)?;
    let mut a_g_cur = enumerate_accepted(g.core())?;
    for k in 1..=s {
        let x = decode_send(&a_f_full, &a_g_cur, &params, &mut segments, &mut stream_dec)?;
        decoded[(k - 1) as usize] = x;
        g.insert(x)
            .map_err(|e| ProtocolError::DecodeFailure(format!("replay insert failed: {e}")))?;
        a_g_cur = enumerate_accepted(g.core())?;
    }
    let a_g_frozen = a_g_cur;
    for k in (s + 1..=n).rev() {
        let a_f = enumerate_accepted(&f_state)?;
        let x = decode_send(&a_f, &a_g_frozen, &params, &mut segments, &mut stream_dec)?;
        decoded[(k - 1) as usize] = x;
        f_state
            .delete_raw(x)
            .map_err(|e| ProtocolError::DecodeFailure(format!("replay delete failed: {e}")))?;
    }
    Ok((decoded, f_state.ops() + g.ops()))
}
