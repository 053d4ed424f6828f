//! Fixed-width bit strings used for canonical filter memory.
//!
//! Layout is little-endian at the bit level: bit `i` of the string is bit
//! `i % 8` of byte `i / 8`. Canonical serialization prefixes the packed
//! bytes with the bit length as a little-endian `u64`.

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitBuf {
    bytes: Vec<u8>,
    len_bits: u64,
}

impl BitBuf {
    pub fn new() -> Self {
        BitBuf { bytes: Vec::new(), len_bits: 0 }
    }

    pub fn with_capacity_bits(bits: u64) -> Self {
        BitBuf {
            bytes: Vec::with_capacity(bits.div_ceil(8) as usize),
            len_bits: 0,
        }
    }

    pub fn len_bits(&self) -> u64 {
        self.len_bits
    }

    pub fn push_bit(&mut self, bit: bool) {
        let byte = (self.len_bits / 8) as usize;
        if byte == self.bytes.len() {
            self.bytes.push(0);
        }
        if bit {
            self.bytes[byte] |= 1 << (self.len_bits % 8);
        }
        self.len_bits += 1;
    }

    /// Appends `width` bits of `value`, least-significant bit first.
    pub fn push_bits(&mut self, value: u64, width: u32) {
        debug_assert!(width <= 64);
        debug_assert!(width == 64 || value < (1u64 << width));
        for i in 0..width {
            self.push_bit((value >> i) & 1 == 1);
        }
    }

    pub fn bit(&self, index: u64) -> bool {
        debug_assert!(index < self.len_bits);
        (self.bytes[(index / 8) as usize] >> (index % 8)) & 1 == 1
    }

    pub fn set_bit(&mut self, index: u64, value: bool) {
        debug_assert!(index < self.len_bits);
        let byte = (index / 8) as usize;
        let mask = 1u8 << (index % 8);
        if value {
            self.bytes[byte] |= mask;
        } else {
            self.bytes[byte] &= !mask;
        }
    }

    /// Reads `width` bits starting at `offset`, least-significant first.
    pub fn bits(&self, offset: u64, width: u32) -> u64 {
        let mut value = 0u64;
        for i in 0..u64::from(width) {
            value |= u64::from(self.bit(offset + i)) << i;
        }
        value
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Canonical byte layout: little-endian `u64` bit length, then the
    /// packed bits.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.bytes.len());
        out.extend_from_slice(&self.len_bits.to_le_bytes());
        out.extend_from_slice(&self.bytes);
        out
    }

    pub fn deserialize(data: &[u8]) -> Option<Self> {
        if data.len() < 8 {
            return None;
        }
        let len_bits = u64::from_le_bytes(data[..8].try_into().ok()?);
        let bytes = data[8..].to_vec();
        if bytes.len() as u64 != len_bits.div_ceil(8) {
            return None;
        }
        Some(BitBuf { bytes, len_bits })
    }
}

impl Default for BitBuf {
    fn default() -> Self {
        Self::new()
    }
}

/// Bits needed to store one of `count` distinct values (`count >= 1`).
pub fn bits_for(count: u64) -> u32 {
    if count <= 1 {
        0
    } else {
        64 - (count - 1).leading_zeros()
    }
}
