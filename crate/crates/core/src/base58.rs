//! Base58Check encoding and validation for legacy bitcoin addresses.

use sha2::{Digest, Sha256};

pub const ALPHABET: &[u8; 58] = b"123456789ABCDEFGHJKLMNPQRSTUVWXYZabcdefghijkmnopqrstuvwxyz";

/// Version byte of pay-to-pubkey-hash addresses (leading `1`).
pub const P2PKH_VERSION: u8 = 0x00;
/// Version byte of pay-to-script-hash addresses (leading `3`).
pub const P2SH_VERSION: u8 = 0x05;

const INVALID: u8 = 0xff;

const DECODE_MAP: [u8; 128] = {
    let mut map = [INVALID; 128];
    let mut i = 0;
    while i < ALPHABET.len() {
        map[ALPHABET[i] as usize] = i as u8;
        i += 1;
    }
    map
};

pub fn is_base58_char(c: char) -> bool {
    c.is_ascii() && DECODE_MAP[c as usize] != INVALID
}

/// Decodes a base58 string into bytes, `None` on characters outside the alphabet.
pub fn decode(s: &str) -> Option<Vec<u8>> {
    let zeros = s.bytes().take_while(|&b| b == b'1').count();
    // little-endian base-256 accumulator
    let mut acc: Vec<u8> = Vec::with_capacity(s.len());
    for b in s.bytes() {
        if b >= 128 {
            return None;
        }
        let digit = DECODE_MAP[b as usize];
        if digit == INVALID {
            return None;
        }
        let mut carry = digit as u32;
        for byte in acc.iter_mut() {
            carry += (*byte as u32) * 58;
            *byte = (carry & 0xff) as u8;
            carry >>= 8;
        }
        while carry > 0 {
            acc.push((carry & 0xff) as u8);
            carry >>= 8;
        }
    }
    let mut out = vec![0u8; zeros];
    out.extend(acc.iter().rev());
    Some(out)
}

pub fn encode(bytes: &[u8]) -> String {
    let zeros = bytes.iter().take_while(|&&b| b == 0).count();
    let mut digits: Vec<u8> = Vec::with_capacity(bytes.len() * 138 / 100 + 1);
    for &b in bytes {
        let mut carry = b as u32;
        for d in digits.iter_mut() {
            carry += (*d as u32) << 8;
            *d = (carry % 58) as u8;
            carry /= 58;
        }
        while carry > 0 {
            digits.push((carry % 58) as u8);
            carry /= 58;
        }
    }
    let mut out = String::with_capacity(zeros + digits.len());
    out.extend(std::iter::repeat_n('1', zeros));
    out.extend(digits.iter().rev().map(|&d| ALPHABET[d as usize] as char));
    out
}

fn checksum(payload: &[u8]) -> [u8; 4] {
    let first = Sha256::digest(payload);
    let second = Sha256::digest(first);
    [second[0], second[1], second[2], second[3]]
}

pub fn encode_check(version: u8, payload: &[u8]) -> String {
    let mut data = Vec::with_capacity(payload.len() + 5);
    data.push(version);
    data.extend_from_slice(payload);
    let sum = checksum(&data);
    data.extend_from_slice(&sum);
    encode(&data)
}

/// Builds a legacy address string from a 20-byte hash.
pub fn address_from_hash(version: u8, hash160: &[u8; 20]) -> String {
    encode_check(version, hash160)
}

/// True iff `s` is a legacy (P2PKH or P2SH) address with a valid
/// double-SHA256 checksum: 25 decoded bytes, a version byte matching the
/// leading character, 4 trailing checksum bytes.
pub fn is_valid_legacy_address(s: &str) -> bool {
    let expected_version = match s.as_bytes().first() {
        Some(b'1') => P2PKH_VERSION,
        Some(b'3') => P2SH_VERSION,
        _ => return false,
    };
    if !(26..=35).contains(&s.len()) {
        return false;
    }
    let Some(bytes) = decode(s) else {
        return false;
    };
    if bytes.len() != 25 || bytes[0] != expected_version {
        return false;
    }
    checksum(&bytes[..21]) == bytes[21..]
}
