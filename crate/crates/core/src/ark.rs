//! Archival Resource Keys.
//!
//! A name is `shoulder ‖ blade ‖ check`, all drawn from the 29-character
//! betanumeric alphabet. The check character is the noid mod-29 weighted
//! sum over `naan "/" shoulder blade`, so it detects any single-character
//! substitution and most adjacent transpositions as long as the checked
//! string stays shorter than 29 characters.

use std::collections::HashSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ALPHABET: &[u8; 29] = b"0123456789bcdfghjkmnpqrstvwxz";
pub const DEFAULT_SHOULDER: &str = "t1";
pub const DEFAULT_BLADE_LEN: usize = 16;
pub const MIN_BLADE_LEN: usize = 8;
/// Collision retries after the first attempt.
pub const MAX_MINT_RETRIES: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ArkError {
    #[error("malformed ARK: {0}")]
    Malformed(String),
    #[error("check character mismatch (expected '{expected}', found '{found}')")]
    BadCheck { expected: char, found: char },
    #[error("no free name after {0} attempts")]
    Exhausted(usize),
    #[error("unknown ARK {0}")]
    Unknown(String),
    #[error("ARK {0} is already bound to a target")]
    AlreadyBound(String),
}

/// Position of `c` in the alphabet; characters outside it weigh zero.
pub fn ordinal(c: char) -> usize {
    ALPHABET
        .iter()
        .position(|&a| a as char == c)
        .unwrap_or(0)
}

pub fn in_alphabet(c: char) -> bool {
    c.is_ascii() && ALPHABET.contains(&(c as u8))
}

pub fn check_char(s: &str) -> char {
    let sum = s
        .chars()
        .enumerate()
        .map(|(i, c)| (i + 1) * ordinal(c))
        .sum::<usize>();
    ALPHABET[sum % ALPHABET.len()] as char
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArkName {
    pub naan: String,
    pub shoulder: String,
    pub blade: String,
    pub check: char,
}

impl ArkName {
    /// Builds a name and computes its check character.
    pub fn new(naan: &str, shoulder: &str, blade: &str) -> Result<Self, ArkError> {
        validate_naan(naan)?;
        validate_body(shoulder, blade)?;
        let check = check_char(&format!("{naan}/{shoulder}{blade}"));
        Ok(Self {
            naan: naan.to_owned(),
            shoulder: shoulder.to_owned(),
            blade: blade.to_owned(),
            check,
        })
    }

    /// `shoulder ‖ blade ‖ check`.
    pub fn name(&self) -> String {
        format!("{}{}{}", self.shoulder, self.blade, self.check)
    }

    pub fn is_valid(&self) -> bool {
        check_char(&format!("{}/{}{}", self.naan, self.shoulder, self.blade)) == self.check
    }

    pub fn resolver_path(&self) -> String {
        format!("/{self}")
    }
}

impl fmt::Display for ArkName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ark:/{}/{}", self.naan, self.name())
    }
}

impl std::str::FromStr for ArkName {
    type Err = ArkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

fn validate_naan(naan: &str) -> Result<(), ArkError> {
    if naan.is_empty() || !naan.bytes().all(|b| b.is_ascii_digit()) {
        return Err(ArkError::Malformed(format!("NAAN must be a digit string, got {naan:?}")));
    }
    Ok(())
}

fn validate_body(shoulder: &str, blade: &str) -> Result<(), ArkError> {
    if let Some(c) = shoulder.chars().chain(blade.chars()).find(|&c| !in_alphabet(c)) {
        return Err(ArkError::Malformed(format!("character {c:?} outside the betanumeric alphabet")));
    }
    if blade.len() < MIN_BLADE_LEN {
        return Err(ArkError::Malformed(format!(
            "blade {blade:?} shorter than {MIN_BLADE_LEN} characters"
        )));
    }
    Ok(())
}

/// Splits a name body (without check char) at the first-digit shoulder
/// boundary: leading letters plus the first digit form the shoulder.
fn split_shoulder(body: &str) -> (&str, &str) {
    match body.find(|c: char| c.is_ascii_digit()) {
        Some(i) if i > 0 => body.split_at(i + 1),
        _ => ("", body),
    }
}

/// Parses `ark:/NAAN/name` or `ark:NAAN/name`. Hyphens in the name are
/// ignored and the scheme label is case-insensitive.
pub fn parse(s: &str) -> Result<ArkName, ArkError> {
    let s = s.trim();
    let rest = match s.get(..4) {
        Some(scheme) if scheme.eq_ignore_ascii_case("ark:") => &s[4..],
        _ => return Err(ArkError::Malformed(format!("missing ark: scheme in {s:?}"))),
    };
    let rest = rest.strip_prefix('/').unwrap_or(rest);
    let (naan, name) = rest
        .split_once('/')
        .ok_or_else(|| ArkError::Malformed(format!("no NAAN/name separator in {s:?}")))?;
    validate_naan(naan)?;
    let name: String = name.chars().filter(|&c| c != '-').collect();
    let mut chars = name.chars();
    let found = chars
        .next_back()
        .ok_or_else(|| ArkError::Malformed("empty name".into()))?;
    let body = chars.as_str();
    let (shoulder, blade) = split_shoulder(body);
    validate_body(shoulder, blade)?;
    let expected = check_char(&format!("{naan}/{body}"));
    if expected != found {
        return Err(ArkError::BadCheck { expected, found });
    }
    Ok(ArkName {
        naan: naan.to_owned(),
        shoulder: shoulder.to_owned(),
        blade: blade.to_owned(),
        check: found,
    })
}

/// Uniqueness authority consulted while minting.
pub trait ArkRegistry {
    type Error: From<ArkError>;

    /// Registers the name; `Ok(false)` signals the name is taken.
    fn try_register(&mut self, ark: &ArkName) -> Result<bool, Self::Error>;
}

impl ArkRegistry for HashSet<String> {
    type Error = ArkError;

    fn try_register(&mut self, ark: &ArkName) -> Result<bool, ArkError> {
        Ok(self.insert(ark.to_string()))
    }
}

pub fn random_blade<R: Rng + ?Sized>(rng: &mut R, len: usize) -> String {
    (0..len)
        .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())] as char)
        .collect()
}

/// Mints a fresh name, retrying on registry collisions.
pub fn mint<R, G>(
    naan: &str,
    shoulder: &str,
    blade_len: usize,
    rng: &mut R,
    registry: &mut G,
) -> Result<ArkName, G::Error>
where
    R: Rng + ?Sized,
    G: ArkRegistry + ?Sized,
{
    let attempts = MAX_MINT_RETRIES + 1;
    for _ in 0..attempts {
        let ark = ArkName::new(naan, shoulder, &random_blade(rng, blade_len))?;
        if registry.try_register(&ark)? {
            return Ok(ark);
        }
    }
    Err(ArkError::Exhausted(attempts).into())
}
