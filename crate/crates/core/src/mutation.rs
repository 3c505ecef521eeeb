//! Amino-acid substitutions in `<original><position><changed>` notation,
//! e.g. `E627K`.
//!
//! Parsing trims surrounding whitespace and upper-cases letters. The accepted
//! language is exactly one residue letter, one or more digits, one residue
//! letter. Residue letters are the 20 standard amino-acid codes plus `X`.
//! Deletions, insertions and frameshifts are not substitutions and are
//! rejected.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// The 20 standard amino-acid one-letter codes plus `X` (unknown).
pub const AMINO_ACIDS: &str = "ACDEFGHIKLMNPQRSTVWYX";

pub fn is_amino_acid(c: char) -> bool {
    AMINO_ACIDS.contains(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Mutation {
    original: char,
    position: u32,
    changed: char,
}

impl Mutation {
    pub fn new(original: char, position: u32, changed: char) -> Result<Self, MutationParseError> {
        let original = original.to_ascii_uppercase();
        let changed = changed.to_ascii_uppercase();
        let text = format!("{original}{position}{changed}");
        if !is_amino_acid(original) {
            return Err(MutationParseError::new(&text, 0..1, ParseErrorKind::UnknownResidue));
        }
        if position == 0 {
            return Err(MutationParseError::new(&text, 1..text.len() - 1, ParseErrorKind::ZeroPosition));
        }
        if !is_amino_acid(changed) {
            let n = text.chars().count();
            return Err(MutationParseError::new(&text, n - 1..n, ParseErrorKind::UnknownResidue));
        }
        Ok(Self {
            original,
            position,
            changed,
        })
    }

    pub fn original(&self) -> char {
        self.original
    }

    pub fn position(&self) -> u32 {
        self.position
    }

    pub fn changed(&self) -> char {
        self.changed
    }

    /// Canonical key: upper-case letters, position without leading zeros.
    pub fn normalize(&self) -> String {
        self.to_string()
    }

    /// A "substitution" to the same residue, e.g. `A123A`. Accepted by the
    /// parser, reported by [`lint`].
    pub fn is_synonymous(&self) -> bool {
        self.original == self.changed
    }
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}", self.original, self.position, self.changed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorKind {
    Empty,
    MissingOriginal,
    MissingPosition,
    MissingChanged,
    UnknownResidue,
    UnexpectedCharacter,
    ZeroPosition,
    PositionOverflow,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            ParseErrorKind::Empty => "empty mutation",
            ParseErrorKind::MissingOriginal => "missing original residue",
            ParseErrorKind::MissingPosition => "missing position digits",
            ParseErrorKind::MissingChanged => "missing changed residue",
            ParseErrorKind::UnknownResidue => "not an amino-acid code",
            ParseErrorKind::UnexpectedCharacter => "unexpected character",
            ParseErrorKind::ZeroPosition => "position must be at least 1",
            ParseErrorKind::PositionOverflow => "position out of range",
        };
        f.write_str(msg)
    }
}

/// Parse failure. `span` is a char range into the trimmed input.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid mutation `{input}`: {kind} at {}..{} (`{}`)", span.start, span.end, self.offending())]
pub struct MutationParseError {
    pub input: String,
    pub span: std::ops::Range<usize>,
    pub kind: ParseErrorKind,
}

impl MutationParseError {
    fn new(input: &str, span: std::ops::Range<usize>, kind: ParseErrorKind) -> Self {
        Self {
            input: input.to_string(),
            span,
            kind,
        }
    }

    /// The characters covered by `span`.
    pub fn offending(&self) -> String {
        self.input
            .chars()
            .skip(self.span.start)
            .take(self.span.end.saturating_sub(self.span.start))
            .collect()
    }
}

pub fn parse_mutation(text: &str) -> Result<Mutation, MutationParseError> {
    let trimmed = text.trim();
    let chars: Vec<char> = trimmed.chars().map(|c| c.to_ascii_uppercase()).collect();
    let err = |span: std::ops::Range<usize>, kind| MutationParseError::new(trimmed, span, kind);

    if chars.is_empty() {
        return Err(err(0..0, ParseErrorKind::Empty));
    }
    let n = chars.len();

    let original = chars[0];
    if original.is_ascii_digit() {
        return Err(err(0..0, ParseErrorKind::MissingOriginal));
    }
    if !original.is_ascii_alphabetic() {
        return Err(err(0..1, ParseErrorKind::UnexpectedCharacter));
    }
    if !is_amino_acid(original) {
        return Err(err(0..1, ParseErrorKind::UnknownResidue));
    }

    let digits_end = chars[1..]
        .iter()
        .position(|c| !c.is_ascii_digit())
        .map_or(n, |p| p + 1);
    if digits_end == 1 {
        // Either the string ends here or the next char is a letter/garbage.
        let span_end = if n > 1 { 2 } else { 1 };
        let kind = if n > 1 && !chars[1].is_ascii_alphabetic() {
            ParseErrorKind::UnexpectedCharacter
        } else {
            ParseErrorKind::MissingPosition
        };
        return Err(err(1..span_end, kind));
    }
    if digits_end == n {
        return Err(err(n..n, ParseErrorKind::MissingChanged));
    }

    let changed = chars[digits_end];
    if !changed.is_ascii_alphabetic() {
        return Err(err(digits_end..digits_end + 1, ParseErrorKind::UnexpectedCharacter));
    }
    if digits_end + 1 != n {
        return Err(err(digits_end + 1..n, ParseErrorKind::UnexpectedCharacter));
    }
    if !is_amino_acid(changed) {
        return Err(err(digits_end..n, ParseErrorKind::UnknownResidue));
    }

    let digits: String = chars[1..digits_end].iter().collect();
    let position: u32 = digits
        .parse()
        .map_err(|_| err(1..digits_end, ParseErrorKind::PositionOverflow))?;
    if position == 0 {
        return Err(err(1..digits_end, ParseErrorKind::ZeroPosition));
    }

    Ok(Mutation {
        original,
        position,
        changed,
    })
}

/// Canonical string for a parsed mutation.
pub fn normalize(m: &Mutation) -> String {
    m.normalize()
}

impl FromStr for Mutation {
    type Err = MutationParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_mutation(s)
    }
}

impl Serialize for Mutation {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Mutation {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_mutation(&s).map_err(serde::de::Error::custom)
    }
}

/// Lint findings for accepted-but-suspicious mutations.
pub fn lint<'a>(mutations: impl IntoIterator<Item = &'a Mutation>) -> Vec<String> {
    mutations
        .into_iter()
        .filter(|m| m.is_synonymous())
        .map(|m| format!("{m}: original and changed residue are identical"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_canonical_example() {
        let m = parse_mutation("A123C").unwrap();
        assert_eq!((m.original(), m.position(), m.changed()), ('A', 123, 'C'));
    }

    #[test]
    fn trims_and_uppercases() {
        let m = parse_mutation(" e627k ").unwrap();
        assert_eq!((m.original(), m.position(), m.changed()), ('E', 627, 'K'));
    }

    #[test]
    fn missing_original_is_rejected() {
        let e = parse_mutation("627K").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::MissingOriginal);
    }

    #[test]
    fn leading_zeros_are_dropped() {
        assert_eq!(parse_mutation("a007c").unwrap().normalize(), "A7C");
        assert_eq!(parse_mutation("A007C").unwrap(), parse_mutation("A7C").unwrap());
    }

    #[test]
    fn rejects_invalid_forms() {
        let cases = [
            ("", ParseErrorKind::Empty),
            ("A123", ParseErrorKind::MissingChanged),
            ("AC", ParseErrorKind::MissingPosition),
            ("A", ParseErrorKind::MissingPosition),
            ("A 123C", ParseErrorKind::UnexpectedCharacter),
            ("A123 C", ParseErrorKind::UnexpectedCharacter),
            ("AA123C", ParseErrorKind::MissingPosition),
            ("A123CC", ParseErrorKind::UnexpectedCharacter),
            ("B123C", ParseErrorKind::UnknownResidue),
            ("A123Z", ParseErrorKind::UnknownResidue),
            ("A0C", ParseErrorKind::ZeroPosition),
            ("A99999999999C", ParseErrorKind::PositionOverflow),
            ("Δ123", ParseErrorKind::UnexpectedCharacter),
            ("123del", ParseErrorKind::MissingOriginal),
            ("K123del", ParseErrorKind::UnexpectedCharacter),
            ("A123-", ParseErrorKind::UnexpectedCharacter),
        ];
        for (input, kind) in cases {
            let e = parse_mutation(input).expect_err(input);
            assert_eq!(e.kind, kind, "{input}: {e}");
        }
    }

    #[test]
    fn error_names_offending_span() {
        let e = parse_mutation("A123CC").unwrap_err();
        assert_eq!(e.offending(), "C");
        assert_eq!(e.span, 5..6);
        assert!(e.to_string().contains("A123CC"));
    }

    #[test]
    fn synonymous_substitution_is_accepted_and_linted() {
        let m = parse_mutation("A123A").unwrap();
        assert!(m.is_synonymous());
        assert_eq!(lint([&m]).len(), 1);
    }

    #[test]
    fn serde_uses_canonical_string() {
        let m = parse_mutation("d701n").unwrap();
        assert_eq!(serde_json::to_string(&m).unwrap(), "\"D701N\"");
        let back: Mutation = serde_json::from_str("\"D0701N\"").unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<Mutation>("\"701N\"").is_err());
    }

    fn residue() -> impl Strategy<Value = char> {
        proptest::sample::select(AMINO_ACIDS.chars().collect::<Vec<_>>())
    }

    proptest! {
        #[test]
        fn normalize_round_trips(o in residue(), pos in 1u32..100_000, c in residue(),
                                 zeros in 0usize..3, lower in any::<bool>(), pad in 0usize..3) {
            let mut s = format!("{o}{}{pos}{c}", "0".repeat(zeros));
            if lower { s = s.to_lowercase(); }
            let s = format!("{}{s}{}", " ".repeat(pad), "\t".repeat(pad));
            let m = parse_mutation(&s).unwrap();
            prop_assert_eq!(m.position(), pos);
            let canon = m.normalize();
            prop_assert_eq!(parse_mutation(&canon).unwrap(), m);
            prop_assert_eq!(parse_mutation(&canon).unwrap().normalize(), canon);
        }

        #[test]
        fn accepts_exactly_letter_digits_letter(s in "[A-Za-z0-9 _Δ-]{0,8}") {
            let t = s.trim().to_ascii_uppercase();
            let b = t.as_bytes();
            let expected = b.len() >= 3
                && is_amino_acid(b[0] as char)
                && is_amino_acid(b[b.len() - 1] as char)
                && b[1..b.len() - 1].iter().all(u8::is_ascii_digit)
                && b[1..b.len() - 1].iter().any(|d| *d != b'0')
                && t.is_ascii();
            prop_assert_eq!(parse_mutation(&s).is_ok(), expected, "{:?}", s);
        }
    }
}
