//! Closed token grammar shared by every task.
//!
//! Id layout is fixed: the three specials come first (`[PAD]`=0, `[M]`=1,
//! `[BOS]`=2), then words, then `B` coordinate bins, then object classes.
//! Coordinates are quantized into bins and dequantized to bin centers.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const MASK_ID: TokenId = 1;
pub const BOS_ID: TokenId = 2;

const SPECIALS: [&str; 3] = ["[PAD]", "[M]", "[BOS]"];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("duplicate: {0}")]
    Duplicate(String),
    #[error("out-of-vocabulary word: {0}")]
    UnknownWord(String),
    #[error("special token {0} is not allowed in text")]
    SpecialInText(String),
    #[error("coordinate {0} outside [0, 1]")]
    CoordRange(f64),
    #[error("token {id} at position {position} is not a coordinate token")]
    NotCoord { position: usize, id: TokenId },
    #[error("token id {0} out of range")]
    IdRange(TokenId),
    #[error("invalid vocabulary: {0}")]
    Invalid(String),
    #[error("vocabulary file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Word,
    Coord,
    Class,
    Special,
}

impl TokenKind {
    fn as_str(self) -> &'static str {
        match self {
            TokenKind::Word => "word",
            TokenKind::Coord => "coord",
            TokenKind::Class => "class",
            TokenKind::Special => "special",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "word" => TokenKind::Word,
            "coord" => TokenKind::Coord,
            "class" => TokenKind::Class,
            "special" => TokenKind::Special,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub id: TokenId,
    pub kind: TokenKind,
    pub surface: String,
}

/// Axis-aligned box in normalized scene coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, VocabError> {
        for c in [x1, y1, x2, y2] {
            if !(0.0..=1.0).contains(&c) {
                return Err(VocabError::CoordRange(c));
            }
        }
        if x1 > x2 || y1 > y2 {
            return Err(VocabError::Invalid(format!("inverted box ({x1}, {y1}, {x2}, {y2})")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    index: HashMap<String, TokenId>,
    coord_bins: u32,
    class_names: Vec<String>,
    word_count: u32,
}

impl Vocabulary {
    /// Builds the vocabulary. Specials take ids 0..3, then words, coordinate
    /// bins `<c0>..<c{B-1}>`, and classes, in that order.
    pub fn build(class_names: &[&str], word_list: &[&str], coord_bins: u32) -> Result<Self, VocabError> {
        if class_names.is_empty() || word_list.is_empty() {
            return Err(VocabError::Invalid("class and word lists must be non-empty".into()));
        }
        if coord_bins < 2 {
            return Err(VocabError::Invalid(format!("coord_bins must be >= 2, got {coord_bins}")));
        }
        let mut tokens = Vec::with_capacity(3 + word_list.len() + coord_bins as usize + class_names.len());
        let mut push = |kind: TokenKind, surface: String| {
            tokens.push(Token { id: tokens.len() as TokenId, kind, surface });
        };
        for s in SPECIALS {
            push(TokenKind::Special, s.to_string());
        }
        for w in word_list {
            push(TokenKind::Word, w.to_string());
        }
        for k in 0..coord_bins {
            push(TokenKind::Coord, coord_surface(k));
        }
        for c in class_names {
            push(TokenKind::Class, c.to_string());
        }
        Self::from_tokens(tokens, coord_bins)
    }

    fn from_tokens(tokens: Vec<Token>, coord_bins: u32) -> Result<Self, VocabError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for t in &tokens {
            if t.surface.is_empty() || t.surface.contains(char::is_whitespace) {
                return Err(VocabError::Invalid(format!("bad surface {:?}", t.surface)));
            }
            if index.insert(t.surface.clone(), t.id).is_some() {
                return Err(VocabError::Duplicate(t.surface.clone()));
            }
        }
        let word_count = tokens.iter().filter(|t| t.kind == TokenKind::Word).count() as u32;
        let class_names = tokens.iter().filter(|t| t.kind == TokenKind::Class).map(|t| t.surface.clone()).collect();
        let v = Self { tokens, index, coord_bins, class_names, word_count };
        v.validate()?;
        Ok(v)
    }

    fn validate(&self) -> Result<(), VocabError> {
        for (i, s) in SPECIALS.iter().enumerate() {
            match self.tokens.get(i) {
                Some(t) if t.kind == TokenKind::Special && t.surface == *s => {}
                _ => return Err(VocabError::Invalid(format!("special {s} must have id {i}"))),
            }
        }
        let specials = self.tokens.iter().filter(|t| t.kind == TokenKind::Special).count();
        if specials != SPECIALS.len() {
            return Err(VocabError::Invalid(format!("expected 3 specials, found {specials}")));
        }
        let coord_start = self.coord_start();
        for k in 0..self.coord_bins {
            let t = self
                .tokens
                .get((coord_start + k) as usize)
                .ok_or_else(|| VocabError::Invalid("missing coordinate tokens".into()))?;
            if t.kind != TokenKind::Coord || t.surface != coord_surface(k) {
                return Err(VocabError::Invalid(format!("coordinate bin {k} misplaced")));
            }
        }
        let expected = 3 + self.word_count as usize + self.coord_bins as usize + self.class_names.len();
        if expected != self.tokens.len() {
            return Err(VocabError::Invalid("token kinds are not laid out contiguously".into()));
        }
        if self.class_names.is_empty() {
            return Err(VocabError::Invalid("no class tokens".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn coord_bins(&self) -> u32 {
        self.coord_bins
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn lookup(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(|t| t.surface.as_str())
    }

    pub fn kind(&self, id: TokenId) -> Option<TokenKind> {
        self.tokens.get(id as usize).map(|t| t.kind)
    }

    fn coord_start(&self) -> TokenId {
        3 + self.word_count
    }

    fn class_start(&self) -> TokenId {
        self.coord_start() + self.coord_bins
    }

    pub fn coord_id(&self, bin: u32) -> TokenId {
        assert!(bin < self.coord_bins, "bin {bin} out of range");
        self.coord_start() + bin
    }

    pub fn coord_bin(&self, id: TokenId) -> Option<u32> {
        let start = self.coord_start();
        (start..start + self.coord_bins).contains(&id).then(|| id - start)
    }

    pub fn class_token(&self, class_id: usize) -> TokenId {
        assert!(class_id < self.class_names.len(), "class {class_id} out of range");
        self.class_start() + class_id as TokenId
    }

    pub fn class_of(&self, id: TokenId) -> Option<usize> {
        let start = self.class_start();
        (start..start + self.class_names.len() as TokenId).contains(&id).then(|| (id - start) as usize)
    }

    /// Space-separated surfaces to ids. Specials are rejected.
    pub fn encode_text(&self, phrase: &str) -> Result<Vec<TokenId>, VocabError> {
        if phrase.is_empty() {
            return Ok(Vec::new());
        }
        phrase
            .split(' ')
            .map(|w| match self.lookup(w) {
                Some(id) if self.tokens[id as usize].kind == TokenKind::Special => {
                    Err(VocabError::SpecialInText(w.to_string()))
                }
                Some(id) => Ok(id),
                None => Err(VocabError::UnknownWord(w.to_string())),
            })
            .collect()
    }

    pub fn decode_text(&self, ids: &[TokenId]) -> Result<String, VocabError> {
        let words =
            ids.iter().map(|&id| self.surface(id).ok_or(VocabError::IdRange(id))).collect::<Result<Vec<_>, _>>()?;
        Ok(words.join(" "))
    }

    pub fn quantize(&self, c: f64) -> Result<u32, VocabError> {
        if !(0.0..=1.0).contains(&c) {
            return Err(VocabError::CoordRange(c));
        }
        let b = self.coord_bins;
        Ok(((c * b as f64).floor() as u32).min(b - 1))
    }

    pub fn dequantize(&self, bin: u32) -> f64 {
        (bin as f64 + 0.5) / self.coord_bins as f64
    }

    /// Four coordinate tokens in x1, y1, x2, y2 order.
    pub fn encode_box(&self, b: &BBox) -> Result<[TokenId; 4], VocabError> {
        let mut out = [0; 4];
        for (slot, c) in out.iter_mut().zip(b.coords()) {
            *slot = self.coord_id(self.quantize(c)?);
        }
        Ok(out)
    }

    /// Inverse of [`encode_box`](Self::encode_box); inverted corners are swapped.
    pub fn decode_box(&self, ids: &[TokenId]) -> Result<BBox, VocabError> {
        if ids.len() != 4 {
            return Err(VocabError::Invalid(format!("box needs 4 tokens, got {}", ids.len())));
        }
        let mut c = [0.0; 4];
        for (position, (&id, slot)) in ids.iter().zip(c.iter_mut()).enumerate() {
            let bin = self.coord_bin(id).ok_or(VocabError::NotCoord { position, id })?;
            *slot = self.dequantize(bin);
        }
        let (x1, x2) = if c[0] <= c[2] { (c[0], c[2]) } else { (c[2], c[0]) };
        let (y1, y2) = if c[1] <= c[3] { (c[1], c[3]) } else { (c[3], c[1]) };
        Ok(BBox { x1, y1, x2, y2 })
    }

    /// One `<id>\t<kind>\t<surface>` line per token.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(&format!("{}\t{}\t{}\n", t.id, t.kind.as_str(), t.surface));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, VocabError> {
        let mut tokens = Vec::new();
        let mut coord_bins = 0u32;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |msg: &str| VocabError::Format { line: line_no, msg: msg.to_string() };
            let mut parts = line.split('\t');
            let (Some(id), Some(kind), Some(surface), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(err("expected three tab-separated fields"));
            };
            let id: TokenId = id.parse().map_err(|_| err("bad id"))?;
            if id as usize != tokens.len() {
                return Err(err("ids must be dense and ascending"));
            }
            let kind = TokenKind::parse(kind).ok_or_else(|| err("unknown kind"))?;
            if kind == TokenKind::Coord {
                coord_bins += 1;
            }
            tokens.push(Token { id, kind, surface: surface.to_string() });
        }
        Self::from_tokens(tokens, coord_bins)
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

impl fmt::Display for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Vocabulary(|V|={}, words={}, bins={}, classes={})",
            self.len(),
            self.word_count,
            self.coord_bins,
            self.class_names.len()
        )
    }
}

fn coord_surface(bin: u32) -> String {
    format!("<c{bin}>")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{i}")).collect()
    }

    fn sample_vocab() -> Vocabulary {
        let w = words(40);
        let w: Vec<&str> = w.iter().map(String::as_str).collect();
        Vocabulary::build(&["bus", "truck", "car", "ship", "plane"], &w, 100).unwrap()
    }

    #[test]
    fn size_and_specials() {
        let v = sample_vocab();
        assert_eq!(v.len(), 148);
        assert_eq!(v.lookup("[PAD]"), Some(0));
        assert_eq!(v.lookup("[M]"), Some(1));
        assert_eq!(v.lookup("[BOS]"), Some(2));
        let coords: Vec<_> = v.tokens().iter().filter(|t| t.kind == TokenKind::Coord).collect();
        assert_eq!(coords.len(), 100);
        assert!(coords.windows(2).all(|w| w[1].id == w[0].id + 1));
    }

    #[test]
    fn duplicate_word_is_named() {
        let err = Vocabulary::build(&["bus"], &["road", "river", "road"], 10).unwrap_err();
        assert_eq!(err.to_string(), "duplicate: road");
        let err = Vocabulary::build(&["bus"], &["bus"], 10).unwrap_err();
        assert!(matches!(err, VocabError::Duplicate(s) if s == "bus"));
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(Vocabulary::build(&[], &["a"], 10).is_err());
        assert!(Vocabulary::build(&["a"], &["b"], 1).is_err());
    }

    #[test]
    fn surface_lookup_round_trip() {
        let v = sample_vocab();
        for t in v.tokens() {
            assert_eq!(v.lookup(&t.surface), Some(t.id));
            assert_eq!(v.surface(t.id), Some(t.surface.as_str()));
        }
    }

    #[test]
    fn encode_text_cases() {
        let v = Vocabulary::build(&["bus"], &["two", "buses"], 10).unwrap();
        assert_eq!(v.encode_text("two buses").unwrap(), vec![v.lookup("two").unwrap(), v.lookup("buses").unwrap()]);
        assert_eq!(v.encode_text("").unwrap(), Vec::<TokenId>::new());
        assert!(matches!(v.encode_text("two cars"), Err(VocabError::UnknownWord(w)) if w == "cars"));
        assert!(matches!(v.encode_text("two [M]"), Err(VocabError::SpecialInText(_))));
    }

    #[test]
    fn encode_box_examples() {
        let v = sample_vocab();
        let bins = |ids: [TokenId; 4]| ids.map(|i| v.coord_bin(i).unwrap());
        let full = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(bins(v.encode_box(&full).unwrap()), [0, 0, 99, 99]);
        let b = BBox::new(0.375, 0.5, 0.625, 0.75).unwrap();
        assert_eq!(bins(v.encode_box(&b).unwrap()), [37, 50, 62, 75]);
        let bad = BBox { x1: -0.1, y1: 0.0, x2: 0.5, y2: 0.5 };
        assert!(matches!(v.encode_box(&bad), Err(VocabError::CoordRange(c)) if c == -0.1));
    }

    #[test]
    fn decode_box_examples() {
        let v = sample_vocab();
        let ids = |b: [u32; 4]| b.map(|k| v.coord_id(k));
        let b = v.decode_box(&ids([0, 0, 99, 99])).unwrap();
        approx::assert_abs_diff_eq!(b.x1, 0.005, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(b.y2, 0.995, epsilon = 1e-12);
        let b = v.decode_box(&ids([62, 50, 37, 75])).unwrap();
        for (got, want) in b.coords().iter().zip([0.375, 0.505, 0.625, 0.755]) {
            approx::assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        let mut mixed = ids([1, 2, 3, 4]);
        mixed[2] = v.lookup("w3").unwrap();
        assert!(matches!(
            v.decode_box(&mixed),
            Err(VocabError::NotCoord { position: 2, id }) if id == mixed[2]
        ));
    }

    #[test]
    fn text_file_round_trip_and_validation() {
        let v = sample_vocab();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back.tokens(), v.tokens());
        assert_eq!(back.hash(), v.hash());

        let gap = v.to_text().replacen("3\tword", "4\tword", 1);
        assert!(matches!(Vocabulary::from_text(&gap), Err(VocabError::Format { line: 4, .. })));
        let swapped = v.to_text().replacen("0\tspecial\t[PAD]", "0\tspecial\t[XX]", 1);
        assert!(Vocabulary::from_text(&swapped).is_err());
    }

    proptest! {
        #[test]
        fn text_round_trip(picks in proptest::collection::vec(0usize..45, 0..12)) {
            let v = sample_vocab();
            let pool: Vec<&str> = v.tokens()[3..].iter().map(|t| t.surface.as_str()).collect();
            let phrase = picks.iter().map(|&i| pool[i]).collect::<Vec<_>>().join(" ");
            let ids = v.encode_text(&phrase).unwrap();
            prop_assert!(ids.iter().all(|&i| v.kind(i) != Some(TokenKind::Special)));
            prop_assert_eq!(v.decode_text(&ids).unwrap(), phrase);
        }

        #[test]
        fn box_round_trip_error_bound(a in 0.0..=1.0f64, b in 0.0..=1.0f64, c in 0.0..=1.0f64, d in 0.0..=1.0f64) {
            let v = sample_vocab();
            let bx = BBox::new(a.min(c), b.min(d), a.max(c), b.max(d)).unwrap();
            let back = v.decode_box(&v.encode_box(&bx).unwrap()).unwrap();
            for (x, y) in bx.coords().iter().zip(back.coords()) {
                prop_assert!((x - y).abs() <= 1.0 / 100.0 + 1e-12);
            }
        }
    }
}
