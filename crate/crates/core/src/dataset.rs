//! Manifests, caption statistics, the character tokenizer, token-sequence
//! layout and the procedural base-training glyph set.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::imaging::{self, ImageBuffer};
use crate::rng::DetRng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
}

/// One manifest line. `image_path` is resolved against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmojiRecord {
    pub image_path: PathBuf,
    pub caption: String,
    #[serde(default)]
    pub split: Split,
}

/// A caption with its preprocessed RGB image held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub caption: String,
    pub image: ImageBuffer,
}

#[derive(Deserialize)]
struct RawRecord {
    image_path: Option<String>,
    caption: Option<String>,
    #[serde(default)]
    split: Split,
}

/// Reads a line-delimited JSON manifest (`{"image_path": .., "caption": .., "split"?: ..}`).
///
/// Blank lines are skipped. Duplicate captions are kept.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<EmojiRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let image = raw.image_path.ok_or_else(|| Error::Parse {
            line: line_no,
            message: "missing field `image_path`".into(),
        })?;
        let caption = raw.caption.ok_or_else(|| Error::Parse {
            line: line_no,
            message: "missing field `caption`".into(),
        })?;
        if caption.trim().is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "caption is empty".into(),
            });
        }
        let resolved = root.join(&image);
        if !resolved.is_file() {
            return Err(Error::io(
                resolved,
                std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    "image listed in manifest not found",
                ),
            ));
        }
        out.push(EmojiRecord {
            image_path: resolved,
            caption,
            split: raw.split,
        });
    }
    Ok(out)
}

/// Writes records as a manifest, storing image paths relative to `root` when possible.
pub fn write_manifest(path: impl AsRef<Path>, records: &[EmojiRecord]) -> Result<()> {
    let path = path.as_ref();
    let root = path.parent().unwrap_or(Path::new("."));
    let mut text = String::new();
    for r in records {
        let rel = r.image_path.strip_prefix(root).unwrap_or(&r.image_path);
        let line = serde_json::json!({
            "image_path": rel.to_string_lossy(),
            "caption": r.caption,
            "split": r.split,
        });
        text.push_str(&line.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads an emoji image and preprocesses it: RGBA is flattened onto white
/// (alpha < 128), then the result is resized to `side` x `side`.
pub fn load_rgb(path: impl AsRef<Path>, side: usize) -> Result<ImageBuffer> {
    let img = imaging::read_png(path)?;
    preprocess(&img, side)
}

pub fn preprocess(img: &ImageBuffer, side: usize) -> Result<ImageBuffer> {
    let rgb = if img.is_rgba() {
        imaging::flatten_alpha(img, imaging::DEFAULT_ALPHA_THRESHOLD)?
    } else {
        img.clone()
    };
    if rgb.width() == side && rgb.height() == side {
        Ok(rgb)
    } else {
        imaging::resize_bicubic(&rgb, side, side)
    }
}

/// Word-count histogram over captions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CaptionStats {
    pub total: usize,
    pub unique: usize,
    pub words: BTreeMap<usize, usize>,
}

impl CaptionStats {
    /// Fraction of captions with one or two words.
    pub fn short_fraction(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let short = self.words.get(&1).unwrap_or(&0) + self.words.get(&2).unwrap_or(&0);
        short as f64 / self.total as f64
    }

    /// Plain-text form used for committed stats files.
    pub fn to_text(&self) -> String {
        let mut s = format!("records {}\nunique_captions {}\n", self.total, self.unique);
        for (k, v) in &self.words {
            s.push_str(&format!("words {k} {v}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = CaptionStats::default();
        for (i, line) in text.lines().enumerate() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Parse {
                line: i + 1,
                message: format!("unrecognized stats line `{line}`"),
            };
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
            match parts.as_slice() {
                [] => {}
                ["records", n] => out.total = num(n)?,
                ["unique_captions", n] => out.unique = num(n)?,
                ["words", k, v] => {
                    out.words.insert(num(k)?, num(v)?);
                }
                _ => return Err(bad()),
            }
        }
        Ok(out)
    }
}

pub fn caption_stats<'a>(captions: impl IntoIterator<Item = &'a str>) -> CaptionStats {
    let mut stats = CaptionStats::default();
    let mut seen = HashSet::new();
    for c in captions {
        stats.total += 1;
        seen.insert(c);
        *stats.words.entry(c.split_whitespace().count()).or_insert(0) += 1;
    }
    stats.unique = seen.len();
    stats
}

/// NFC + lowercase normalization applied before tokenization.
pub fn normalize_caption(caption: &str) -> String {
    let lowered: String = caption.nfc().collect::<String>().to_lowercase();
    lowered.nfc().collect()
}

pub const PAD: usize = 0;
pub const BOS_TEXT: usize = 1;
pub const BOS_IMAGE: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos_text>", "<bos_image>", "<unk>"];

/// Character-level vocabulary. Ids 0..4 are the specials, followed by the
/// observed characters in code-point order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<char>,
    #[serde(skip)]
    index: HashMap<char, usize>,
}

impl Vocabulary {
    pub fn from_symbols(mut symbols: Vec<char>) -> Self {
        symbols.sort_unstable();
        symbols.dedup();
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + SPECIALS.len()))
            .collect();
        Self { symbols, index }
    }

    pub fn size(&self) -> usize {
        self.symbols.len() + SPECIALS.len()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn to_json(&self) -> Result<String> {
        let s: String = self.symbols.iter().collect();
        Ok(serde_json::to_string(&serde_json::json!({ "symbols": s }))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Wire {
            symbols: String,
        }
        let w: Wire = serde_json::from_str(text)?;
        Ok(Self::from_symbols(w.symbols.chars().collect()))
    }
}

pub fn build_vocab<'a>(captions: impl IntoIterator<Item = &'a str>) -> Vocabulary {
    let set: BTreeSet<char> = captions
        .into_iter()
        .flat_map(|c| normalize_caption(c).chars().collect::<Vec<_>>())
        .collect();
    Vocabulary::from_symbols(set.into_iter().collect())
}

/// `[BOS_TEXT, c1, .., PAD..]` of exactly `t_text` ids; captions longer than
/// `t_text - 1` characters are truncated.
pub fn encode_caption(vocab: &Vocabulary, caption: &str, t_text: usize) -> Vec<usize> {
    assert!(
        t_text >= 2,
        "text segment needs room for BOS and one symbol"
    );
    let mut ids = Vec::with_capacity(t_text);
    ids.push(BOS_TEXT);
    ids.extend(
        normalize_caption(caption)
            .chars()
            .take(t_text - 1)
            .map(|c| vocab.id(c)),
    );
    ids.resize(t_text, PAD);
    ids
}

pub fn decode_caption(vocab: &Vocabulary, ids: &[usize]) -> String {
    ids.iter()
        .skip_while(|&&id| id == BOS_TEXT)
        .take_while(|&&id| id != PAD)
        .map(|&id| match id {
            BOS_TEXT | BOS_IMAGE => '\u{0}',
            UNK => '\u{FFFD}',
            id => vocab
                .symbols
                .get(id - SPECIALS.len())
                .copied()
                .unwrap_or('\u{FFFD}'),
        })
        .filter(|&c| c != '\u{0}')
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
}

/// Order of the two segments in a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Caption then image tokens (generation).
    TextFirst,
    /// Image tokens then caption (captioning, used for caption loss).
    ImageFirst,
}

/// Segment lengths and the split of the combined vocabulary.
///
/// Text ids occupy `[0, text_vocab)`; image token `k` has combined id `text_vocab + k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub t_text: usize,
    pub t_image: usize,
    pub text_vocab: usize,
    pub image_vocab: usize,
    pub layout: Layout,
}

impl SequenceSpec {
    pub fn len(&self) -> usize {
        self.t_text + self.t_image
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vocab(&self) -> usize {
        self.text_vocab + self.image_vocab
    }

    pub fn is_image_id(&self, id: usize) -> bool {
        id >= self.text_vocab
    }

    pub fn text_range(&self) -> std::ops::Range<usize> {
        match self.layout {
            Layout::TextFirst => 0..self.t_text,
            Layout::ImageFirst => self.t_image..self.len(),
        }
    }

    pub fn image_range(&self) -> std::ops::Range<usize> {
        match self.layout {
            Layout::TextFirst => self.t_text..self.len(),
            Layout::ImageFirst => 0..self.t_image,
        }
    }
}

/// Concatenated text and image token ids with per-position flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub modality: Vec<Modality>,
    pub pad: Vec<bool>,
}

impl TokenSequence {
    /// `text_ids` as produced by [`encode_caption`]; `image_tokens` are raw codebook indices.
    pub fn build(spec: &SequenceSpec, text_ids: &[usize], image_tokens: &[usize]) -> Result<Self> {
        if text_ids.len() != spec.t_text || image_tokens.len() != spec.t_image {
            return Err(Error::Shape(format!(
                "expected {} text + {} image tokens, got {} + {}",
                spec.t_text,
                spec.t_image,
                text_ids.len(),
                image_tokens.len()
            )));
        }
        if let Some(&bad) = text_ids.iter().find(|&&t| t >= spec.text_vocab) {
            return Err(Error::InvalidToken {
                id: bad,
                size: spec.text_vocab,
            });
        }
        if let Some(&bad) = image_tokens.iter().find(|&&t| t >= spec.image_vocab) {
            return Err(Error::InvalidIndex {
                index: bad,
                size: spec.image_vocab,
            });
        }
        let text = text_ids.iter().map(|&t| (t, Modality::Text, t == PAD));
        let image = image_tokens
            .iter()
            .map(|&k| (spec.text_vocab + k, Modality::Image, false));
        let items: Vec<_> = match spec.layout {
            Layout::TextFirst => text.chain(image).collect(),
            Layout::ImageFirst => image.chain(text).collect(),
        };
        Ok(Self {
            ids: items.iter().map(|x| x.0).collect(),
            modality: items.iter().map(|x| x.1).collect(),
            pad: items.iter().map(|x| x.2).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Next-token targets: `targets[t] = ids[t+1]`, `None` for PAD and for the last position.
    pub fn targets(&self) -> Vec<Option<usize>> {
        (0..self.len())
            .map(|t| (t + 1 < self.len() && !self.pad[t + 1]).then(|| self.ids[t + 1]))
            .collect()
    }
}

/// Assigns `val_frac` of records to validation, deterministically by seed.
pub fn split_records(records: &mut [EmojiRecord], val_frac: f64, seed: u64) {
    let mut order: Vec<usize> = (0..records.len()).collect();
    DetRng::new(seed).shuffle(&mut order);
    let n_val = (records.len() as f64 * val_frac).round() as usize;
    for (rank, &i) in order.iter().enumerate() {
        records[i].split = if rank < n_val {
            Split::Val
        } else {
            Split::Train
        };
    }
}

// ------------------------------------------------------------------ synthetic glyphs

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlyphShape {
    Circle,
    Square,
    Triangle,
    Star,
}

impl GlyphShape {
    pub const ALL: [GlyphShape; 4] = [
        GlyphShape::Circle,
        GlyphShape::Square,
        GlyphShape::Triangle,
        GlyphShape::Star,
    ];

    fn noun(self) -> &'static str {
        match self {
            GlyphShape::Circle => "круг",
            GlyphShape::Square => "квадрат",
            GlyphShape::Triangle => "треугольник",
            GlyphShape::Star => "звезда",
        }
    }

    fn feminine(self) -> bool {
        matches!(self, GlyphShape::Star)
    }
}

/// Glyph colours: (masculine adjective, feminine adjective, RGB).
pub const GLYPH_COLORS: [(&str, &str, [u8; 3]); 6] = [
    ("красный", "красная", [220, 30, 30]),
    ("зеленый", "зеленая", [30, 170, 60]),
    ("синий", "синяя", [40, 70, 220]),
    ("желтый", "желтая", [240, 210, 20]),
    ("фиолетовый", "фиолетовая", [140, 50, 190]),
    ("оранжевый", "оранжевая", [245, 130, 20]),
];

/// Backgrounds of the base set; deliberately not the white of the emoji set.
const GLYPH_BACKGROUNDS: [[u8; 3]; 4] =
    [[70, 70, 80], [200, 200, 190], [20, 30, 50], [150, 180, 210]];

pub fn glyph_caption(shape: GlyphShape, color: usize) -> String {
    let (m, f, _) = GLYPH_COLORS[color];
    format!("{} {}", if shape.feminine() { f } else { m }, shape.noun())
}

/// Renders one glyph of `side` pixels with the given jitter.
pub fn render_glyph(
    shape: GlyphShape,
    color: [u8; 3],
    background: [u8; 3],
    side: usize,
    center: (f64, f64),
    radius: f64,
) -> ImageBuffer {
    let star: Vec<(f64, f64)> = (0..10)
        .map(|i| {
            let r = if i % 2 == 0 { radius } else { radius * 0.45 };
            let a = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / 5.0;
            (center.0 + r * a.cos(), center.1 + r * a.sin())
        })
        .collect();
    let tri = [
        (center.0, center.1 - radius),
        (center.0 + radius * 0.94, center.1 + radius * 0.75),
        (center.0 - radius * 0.94, center.1 + radius * 0.75),
    ];
    ImageBuffer::from_fn(side, side, 3, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let (dx, dy) = (px - center.0, py - center.1);
        let inside = match shape {
            GlyphShape::Circle => dx * dx + dy * dy <= radius * radius,
            GlyphShape::Square => dx.abs() <= radius * 0.85 && dy.abs() <= radius * 0.85,
            GlyphShape::Triangle => point_in_polygon((px, py), &tri),
            GlyphShape::Star => point_in_polygon((px, py), &star),
        };
        let c = if inside { color } else { background };
        [c[0], c[1], c[2], 255]
    })
    .expect("valid glyph dimensions")
}

fn point_in_polygon(p: (f64, f64), poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > p.1) != (yj > p.1) && p.0 < (xj - xi) * (p.1 - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Procedural "general domain" set: coloured shapes on non-white backgrounds
/// with template captions naming colour and shape. Deterministic in `seed`.
pub fn make_synthetic_base_set(seed: u64, n: usize, side: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::InvalidArgument("synthetic set needs n >= 1".into()));
    }
    let mut rng = DetRng::new(seed);
    let s = side as f64;
    (0..n)
        .map(|i| {
            // Cycle through every shape x colour pair before repeating.
            let combo = i % (GlyphShape::ALL.len() * GLYPH_COLORS.len());
            let shape = GlyphShape::ALL[combo % GlyphShape::ALL.len()];
            let color = combo / GlyphShape::ALL.len();
            let bg = GLYPH_BACKGROUNDS[rng.below(GLYPH_BACKGROUNDS.len())];
            let radius = s * (0.28 + 0.12 * rng.uniform());
            let cx = s * 0.5 + (rng.uniform() - 0.5) * s * 0.15;
            let cy = s * 0.5 + (rng.uniform() - 0.5) * s * 0.15;
            Ok(Sample {
                caption: glyph_caption(shape, color),
                image: render_glyph(shape, GLYPH_COLORS[color].2, bg, side, (cx, cy), radius),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_of(caps: &[&str]) -> Vocabulary {
        build_vocab(caps.iter().copied())
    }

    #[test]
    fn empty_manifest_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "").unwrap();
        assert!(load_manifest(&p).unwrap().is_empty());
    }

    #[test]
    fn manifest_errors_carry_line_and_path() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuffer::filled(2, 2, &[1, 2, 3]).unwrap();
        imaging::write_png(&img, dir.path().join("a.png")).unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(
            &p,
            "{\"image_path\":\"a.png\",\"caption\":\"кот\"}\n\n{\"image_path\":\"a.png\"}\n",
        )
        .unwrap();
        match load_manifest(&p) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("caption"));
            }
            other => panic!("{other:?}"),
        }
        fs::write(&p, "{\"image_path\":\"missing.png\",\"caption\":\"кот\"}\n").unwrap();
        match load_manifest(&p) {
            Err(Error::Io { path, .. }) => assert!(path.ends_with("missing.png")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuffer::filled(2, 2, &[1, 2, 3]).unwrap();
        imaging::write_png(&img, dir.path().join("a.png")).unwrap();
        let recs = vec![
            EmojiRecord {
                image_path: dir.path().join("a.png"),
                caption: "замок".into(),
                split: Split::Train,
            },
            EmojiRecord {
                image_path: dir.path().join("a.png"),
                caption: "замок".into(),
                split: Split::Val,
            },
        ];
        let p = dir.path().join("m.jsonl");
        write_manifest(&p, &recs).unwrap();
        assert_eq!(load_manifest(&p).unwrap(), recs);
    }

    #[test]
    fn stats_single_record() {
        let s = caption_stats(["кот"]);
        assert_eq!(s.total, 1);
        assert_eq!(s.unique, 1);
        assert_eq!(s.words, BTreeMap::from([(1, 1)]));
        assert_eq!(CaptionStats::parse(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn vocab_layout_and_round_trip() {
        let v = vocab_of(&["Кот", "кошка"]);
        // к о т ш а
        assert_eq!(v.size(), 4 + 5);
        let ids = encode_caption(&v, "кот", 8);
        assert_eq!(ids.len(), 8);
        assert_eq!(ids[0], BOS_TEXT);
        assert_eq!(&ids[4..], &[PAD; 4]);
        assert_eq!(decode_caption(&v, &ids), "кот");
        let j = v.to_json().unwrap();
        assert_eq!(Vocabulary::from_json(&j).unwrap(), v);
    }

    #[test]
    fn truncation_fills_every_slot() {
        let v = vocab_of(&["абвгдежз"]);
        let ids = encode_caption(&v, "абвгдежз", 4);
        assert_eq!(ids.len(), 4);
        assert!(!ids.contains(&PAD));
        assert_eq!(decode_caption(&v, &ids), "абв");
    }

    #[test]
    fn unknown_chars_map_to_unk() {
        let v = vocab_of(&["кот"]);
        let ids = encode_caption(&v, "кит", 5);
        assert_eq!(ids[2], UNK);
    }

    #[test]
    fn sequence_layout_flags() {
        let spec = SequenceSpec {
            t_text: 4,
            t_image: 3,
            text_vocab: 10,
            image_vocab: 5,
            layout: Layout::TextFirst,
        };
        let s = TokenSequence::build(&spec, &[BOS_TEXT, 5, PAD, PAD], &[0, 4, 2]).unwrap();
        assert_eq!(s.ids, vec![1, 5, 0, 0, 10, 14, 12]);
        assert!(s.modality[..4].iter().all(|&m| m == Modality::Text));
        assert!(s.modality[4..].iter().all(|&m| m == Modality::Image));
        assert_eq!(
            s.targets(),
            vec![Some(5), None, None, Some(10), Some(14), Some(12), None]
        );

        let inv = SequenceSpec {
            layout: Layout::ImageFirst,
            ..spec
        };
        let s = TokenSequence::build(&inv, &[BOS_TEXT, 5, PAD, PAD], &[0, 4, 2]).unwrap();
        assert_eq!(s.ids, vec![10, 14, 12, 1, 5, 0, 0]);
        assert_eq!(inv.text_range(), 3..7);
        assert!(TokenSequence::build(&spec, &[1, 2, 3, 4], &[0, 5, 1]).is_err());
    }

    #[test]
    fn synthetic_set_is_deterministic() {
        let a = make_synthetic_base_set(42, 2, 32).unwrap();
        let b = make_synthetic_base_set(42, 2, 32).unwrap();
        assert_eq!(a, b);
        assert!(make_synthetic_base_set(42, 0, 32).is_err());
    }

    #[test]
    fn red_circle_is_red() {
        let set = make_synthetic_base_set(7, 24, 32).unwrap();
        let s = set.iter().find(|s| s.caption == "красный круг").unwrap();
        // Hue histogram over saturated pixels: red must dominate.
        let mut bins = [0usize; 6];
        for p in s.image.data().chunks_exact(3) {
            let (r, g, b) = (p[0] as f64, p[1] as f64, p[2] as f64);
            let mx = r.max(g).max(b);
            let mn = r.min(g).min(b);
            if mx - mn < 100.0 {
                continue;
            }
            let h = if mx == r {
                ((g - b) / (mx - mn)).rem_euclid(6.0)
            } else if mx == g {
                (b - r) / (mx - mn) + 2.0
            } else {
                (r - g) / (mx - mn) + 4.0
            };
            bins[(h as usize).min(5)] += 1;
        }
        let red = bins[0] + bins[5];
        assert!(
            red > 0 && red >= bins.iter().sum::<usize>() * 9 / 10,
            "{bins:?}"
        );
    }
}
