//! Readers and writers for the two box file formats:
//!
//! * the line format produced by the box-generating language model
//!   (`Frame k: [{'id': 0, 'name': 'walking woman', 'box': [x, y, w, h]}, ...]`
//!   lines plus a `Background keyword:` line), and
//! * a structured JSON file with `frame_size`, `frames` and `background`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{BoxTrajectory, PixelBox, SpatialPriorSet, DEFAULT_FRAME_HEIGHT, DEFAULT_FRAME_WIDTH};
use crate::error::{Error, Result};

/// Detects the format from the first non-blank character (`{` means JSON).
pub fn parse_boxes(text: &str) -> Result<SpatialPriorSet> {
    if text.trim_start().starts_with('{') {
        parse_structured_boxes(text)
    } else {
        parse_llm_boxes(text)
    }
}

/// Parses the line format for a 576x320 frame.
pub fn parse_llm_boxes(text: &str) -> Result<SpatialPriorSet> {
    parse_llm_boxes_with_size(text, DEFAULT_FRAME_WIDTH, DEFAULT_FRAME_HEIGHT)
}

struct Record {
    id: usize,
    name: String,
    bbox: PixelBox,
}

pub fn parse_llm_boxes_with_size(text: &str, width: u32, height: u32) -> Result<SpatialPriorSet> {
    let mut frames: Vec<Vec<Record>> = Vec::new();
    let mut background: Option<String> = None;
    let mut last_line = 0;

    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        last_line = line_no;
        let line = raw.trim();
        if line.is_empty() || line.starts_with("Caption:") || line.starts_with("Reasoning:") {
            continue;
        }
        if let Some(rest) = line.strip_prefix("Background keyword:") {
            background = Some(rest.trim().to_string());
            continue;
        }
        let Some(rest) = line.strip_prefix("Frame") else {
            return Err(Error::parse(line_no, format!("unrecognized line {line:?}")));
        };
        let (index, list) = rest
            .split_once(':')
            .ok_or_else(|| Error::parse(line_no, "expected `Frame k: [...]`"))?;
        let k: usize = index
            .trim()
            .parse()
            .map_err(|_| Error::parse(line_no, format!("bad frame index {:?}", index.trim())))?;
        if k != frames.len() + 1 {
            return Err(Error::parse(
                line_no,
                format!("frame index {k} out of sequence, expected {}", frames.len() + 1),
            ));
        }
        let value = Literal::parse(list.trim()).map_err(|msg| Error::parse(line_no, msg))?;
        let records = records_from_literal(value).map_err(|msg| Error::parse(line_no, msg))?;
        let mut ids: Vec<usize> = records.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        if let Some(dup) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::parse(line_no, format!("duplicate id {} in frame {k}", dup[0])));
        }
        frames.push(records);
    }

    if frames.is_empty() {
        return Err(Error::parse(last_line.max(1), "no `Frame k:` lines"));
    }
    let background =
        background.ok_or_else(|| Error::parse(last_line.max(1), "missing `Background keyword:` line"))?;
    assemble(width, height, frames, background)
}

fn assemble(width: u32, height: u32, frames: Vec<Vec<Record>>, background: String) -> Result<SpatialPriorSet> {
    let frame_count = frames.len();
    let mut by_id: BTreeMap<usize, (String, Vec<Option<PixelBox>>)> = BTreeMap::new();
    for (f, records) in frames.into_iter().enumerate() {
        for r in records {
            let entry = by_id
                .entry(r.id)
                .or_insert_with(|| (r.name.clone(), vec![None; frame_count]));
            entry.1[f] = Some(r.bbox);
        }
    }
    let mut missing = Vec::new();
    let trajectories = by_id
        .into_iter()
        .map(|(id, (name, boxes))| {
            let boxes = boxes
                .into_iter()
                .enumerate()
                .map(|(f, b)| {
                    b.unwrap_or_else(|| {
                        missing.push(format!("subject {id} absent in frame {}; using an empty box", f + 1));
                        PixelBox { x: 0, y: 0, w: 0, h: 0 }
                    })
                })
                .collect();
            BoxTrajectory {
                subject_id: id,
                name,
                boxes,
            }
        })
        .collect();
    let mut set = SpatialPriorSet::new(width, height, frame_count, trajectories, background)?;
    set.warnings.extend(missing);
    Ok(set)
}

pub(super) fn to_llm_text(set: &SpatialPriorSet) -> String {
    let mut out = String::new();
    for f in 0..set.frame_count {
        let records: Vec<String> = set
            .trajectories
            .iter()
            .map(|t| {
                let b = t.boxes[f];
                format!(
                    "{{'id': {}, 'name': '{}', 'box': [{}, {}, {}, {}]}}",
                    t.subject_id,
                    t.name.replace('\\', "\\\\").replace('\'', "\\'"),
                    b.x,
                    b.y,
                    b.w,
                    b.h
                )
            })
            .collect();
        let _ = writeln!(out, "Frame {}: [{}]", f + 1, records.join(", "));
    }
    let _ = writeln!(out, "Background keyword: {}", set.background);
    out
}

#[derive(Serialize, Deserialize)]
struct StructuredFile {
    frame_size: [u32; 2],
    frames: Vec<Vec<StructuredRecord>>,
    background: String,
}

#[derive(Serialize, Deserialize)]
struct StructuredRecord {
    id: usize,
    name: String,
    #[serde(rename = "box")]
    bbox: PixelBox,
}

pub fn parse_structured_boxes(text: &str) -> Result<SpatialPriorSet> {
    let file: StructuredFile = serde_json::from_str(text)
        .map_err(|e| Error::parse(e.line(), e.to_string()))?;
    let frames = file
        .frames
        .into_iter()
        .enumerate()
        .map(|(f, records)| {
            let mut ids: Vec<usize> = records.iter().map(|r| r.id).collect();
            ids.sort_unstable();
            if let Some(dup) = ids.windows(2).find(|w| w[0] == w[1]) {
                return Err(Error::Input(format!("duplicate id {} in frame {}", dup[0], f + 1)));
            }
            Ok(records
                .into_iter()
                .map(|r| Record {
                    id: r.id,
                    name: r.name,
                    bbox: r.bbox,
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    if frames.is_empty() {
        return Err(Error::Input("structured box file has no frames".into()));
    }
    assemble(file.frame_size[0], file.frame_size[1], frames, file.background)
}

pub(super) fn to_structured_json(set: &SpatialPriorSet) -> Result<String> {
    let file = StructuredFile {
        frame_size: [set.frame_width, set.frame_height],
        frames: (0..set.frame_count)
            .map(|f| {
                set.trajectories
                    .iter()
                    .map(|t| StructuredRecord {
                        id: t.subject_id,
                        name: t.name.clone(),
                        bbox: t.boxes[f],
                    })
                    .collect()
            })
            .collect(),
        background: set.background.clone(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

/// The subset of Python literal syntax that appears in box records.
#[derive(Debug, Clone, PartialEq)]
enum Literal {
    List(Vec<Literal>),
    Dict(Vec<(String, Literal)>),
    Str(String),
    Int(i64),
    Float(f64),
}

impl Literal {
    fn parse(text: &str) -> Result<Literal, String> {
        let mut p = LiteralParser {
            chars: text.chars().collect(),
            pos: 0,
        };
        let v = p.value()?;
        p.skip_ws();
        if p.pos != p.chars.len() {
            return Err(format!("trailing characters at column {}", p.pos + 1));
        }
        Ok(v)
    }
}

struct LiteralParser {
    chars: Vec<char>,
    pos: usize,
}

impl LiteralParser {
    fn skip_ws(&mut self) {
        while self.chars.get(self.pos).is_some_and(|c| c.is_whitespace()) {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).copied()
    }

    fn expect(&mut self, c: char) -> Result<(), String> {
        match self.peek() {
            Some(got) if got == c => {
                self.pos += 1;
                Ok(())
            }
            Some(got) => Err(format!("expected {c:?} at column {}, found {got:?}", self.pos + 1)),
            None => Err(format!("expected {c:?}, found end of line")),
        }
    }

    fn value(&mut self) -> Result<Literal, String> {
        match self.peek() {
            Some('[') => self.sequence(']').map(Literal::List),
            Some('{') => self.dict(),
            Some('\'' | '"') => self.string().map(Literal::Str),
            Some(c) if c == '-' || c.is_ascii_digit() => self.number(),
            Some(c) => Err(format!("unexpected {c:?} at column {}", self.pos + 1)),
            None => Err("unexpected end of line".into()),
        }
    }

    fn sequence(&mut self, close: char) -> Result<Vec<Literal>, String> {
        self.pos += 1;
        let mut items = Vec::new();
        if self.peek() == Some(close) {
            self.pos += 1;
            return Ok(items);
        }
        loop {
            items.push(self.value()?);
            match self.peek() {
                Some(',') => {
                    self.pos += 1;
                    if self.peek() == Some(close) {
                        self.pos += 1;
                        return Ok(items);
                    }
                }
                _ => {
                    self.expect(close)?;
                    return Ok(items);
                }
            }
        }
    }

    fn dict(&mut self) -> Result<Literal, String> {
        self.pos += 1;
        let mut entries = Vec::new();
        if self.peek() == Some('}') {
            self.pos += 1;
            return Ok(Literal::Dict(entries));
        }
        loop {
            let key = match self.peek() {
                Some('\'' | '"') => self.string()?,
                _ => return Err(format!("expected a quoted key at column {}", self.pos + 1)),
            };
            self.expect(':')?;
            entries.push((key, self.value()?));
            match self.peek() {
                Some(',') => {
                    self.pos += 1;
                    if self.peek() == Some('}') {
                        self.pos += 1;
                        return Ok(Literal::Dict(entries));
                    }
                }
                _ => {
                    self.expect('}')?;
                    return Ok(Literal::Dict(entries));
                }
            }
        }
    }

    fn string(&mut self) -> Result<String, String> {
        let quote = self.chars[self.pos];
        let start = self.pos;
        self.pos += 1;
        let mut out = String::new();
        while let Some(&c) = self.chars.get(self.pos) {
            self.pos += 1;
            match c {
                '\\' => {
                    let escaped = self
                        .chars
                        .get(self.pos)
                        .copied()
                        .ok_or("dangling escape at end of line")?;
                    self.pos += 1;
                    out.push(escaped);
                }
                c if c == quote => return Ok(out),
                c => out.push(c),
            }
        }
        Err(format!("unterminated string starting at column {}", start + 1))
    }

    fn number(&mut self) -> Result<Literal, String> {
        let start = self.pos;
        while self
            .chars
            .get(self.pos)
            .is_some_and(|c| c.is_ascii_digit() || matches!(c, '-' | '+' | '.' | 'e' | 'E'))
        {
            self.pos += 1;
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        if let Ok(v) = text.parse::<i64>() {
            Ok(Literal::Int(v))
        } else {
            text.parse::<f64>()
                .map(Literal::Float)
                .map_err(|_| format!("malformed number {text:?}"))
        }
    }
}

fn records_from_literal(value: Literal) -> Result<Vec<Record>, String> {
    let Literal::List(items) = value else {
        return Err("frame content must be a list of records".into());
    };
    items
        .into_iter()
        .enumerate()
        .map(|(k, item)| {
            let Literal::Dict(entries) = item else {
                return Err(format!("record {} is not a {{...}} literal", k + 1));
            };
            let field = |name: &str| {
                entries
                    .iter()
                    .find(|(key, _)| key == name)
                    .map(|(_, v)| v)
                    .ok_or_else(|| format!("record {} lacks '{name}'", k + 1))
            };
            let id = match field("id")? {
                Literal::Int(v) if *v >= 0 => *v as usize,
                other => return Err(format!("record {}: 'id' must be a non-negative integer, got {other:?}", k + 1)),
            };
            let name = match field("name")? {
                Literal::Str(s) => s.clone(),
                other => return Err(format!("record {}: 'name' must be a string, got {other:?}", k + 1)),
            };
            let coords = match field("box")? {
                Literal::List(v) if v.len() == 4 => v,
                other => return Err(format!("record {}: 'box' must be a list of 4 integers, got {other:?}", k + 1)),
            };
            let mut b = [0i64; 4];
            for (slot, c) in b.iter_mut().zip(coords) {
                *slot = match c {
                    Literal::Int(v) => *v,
                    other => return Err(format!("record {}: non-integer box entry {other:?}", k + 1)),
                };
            }
            Ok(Record {
                id,
                name,
                bbox: PixelBox::from(b),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const WOMAN_MAN: &str = include_str!("../../tests/fixtures/woman_man.txt");
    const DOG_CAT: &str = include_str!("../../tests/fixtures/dog_cat.txt");

    #[test]
    fn first_in_context_example() {
        let set = parse_llm_boxes(WOMAN_MAN).unwrap();
        assert_eq!(set.frame_count, 8);
        assert_eq!(set.trajectories.len(), 2);
        assert_eq!(set.background, "room");
        let woman = set.trajectory(0).unwrap();
        assert_eq!(woman.name, "walking woman");
        let xs: Vec<i64> = woman.boxes.iter().map(|b| b.x).collect();
        assert_eq!(xs, [0, 35, 70, 105, 140, 175, 210, 245]);
        assert!(woman.boxes.iter().all(|b| (b.y, b.w, b.h) == (70, 120, 200)));
        assert!(set.warnings.is_empty());
    }

    #[test]
    fn second_in_context_example() {
        let set = parse_llm_boxes(DOG_CAT).unwrap();
        assert_eq!(set.background, "garden");
        let cat = set.trajectory(1).unwrap();
        assert_eq!(cat.name, "sitting cat");
        assert!(cat.boxes.iter().all(|b| <[i64; 4]>::from(*b) == [350, 200, 80, 60]));
        assert_eq!(cat.boxes.len(), 8);
    }

    #[test]
    fn empty_frame_list() {
        let set = parse_llm_boxes("Frame 1: []\nBackground keyword: beach\n").unwrap();
        assert_eq!(set.frame_count, 1);
        assert!(set.trajectories.is_empty());
    }

    fn line_of(err: Error) -> usize {
        match err {
            Error::Parse { line, .. } => line,
            other => panic!("expected a parse error, got {other}"),
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let dup = "Frame 1: [{'id': 0, 'name': 'a', 'box': [0, 0, 1, 1]}, {'id': 0, 'name': 'b', 'box': [0, 0, 1, 1]}]\nBackground keyword: x";
        assert_eq!(line_of(parse_llm_boxes(dup).unwrap_err()), 1);

        let gap = "Frame 1: []\nFrame 3: []\nBackground keyword: x";
        assert_eq!(line_of(parse_llm_boxes(gap).unwrap_err()), 2);

        let malformed = "Frame 1: []\n\nFrame 2: [{'id': 0, 'name': 'a', 'box': [0, 0, 1, 1]\nBackground keyword: x";
        assert_eq!(line_of(parse_llm_boxes(malformed).unwrap_err()), 3);

        let float = "Frame 1: [{'id': 0, 'name': 'a', 'box': [0, 0.5, 1, 1]}]\nBackground keyword: x";
        let err = parse_llm_boxes(float).unwrap_err();
        assert!(err.to_string().contains("non-integer"), "{err}");

        assert!(parse_llm_boxes("Frame 1: []\n").is_err());
    }

    #[test]
    fn round_trips_both_formats() {
        for text in [WOMAN_MAN, DOG_CAT] {
            let set = parse_llm_boxes(text).unwrap();
            assert_eq!(parse_llm_boxes(&set.to_llm_text()).unwrap(), set);
            assert_eq!(parse_boxes(&set.to_structured_json().unwrap()).unwrap(), set);
        }
    }

    #[test]
    fn quoted_names_survive() {
        let text = "Frame 1: [{'id': 3, 'name': 'bob\\'s kite', 'box': [1, 2, 3, 4]}]\nBackground keyword: sky";
        let set = parse_llm_boxes(text).unwrap();
        assert_eq!(set.trajectories[0].name, "bob's kite");
        assert_eq!(parse_llm_boxes(&set.to_llm_text()).unwrap(), set);
    }

    #[test]
    fn missing_subject_becomes_empty_box_with_warning() {
        let text = "Frame 1: [{'id': 0, 'name': 'a', 'box': [0, 0, 10, 10]}]\nFrame 2: []\nBackground keyword: x";
        let set = parse_llm_boxes(text).unwrap();
        assert_eq!(set.trajectories[0].boxes[1].area(), 0);
        assert_eq!(set.warnings.len(), 1);
    }
}
