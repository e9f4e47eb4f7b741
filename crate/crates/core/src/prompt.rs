//! Prompt assembly with five-segment span tracking.
//!
//! The prompt is `bos ++ prefix ++ (cap_1 sep ... cap_k terminator) ++
//! suffix`, followed by generated tokens. Separator and terminator tokens
//! that survive tokenization are counted in the retrieval segment.

use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::strategy::RetrievalContext;
use crate::text::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Bos = 1,
    Prefix = 2,
    Retrieval = 3,
    Suffix = 4,
    Generation = 5,
}

impl Segment {
    pub const ALL: [Segment; 5] = [
        Segment::Bos,
        Segment::Prefix,
        Segment::Retrieval,
        Segment::Suffix,
        Segment::Generation,
    ];

    /// 1-based segment number.
    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Segment::Bos => "bos",
            Segment::Prefix => "prefix",
            Segment::Retrieval => "retrieval",
            Segment::Suffix => "suffix",
            Segment::Generation => "generation",
        }
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Template {
    pub bos: String,
    pub prefix: String,
    pub separator: String,
    pub terminator: String,
    pub suffix: String,
}

impl Default for Template {
    fn default() -> Self {
        Template {
            bos: "</s>".into(),
            prefix: "Similar images show".into(),
            separator: ", ".into(),
            terminator: ". ".into(),
            suffix: "This image shows".into(),
        }
    }
}

impl Template {
    /// Reads a JSON override; missing fields keep their defaults.
    pub fn load(path: &Path) -> Result<Template> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Template = serde_json::from_str(&text)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bos.is_empty() || self.bos.chars().any(char::is_whitespace) {
            return Err(Error::Input(
                "template bos must be a single non-empty token".into(),
            ));
        }
        if tokenize(&self.prefix).is_empty() {
            return Err(Error::Input("template prefix must not be empty".into()));
        }
        Ok(())
    }
}

/// Token sequence plus the half-open index ranges of its five segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    pub tokens: Vec<String>,
    spans: [Range<usize>; 5],
}

impl PromptLayout {
    /// Builds a layout from explicit spans, checking the partition property.
    pub fn from_parts(tokens: Vec<String>, spans: [Range<usize>; 5]) -> Result<PromptLayout> {
        check_partition(&spans, tokens.len())?;
        Ok(PromptLayout { tokens, spans })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn span(&self, segment: Segment) -> Range<usize> {
        self.spans[segment.id() - 1].clone()
    }

    pub fn spans(&self) -> &[Range<usize>; 5] {
        &self.spans
    }

    /// Tokens before generation.
    pub fn prompt_len(&self) -> usize {
        self.spans[4].start
    }

    pub fn segment_tokens(&self, segment: Segment) -> &[String] {
        &self.tokens[self.span(segment)]
    }

    pub fn generated(&self) -> &[String] {
        self.segment_tokens(Segment::Generation)
    }

    pub fn segment_of(&self, index: usize) -> Result<Segment> {
        if index >= self.tokens.len() {
            return Err(Error::contract(format!(
                "index {index} out of range for layout of {} tokens",
                self.tokens.len()
            )));
        }
        Ok(Segment::ALL
            .into_iter()
            .find(|s| self.span(*s).contains(&index))
            .expect("spans partition the layout"))
    }

    pub fn append_generated(&self, token: impl Into<String>) -> PromptLayout {
        let mut next = self.clone();
        next.tokens.push(token.into());
        next.spans[4].end += 1;
        next
    }

    /// Prefix of the layout holding the prompt and the first `steps`
    /// generated tokens.
    pub fn truncated(&self, steps: usize) -> PromptLayout {
        let end = (self.prompt_len() + steps).min(self.len());
        let mut next = self.clone();
        next.tokens.truncate(end);
        next.spans[4].end = end;
        next
    }
}

pub(crate) fn check_partition(spans: &[Range<usize>], len: usize) -> Result<()> {
    let mut cursor = 0;
    for (i, s) in spans.iter().enumerate() {
        if s.start != cursor || s.end < s.start {
            return Err(Error::Input(format!(
                "segment S{} = [{}, {}) does not continue the partition at {cursor}",
                i + 1,
                s.start,
                s.end
            )));
        }
        cursor = s.end;
    }
    if cursor != len {
        return Err(Error::Input(format!(
            "segments cover 0..{cursor} but the axis has length {len}"
        )));
    }
    Ok(())
}

fn words(text: &str) -> Vec<String> {
    tokenize(text)
        .tokens
        .into_iter()
        .map(|t| t.as_str().to_owned())
        .collect()
}

/// Lays out a prompt for `captions`, given as raw strings.
pub fn assemble_raw<S: AsRef<str>>(captions: &[S], template: &Template) -> Result<PromptLayout> {
    if captions.is_empty() {
        return Err(Error::contract("prompt needs at least one retrieved caption"));
    }
    let mut retrieval = String::new();
    for (i, c) in captions.iter().enumerate() {
        if i > 0 {
            retrieval.push_str(&template.separator);
        }
        retrieval.push_str(c.as_ref());
    }
    retrieval.push_str(&template.terminator);

    let mut tokens = vec![template.bos.clone()];
    let mut bounds = [0usize; 4];
    for (i, piece) in [template.prefix.as_str(), retrieval.as_str(), template.suffix.as_str()]
        .into_iter()
        .enumerate()
    {
        bounds[i] = tokens.len();
        tokens.extend(words(piece));
    }
    bounds[3] = tokens.len();
    let spans = [
        0..1,
        1..bounds[1],
        bounds[1]..bounds[2],
        bounds[2]..bounds[3],
        bounds[3]..bounds[3],
    ];
    PromptLayout::from_parts(tokens, spans)
}

pub fn assemble_prompt(ctx: &RetrievalContext, template: &Template) -> Result<PromptLayout> {
    let raws: Vec<&str> = ctx.entries.iter().map(|e| e.caption.raw.as_str()).collect();
    assemble_raw(&raws, template)
}

pub fn segment_of(layout: &PromptLayout, index: usize) -> Result<Segment> {
    layout.segment_of(index)
}

pub fn append_generated(layout: &PromptLayout, token: impl Into<String>) -> PromptLayout {
    layout.append_generated(token)
}
