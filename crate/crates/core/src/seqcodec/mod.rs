//! Interleaved token streams, loss masks and the dataset compiler.
//!
//! Plan segments become `<ins>…</ins><des>…</des>`, refinements
//! `<refine>…</refine>`, drafts `<|vision_start|>` payload `<|vision_end|>`,
//! and the stream ends with `<eos>`. Inspect analyses are plain words
//! between a draft and its refinement. Text is tokenized by whitespace.

pub mod dataset;

use serde::{Deserialize, Serialize};

use crate::microworld::RasterImage;
use crate::orchestrator::{validate_segments, Segment, Trajectory, TrajectoryMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    InsOpen,
    InsClose,
    DesOpen,
    DesClose,
    RefineOpen,
    RefineClose,
    VisionStart,
    VisionEnd,
}

impl Tag {
    pub const ALL: [Tag; 8] = [
        Tag::InsOpen,
        Tag::InsClose,
        Tag::DesOpen,
        Tag::DesClose,
        Tag::RefineOpen,
        Tag::RefineClose,
        Tag::VisionStart,
        Tag::VisionEnd,
    ];

    pub fn text(self) -> &'static str {
        match self {
            Tag::InsOpen => "<ins>",
            Tag::InsClose => "</ins>",
            Tag::DesOpen => "<des>",
            Tag::DesClose => "</des>",
            Tag::RefineOpen => "<refine>",
            Tag::RefineClose => "</refine>",
            Tag::VisionStart => "<|vision_start|>",
            Tag::VisionEnd => "<|vision_end|>",
        }
    }

    pub fn is_vision(self) -> bool {
        matches!(self, Tag::VisionStart | Tag::VisionEnd)
    }
}

pub const EOS: &str = "<eos>";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Token {
    Tag(Tag),
    Word(String),
    /// Index into the stream's image table.
    Image(usize),
    Eos,
}

impl Token {
    pub fn text(&self) -> String {
        match self {
            Token::Tag(t) => t.text().to_string(),
            Token::Word(w) => w.clone(),
            Token::Image(i) => format!("[image {i}]"),
            Token::Eos => EOS.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub prompt: String,
    pub initial: Option<RasterImage>,
    pub meta: TrajectoryMeta,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStream {
    pub header: StreamHeader,
    pub tokens: Vec<Token>,
    pub images: Vec<RasterImage>,
}

impl TokenStream {
    /// Space-separated token text with image placeholders.
    pub fn to_text(&self) -> String {
        self.tokens
            .iter()
            .map(Token::text)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("segment grammar: {0}")]
    Grammar(String),
    #[error("segment {0}: text is empty or not whitespace-normalized")]
    Unnormalized(usize),
    #[error("segment {0}: two adjacent inspect segments cannot be delimited")]
    AdjacentInspect(usize),
    #[error("final image differs from the last vision segment")]
    FinalImage,
    #[error("token {0}: unbalanced tag")]
    UnbalancedTag(usize),
    #[error("token {0}: vision block must hold exactly one payload")]
    BadPayload(usize),
    #[error("token {0}: a vision block follows the final block")]
    Termination(usize),
    #[error("token {0}: content after end-of-sequence")]
    AfterEos(usize),
    #[error("stream does not end with end-of-sequence")]
    MissingEos,
}

fn normalized(text: &str) -> bool {
    let words: Vec<&str> = text.split_whitespace().collect();
    !words.is_empty()
        && words.join(" ") == text
        && words.iter().all(|w| !w.contains('<') && !w.contains('>'))
}

fn push_words(tokens: &mut Vec<Token>, text: &str) {
    tokens.extend(text.split_whitespace().map(|w| Token::Word(w.to_string())));
}

pub fn encode(t: &Trajectory) -> Result<TokenStream, CodecError> {
    validate_segments(&t.segments).map_err(CodecError::Grammar)?;
    let mut tokens = Vec::new();
    let mut images = Vec::new();
    let mut prev_inspect = false;
    for (i, seg) in t.segments.iter().enumerate() {
        match seg {
            Segment::Plan { ins, des } => {
                if !normalized(ins) || !normalized(des) {
                    return Err(CodecError::Unnormalized(i));
                }
                tokens.push(Token::Tag(Tag::InsOpen));
                push_words(&mut tokens, ins);
                tokens.push(Token::Tag(Tag::InsClose));
                tokens.push(Token::Tag(Tag::DesOpen));
                push_words(&mut tokens, des);
                tokens.push(Token::Tag(Tag::DesClose));
            }
            Segment::Inspect { text } => {
                if !normalized(text) {
                    return Err(CodecError::Unnormalized(i));
                }
                if prev_inspect {
                    return Err(CodecError::AdjacentInspect(i));
                }
                push_words(&mut tokens, text);
            }
            Segment::Refine { text } => {
                if !normalized(text) {
                    return Err(CodecError::Unnormalized(i));
                }
                tokens.push(Token::Tag(Tag::RefineOpen));
                push_words(&mut tokens, text);
                tokens.push(Token::Tag(Tag::RefineClose));
            }
            Segment::Vision { image } => {
                tokens.push(Token::Tag(Tag::VisionStart));
                tokens.push(Token::Image(images.len()));
                images.push(*image);
                tokens.push(Token::Tag(Tag::VisionEnd));
            }
        }
        prev_inspect = matches!(seg, Segment::Inspect { .. });
    }
    if images.last() != Some(&t.final_image) {
        return Err(CodecError::FinalImage);
    }
    tokens.push(Token::Eos);
    Ok(TokenStream {
        header: StreamHeader {
            prompt: t.prompt.clone(),
            initial: t.initial,
            meta: t.meta.clone(),
        },
        tokens,
        images,
    })
}

fn take_words(tokens: &[Token], at: &mut usize) -> Vec<String> {
    let mut out = Vec::new();
    while let Some(Token::Word(w)) = tokens.get(*at) {
        out.push(w.clone());
        *at += 1;
    }
    out
}

fn expect_close(tokens: &[Token], at: &mut usize, close: Tag) -> Result<(), CodecError> {
    match tokens.get(*at) {
        Some(Token::Tag(t)) if *t == close => {
            *at += 1;
            Ok(())
        }
        _ => Err(CodecError::UnbalancedTag(*at)),
    }
}

pub fn decode(s: &TokenStream) -> Result<Trajectory, CodecError> {
    let toks = &s.tokens;
    let mut segments = Vec::new();
    let mut at = 0;
    let mut next_image = 0usize;
    let mut eos = None;
    while at < toks.len() {
        match &toks[at] {
            Token::Eos => {
                eos = Some(at);
                break;
            }
            Token::Word(_) => {
                let words = take_words(toks, &mut at);
                segments.push(Segment::Inspect {
                    text: words.join(" "),
                });
            }
            Token::Tag(Tag::InsOpen) => {
                at += 1;
                let ins = take_words(toks, &mut at);
                expect_close(toks, &mut at, Tag::InsClose)?;
                if toks.get(at) != Some(&Token::Tag(Tag::DesOpen)) {
                    return Err(CodecError::UnbalancedTag(at));
                }
                at += 1;
                let des = take_words(toks, &mut at);
                expect_close(toks, &mut at, Tag::DesClose)?;
                segments.push(Segment::Plan {
                    ins: ins.join(" "),
                    des: des.join(" "),
                });
            }
            Token::Tag(Tag::RefineOpen) => {
                at += 1;
                let text = take_words(toks, &mut at);
                expect_close(toks, &mut at, Tag::RefineClose)?;
                segments.push(Segment::Refine {
                    text: text.join(" "),
                });
            }
            Token::Tag(Tag::VisionStart) => {
                let start = at;
                at += 1;
                let mut payloads = Vec::new();
                while let Some(Token::Image(i)) = toks.get(at) {
                    payloads.push(*i);
                    at += 1;
                }
                if toks.get(at) != Some(&Token::Tag(Tag::VisionEnd)) {
                    return Err(if payloads.len() == 1 {
                        CodecError::UnbalancedTag(at)
                    } else {
                        CodecError::BadPayload(start)
                    });
                }
                at += 1;
                match payloads[..] {
                    [i] if i == next_image && i < s.images.len() => {
                        next_image += 1;
                        segments.push(Segment::Vision { image: s.images[i] });
                    }
                    _ => return Err(CodecError::BadPayload(start)),
                }
            }
            Token::Image(_) => return Err(CodecError::BadPayload(at)),
            Token::Tag(_) => return Err(CodecError::UnbalancedTag(at)),
        }
    }
    let eos = eos.ok_or(CodecError::MissingEos)?;
    if let Some(t) = toks.get(eos + 1) {
        return Err(if *t == Token::Tag(Tag::VisionStart) {
            CodecError::Termination(eos + 1)
        } else {
            CodecError::AfterEos(eos + 1)
        });
    }
    if next_image != s.images.len() {
        return Err(CodecError::BadPayload(eos));
    }
    let final_image = match segments.last() {
        Some(Segment::Vision { image }) => *image,
        _ => return Err(CodecError::Termination(eos)),
    };
    validate_segments(&segments).map_err(CodecError::Grammar)?;
    Ok(Trajectory {
        prompt: s.header.prompt.clone(),
        initial: s.header.initial,
        segments,
        final_image,
        meta: s.header.meta.clone(),
    })
}

/// Which positions are supervised: cross-entropy on words, text tags and
/// vision boundary tokens; flow loss on every drafted image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossMask {
    pub ce: Vec<bool>,
    pub mse: Vec<bool>,
}

pub fn loss_mask(s: &TokenStream) -> LossMask {
    let ce = s
        .tokens
        .iter()
        .map(|t| matches!(t, Token::Word(_) | Token::Tag(_)))
        .collect();
    let mse = s
        .tokens
        .iter()
        .filter(|t| matches!(t, Token::Image(_)))
        .map(|_| true)
        .collect();
    LossMask { ce, mse }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::{run_trajectory, RunConfig};

    fn traj(seed: u64, rate: f64) -> Trajectory {
        run_trajectory(
            "red circle above blue square; green star",
            &RunConfig::with_fault_rate(seed, rate, 3),
            None,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_and_structure() {
        for seed in 0..50 {
            let t = traj(seed, 0.4);
            let s = encode(&t).unwrap();
            assert_eq!(decode(&s).unwrap(), t);
            assert_eq!(s.tokens.last(), Some(&Token::Eos));
            let refines = s.tokens.iter().filter(|t| **t == Token::Tag(Tag::RefineOpen)).count();
            assert_eq!(refines, t.count('R'));
        }
    }

    #[test]
    fn decode_errors() {
        let s = encode(&traj(1, 0.0)).unwrap();
        let mut missing = s.clone();
        let pos = missing.tokens.iter().position(|t| *t == Token::Tag(Tag::InsClose)).unwrap();
        missing.tokens.remove(pos);
        assert!(matches!(decode(&missing), Err(CodecError::UnbalancedTag(_))));

        let mut trailing = s.clone();
        trailing.tokens.push(Token::Tag(Tag::VisionStart));
        assert!(matches!(decode(&trailing), Err(CodecError::Termination(_))));

        let mut two = s.clone();
        let pos = two.tokens.iter().position(|t| matches!(t, Token::Image(_))).unwrap();
        two.tokens.insert(pos, Token::Image(0));
        assert!(matches!(decode(&two), Err(CodecError::BadPayload(_))));

        let mut no_eos = s;
        no_eos.tokens.pop();
        assert_eq!(decode(&no_eos), Err(CodecError::MissingEos));
    }

    #[test]
    fn mask_counts() {
        let s = encode(&traj(4, 0.5)).unwrap();
        let m = loss_mask(&s);
        let words = s.tokens.iter().filter(|t| matches!(t, Token::Word(_))).count();
        let text_tags = s
            .tokens
            .iter()
            .filter(|t| matches!(t, Token::Tag(g) if !g.is_vision()))
            .count();
        let blocks = s.images.len();
        assert_eq!(m.ce.iter().filter(|b| **b).count(), words + text_tags + 2 * blocks);
        assert_eq!(m.mse.len(), blocks);
        assert!(!m.ce[s.tokens.len() - 1]);
    }
}
