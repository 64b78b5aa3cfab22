use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synthgen::CorruptionKind;

pub const DEFAULT_MAGNITUDE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    Shrink,
    Expand,
    SuppressNoise,
    RestoreRegion,
    SharpenBoundary,
    Identity,
}

impl Verb {
    pub const ALL: [Verb; 6] = [
        Verb::Shrink,
        Verb::Expand,
        Verb::SuppressNoise,
        Verb::RestoreRegion,
        Verb::SharpenBoundary,
        Verb::Identity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Verb::Shrink => "shrink",
            Verb::Expand => "expand",
            Verb::SuppressNoise => "suppress_noise",
            Verb::RestoreRegion => "restore_region",
            Verb::SharpenBoundary => "sharpen_boundary",
            Verb::Identity => "identity",
        }
    }

    pub fn index(self) -> usize {
        Verb::ALL.iter().position(|&v| v == self).expect("listed")
    }

    pub fn needs_class(self) -> bool {
        matches!(self, Verb::Shrink | Verb::Expand)
    }

    pub fn aliases(self) -> &'static [&'static str] {
        match self {
            Verb::Shrink => &["reduce", "shrink_region"],
            Verb::Expand => &["enlarge", "grow"],
            Verb::SuppressNoise => &["denoise"],
            Verb::RestoreRegion => &["restore", "fill"],
            Verb::SharpenBoundary => &["sharpen"],
            Verb::Identity => &["none", "noop"],
        }
    }

    /// Canonical verbs and their synonyms, case-insensitive.
    pub fn lookup(word: &str) -> Option<Verb> {
        let w = word.to_ascii_lowercase();
        Verb::ALL
            .into_iter()
            .find(|v| v.as_str() == w || v.aliases().contains(&w.as_str()))
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionCommand {
    pub verb: Verb,
    pub target_class: Option<u8>,
    /// In (0, 1].
    pub magnitude: f64,
    pub raw_text: String,
}

impl CorrectionCommand {
    pub fn identity() -> Self {
        CorrectionCommand {
            verb: Verb::Identity,
            target_class: None,
            magnitude: DEFAULT_MAGNITUDE,
            raw_text: "identity".into(),
        }
    }

    /// `VERB [class=<int>] amount=<float>`.
    pub fn canonical(&self) -> String {
        let mut s = self.verb.to_string();
        if let Some(c) = self.target_class {
            s.push_str(&format!(" class={c}"));
        }
        s.push_str(&format!(" amount={}", self.magnitude));
        s
    }

    /// Equal up to `raw_text`.
    pub fn same_as(&self, other: &CorrectionCommand) -> bool {
        self.verb == other.verb && self.target_class == other.target_class && self.magnitude == other.magnitude
    }
}

impl fmt::Display for CorrectionCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseErrorKind {
    #[error("empty command")]
    Empty,
    #[error("unknown verb {0:?}")]
    UnknownVerb(String),
    #[error("expected key=value, found {0:?}")]
    NotKeyValue(String),
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("key {0:?} given twice")]
    Duplicate(String),
    #[error("cannot parse {value:?} for {key}")]
    BadValue { key: String, value: String },
    #[error("class {class} outside 1..={max}")]
    ClassRange { class: i64, max: usize },
    #[error("amount {0} outside (0, 1]")]
    AmountRange(f64),
    #[error("{0} needs class=<int>")]
    MissingClass(Verb),
    #[error("{0} takes no class")]
    UnexpectedClass(Verb),
}

/// Parse failure at a byte offset of the input.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("at {position}: {kind}")]
pub struct ParseError {
    pub position: usize,
    pub kind: ParseErrorKind,
}

fn tokens(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let base = text.as_ptr() as usize;
    text.split_whitespace().map(move |t| (t.as_ptr() as usize - base, t))
}

/// Parses `VERB [class=<int>] [amount=<float>]` for a model with
/// `num_classes` classes (background included).
pub fn parse_command(text: &str, num_classes: usize) -> Result<CorrectionCommand, ParseError> {
    let err = |position, kind| Err(ParseError { position, kind });
    let mut toks = tokens(text);
    let Some((vpos, vword)) = toks.next() else {
        return err(text.len(), ParseErrorKind::Empty);
    };
    let Some(verb) = Verb::lookup(vword) else {
        return err(vpos, ParseErrorKind::UnknownVerb(vword.to_string()));
    };
    let mut class: Option<(usize, i64)> = None;
    let mut amount: Option<f64> = None;
    for (pos, tok) in toks {
        let Some((key, value)) = tok.split_once('=') else {
            return err(pos, ParseErrorKind::NotKeyValue(tok.to_string()));
        };
        let vpos = pos + key.len() + 1;
        let bad = || ParseErrorKind::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        match key.to_ascii_lowercase().as_str() {
            "class" => {
                if class.is_some() {
                    return err(pos, ParseErrorKind::Duplicate(key.to_string()));
                }
                let Ok(c) = value.parse::<i64>() else {
                    return err(vpos, bad());
                };
                let max = num_classes.saturating_sub(1);
                if c < 1 || c as usize > max {
                    return err(vpos, ParseErrorKind::ClassRange { class: c, max });
                }
                class = Some((pos, c));
            }
            "amount" => {
                if amount.is_some() {
                    return err(pos, ParseErrorKind::Duplicate(key.to_string()));
                }
                let Ok(a) = value.parse::<f64>() else {
                    return err(vpos, bad());
                };
                if !(a > 0.0 && a <= 1.0) {
                    return err(vpos, ParseErrorKind::AmountRange(a));
                }
                amount = Some(a);
            }
            _ => return err(pos, ParseErrorKind::UnknownKey(key.to_string())),
        }
    }
    match (verb, class) {
        (v, None) if v.needs_class() => return err(text.len(), ParseErrorKind::MissingClass(v)),
        (Verb::Identity | Verb::SuppressNoise | Verb::SharpenBoundary, Some((pos, _))) => {
            return err(pos, ParseErrorKind::UnexpectedClass(verb))
        }
        _ => {}
    }
    Ok(CorrectionCommand {
        verb,
        target_class: class.map(|(_, c)| c as u8),
        magnitude: amount.unwrap_or(DEFAULT_MAGNITUDE),
        raw_text: text.to_string(),
    })
}

impl FromStr for Verb {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, ParseError> {
        Verb::lookup(s).ok_or(ParseError {
            position: 0,
            kind: ParseErrorKind::UnknownVerb(s.to_string()),
        })
    }
}

/// One line per verb with its aliases and arguments.
pub fn grammar_help() -> String {
    let mut s = String::from("VERB [class=<int>] [amount=<float in (0,1]>]\n");
    for v in Verb::ALL {
        let args = if v.needs_class() {
            " class=<1..K-1>"
        } else if v == Verb::RestoreRegion {
            " [class=<1..K-1>]"
        } else {
            ""
        };
        s.push_str(&format!("  {}{args} [amount=..]  aliases: {}\n", v, v.aliases().join(", ")));
    }
    s
}

/// The command a user would issue for a known corruption.
pub fn canonical_command(kind: CorruptionKind, severity: f64, num_classes: usize) -> CorrectionCommand {
    let magnitude = ((severity * 100.0).round() / 100.0).clamp(0.01, 1.0);
    let (verb, target_class) = match kind {
        CorruptionKind::BoundaryBlur => (Verb::SharpenBoundary, None),
        CorruptionKind::HeavyNoise => (Verb::SuppressNoise, None),
        // A bright streak reads as the brightest class.
        CorruptionKind::BrightStreak => (Verb::Shrink, Some((num_classes - 1) as u8)),
        CorruptionKind::DropoutPatch => (Verb::RestoreRegion, None),
    };
    let mut cmd = CorrectionCommand {
        verb,
        target_class,
        magnitude,
        raw_text: String::new(),
    };
    cmd.raw_text = cmd.canonical();
    cmd
}
