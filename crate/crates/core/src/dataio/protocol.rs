use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Bonafide,
    Spoof,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        }
    }

    /// Class index used by the classifier: bonafide = 0, spoof = 1.
    pub fn index(self) -> usize {
        match self {
            Label::Bonafide => 0,
            Label::Spoof => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bonafide" => Ok(Label::Bonafide),
            "spoof" => Ok(Label::Spoof),
            other => Err(Error::Validation(format!("unknown key {other:?} (expected bonafide or spoof)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Subset {
    Train,
    Dev,
    Eval,
}

impl FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Subset::Train),
            "dev" => Ok(Subset::Dev),
            "eval" => Ok(Subset::Eval),
            other => Err(Error::Validation(format!("unknown subset {other:?}"))),
        }
    }
}

/// One line of an ASVspoof 2019 LA CM protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialEntry {
    pub speaker_id: String,
    pub utterance_id: String,
    /// Attack system id, or `"-"` for bonafide trials.
    pub attack_id: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialProtocol {
    pub subset: Subset,
    pub entries: Vec<TrialEntry>,
}

impl TrialProtocol {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    /// Renders the five-column text format.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{} {} - {} {}\n", e.speaker_id, e.utterance_id, e.attack_id, e.label))
            .collect()
    }
}

/// Parses protocol text `SPEAKER UTT_ID - ATTACK_ID KEY`, one trial per
/// non-empty line. `origin` is used in error messages.
pub fn parse_protocol_str(text: &str, subset: Subset, origin: &str) -> Result<TrialProtocol> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: line_no,
                message: format!("expected 5 whitespace-separated fields, found {}", fields.len()),
            });
        }
        let label: Label = fields[4].parse().map_err(|e: Error| match e {
            Error::Validation(msg) => Error::Validation(format!("{origin}:{line_no}: {msg}")),
            other => other,
        })?;
        let utterance_id = fields[1].to_string();
        if !seen.insert(utterance_id.clone()) {
            return Err(Error::Validation(format!(
                "{origin}:{line_no}: duplicate utterance id {utterance_id}"
            )));
        }
        entries.push(TrialEntry {
            speaker_id: fields[0].to_string(),
            utterance_id,
            attack_id: fields[3].to_string(),
            label,
        });
    }
    Ok(TrialProtocol { subset, entries })
}

pub fn parse_protocol(path: &Path, subset: Subset) -> Result<TrialProtocol> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_protocol_str(&text, subset, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bonafide_line() {
        let p = parse_protocol_str("LA_0079 LA_T_1138215 - - bonafide\n", Subset::Train, "t").unwrap();
        assert_eq!(p.entries.len(), 1);
        let e = &p.entries[0];
        assert_eq!(e.label, Label::Bonafide);
        assert_eq!(e.attack_id, "-");
        assert_eq!(e.speaker_id, "LA_0079");
        assert_eq!(e.utterance_id, "LA_T_1138215");
    }

    #[test]
    fn spoof_line() {
        let p = parse_protocol_str("X Y - A01 spoof", Subset::Dev, "t").unwrap();
        assert_eq!(p.entries[0].label, Label::Spoof);
        assert_eq!(p.entries[0].attack_id, "A01");
    }

    #[test]
    fn empty_file_is_empty_protocol() {
        let p = parse_protocol_str("", Subset::Eval, "t").unwrap();
        assert!(p.is_empty());
        let p = parse_protocol_str("\n  \n", Subset::Eval, "t").unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn malformed_line_names_line_number() {
        let err = parse_protocol_str("A B - - bonafide\nA C - bonafide\n", Subset::Train, "proto.txt").unwrap_err();
        match err {
            Error::Parse { line, path, .. } => {
                assert_eq!(line, 2);
                assert_eq!(path, "proto.txt");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_validation_error() {
        let err = parse_protocol_str("A B - - genuine", Subset::Train, "t").unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err:?}");
    }

    #[test]
    fn duplicate_utterance_rejected() {
        let err = parse_protocol_str("A B - - bonafide\nA B - A01 spoof", Subset::Train, "t").unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    proptest! {
        #[test]
        fn entry_count_equals_nonempty_lines(rows in proptest::collection::vec((any::<bool>(), 0usize..3), 0..40)) {
            let mut text = String::new();
            let mut expected = 0;
            for (i, (bona, blanks)) in rows.iter().enumerate() {
                for _ in 0..*blanks {
                    text.push_str("   \n");
                }
                let (attack, key) = if *bona { ("-", "bonafide") } else { ("A0", "spoof") };
                text.push_str(&format!("SPK U{i} - {attack} {key}\n"));
                expected += 1;
            }
            let p = parse_protocol_str(&text, Subset::Train, "t").unwrap();
            prop_assert_eq!(p.len(), expected);
            let round = parse_protocol_str(&p.to_text(), Subset::Train, "t").unwrap();
            prop_assert_eq!(round, p);
        }
    }
}
