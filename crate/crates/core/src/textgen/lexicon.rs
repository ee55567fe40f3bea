use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

const SHIPPED: &str = include_str!("../../data/lexicon.tsv");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pos {
    Noun,
    Adj,
    Verb,
    Adp,
    Det,
    Other,
}

impl FromStr for Pos {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "NOUN" => Pos::Noun,
            "ADJ" => Pos::Adj,
            "VERB" => Pos::Verb,
            "ADP" => Pos::Adp,
            "DET" => Pos::Det,
            "OTHER" => Pos::Other,
            other => return Err(format!("unknown POS tag {other:?}")),
        })
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pos::Noun => "NOUN",
            Pos::Adj => "ADJ",
            Pos::Verb => "VERB",
            Pos::Adp => "ADP",
            Pos::Det => "DET",
            Pos::Other => "OTHER",
        })
    }
}

#[derive(Clone, Debug)]
struct Entry {
    word: String,
    pos: Pos,
    alternatives: Vec<String>,
}

/// Closed vocabulary with POS tags and replacement alternatives.
///
/// Alternatives of an ADJ are its antonyms, of a NOUN its co-hyponyms. Every
/// alternative is itself an entry with the same tag.
#[derive(Clone, Debug)]
pub struct Lexicon {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

impl Lexicon {
    /// The lexicon compiled into the crate, covering the shapes-world grammar.
    pub fn shipped() -> Self {
        Self::parse(SHIPPED).expect("shipped lexicon is well formed")
    }

    /// Parses `word<TAB>POS<TAB>alt1,alt2,...` records; `#` lines are comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut index = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| Error::Lexicon {
                line: lineno + 1,
                reason,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(bad(format!("expected 2 or 3 tab-separated fields, got {}", fields.len())));
            }
            let word = fields[0].trim().to_lowercase();
            if word.is_empty() || word.contains(char::is_whitespace) {
                return Err(bad(format!("invalid word {:?}", fields[0])));
            }
            let pos: Pos = fields[1].trim().parse().map_err(bad)?;
            let alternatives = fields
                .get(2)
                .map(|f| {
                    f.split(',')
                        .map(|a| a.trim().to_lowercase())
                        .filter(|a| !a.is_empty())
                        .collect()
                })
                .unwrap_or_default();
            if index.insert(word.clone(), entries.len()).is_some() {
                return Err(bad(format!("duplicate word {word:?}")));
            }
            entries.push(Entry {
                word,
                pos,
                alternatives,
            });
        }
        let lex = Self { entries, index };
        lex.check_closed()?;
        Ok(lex)
    }

    fn check_closed(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            for alt in &e.alternatives {
                let ok = self.index.get(alt).map(|&j| self.entries[j].pos == e.pos && j != i);
                if ok != Some(true) {
                    return Err(Error::Lexicon {
                        line: 0,
                        reason: format!("alternative {alt:?} of {:?} is missing, the word itself, or has another tag", e.word),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.word.as_str())
    }

    /// Position of `word` in file order.
    pub fn word_index(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn pos(&self, word: &str) -> Option<Pos> {
        self.index.get(word).map(|&i| self.entries[i].pos)
    }

    pub fn alternatives(&self, word: &str) -> &[String] {
        self.index
            .get(word)
            .map(|&i| self.entries[i].alternatives.as_slice())
            .unwrap_or(&[])
    }

    pub fn tag(&self, caption: &str) -> Result<TaggedCaption> {
        let tokens = tokenize(caption);
        let tags = tokens
            .iter()
            .map(|t| self.pos(t).ok_or_else(|| Error::UnknownWord(t.clone())))
            .collect::<Result<Vec<_>>>()?;
        Ok(TaggedCaption { tokens, tags })
    }
}

/// Tokens paired with their lexicon tags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedCaption {
    pub tokens: Vec<String>,
    pub tags: Vec<Pos>,
}

impl TaggedCaption {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_simple_caption() {
        let lex = Lexicon::shipped();
        let tc = lex.tag("a red circle").unwrap();
        assert_eq!(tc.tags, vec![Pos::Det, Pos::Adj, Pos::Noun]);
    }

    #[test]
    fn relation_words_are_two_adp_tokens() {
        let lex = Lexicon::shipped();
        let tc = lex.tag("circle left of square").unwrap();
        assert_eq!(tc.tags, vec![Pos::Noun, Pos::Adp, Pos::Adp, Pos::Noun]);
    }

    #[test]
    fn empty_caption_tags_to_empty() {
        let tc = Lexicon::shipped().tag("").unwrap();
        assert!(tc.is_empty());
    }

    #[test]
    fn unknown_word_is_reported() {
        let err = Lexicon::shipped().tag("a purple circle").unwrap_err();
        assert!(matches!(err, Error::UnknownWord(w) if w == "purple"));
    }

    #[test]
    fn tokenization_lowercases() {
        assert_eq!(tokenize("A  Red\tCircle"), vec!["a", "red", "circle"]);
    }

    #[test]
    fn parse_rejects_open_alternatives() {
        let err = Lexicon::parse("red\tADJ\tblue\n").unwrap_err();
        assert!(matches!(err, Error::Lexicon { .. }));
        let err = Lexicon::parse("red\tADJ\tcircle\ncircle\tNOUN\t\n").unwrap_err();
        assert!(matches!(err, Error::Lexicon { .. }));
        assert!(Lexicon::parse("red\tXYZ\t\n").is_err());
    }

    #[test]
    fn shipped_lexicon_maps_colors_and_shapes() {
        let lex = Lexicon::shipped();
        assert_eq!(lex.alternatives("red"), &["blue", "green", "yellow"]);
        assert_eq!(lex.alternatives("square"), &["circle", "triangle"]);
        assert!(lex.alternatives("left").is_empty());
        assert_eq!(lex.len(), 29);
    }
}
