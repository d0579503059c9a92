use serde::{Deserialize, Serialize};

use crate::text::{segments, sentence_ranges};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    SentenceAware,
    Hard,
}

/// Window sizes are in whitespace tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkPolicy {
    pub target_size: usize,
    pub overlap: usize,
    pub boundary: Boundary,
}

impl Default for ChunkPolicy {
    fn default() -> Self {
        Self {
            target_size: 200,
            overlap: 40,
            boundary: Boundary::SentenceAware,
        }
    }
}

impl ChunkPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.target_size == 0 {
            return Err("chunk target_size must be positive".into());
        }
        if self.overlap >= self.target_size {
            return Err(format!(
                "chunk overlap {} must be below target_size {}",
                self.overlap, self.target_size
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_key: String,
    pub version: u32,
    pub ordinal: u32,
    pub text: String,
    pub token_span: (usize, usize),
    pub byte_span: (usize, usize),
    pub acl: Vec<String>,
}

pub fn chunk_id(doc_key: &str, version: u32, ordinal: u32) -> String {
    format!("{doc_key}#v{version}#c{ordinal}")
}

/// Inverse of [`chunk_id`]: `(doc_key, version, ordinal)`.
pub fn parse_chunk_id(id: &str) -> Option<(&str, u32, u32)> {
    let mut parts = id.rsplitn(3, '#');
    let ord = parts.next()?.strip_prefix('c')?.parse().ok()?;
    let ver = parts.next()?.strip_prefix('v')?.parse().ok()?;
    let key = parts.next()?;
    Some((key, ver, ord))
}

fn hard_windows(start: usize, end: usize, policy: &ChunkPolicy, out: &mut Vec<(usize, usize)>) {
    let mut s = start;
    loop {
        let e = (s + policy.target_size).min(end);
        out.push((s, e));
        if e == end {
            break;
        }
        s = e - policy.overlap;
    }
}

/// Token windows `[start, end)` for a text with `n` tokens.
fn windows(text: &str, policy: &ChunkPolicy) -> (Vec<crate::text::Segment>, Vec<(usize, usize)>) {
    let segs = segments(text);
    let n = segs.len();
    let mut out = Vec::new();
    if n == 0 {
        return (segs, out);
    }
    match policy.boundary {
        Boundary::Hard => hard_windows(0, n, policy, &mut out),
        Boundary::SentenceAware => {
            let sents = sentence_ranges(text, &segs);
            let mut i = 0;
            let mut carry: Option<usize> = None;
            while i < sents.len() {
                let (s0, s1) = sents[i];
                if s1 - s0 > policy.target_size {
                    hard_windows(s0, s1, policy, &mut out);
                    carry = None;
                    i += 1;
                    continue;
                }
                let start = match carry {
                    Some(c) if s1 - c <= policy.target_size => c,
                    _ => s0,
                };
                let first = i;
                let mut end = s1;
                i += 1;
                while i < sents.len() && sents[i].1 - start <= policy.target_size {
                    end = sents[i].1;
                    i += 1;
                }
                out.push((start, end));
                // whole trailing sentences that fit in the overlap budget
                carry = (first..i)
                    .rev()
                    .map(|j| sents[j].0)
                    .take_while(|&b| end - b <= policy.overlap)
                    .filter(|&b| b > start)
                    .last();
            }
        }
    }
    (segs, out)
}

/// Split a document version into chunks according to `policy`.
pub fn chunk_text(doc_key: &str, version: u32, text: &str, acl: &[String], policy: &ChunkPolicy) -> Vec<Chunk> {
    let (segs, wins) = windows(text, policy);
    if wins.is_empty() {
        return vec![Chunk {
            chunk_id: chunk_id(doc_key, version, 0),
            doc_key: doc_key.to_string(),
            version,
            ordinal: 0,
            text: text.to_string(),
            token_span: (0, 0),
            byte_span: (0, text.len()),
            acl: acl.to_vec(),
        }];
    }
    wins.into_iter()
        .enumerate()
        .map(|(i, (s, e))| {
            let (bs, be) = (segs[s].start, segs[e - 1].end);
            Chunk {
                chunk_id: chunk_id(doc_key, version, i as u32),
                doc_key: doc_key.to_string(),
                version,
                ordinal: i as u32,
                text: text[bs..be].to_string(),
                token_span: (s, e),
                byte_span: (bs, be),
                acl: acl.to_vec(),
            }
        })
        .collect()
}

/// Concatenate chunks with the overlapping prefix of each successor removed.
pub fn reconstruct(chunks: &[Chunk]) -> String {
    let mut out = String::new();
    let mut covered = 0usize;
    for c in chunks {
        let skip = covered.saturating_sub(c.byte_span.0);
        out.push_str(&c.text[skip.min(c.text.len())..]);
        covered = covered.max(c.byte_span.1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn short_doc_single_chunk() {
        let text = words(50);
        let chunks = chunk_text("d", 1, &text, &[], &ChunkPolicy::default());
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, text);
        assert_eq!(chunks[0].chunk_id, "d#v1#c0");
    }

    #[test]
    fn hard_split_stride() {
        let policy = ChunkPolicy {
            target_size: 200,
            overlap: 40,
            boundary: Boundary::Hard,
        };
        let chunks = chunk_text("d", 1, &words(400), &[], &policy);
        let spans: Vec<_> = chunks.iter().map(|c| c.token_span).collect();
        assert_eq!(spans, [(0, 200), (160, 360), (320, 400)]);
    }

    #[test]
    fn sentence_aware_splits_at_boundary() {
        let s1 = format!("{}.", words(150));
        let s2 = format!("{}.", (0..150).map(|i| format!("x{i}")).collect::<Vec<_>>().join(" "));
        let text = format!("{s1} {s2}");
        let chunks = chunk_text("d", 1, &text, &[], &ChunkPolicy::default());
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].text.trim_end(), s1);
        assert_eq!(chunks[1].text, s2);
    }

    #[test]
    fn sentence_overlap_repeats_whole_sentences() {
        let policy = ChunkPolicy {
            target_size: 10,
            overlap: 4,
            boundary: Boundary::SentenceAware,
        };
        let text = "a b c. d e f. g h i. j k l. m n o.";
        let chunks = chunk_text("d", 1, text, &[], &policy);
        assert_eq!(chunks[0].text, "a b c. d e f. g h i. ");
        assert_eq!(chunks[1].text, "g h i. j k l. m n o.");
        assert_eq!(reconstruct(&chunks), text);
    }

    #[test]
    fn parse_chunk_id_roundtrip() {
        assert_eq!(parse_chunk_id("kb:a#b#v3#c12"), Some(("kb:a#b", 3, 12)));
        assert_eq!(parse_chunk_id("garbage"), None);
    }

    fn arb_text() -> impl Strategy<Value = String> {
        let word = prop_oneof![
            "[a-z]{1,8}",
            "[a-z]{1,6}[.!?]",
            Just("\n\n".to_string()),
            Just("  ".to_string()),
            Just("é".to_string()),
        ];
        (proptest::collection::vec(word, 1..120), "[ \t]{0,2}").prop_map(|(ws, tail)| {
            let mut s = ws.join(" ");
            s.push_str(&tail);
            s
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn reconstruction_is_byte_exact(text in arb_text(), target in 1usize..40, ov in 0usize..40, hard in any::<bool>()) {
            let policy = ChunkPolicy {
                target_size: target,
                overlap: ov % target,
                boundary: if hard { Boundary::Hard } else { Boundary::SentenceAware },
            };
            let chunks = chunk_text("d", 1, &text, &[], &policy);
            prop_assert_eq!(reconstruct(&chunks), text.clone());
            for (i, c) in chunks.iter().enumerate() {
                prop_assert_eq!(c.ordinal as usize, i);
                if c.token_span.1 > c.token_span.0 {
                    prop_assert!(c.token_span.1 - c.token_span.0 <= policy.target_size);
                }
            }
            for w in chunks.windows(2) {
                prop_assert!(w[1].token_span.0 <= w[0].token_span.1);
                prop_assert!(w[1].token_span.1 > w[0].token_span.1);
            }
        }
    }
}
