//! Line-oriented corpus files.
//!
//! ```text
//! #vocab: 123 132 213 231 312 321 0 1
//! #mode: state
//! #meta: {"generator":"word","seed":7,"degree":3,"length":2}
//! 132 312 | 0:132 1:231
//! ```

use std::fmt::Write as _;
use std::path::Path;

use super::{Corpus, CorpusMeta, Document, Vocab};
use crate::error::{Error, Result};
use crate::transformer::LossMode;

fn mode_name(m: LossMode) -> String {
    serde_json::to_value(m).ok().and_then(|v| v.as_str().map(str::to_string)).expect("unit variant")
}

pub fn serialize_corpus(c: &Corpus) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "#vocab: {}", c.vocab.tokens().join(" "));
    let _ = writeln!(out, "#mode: {}", mode_name(c.mode));
    let _ = writeln!(out, "#meta: {}", serde_json::to_string(&c.meta).expect("plain struct"));
    for d in &c.docs {
        let inputs: Vec<&str> = d.input_ids.iter().map(|&i| c.vocab.token(i).unwrap_or("?")).collect();
        let targets: Vec<String> = d
            .target_ids
            .iter()
            .enumerate()
            .filter_map(|(t, x)| x.map(|x| format!("{t}:{}", c.vocab.token(x).unwrap_or("?"))))
            .collect();
        let _ = writeln!(out, "{} | {}", inputs.join(" "), targets.join(" "));
    }
    out
}

pub fn deserialize_corpus(text: &str) -> Result<Corpus> {
    let mut vocab: Option<Vocab> = None;
    let mut mode: Option<LossMode> = None;
    let mut meta = CorpusMeta::default();
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let bad = |msg: String| Error::Malformed { line: ln, msg };
        if let Some(rest) = line.strip_prefix("#vocab:") {
            vocab = Some(Vocab::new(rest.split_whitespace().map(str::to_string).collect()).map_err(|e| bad(e.to_string()))?);
            continue;
        }
        if let Some(rest) = line.strip_prefix("#mode:") {
            mode = Some(
                serde_json::from_value(serde_json::Value::String(rest.trim().to_string()))
                    .map_err(|_| bad(format!("unknown mode {:?}", rest.trim())))?,
            );
            continue;
        }
        if let Some(rest) = line.strip_prefix("#meta:") {
            meta = serde_json::from_str(rest.trim()).map_err(|e| bad(e.to_string()))?;
            continue;
        }
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let v = vocab.as_ref().ok_or_else(|| bad("document before #vocab header".into()))?;
        let (inp, tgt) = line.split_once('|').ok_or_else(|| bad("missing '|' separator".into()))?;
        let input_ids = inp
            .split_whitespace()
            .map(|t| v.id(t).ok_or_else(|| bad(format!("unknown token {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let mut target_ids = vec![None; input_ids.len()];
        for pair in tgt.split_whitespace() {
            let (pos, tok) = pair.split_once(':').ok_or_else(|| bad(format!("bad target {pair:?}")))?;
            let pos: usize = pos.parse().map_err(|_| bad(format!("bad position in {pair:?}")))?;
            if pos >= input_ids.len() {
                return Err(bad(format!("target position {pos} beyond document length {}", input_ids.len())));
            }
            if target_ids[pos].is_some() {
                return Err(bad(format!("duplicate target at position {pos}")));
            }
            target_ids[pos] = Some(v.id(tok).ok_or_else(|| bad(format!("unknown token {tok:?}")))?);
        }
        docs.push(Document { input_ids, target_ids });
    }
    let vocab = vocab.ok_or(Error::Malformed { line: 1, msg: "missing #vocab header".into() })?;
    let mode = mode.ok_or(Error::Malformed { line: 1, msg: "missing #mode header".into() })?;
    let c = Corpus { mode, vocab, docs, meta };
    c.validate()?;
    Ok(c)
}

pub fn write_corpus(c: &Corpus, path: &Path) -> Result<()> {
    std::fs::write(path, serialize_corpus(c))?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    deserialize_corpus(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_language_corpus, gen_topic_corpus, gen_word_corpus, parity_targets, PhraseMap, TopicModelParams};

    #[test]
    fn round_trips() {
        let w = gen_word_corpus(3, 20, 6, 1).unwrap();
        let corpora = [
            w.clone(),
            parity_targets(&w).unwrap(),
            gen_topic_corpus(&TopicModelParams::preset("appG2").unwrap(), 3, 10, 8, 2).unwrap(),
            gen_language_corpus(5, 3, 4, &PhraseMap::s3_default()).unwrap(),
            gen_word_corpus(5, 10, 4, 3).unwrap(),
        ];
        for c in corpora {
            let text = serialize_corpus(&c);
            assert_eq!(deserialize_corpus(&text).unwrap(), c);
        }
    }

    #[test]
    fn corrupted_line_is_named() {
        let c = gen_word_corpus(3, 5, 4, 1).unwrap();
        let mut lines: Vec<String> = serialize_corpus(&c).lines().map(str::to_string).collect();
        lines[5] = "132 999 | 0:132".into();
        match deserialize_corpus(&lines.join("\n")) {
            Err(Error::Malformed { line, .. }) => assert_eq!(line, 6),
            other => panic!("{other:?}"),
        }
        lines[5] = "132 132 | 7:132".into();
        assert!(matches!(deserialize_corpus(&lines.join("\n")), Err(Error::Malformed { line: 6, .. })));
    }

    #[test]
    fn header_only_file_is_empty_corpus() {
        let c = deserialize_corpus("#vocab: a b c\n#mode: next-token\n").unwrap();
        assert!(c.is_empty());
        assert_eq!(c.vocab.tokens(), ["a", "b", "c"]);
        assert!(deserialize_corpus("").is_err());
    }
}
