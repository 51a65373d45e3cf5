//! Corpus files: UTF-8, one sentence per line of space-separated decimal
//! token ids (framed with BOS/EOS). Parallel corpora are two aligned files
//! `<pair>.<srclang>` / `<pair>.<tgtlang>`; monolingual files `<name>.<lang>`.

use std::fs;
use std::path::{Path, PathBuf};

use super::{LanguageId, TokenSequence};
use crate::error::{Error, Result};

pub fn write_mono(path: &Path, sentences: &[TokenSequence]) -> Result<()> {
    let mut out = String::new();
    for s in sentences {
        let line: Vec<String> = s.ids.iter().map(|t| t.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_mono(
    path: &Path,
    lang: &LanguageId,
    max_source_length: usize,
    vocab_size: usize,
) -> Result<Vec<TokenSequence>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut ids = Vec::new();
        for tok in line.split_ascii_whitespace() {
            let id: u32 = tok.parse().map_err(|_| {
                Error::InvalidArgument(format!(
                    "{}:{}: not a token id: {:?}",
                    path.display(),
                    lineno + 1,
                    tok
                ))
            })?;
            if id as usize >= vocab_size {
                return Err(Error::Vocab(format!(
                    "{}:{}: token id {} outside vocabulary of size {}",
                    path.display(),
                    lineno + 1,
                    id,
                    vocab_size
                )));
            }
            ids.push(id);
        }
        out.push(TokenSequence::from_framed(ids, lang.clone(), max_source_length)?);
    }
    Ok(out)
}

pub fn parallel_paths(dir: &Path, pair: &str, src: &LanguageId, tgt: &LanguageId) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{}.{}", pair, src)),
        dir.join(format!("{}.{}", pair, tgt)),
    )
}

pub fn write_parallel(
    dir: &Path,
    pair: &str,
    src_lang: &LanguageId,
    tgt_lang: &LanguageId,
    pairs: &[(TokenSequence, TokenSequence)],
) -> Result<(PathBuf, PathBuf)> {
    let (src_path, tgt_path) = parallel_paths(dir, pair, src_lang, tgt_lang);
    let src: Vec<TokenSequence> = pairs.iter().map(|p| p.0.clone()).collect();
    let tgt: Vec<TokenSequence> = pairs.iter().map(|p| p.1.clone()).collect();
    write_mono(&src_path, &src)?;
    write_mono(&tgt_path, &tgt)?;
    Ok((src_path, tgt_path))
}

pub fn read_parallel(
    dir: &Path,
    pair: &str,
    src_lang: &LanguageId,
    tgt_lang: &LanguageId,
    max_source_length: usize,
    vocab_size: usize,
) -> Result<Vec<(TokenSequence, TokenSequence)>> {
    let (src_path, tgt_path) = parallel_paths(dir, pair, src_lang, tgt_lang);
    let src = read_mono(&src_path, src_lang, max_source_length, vocab_size)?;
    let tgt = read_mono(&tgt_path, tgt_lang, max_source_length, vocab_size)?;
    if src.len() != tgt.len() {
        return Err(Error::InvalidArgument(format!(
            "parallel files are not aligned: {} has {} lines, {} has {}",
            src_path.display(),
            src.len(),
            tgt_path.display(),
            tgt.len()
        )));
    }
    Ok(src.into_iter().zip(tgt).collect())
}
