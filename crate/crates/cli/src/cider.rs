use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use itm_core::cider::{build_idf, cider_score, tokenize};
use itm_core::dataio::read_captions;
use itm_core::Result;

use crate::common::{input_error, write_text};
use crate::Globals;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// caption file of candidates: image_id, caption_id, text
    #[arg(long)]
    candidates: PathBuf,
    /// caption file of references; also the document-frequency corpus
    #[arg(long)]
    references: PathBuf,
    /// write the scores here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(_g: &Globals, a: Args) -> Result<()> {
    let candidates = read_captions(&a.candidates)?;
    let references = read_captions(&a.references)?;
    let mut by_image: BTreeMap<&str, Vec<Vec<String>>> = BTreeMap::new();
    for r in &references {
        by_image.entry(&r.image_id).or_default().push(tokenize(&r.text));
    }
    let corpus: Vec<Vec<Vec<String>>> = by_image.values().cloned().collect();
    let idf = build_idf(&corpus)?;

    let mut out = String::new();
    for c in &candidates {
        let refs = by_image
            .get(c.image_id.as_str())
            .ok_or_else(|| input_error(format!("candidate {} names image {} without references", c.caption_id, c.image_id)))?;
        let s = cider_score(&tokenize(&c.text), refs, &idf)?;
        write!(out, "{}\t{:.6}", c.caption_id, s.value).expect("writing to a String");
        for p in s.per_n {
            write!(out, "\t{p:.6}").expect("writing to a String");
        }
        out.push('\n');
    }
    match &a.out {
        Some(p) => write_text(p, &out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}
