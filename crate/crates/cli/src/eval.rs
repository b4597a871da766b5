use std::path::PathBuf;

use clap::ValueEnum;
use itm_core::dataio::Dataset;
use itm_core::evaluation::{rank_all, Direction, RecallReport};
use itm_core::model::{embed_captions, embed_images};
use itm_core::trainer::{evaluate_split, load_checkpoint, TrainingData};
use itm_core::Result;

use crate::common::{input_error, write_text};
use crate::Globals;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// dataset manifest
    #[arg(long)]
    data: PathBuf,
    /// feature matrix to use instead of the manifest's
    #[arg(long)]
    features: Option<PathBuf>,
    /// caption file to use instead of the manifest's
    #[arg(long)]
    captions: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// hybrid re-ranking of image queries
    #[arg(long, value_enum, default_value = "off")]
    rerank: Switch,
    /// similarity share of the re-ranking score
    #[arg(long, default_value_t = 0.7)]
    gamma: f64,
    /// also write the table as tab-separated values
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run_eval(_g: &Globals, a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let ds = Dataset::load_overriding(&a.data, a.features.as_deref(), a.captions.as_deref())?;
    let data = TrainingData::new(&ds, Some(ckpt.vocab.clone()))?;
    let images = ds.split(&a.split)?;
    let gamma = (a.rerank == Switch::On).then_some(a.gamma);
    let report = evaluate_split(&ckpt.state.params, &data, images, gamma)?;
    let rerank = match gamma {
        Some(g) => format!("re-ranked, gamma {g:.3}"),
        None => "no re-ranking".to_string(),
    };
    println!("{} split, {} images, {rerank}", a.split, images.len());
    println!("{report}");
    let tsv = format!("{}\n{}\n", RecallReport::TSV_HEADER, report.to_tsv_row());
    if let Some(p) = &a.out {
        write_text(p, &tsv)?;
    }
    Ok(())
}

#[derive(Debug, clap::Args)]
#[command(group = clap::ArgGroup::new("item").required(true).args(["image", "caption"]))]
pub struct QueryArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// image id to query with; captions are ranked
    #[arg(long)]
    image: Option<String>,
    /// caption id to query with; images are ranked
    #[arg(long)]
    caption: Option<String>,
    #[arg(long, default_value_t = 5)]
    top: usize,
}

pub fn run_query(_g: &Globals, a: QueryArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let ds = Dataset::load(&a.data)?;
    let data = TrainingData::new(&ds, Some(ckpt.vocab.clone()))?;
    let view = ds.view_split(&a.split)?;
    let store = data.store();
    let params = &ckpt.state.params;
    let images = embed_images(params, &ds.corpus, &store, &view.images)?;
    let captions = embed_captions(params, &ds.corpus, &store, &view.captions)?;
    let not_in_split = |kind: &str, id: &str| input_error(format!("{kind} {id} is not in the {} split", a.split));

    if let Some(id) = &a.image {
        let local = view
            .images
            .iter()
            .position(|&i| &ds.manifest.image_ids[i] == id)
            .ok_or_else(|| not_in_split("image", id))?;
        let ranking = rank_all(&images, &captions, Direction::I2T)?;
        let q = &ranking.queries[local];
        println!("rank\tcaption\tscore\tmatch\ttext");
        for (r, (&c, s)) in q.candidates.iter().zip(&q.scores).take(a.top).enumerate() {
            let rec = &ds.captions[view.captions[c]];
            let hit = if view.truth.image_of(c) == local { "*" } else { "" };
            println!("{}\t{}\t{s:.6}\t{hit}\t{}", r + 1, rec.caption_id, rec.text);
        }
    } else if let Some(id) = &a.caption {
        let local = view
            .captions
            .iter()
            .position(|&c| &ds.captions[c].caption_id == id)
            .ok_or_else(|| not_in_split("caption", id))?;
        let ranking = rank_all(&images, &captions, Direction::T2I)?;
        let q = &ranking.queries[local];
        println!("rank\timage\tscore\tmatch");
        for (r, (&i, s)) in q.candidates.iter().zip(&q.scores).take(a.top).enumerate() {
            let hit = if view.truth.image_of(local) == i { "*" } else { "" };
            println!("{}\t{}\t{s:.6}\t{hit}", r + 1, ds.manifest.image_ids[view.images[i]]);
        }
    }
    Ok(())
}
