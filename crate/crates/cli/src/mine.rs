use std::fmt::Write as _;
use std::path::PathBuf;

use itm_core::dataio::{load_matrix, save_matrix, Dataset, Precision};
use itm_core::mining::{draw_quadruple_seeded, mine_in_chunks};
use itm_core::model::{embed_captions, embed_images};
use itm_core::trainer::{load_checkpoint, TrainingData};
use itm_core::Result;

use crate::common::{input_error, train_config, write_text};
use crate::Globals;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// dataset manifest; supplies ids and ground truth
    #[arg(long)]
    data: PathBuf,
    /// embed the split with this model
    #[arg(long, conflicts_with_all = ["image_embeddings", "caption_embeddings"])]
    checkpoint: Option<PathBuf>,
    /// precomputed unit-norm image embeddings, one row per split image
    #[arg(long, requires = "caption_embeddings")]
    image_embeddings: Option<PathBuf>,
    /// precomputed unit-norm caption embeddings, split captions grouped by image
    #[arg(long, requires = "image_embeddings")]
    caption_embeddings: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    split: String,
    /// mined-pairs file (tab-separated, one record per anchor)
    #[arg(long)]
    out: PathBuf,
    /// also write the embeddings used, as images.amsp and captions.amsp
    #[arg(long, value_name = "DIR")]
    save_embeddings: Option<PathBuf>,
}

pub const HEADER: &str = "anchor_image\tanchor_caption\tt_bar\tv_bar\tt_dbar\tv_dbar";

pub fn run(g: &Globals, a: Args) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let view = ds.view_split(&a.split)?;
    let ckpt = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let cfg = train_config(g.config.as_deref(), ckpt.as_ref().map(|c| &c.config), g.seed)?;

    let (images, captions) = match (&ckpt, &a.image_embeddings, &a.caption_embeddings) {
        (Some(ck), _, _) => {
            let data = TrainingData::new(&ds, Some(ck.vocab.clone()))?;
            let store = data.store();
            let p = &ck.state.params;
            (
                embed_images(p, &ds.corpus, &store, &view.images)?,
                embed_captions(p, &ds.corpus, &store, &view.captions)?,
            )
        }
        (None, Some(i), Some(c)) => (load_matrix(i)?, load_matrix(c)?),
        _ => return Err(input_error("give --checkpoint or both embedding files")),
    };
    if let Some(dir) = &a.save_embeddings {
        save_matrix(&dir.join("images.amsp"), &images, Precision::F32)?;
        save_matrix(&dir.join("captions.amsp"), &captions, Precision::F32)?;
    }

    let lists = mine_in_chunks(
        &images,
        &captions,
        &view.truth,
        cfg.mine_images,
        cfg.mine_captions,
        cfg.top_k,
        cfg.top_q,
    )?;
    let image_id = |local: usize| &ds.manifest.image_ids[view.images[local]];
    let caption_id = |local: usize| &ds.captions[view.captions[local]].caption_id;
    let mut out = String::from(HEADER);
    out.push('\n');
    for c in 0..view.captions.len() {
        let owner = view.truth.image_of(c);
        // one independent draw per anchor so records do not depend on order
        let seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(c as u64);
        let m = draw_quadruple_seeded(&lists, &view.truth, owner, c, seed)?;
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            image_id(m.anchor_image),
            caption_id(m.anchor_caption),
            caption_id(m.t_bar),
            image_id(m.v_bar),
            caption_id(m.t_dbar),
            image_id(m.v_dbar)
        )
        .expect("writing to a String");
    }
    write_text(&a.out, &out)?;
    println!(
        "mined {} anchors over {} images / {} captions (k {}, q {}) into {}",
        view.captions.len(),
        view.images.len(),
        view.captions.len(),
        cfg.top_k,
        cfg.top_q,
        a.out.display()
    );
    Ok(())
}
