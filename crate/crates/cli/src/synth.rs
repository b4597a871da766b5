use std::path::PathBuf;

use itm_core::dataio::{generate_synthetic, generative_alignment, SynthConfig};
use itm_core::Result;

use crate::common::read_json;
use crate::Globals;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// output directory; receives manifest.json and the data files
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    captions_per_image: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    test_images: Option<usize>,
    #[arg(long)]
    val_images: Option<usize>,
}

pub fn run(g: &Globals, a: Args) -> Result<()> {
    let mut cfg: SynthConfig = match &g.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let overrides = [
        (a.images, &mut cfg.n_images),
        (a.captions_per_image, &mut cfg.captions_per_image),
        (a.latent_dim, &mut cfg.latent_dim),
        (a.vocab_size, &mut cfg.vocab_size),
        (a.test_images, &mut cfg.test_images),
        (a.val_images, &mut cfg.val_images),
    ];
    for (value, slot) in overrides {
        if let Some(v) = value {
            *slot = v;
        }
    }
    if let Some(s) = a.noise_sigma {
        cfg.noise_sigma = s;
    }
    let manifest = generate_synthetic(&cfg, &a.out)?;
    println!("wrote {}", manifest.display());
    println!(
        "images {} (train {}, val {}, test {}), captions per image {}, noise sigma {:.3}",
        cfg.n_images,
        cfg.n_images - cfg.val_images - cfg.test_images,
        cfg.val_images,
        cfg.test_images,
        cfg.captions_per_image,
        cfg.noise_sigma
    );
    if g.verbose > 0 {
        let alignment = generative_alignment(&a.out, cfg.topic_words)?;
        println!("generative alignment {alignment:.4}");
    }
    Ok(())
}
