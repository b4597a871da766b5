use crate::error::{Error, Result};

/// Image ↔ caption ownership over a gallery of `n_images` images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    caption_to_image: Vec<usize>,
    image_to_captions: Vec<Vec<usize>>,
}

impl GroundTruth {
    /// `owners[c]` is the image index of caption `c`.
    pub fn from_owners(owners: Vec<usize>, n_images: usize) -> Result<Self> {
        let mut image_to_captions = vec![Vec::new(); n_images];
        for (c, &img) in owners.iter().enumerate() {
            if img >= n_images {
                return Err(Error::invalid(format!(
                    "caption {c} belongs to image {img}, but only {n_images} images exist"
                )));
            }
            image_to_captions[img].push(c);
        }
        Ok(Self {
            caption_to_image: owners,
            image_to_captions,
        })
    }

    /// `per_image` captions for each image, laid out image-major.
    pub fn uniform(n_images: usize, per_image: usize) -> Self {
        let owners = (0..n_images * per_image).map(|c| c / per_image).collect();
        Self::from_owners(owners, n_images).expect("owners in range")
    }

    pub fn n_images(&self) -> usize {
        self.image_to_captions.len()
    }

    pub fn n_captions(&self) -> usize {
        self.caption_to_image.len()
    }

    pub fn image_of(&self, caption: usize) -> usize {
        self.caption_to_image[caption]
    }

    pub fn captions_of(&self, image: usize) -> &[usize] {
        &self.image_to_captions[image]
    }

    pub fn is_match(&self, image: usize, caption: usize) -> bool {
        self.caption_to_image[caption] == image
    }

    pub fn caption_owners(&self) -> &[usize] {
        &self.caption_to_image
    }
}
