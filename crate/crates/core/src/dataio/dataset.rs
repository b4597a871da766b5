use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cider::tokenize;
use crate::consensus::CorpusEmbedding;
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::pairs::GroundTruth;

use super::{read_bytes, read_text, write_atomic};

/// Dataset description; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// `(n_images · regions_per_image) × D_in` matrix, image-major
    pub features: String,
    pub regions_per_image: usize,
    /// image id of each feature block, in file order
    pub image_ids: Vec<String>,
    pub captions: String,
    /// `z × d` concept embeddings
    pub corpus: String,
    /// one concept word per line, aligned with corpus rows
    pub concepts: String,
    pub splits: Splits,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionRecord {
    pub image_id: String,
    pub caption_id: String,
    pub text: String,
}

/// Parses `image_id TAB caption_id TAB text` lines; blank lines are skipped.
pub fn read_captions(path: &Path) -> Result<Vec<CaptionRecord>> {
    parse_captions(&read_text(path)?, path)
}

fn parse_captions(text: &str, origin: &Path) -> Result<Vec<CaptionRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(img), Some(cap), Some(txt)) if !img.is_empty() && !cap.is_empty() => out.push(CaptionRecord {
                image_id: img.to_string(),
                caption_id: cap.to_string(),
                text: txt.to_string(),
            }),
            _ => {
                return Err(Error::Malformed(format!(
                    "{}:{}: expected image_id<TAB>caption_id<TAB>text",
                    origin.display(),
                    lineno + 1
                )))
            }
        }
    }
    Ok(out)
}

pub fn write_captions(path: &Path, captions: &[CaptionRecord]) -> Result<()> {
    let mut s = String::new();
    for c in captions {
        if [&c.image_id, &c.caption_id, &c.text].iter().any(|f| f.contains(['\t', '\n'])) {
            return Err(Error::invalid(format!("caption {} contains a tab or newline", c.caption_id)));
        }
        s.push_str(&format!("{}\t{}\t{}\n", c.image_id, c.caption_id, c.text));
    }
    write_atomic(path, s.as_bytes())
}

pub const UNK: &str = "<unk>";

/// Word ↔ index map with `<unk>` at index 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    /// Sorted distinct words of `captions`, after `<unk>`.
    pub fn build<'a, S: AsRef<str> + 'a>(captions: impl IntoIterator<Item = &'a Vec<S>>) -> Self {
        let set: BTreeSet<&str> = captions
            .into_iter()
            .flat_map(|c| c.iter().map(AsRef::as_ref))
            .filter(|w| *w != UNK)
            .collect();
        let words = std::iter::once(UNK.to_string())
            .chain(set.into_iter().map(str::to_string))
            .collect::<Vec<_>>();
        Self::from(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, i: usize) -> &str {
        &self.words[i]
    }

    pub fn get(&self, w: &str) -> Option<usize> {
        self.index.get(w).copied()
    }

    /// Unknown words map to `<unk>`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.get(t.as_ref()).unwrap_or(0)).collect()
    }
}

/// Images and captions of one split, with split-local ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitView {
    /// dataset image indices
    pub images: Vec<usize>,
    /// dataset caption indices, grouped by image in `images` order
    pub captions: Vec<usize>,
    /// local caption → local image
    pub truth: GroundTruth,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    /// per image, `regions_per_image × D_in`
    pub regions: Vec<DenseMatrix>,
    pub captions: Vec<CaptionRecord>,
    pub caption_tokens: Vec<Vec<String>>,
    /// dataset image index of each caption
    pub caption_image: Vec<usize>,
    pub image_captions: Vec<Vec<usize>>,
    pub corpus: CorpusEmbedding,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// hex SHA-256 over the manifest and every file it references
    pub fingerprint: String,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        Self::load_overriding(manifest_path, None, None)
    }

    /// Loads a manifest but reads features and/or captions from other files.
    pub fn load_overriding(manifest_path: &Path, features: Option<&Path>, captions: Option<&Path>) -> Result<Self> {
        let manifest_bytes = read_bytes(manifest_path)?;
        let mut manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        // overrides are relative to the working directory, not the manifest
        let absolute = |p: &Path| -> Result<String> {
            let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
            Ok(cwd.join(p).to_string_lossy().into_owned())
        };
        if let Some(p) = features {
            manifest.features = absolute(p)?;
        }
        if let Some(p) = captions {
            manifest.captions = absolute(p)?;
        }
        let resolve = |p: &str| root.join(p);

        let mut hasher = Sha256::new();
        hasher.update(&manifest_bytes);
        let mut hashed = |path: &Path| -> Result<Vec<u8>> {
            let bytes = read_bytes(path)?;
            hasher.update((bytes.len() as u64).to_le_bytes());
            hasher.update(&bytes);
            Ok(bytes)
        };

        let features_path = resolve(&manifest.features);
        let features = super::decode_matrix(&hashed(&features_path)?, &features_path)?;
        let captions_path = resolve(&manifest.captions);
        let captions = parse_captions(
            &String::from_utf8(hashed(&captions_path)?)
                .map_err(|_| Error::Malformed(format!("{}: not UTF-8", captions_path.display())))?,
            &captions_path,
        )?;
        let corpus_path = resolve(&manifest.corpus);
        let q = super::decode_matrix(&hashed(&corpus_path)?, &corpus_path)?;
        let concepts_path = resolve(&manifest.concepts);
        let concepts: Vec<String> = String::from_utf8(hashed(&concepts_path)?)
            .map_err(|_| Error::Malformed(format!("{}: not UTF-8", concepts_path.display())))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        let fingerprint = hex::encode(hasher.finalize());

        let o = manifest.regions_per_image;
        let n_images = manifest.image_ids.len();
        if o == 0 || n_images == 0 {
            return Err(Error::Malformed("manifest lists no images or zero regions per image".into()));
        }
        if features.rows() != n_images * o {
            return Err(Error::Malformed(format!(
                "feature matrix has {} rows, expected {n_images} images × {o} regions",
                features.rows()
            )));
        }
        let d_in = features.cols();
        let regions = (0..n_images)
            .map(|i| DenseMatrix::new(o, d_in, features.data()[i * o * d_in..(i + 1) * o * d_in].to_vec()))
            .collect::<Result<Vec<_>>>()?;

        let mut image_index = HashMap::new();
        for (i, id) in manifest.image_ids.iter().enumerate() {
            if image_index.insert(id.as_str(), i).is_some() {
                return Err(Error::Malformed(format!("duplicate image id {id}")));
            }
        }
        let mut caption_ids = BTreeSet::new();
        let mut caption_image = Vec::with_capacity(captions.len());
        let mut image_captions = vec![Vec::new(); n_images];
        for (c, rec) in captions.iter().enumerate() {
            let img = *image_index
                .get(rec.image_id.as_str())
                .ok_or_else(|| Error::Malformed(format!("caption {} refers to unknown image {}", rec.caption_id, rec.image_id)))?;
            if !caption_ids.insert(rec.caption_id.as_str()) {
                return Err(Error::Malformed(format!("duplicate caption id {}", rec.caption_id)));
            }
            caption_image.push(img);
            image_captions[img].push(c);
        }
        if let Some(i) = image_captions.iter().position(Vec::is_empty) {
            return Err(Error::Malformed(format!("image {} has no captions", manifest.image_ids[i])));
        }
        let caption_tokens: Vec<Vec<String>> = captions.iter().map(|c| tokenize(&c.text)).collect();
        if let Some(c) = caption_tokens.iter().position(Vec::is_empty) {
            return Err(Error::Malformed(format!("caption {} has no tokens", captions[c].caption_id)));
        }

        if q.rows() != concepts.len() {
            return Err(Error::Malformed(format!(
                "corpus has {} rows but {} concept names",
                q.rows(),
                concepts.len()
            )));
        }
        let corpus = CorpusEmbedding::new(q, concepts)?;

        let mut split_of = vec![None; n_images];
        let mut split_indices = |ids: &[String], name: &'static str| -> Result<Vec<usize>> {
            ids.iter()
                .map(|id| {
                    let i = *image_index
                        .get(id.as_str())
                        .ok_or_else(|| Error::Malformed(format!("{name} split names unknown image {id}")))?;
                    if let Some(prev) = split_of[i].replace(name) {
                        return Err(Error::Malformed(format!("image {id} appears in both {prev} and {name} splits")));
                    }
                    Ok(i)
                })
                .collect()
        };
        let train = split_indices(&manifest.splits.train, "train")?;
        let val = split_indices(&manifest.splits.val, "val")?;
        let test = split_indices(&manifest.splits.test, "test")?;
        if let Some(i) = split_of.iter().position(Option::is_none) {
            return Err(Error::Malformed(format!("image {} belongs to no split", manifest.image_ids[i])));
        }

        Ok(Self {
            root,
            manifest,
            regions,
            captions,
            caption_tokens,
            caption_image,
            image_captions,
            corpus,
            train,
            val,
            test,
            fingerprint,
        })
    }

    pub fn n_images(&self) -> usize {
        self.regions.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.regions[0].cols()
    }

    pub fn split(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::invalid(format!("unknown split {other}; expected train, val or test"))),
        }
    }

    pub fn view(&self, images: &[usize]) -> Result<SplitView> {
        if images.is_empty() {
            return Err(Error::Empty("split view"));
        }
        let mut captions = Vec::new();
        let mut owners = Vec::new();
        for (local, &img) in images.iter().enumerate() {
            for &c in &self.image_captions[img] {
                captions.push(c);
                owners.push(local);
            }
        }
        Ok(SplitView {
            images: images.to_vec(),
            captions,
            truth: GroundTruth::from_owners(owners, images.len())?,
        })
    }

    pub fn view_split(&self, name: &str) -> Result<SplitView> {
        self.view(self.split(name)?)
    }

    pub fn image_index(&self, id: &str) -> Option<usize> {
        self.manifest.image_ids.iter().position(|x| x == id)
    }

    pub fn caption_index(&self, id: &str) -> Option<usize> {
        self.captions.iter().position(|c| c.caption_id == id)
    }

    /// Reference captions of every image, for building an IDF table.
    pub fn reference_corpus(&self, images: &[usize]) -> Vec<Vec<Vec<String>>> {
        images
            .iter()
            .map(|&i| self.image_captions[i].iter().map(|&c| self.caption_tokens[c].clone()).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caption_lines_parse_and_reject() {
        let p = Path::new("caps.tsv");
        let ok = parse_captions("i1\tc1\tA dog runs\n\ni2\tc2\ttext\twith tab\n", p).unwrap();
        assert_eq!(ok.len(), 2);
        assert_eq!(ok[1].text, "text\twith tab");
        let err = parse_captions("i1\tc1\n", p).unwrap_err();
        assert!(err.to_string().contains("caps.tsv:1"));
    }

    #[test]
    fn vocabulary_is_sorted_with_unk_first() {
        let caps = vec![vec!["dog", "runs"], vec!["a", "dog"]];
        let v = Vocabulary::build(&caps);
        assert_eq!(v.word(0), UNK);
        assert_eq!((1..v.len()).map(|i| v.word(i)).collect::<Vec<_>>(), ["a", "dog", "runs"]);
        assert_eq!(v.encode(&["dog", "cat"]), vec![2, 0]);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocabulary>(&json).unwrap(), v);
    }
}
