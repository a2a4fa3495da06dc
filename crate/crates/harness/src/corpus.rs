//! Corpus generation and its on-disk form.
//!
//! A corpus directory holds `manifest.json` (scene records, captions, split,
//! featurizer shapes) and two little-endian tensor files, `images.bin` and
//! `texts.bin`. Identical parameters give identical bytes on every machine.

use std::fs;
use std::path::{Path, PathBuf};

use dape_core::model::{ImageInput, TextInput};
use dape_core::{DapeConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};
use crate::featurize::{ImageFeaturizer, TextFeaturizer};
use crate::scene::{random_scene, DensityMix, SyntheticScene, CANVAS};

pub const MANIFEST: &str = "manifest.json";
pub const IMAGES: &str = "images.bin";
pub const TEXTS: &str = "texts.bin";
const IMAGE_MAGIC: &[u8; 8] = b"DAPEIMG1";
const TEXT_MAGIC: &[u8; 8] = b"DAPETXT1";
const EVAL_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusParams {
    pub n: usize,
    pub seed: u64,
    pub density_mix: DensityMix,
    pub feature_hw: [usize; 2],
    pub image_channels: usize,
    pub text_len: usize,
    pub text_channels: usize,
}

impl CorpusParams {
    /// Feature shapes taken from a model configuration.
    pub fn for_model(n: usize, seed: u64, density_mix: DensityMix, cfg: &DapeConfig) -> Self {
        CorpusParams {
            n,
            seed,
            density_mix,
            feature_hw: cfg.feature_hw,
            image_channels: cfg.image_channels,
            text_len: cfg.text_len,
            text_channels: cfg.text_channels,
        }
    }

    pub fn patch(&self) -> Result<usize> {
        let [h, w] = self.feature_hw;
        if h == 0 || h != w || CANVAS % h != 0 {
            return Err(HarnessError::Usage(format!(
                "feature map {h}×{w} must be square and divide the {CANVAS}px canvas"
            )));
        }
        Ok(CANVAS / h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(HarnessError::Usage(format!("a corpus needs at least 4 scenes, got {}", self.n)));
        }
        self.density_mix.validate()?;
        self.patch()?;
        if self.image_channels == 0 || self.text_channels == 0 {
            return Err(HarnessError::Usage("featurizer widths must be positive".into()));
        }
        Ok(())
    }

    /// Stable identifier of the parameters.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("params serialize")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub params: CorpusParams,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub scenes: Vec<SyntheticScene>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    /// One `h×w×c_img` map per scene.
    pub images: Vec<Tensor<f64>>,
    /// One `l×c_txt` sequence per scene.
    pub texts: Vec<Tensor<f64>>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Eval indices: the `round(0.2·n)` scenes with the smallest split hash.
pub fn split(seed: u64, scenes: &[SyntheticScene]) -> (Vec<usize>, Vec<usize>) {
    let mut keyed: Vec<([u8; 32], usize)> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut h = Sha256::new();
            h.update(b"dape-split");
            h.update(seed.to_le_bytes());
            h.update((i as u64).to_le_bytes());
            h.update(s.caption.as_bytes());
            (h.finalize().into(), i)
        })
        .collect();
    keyed.sort();
    let n_eval = (EVAL_FRACTION * scenes.len() as f64).round() as usize;
    let mut eval: Vec<usize> = keyed[..n_eval].iter().map(|k| k.1).collect();
    eval.sort_unstable();
    let train = (0..scenes.len()).filter(|i| eval.binary_search(i).is_err()).collect();
    (train, eval)
}

pub fn generate(params: &CorpusParams) -> Result<Corpus> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let scenes: Vec<SyntheticScene> = (0..params.n)
        .map(|_| {
            let class = params.density_mix.sample(&mut rng);
            random_scene(&mut rng, class)
        })
        .collect();
    let img = ImageFeaturizer::new(params.patch()?, params.image_channels);
    let txt = TextFeaturizer::new(params.text_len, params.text_channels);
    let images = scenes.iter().map(|s| img.scene(s)).collect::<Result<Vec<_>>>()?;
    let texts = scenes.iter().map(|s| txt.apply(&s.caption)).collect::<Result<Vec<_>>>()?;
    let (train, eval) = split(params.seed, &scenes);
    Ok(Corpus { manifest: CorpusManifest { params: params.clone(), train, eval, scenes }, images, texts })
}

fn tensor_bytes(magic: &[u8; 8], items: &[Tensor<f64>]) -> Vec<u8> {
    let shape: &[usize] = items.first().map_or(&[], |t| t.shape());
    let mut out = Vec::with_capacity(16 + 8 * shape.len() + items.iter().map(|t| 8 * t.len()).sum::<usize>());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(items.len() as u64).to_le_bytes());
    out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
    for &s in shape {
        out.extend_from_slice(&(s as u64).to_le_bytes());
    }
    for t in items {
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn parse_tensors(path: &Path, magic: &[u8; 8], bytes: &[u8]) -> Result<Vec<Tensor<f64>>> {
    let bad = |m: &str| HarnessError::format(path, m);
    let word = |k: usize| -> Result<u64> {
        let b = bytes.get(8 + 8 * k..16 + 8 * k).ok_or_else(|| bad("truncated header"))?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    };
    if bytes.get(..8) != Some(&magic[..]) {
        return Err(bad("wrong magic"));
    }
    let n = word(0)? as usize;
    let rank = word(1)? as usize;
    if rank > 4 {
        return Err(bad("implausible rank"));
    }
    let shape: Vec<usize> = (0..rank).map(|k| word(2 + k).map(|v| v as usize)).collect::<Result<_>>()?;
    let per: usize = shape.iter().product();
    let body = &bytes[8 * (3 + rank)..];
    if body.len() != n * per * 8 {
        return Err(bad("payload length does not match the header"));
    }
    let values: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    values.chunks(per.max(1)).take(n).map(|c| Tensor::new(&shape, c.to_vec()).map_err(|e| bad(&e.to_string()))).collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| HarnessError::io(path, e))
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// File name and contents of every corpus file.
    pub fn encode(&self) -> [(&'static str, Vec<u8>); 3] {
        let mut json = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        json.push(b'\n');
        [(MANIFEST, json), (IMAGES, tensor_bytes(IMAGE_MAGIC, &self.images)), (TEXTS, tensor_bytes(TEXT_MAGIC, &self.texts))]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        for (name, bytes) in self.encode() {
            write(&dir.join(name), &bytes)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let manifest: CorpusManifest =
            serde_json::from_slice(&read(&mpath)?).map_err(|e| HarnessError::format(&mpath, e))?;
        let ipath = dir.join(IMAGES);
        let images = parse_tensors(&ipath, IMAGE_MAGIC, &read(&ipath)?)?;
        let tpath = dir.join(TEXTS);
        let texts = parse_tensors(&tpath, TEXT_MAGIC, &read(&tpath)?)?;
        let n = manifest.scenes.len();
        if images.len() != n || texts.len() != n {
            return Err(HarnessError::format(dir, format!("{n} scenes, {} images, {} texts", images.len(), texts.len())));
        }
        Ok(Corpus { manifest, images, texts })
    }

    /// The corpus must have been featurized for this model's input shapes.
    pub fn check_model(&self, cfg: &DapeConfig) -> Result<()> {
        let p = &self.manifest.params;
        let want = (cfg.feature_hw, cfg.image_channels, cfg.text_len, cfg.text_channels);
        let have = (p.feature_hw, p.image_channels, p.text_len, p.text_channels);
        if want != have {
            return Err(HarnessError::Usage(format!(
                "corpus features (hw, c_img, l, c_txt) = {have:?} but the model expects {want:?}"
            )));
        }
        Ok(())
    }

    pub fn image_inputs(&self, idx: &[usize], cutoff_frac: f64) -> Result<Vec<ImageInput<f64>>> {
        idx.iter().map(|&i| Ok(ImageInput::new(self.images[i].clone(), cutoff_frac)?)).collect()
    }

    pub fn text_inputs(&self, idx: &[usize]) -> Vec<TextInput<f64>> {
        idx.iter().map(|&i| TextInput::new(self.texts[i].clone())).collect()
    }
}

/// Generate and write; returns the directory written.
pub fn gen_corpus(params: &CorpusParams, dir: &Path) -> Result<(Corpus, PathBuf)> {
    let c = generate(params)?;
    c.save(dir)?;
    Ok((c, dir.to_path_buf()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: usize, mix: [f64; 3]) -> CorpusParams {
        CorpusParams::for_model(n, 7, DensityMix(mix), &DapeConfig::default())
    }

    #[test]
    fn split_is_eighty_twenty() {
        let c = generate(&params(64, [1.0, 1.0, 1.0])).unwrap();
        assert_eq!(c.manifest.eval.len(), 13);
        assert_eq!(c.manifest.train.len(), 51);
        let mut all = [c.manifest.train.clone(), c.manifest.eval.clone()].concat();
        all.sort_unstable();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate(&params(6, [1.0, 1.0, 1.0])).unwrap();
        c.save(dir.path()).unwrap();
        assert_eq!(Corpus::load(dir.path()).unwrap(), c);
        let ipath = dir.path().join(IMAGES);
        let bytes = fs::read(&ipath).unwrap();
        fs::write(&ipath, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(Corpus::load(dir.path()), Err(HarnessError::Format { .. })));
        assert!(matches!(Corpus::load(&dir.path().join("nope")), Err(HarnessError::Io { .. })));
    }

    #[test]
    fn too_small_or_mismatched() {
        assert!(generate(&params(3, [1.0, 1.0, 1.0])).is_err());
        let c = generate(&params(4, [1.0, 0.0, 0.0])).unwrap();
        assert!(c.check_model(&DapeConfig::default()).is_ok());
        assert!(c.check_model(&DapeConfig { text_len: 16, ..Default::default() }).is_err());
    }
}
