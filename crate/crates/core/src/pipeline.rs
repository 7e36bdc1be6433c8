//! Glue between the modules: layered run configuration, track splits, window
//! sets and the on-disk clip store written by `preprocess`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cropper::{crop_clip, read_clip, write_clip, CropConfig, CropMode};
use crate::error::{Error, Result};
use crate::models::{clip_tensor, Architecture, ModelConfig};
use crate::sampler::{
    apply_split, balance_training_set, read_windows, sample_windows, split_random, write_windows, ObservationWindow,
    SamplingConfig, SplitConfig,
};
use crate::synthgen::DatasetSpec;
use crate::trackdata::{load_manifest, write_atomic, write_manifest, FrameSource, Manifest, SplitTag};
use crate::trainer::{parallel_map, Example, TrainConfig};

/// Architecture hyperparameters that do not depend on the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_hidden: usize,
    /// Frames per tubelet (vivit).
    pub tubelet_frames: usize,
    /// Tubelet patch side in pixels; a quarter of the input side when unset.
    pub patch: Option<usize>,
    pub positional_encoding: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            d: 64,
            heads: 4,
            blocks: 2,
            ffn_hidden: 128,
            tubelet_frames: 2,
            patch: None,
            positional_encoding: true,
        }
    }
}

impl ModelSettings {
    pub fn model_config(&self, arch: Architecture, input_size: usize, frames: usize, seed: u64) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::new(arch, input_size);
        cfg.frames = frames;
        cfg.d = self.d;
        cfg.heads = self.heads;
        cfg.blocks = self.blocks;
        cfg.ffn_hidden = self.ffn_hidden;
        cfg.tubelet = [self.tubelet_frames, self.patch.unwrap_or(input_size / 4)];
        cfg.positional_encoding = self.positional_encoding;
        cfg.seed = seed;
        cfg.regenerate_layers();
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything a run can be configured with. Loaded from TOML on top of the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Overrides every per-section seed when set.
    pub seed: Option<u64>,
    pub workers: usize,
    pub synth: DatasetSpec,
    pub crop: CropConfig,
    pub sampling: SamplingConfig,
    pub split: SplitConfig,
    pub model: ModelSettings,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: None,
            workers: 1,
            synth: DatasetSpec::default(),
            crop: CropConfig::default(),
            sampling: SamplingConfig::default(),
            split: SplitConfig::default(),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
        }
    }
}

/// TOML has no null; unset options are simply absent.
fn strip_nulls(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.retain(|_, x| !x.is_null());
            m.values_mut().for_each(strip_nulls);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_nulls),
        _ => {}
    }
}

fn merge(base: &mut Value, over: Value, path: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => return Err(Error::invalid(format!("unknown config key {here}"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

impl PipelineConfig {
    /// Defaults overlaid with a TOML document; unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let over: Value = toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        let mut base = Self::default().file_value()?;
        merge(&mut base, over, "")?;
        let mut cfg: PipelineConfig =
            serde_json::from_value(base).map_err(|e| Error::invalid(format!("config: {e}")))?;
        if let Some(seed) = cfg.seed {
            cfg.set_seed(seed);
        }
        cfg.train.split = cfg.split.clone();
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.synth.seed = seed;
        self.sampling.seed = seed;
        self.split.seed = seed;
        self.train.seed = seed;
        self.train.split.seed = seed;
    }

    pub fn to_toml(&self) -> Result<String> {
        let mut v = self.file_value()?;
        strip_nulls(&mut v);
        toml::to_string(&v).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    /// The settable keys. `train.split` is derived from `split` and never appears in files.
    fn file_value(&self) -> Result<Value> {
        let mut v = serde_json::to_value(self)?;
        if let Some(train) = v.get_mut("train").and_then(Value::as_object_mut) {
            train.remove("split");
        }
        Ok(v)
    }

    /// Settings tuned for [`DatasetSpec`] scenes: one window per track, static
    /// windows that keep the curb marker in view, and a small model.
    pub fn for_synthetic(spec: &DatasetSpec) -> Self {
        let mut cfg = PipelineConfig {
            synth: spec.clone(),
            crop: spec.crop(CropMode::Dynamic, 32),
            sampling: spec.sampling(),
            model: ModelSettings {
                d: 32,
                ffn_hidden: 64,
                ..ModelSettings::default()
            },
            ..PipelineConfig::default()
        };
        cfg.split.seed = spec.seed;
        cfg.train.seed = spec.seed;
        cfg.train.split = cfg.split.clone();
        cfg
    }
}

/// `m` with split tags; tracks already tagged keep their tags.
pub fn ensure_split(m: &Manifest, cfg: &SplitConfig) -> Result<Manifest> {
    if m.tracks.iter().any(|t| t.split != SplitTag::Unassigned) {
        return Ok(m.clone());
    }
    let split = split_random(m, cfg.train_ratio, cfg.test_ratio, cfg.seed)?;
    Ok(apply_split(m, &split))
}

/// Windows of the tracks tagged `tag`. Training windows are flip-augmented and balanced.
pub fn split_windows(m: &Manifest, sampling: &SamplingConfig, tag: SplitTag) -> Result<Vec<ObservationWindow>> {
    sampling.validate()?;
    let windows = sample_windows(m.tracks.iter().filter(|t| t.split == tag), sampling);
    if windows.is_empty() {
        return Err(Error::invalid(format!("no admissible windows in the {tag:?} split")));
    }
    match tag {
        SplitTag::Train => balance_training_set(&windows, sampling.seed),
        _ => Ok(windows),
    }
}

pub fn split_name(tag: SplitTag) -> &'static str {
    match tag {
        SplitTag::Train => "train",
        SplitTag::Test => "test",
        SplitTag::Unassigned => "unassigned",
    }
}

pub fn parse_split(s: &str) -> Result<SplitTag> {
    match s {
        "train" => Ok(SplitTag::Train),
        "test" => Ok(SplitTag::Test),
        other => Err(Error::invalid(format!("unknown split {other:?} (expected train or test)"))),
    }
}

/// Metadata of a clip store directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreInfo {
    pub mode: CropMode,
    pub crop: CropConfig,
    pub sampling: SamplingConfig,
    pub split: SplitConfig,
    pub source_manifest: String,
    pub train_samples: usize,
    pub test_samples: usize,
}

const STORE_INFO: &str = "store.json";
const STORE_MANIFEST: &str = "manifest.jsonl";

fn windows_file(tag: SplitTag) -> String {
    format!("windows_{}.jsonl", split_name(tag))
}

fn clip_file(sample_id: &str) -> String {
    format!("clips/{sample_id}.clip")
}

/// Crops of every train and test window, one file per clip:
///
/// ```text
/// store.json  manifest.jsonl  windows_train.jsonl  windows_test.jsonl  clips/<sample_id>.clip
/// ```
pub struct ClipStore {
    pub dir: PathBuf,
    pub info: StoreInfo,
    pub manifest: Manifest,
}

impl ClipStore {
    #[allow(clippy::too_many_arguments)]
    pub fn create(
        dir: impl AsRef<Path>,
        manifest: &Manifest,
        frames: &dyn FrameSource,
        crop: &CropConfig,
        sampling: &SamplingConfig,
        split: &SplitConfig,
        source_manifest: &str,
        workers: usize,
    ) -> Result<ClipStore> {
        crop.validate()?;
        let dir = dir.as_ref().to_path_buf();
        let tagged = ensure_split(manifest, split)?;
        let train = split_windows(&tagged, sampling, SplitTag::Train)?;
        let test = split_windows(&tagged, sampling, SplitTag::Test)?;
        let clips_dir = dir.join("clips");
        std::fs::create_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;
        let all: Vec<&ObservationWindow> = train.iter().chain(&test).collect();
        let unique: BTreeSet<String> = all.iter().map(|w| w.sample_id()).collect();
        if unique.len() != all.len() {
            return Err(Error::invalid("duplicate sample ids across splits"));
        }
        parallel_map(&all, workers, |w| {
            let track = tagged
                .track(&w.track_id)
                .ok_or_else(|| Error::invalid(format!("unknown track {}", w.track_id)))?;
            let clip = crop_clip(track, w, frames, crop)?;
            write_clip(&clip, dir.join(clip_file(&w.sample_id())))
        })?;
        write_windows(&train, dir.join(windows_file(SplitTag::Train)))?;
        write_windows(&test, dir.join(windows_file(SplitTag::Test)))?;
        write_manifest(&tagged, dir.join(STORE_MANIFEST))?;
        let info = StoreInfo {
            mode: crop.mode,
            crop: crop.clone(),
            sampling: sampling.clone(),
            split: split.clone(),
            source_manifest: source_manifest.to_string(),
            train_samples: train.len(),
            test_samples: test.len(),
        };
        let mut json = serde_json::to_vec_pretty(&info)?;
        json.push(b'\n');
        write_atomic(&dir.join(STORE_INFO), &json)?;
        Ok(ClipStore {
            dir,
            info,
            manifest: tagged,
        })
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<ClipStore> {
        let dir = dir.as_ref().to_path_buf();
        let info_path = dir.join(STORE_INFO);
        let bytes = std::fs::read(&info_path).map_err(|e| Error::io(&info_path, e))?;
        let info: StoreInfo = serde_json::from_slice(&bytes).map_err(|e| Error::Corrupt {
            path: info_path.clone(),
            message: e.to_string(),
        })?;
        let manifest = load_manifest(dir.join(STORE_MANIFEST))?;
        Ok(ClipStore { dir, info, manifest })
    }

    pub fn windows(&self, tag: SplitTag) -> Result<Vec<ObservationWindow>> {
        read_windows(self.dir.join(windows_file(tag)))
    }

    pub fn examples(&self, tag: SplitTag, workers: usize) -> Result<Vec<Example>> {
        let windows = self.windows(tag)?;
        parallel_map(&windows, workers, |w| self.example(w))
    }

    pub fn example(&self, w: &ObservationWindow) -> Result<Example> {
        let path = self.dir.join(clip_file(&w.sample_id()));
        let clip = read_clip(&path)?;
        if clip.mode != self.info.mode || clip.frame_indices != w.frame_indices {
            return Err(Error::Corrupt {
                path,
                message: "clip does not match its window".into(),
            });
        }
        Ok(Example {
            sample_id: w.sample_id(),
            track_id: w.track_id.clone(),
            label: w.label,
            clip: clip_tensor(&clip)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::make_dataset;

    #[test]
    fn toml_overrides_only_what_it_names() {
        let cfg = PipelineConfig::from_toml("[model]\nd = 16\n[train.adam]\nlr = 0.01\n").unwrap();
        assert_eq!(cfg.model.d, 16);
        assert_eq!(cfg.model.heads, ModelSettings::default().heads);
        assert_eq!(cfg.train.adam.lr, 0.01);
        assert_eq!(cfg.train.adam.beta1, 0.9);
        assert_eq!(cfg.crop, CropConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::from_toml("[model]\ndepth = 3\n").unwrap_err();
        assert!(err.to_string().contains("model.depth"), "{err}");
        assert!(PipelineConfig::from_toml("[train]\nepochs = \"many\"\n").is_err());
    }

    #[test]
    fn shared_seed_does_not_couple_labels_and_split() {
        use crate::synthgen::scenarios;
        for seed in 0..8 {
            let mut spec = DatasetSpec {
                n: 40,
                seed,
                ..DatasetSpec::default()
            };
            spec.image_size = [64, 64];
            let cfg = PipelineConfig::for_synthetic(&spec);
            let plan = scenarios(&spec).unwrap();
            let crossing: BTreeSet<String> = plan
                .iter()
                .filter(|(s, _)| s.label() == crate::trackdata::CrossingLabel::Crossing)
                .map(|(s, _)| s.track_id.clone())
                .collect();
            let m = Manifest::new(
                plan.iter()
                    .map(|(s, seed)| crate::synthgen::generate_scenario(s, *seed).unwrap().track)
                    .collect(),
            )
            .unwrap();
            let split = ensure_split(&m, &cfg.split).unwrap();
            let test: Vec<bool> = split
                .tracks
                .iter()
                .filter(|t| t.split == SplitTag::Test)
                .map(|t| crossing.contains(&t.track_id))
                .collect();
            assert!(test.iter().any(|c| *c) && test.iter().any(|c| !*c), "seed {seed}: one-class test split");
        }
    }

    #[test]
    fn top_level_seed_reaches_every_section() {
        let cfg = PipelineConfig::from_toml("seed = 9\n").unwrap();
        assert_eq!(
            (cfg.synth.seed, cfg.sampling.seed, cfg.split.seed, cfg.train.seed),
            (9, 9, 9, 9)
        );
    }

    #[test]
    fn training_split_mirrors_the_split_section() {
        let cfg = PipelineConfig::from_toml("[split]\ntrain_ratio = 0.6\nseed = 4\n").unwrap();
        assert_eq!(cfg.train.split, cfg.split);
        assert!(!cfg.to_toml().unwrap().contains("[train.split]"));
        assert!(PipelineConfig::from_toml("[train.split]\nseed = 4\n").is_err());
    }

    #[test]
    fn synthetic_config_round_trips_through_toml() {
        let cfg = PipelineConfig::for_synthetic(&DatasetSpec::default());
        let back = PipelineConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn store_round_trip_matches_direct_cropping() {
        let ds = make_dataset(10, 1.0, 0.5, 3).unwrap();
        let cfg = PipelineConfig::for_synthetic(&ds.spec);
        let dir = tempfile::tempdir().unwrap();
        let store = ClipStore::create(dir.path(), &ds.manifest, &ds.frames, &cfg.crop, &cfg.sampling, &cfg.split, "m", 2)
            .unwrap();
        let reopened = ClipStore::open(dir.path()).unwrap();
        assert_eq!(reopened.info, store.info);
        let direct = crate::trainer::build_examples(
            &store.manifest,
            &store.windows(SplitTag::Test).unwrap(),
            &ds.frames,
            &cfg.crop,
            1,
        )
        .unwrap();
        let stored = reopened.examples(SplitTag::Test, 1).unwrap();
        assert_eq!(stored.len(), direct.len());
        for (a, b) in stored.iter().zip(&direct) {
            assert_eq!(a.sample_id, b.sample_id);
            assert_eq!(a.clip.data(), b.clip.data());
        }
        let train = reopened.windows(SplitTag::Train).unwrap();
        assert!(train.iter().any(|w| w.flipped));
    }
}
