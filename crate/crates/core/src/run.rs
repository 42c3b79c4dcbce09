//! File-level workflows shared by the command-line tool and the C ABI:
//! dataset directories, checkpoints, training runs and flow images.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::flow::FlowVariant;
use crate::model::Model;
use crate::pca::{pca_rgb, PcaRgb};
use crate::synth::{load_clip, make_direction_dataset, save_clip, Clip, Dataset};
use crate::tensor::Tensor;
use crate::train::{append_metrics, save_checkpoint, train, TrainReport};
use crate::weights::load_weights;

pub const MANIFEST: &str = "manifest.txt";
pub const CHECKPOINT: &str = "checkpoint.amfw";
pub const METRICS: &str = "metrics.jsonl";
pub const CONFIG_ECHO: &str = "config.echo";
/// Clips per class generated when a run names no data directory.
pub const DEFAULT_CLIPS_PER_CLASS: usize = 25;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes every clip as `train_NNNN.amfc` / `val_NNNN.amfc` plus a
/// manifest of `file,label` lines, train clips first.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut manifest = String::new();
    let mut paths = Vec::new();
    for (split, clips) in [("train", &data.train), ("val", &data.val)] {
        for (i, clip) in clips.iter().enumerate() {
            let name = format!("{split}_{i:04}.amfc");
            let path = dir.join(&name);
            save_clip(&path, clip)?;
            manifest.push_str(&format!("{name},{}\n", clip.label));
            paths.push(path);
        }
    }
    write_file(&dir.join(MANIFEST), manifest.as_bytes())?;
    Ok(paths)
}

/// Reads a directory written by [`write_dataset`]. Files whose name starts
/// with `val_` form the validation split; everything else trains.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut data = Dataset {
        train: Vec::new(),
        val: Vec::new(),
        categories: 0,
    };
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Validation(format!("{}:{}: expected `file,label`, got `{line}`", path.display(), i + 1));
        let (file, label) = line.rsplit_once(',').ok_or_else(bad)?;
        let label: usize = label.trim().parse().map_err(|_| bad())?;
        let file = file.trim();
        let mut clip = load_clip(&dir.join(file))?;
        if clip.label != label {
            return Err(Error::Validation(format!(
                "{}: manifest label {label} disagrees with the clip's label {}",
                dir.join(file).display(),
                clip.label
            )));
        }
        clip.label = label;
        data.categories = data.categories.max(label + 1);
        let name = Path::new(file).file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("val_") {
            data.val.push(clip);
        } else {
            data.train.push(clip);
        }
    }
    if data.train.is_empty() {
        return Err(Error::Validation(format!("{} lists no training clips", path.display())));
    }
    Ok(data)
}

/// Data named by the `data` key, or a freshly generated direction dataset
/// when it is empty.
pub fn run_dataset(run: &RunConfig) -> Result<Dataset> {
    match run.get("data") {
        "" => make_direction_dataset(DEFAULT_CLIPS_PER_CLASS, run.train_config()?.seed, &run.synth_config()?),
        dir => read_dataset(Path::new(dir)),
    }
}

/// Model for a run: random backbone from the seed, or the pretrained one
/// named by `backbone_weights`.
pub fn build_model(run: &RunConfig) -> Result<Model> {
    let config = run.model_config()?;
    let seed = run.train_config()?.seed;
    match run.get("backbone_weights") {
        "" => Model::new(config, seed),
        path => Model::with_backbone(config, &load_weights(path)?, seed),
    }
}

/// Model whose every tensor comes from a checkpoint.
pub fn load_model(run: &RunConfig, checkpoint: &Path) -> Result<Model> {
    let table = load_weights(checkpoint)?;
    let mut model = Model::new(run.model_config()?, run.train_config()?.seed)?;
    model.store.load_table(&table, None)?;
    Ok(model)
}

/// Config saved next to a checkpoint by [`train_run`], if present.
pub fn config_beside(checkpoint: &Path) -> Result<RunConfig> {
    let echo = checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_ECHO);
    if echo.exists() {
        RunConfig::load(&echo)
    } else {
        Ok(RunConfig::default())
    }
}

/// Full training run into `out`: `config.echo` first, then one metrics line
/// per split and epoch as training proceeds, then the checkpoint.
pub fn train_run(run: &RunConfig, out: &Path) -> Result<TrainReport> {
    let train_config = run.train_config()?;
    let mut model = build_model(run)?;
    let data = run_dataset(run)?;
    create_dir(out)?;
    write_file(&out.join(CONFIG_ECHO), run.echo().as_bytes())?;
    let metrics = out.join(METRICS);
    write_file(&metrics, b"")?;
    let report = train(&mut model, &data.train, &data.val, &train_config, |lines| {
        append_metrics(&metrics, lines)
    })?;
    save_checkpoint(&out.join(CHECKPOINT), &model)?;
    Ok(report)
}

/// Mean flow over all frame pairs of each placed block, as PCA colours.
/// Flow with fewer than three channels is zero-padded.
pub fn flow_images(model: &Model, clip: &Clip) -> Result<Vec<(usize, PcaRgb)>> {
    if model.config.flow == FlowVariant::Off {
        return Err(Error::Validation("the model has flow = off; there is no flow to visualize".into()));
    }
    let out = model.forward(&clip.frames)?;
    let mut images = Vec::with_capacity(out.flows.len());
    for (block, flows) in &out.flows {
        let (n, f) = flows[0].dims2()?;
        let width = f.max(3);
        let mut mean = Tensor::zeros(vec![n, width]);
        for flow in flows {
            for i in 0..n {
                for (c, v) in flow.row(i).iter().enumerate() {
                    mean.data_mut()[i * width + c] += v / flows.len() as f64;
                }
            }
        }
        images.push((*block, pca_rgb(&mean)?));
    }
    Ok(images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_appearance_dataset, SynthConfig};

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = make_appearance_dataset(2, 3, &SynthConfig::default()).unwrap();
        let paths = write_dataset(dir.path(), &data).unwrap();
        assert_eq!(paths.len(), 8);
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.train, data.train);
        assert_eq!(back.val, data.val);
        assert_eq!(back.categories, 4);
    }

    #[test]
    fn bad_manifest_line_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST), "x.amfc;1\n").unwrap();
        let e = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(e.contains("manifest.txt:1"), "{e}");
    }
}
