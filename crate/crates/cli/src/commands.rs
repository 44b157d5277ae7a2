use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use volta_core::downstream::{run_probe, run_segmentation};
use volta_core::train::{train_loop, TrainOutput, LAST_CHECKPOINT, TRAIN_LOG};
use volta_core::vit3d::{read_checkpoint, Checkpoint, ModelParams, CHECKPOINT_MAGIC};
use volta_core::volio::{
    crop_or_pad, generate_phantom, preprocess, read_nifti, read_raw, reorient_to_ras, write_nifti, write_nifti_as,
    write_raw, Grid3, LabelGrid, Nifti1Header, NiftiDatatype, PhantomSpec, Volume, RAW_MAGIC,
};

use crate::config::{DataSource, ExperimentConfig, FileFormat};

pub const MANIFEST: &str = "manifest.csv";

/// One row of `manifest.csv`; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub class: u8,
    /// Empty when the volume has no segmentation labels.
    pub labels: String,
}

pub struct Dataset {
    pub volumes: Vec<Volume>,
    pub classes: Vec<u8>,
    pub labels: Vec<Option<LabelGrid>>,
}

fn phantom_spec(cfg: &ExperimentConfig, i: usize) -> PhantomSpec {
    PhantomSpec { seed: cfg.data.phantom.seed.wrapping_add(i as u64), class: (i % 2) as u8, ..cfg.data.phantom.clone() }
}

fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    let v = if bytes.starts_with(RAW_MAGIC) { read_raw(&bytes) } else { read_nifti(&bytes) };
    v.with_context(|| format!("{}", path.display()))
}

fn labels_from(v: &Volume, target: [usize; 3], path: &Path) -> Result<LabelGrid> {
    if v.spacing != [1.0; 3] {
        bail!("{}: label maps must already have 1 mm spacing, found {:?}", path.display(), v.spacing);
    }
    let fitted = crop_or_pad(&reorient_to_ras(v).grid, target)?;
    let data = fitted.data.iter().map(|&x| x.round().clamp(0.0, 255.0) as u8).collect();
    Ok(Grid3::new(target, data)?)
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match cfg.data.source {
        DataSource::Phantom => {
            let mut d = Dataset { volumes: Vec::new(), classes: Vec::new(), labels: Vec::new() };
            for i in 0..cfg.data.count {
                let p = generate_phantom(&phantom_spec(cfg, i))?;
                d.volumes.push(p.volume);
                d.classes.push(p.class);
                d.labels.push(Some(p.labels));
            }
            Ok(d)
        }
        DataSource::Directory => {
            let dir = &cfg.data.directory;
            let manifest = dir.join(MANIFEST);
            let mut reader = csv::Reader::from_path(&manifest)
                .with_context(|| format!("cannot open manifest {}", manifest.display()))?;
            let mut d = Dataset { volumes: Vec::new(), classes: Vec::new(), labels: Vec::new() };
            for row in reader.deserialize() {
                let row: ManifestRow = row.with_context(|| format!("malformed row in {}", manifest.display()))?;
                let path = dir.join(&row.path);
                d.volumes.push(preprocess(&read_volume(&path)?, cfg.data.extent)?);
                d.classes.push(row.class);
                d.labels.push(if row.labels.is_empty() {
                    None
                } else {
                    let lp = dir.join(&row.labels);
                    Some(labels_from(&read_volume(&lp)?, cfg.data.extent, &lp)?)
                });
            }
            Ok(d)
        }
    }
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let dir = cfg.prepare_output()?;
    let ext = cfg.data.format.extension();
    let mut writer = csv::Writer::from_path(dir.join(MANIFEST))?;
    let mut rows = 0;
    for i in 0..cfg.data.count {
        let p = generate_phantom(&phantom_spec(cfg, i))?;
        let name = format!("phantom_{i:04}.{ext}");
        let seg = format!("phantom_{i:04}_labels.{ext}");
        let labels = Volume {
            grid: Grid3 { extent: p.labels.extent, data: p.labels.data.iter().map(|&l| l as f64).collect() },
            ..p.volume.clone()
        };
        let (image, label_bytes) = match cfg.data.format {
            FileFormat::Raw => (write_raw(&p.volume), write_raw(&labels)),
            FileFormat::Nifti => (write_nifti(&p.volume), write_nifti_as(&labels, NiftiDatatype::U8)),
        };
        for (n, b) in [(&name, image), (&seg, label_bytes)] {
            let path = dir.join(n);
            fs::write(&path, b).with_context(|| format!("cannot write {}", path.display()))?;
        }
        writer.serialize(ManifestRow { path: name, class: p.class, labels: seg })?;
        rows += 1;
    }
    if rows == 0 {
        writer.write_record(["path", "class", "labels"])?;
    }
    writer.flush()?;
    println!("wrote {rows} phantoms and {MANIFEST} to {}", dir.display());
    Ok(())
}

pub fn pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let data = load_dataset(cfg)?;
    let dir = cfg.prepare_output()?;
    let out = train_loop(&data.volumes, &cfg.model, &cfg.augment, &cfg.train, &TrainOutput { dir: Some(dir.clone()) })?;
    let last = out.logs.last().expect("at least one mini-batch");
    let r = &last.report;
    println!(
        "pretrained {} epochs ({} optimizer steps): total {:.4}, global {:.4}, patch {:.4}, rec {:.5}, teacher entropy {:.3}",
        cfg.train.epochs, out.optimizer_steps, r.total, r.global, r.patch, r.rec, r.teacher_entropy
    );
    println!("best epoch {} (mean loss {:.4})", out.best_epoch, out.best_loss);
    println!("checkpoint {}, log {}", dir.join(LAST_CHECKPOINT).display(), dir.join(TRAIN_LOG).display());
    Ok(())
}

/// `"random"` initialises from the probe seed; anything else is a checkpoint
/// whose teacher weights must match the configured model.
fn load_encoder(cfg: &ExperimentConfig, seed: u64) -> Result<ModelParams> {
    if cfg.encoder == "random" {
        return Ok(ModelParams::init(&cfg.model, seed)?);
    }
    let path = PathBuf::from(&cfg.encoder);
    let bytes = fs::read(&path).with_context(|| format!("cannot read checkpoint {}", path.display()))?;
    let ck = read_checkpoint(&bytes).with_context(|| format!("{}", path.display()))?;
    ck.model_as("teacher", &cfg.model).with_context(|| format!("checkpoint {} does not fit [model]", path.display()))
}

fn write_reports(dir: &Path, stem: &str, table: &str, json: String) -> Result<()> {
    fs::write(dir.join(format!("{stem}.txt")), table)?;
    fs::write(dir.join(format!("{stem}.json")), json)?;
    print!("{table}");
    Ok(())
}

pub fn probe(cfg: &ExperimentConfig) -> Result<()> {
    let data = load_dataset(cfg)?;
    let encoder = load_encoder(cfg, cfg.probe.seed)?;
    let dir = cfg.prepare_output()?;
    let report = run_probe(&data.volumes, &data.classes, &encoder, &cfg.model, &cfg.probe)?;
    write_reports(&dir, "probe_report", &report.to_table(), serde_json::to_string_pretty(&report)?)?;
    let mut sweep = csv::Writer::from_path(dir.join("probe_sweep.csv"))?;
    sweep.write_record(["fraction", "auroc_mean", "auroc_sd"])?;
    for s in &report.summary {
        sweep.write_record([s.fraction.to_string(), s.auroc_mean.to_string(), s.auroc_sd.to_string()])?;
    }
    sweep.flush()?;
    Ok(())
}

pub fn segment(cfg: &ExperimentConfig) -> Result<()> {
    let data = load_dataset(cfg)?;
    let labels: Vec<LabelGrid> = data
        .labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.with_context(|| format!("volume {i} has no segmentation labels")))
        .collect::<Result<_>>()?;
    let encoder = load_encoder(cfg, cfg.segment.seed)?;
    let dir = cfg.prepare_output()?;
    let report = run_segmentation(&data.volumes, &labels, &encoder, &cfg.model, &cfg.segment)?;
    write_reports(&dir, "seg_report", &report.to_table(), serde_json::to_string_pretty(&report)?)
}

fn describe_checkpoint(c: &Checkpoint) -> String {
    let mut s = format!("checkpoint step {}\nmodel {}\n", c.step, serde_json::to_string(&c.config).unwrap_or_default());
    for (name, a) in &c.arrays {
        s.push_str(&format!("{name} {:?}\n", a.shape()));
    }
    s
}

fn describe_nifti(h: &Nifti1Header, v: &Volume) -> String {
    let dtype = NiftiDatatype::from_code(h.datatype).map(|d| format!("{d:?}")).unwrap_or_else(|_| "?".into());
    let (lo, hi) = v.grid.min_max();
    format!(
        "NIfTI-1 {}\ndim {:?}\npixdim {:?}\ndatatype {} ({dtype})\nbitpix {}\nvox_offset {}\nscl_slope {} scl_inter {}\nqform_code {} sform_code {}\norientation {}\nintensity [{lo}, {hi}]\n",
        String::from_utf8_lossy(&h.magic).trim_end_matches('\0'),
        h.dim,
        h.pixdim,
        h.datatype,
        h.bitpix,
        h.vox_offset,
        h.scl_slope,
        h.scl_inter,
        h.qform_code,
        h.sform_code,
        v.orientation.code()
    )
}

/// Print a summary of a checkpoint, raw volume or NIfTI file. Read-only.
pub fn inspect(path: &Path) -> Result<()> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    let text = if bytes.starts_with(CHECKPOINT_MAGIC) {
        describe_checkpoint(&read_checkpoint(&bytes).with_context(|| format!("{}", path.display()))?)
    } else if bytes.starts_with(RAW_MAGIC) {
        let v = read_raw(&bytes).with_context(|| format!("{}", path.display()))?;
        let (lo, hi) = v.grid.min_max();
        format!(
            "raw volume\nextent {:?}\nspacing {:?}\norientation {}\nintensity [{lo}, {hi}]\n",
            v.extent(),
            v.spacing,
            v.orientation.code()
        )
    } else {
        let (h, _) = Nifti1Header::parse(&bytes).with_context(|| format!("{}", path.display()))?;
        let v = read_nifti(&bytes).with_context(|| format!("{}", path.display()))?;
        describe_nifti(&h, &v)
    };
    print!("{text}");
    Ok(())
}
