//! Checkpoint directories: `config.txt`, `manifest.txt` mapping every
//! tensor name to its file (`name = file.mipt`), one `.mipt` file per
//! tensor, and optionally `metrics.txt`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{key_values, MipaConfig};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::network::MipaNet;
use crate::nn::{Module, ParamKind};
use crate::tensor::io;

pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const METRICS_FILE: &str = "metrics.txt";

pub fn save(dir: &Path, net: &mut MipaNet<f32>, metrics: Option<&EvalReport>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    let mut manifest = String::new();
    for (name, _, t) in net.named_tensors() {
        let file = format!("{name}.mipt");
        io::save(&t, &dir.join(&file))?;
        manifest.push_str(&format!("{name} = {file}\n"));
    }
    write(CONFIG_FILE, net.cfg.to_text())?;
    write(MANIFEST_FILE, manifest)?;
    match metrics {
        Some(m) => write(METRICS_FILE, m.to_document()),
        None => Ok(()),
    }
}

fn read(path: PathBuf) -> Result<String> {
    fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
}

/// Rebuilds the network from `config.txt` and fills every tensor from the
/// manifest. Missing, extra or mis-shaped tensors are errors.
pub fn load(dir: &Path) -> Result<MipaNet<f32>> {
    let cfg = MipaConfig::from_text(&read(dir.join(CONFIG_FILE))?)?;
    let mut net = MipaNet::<f32>::new(&cfg, 0)?;
    let mut files: BTreeMap<String, String> = key_values(&read(dir.join(MANIFEST_FILE))?)?.into_iter().collect();
    let mut failure = None;
    net.visit("", &mut |name, kind, t| {
        if failure.is_some() {
            return;
        }
        let Some(file) = files.remove(name) else {
            failure = Some(Error::Checkpoint(format!("tensor {name} is missing from the manifest")));
            return;
        };
        match io::load::<f32>(&dir.join(file)) {
            Ok(v) if v.shape() == t.shape() => *t = v.requires_grad(kind == ParamKind::Trainable),
            Ok(v) => {
                failure = Some(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?} in the checkpoint but {:?} in the configured network",
                    v.shape(),
                    t.shape()
                )))
            }
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = files.keys().next() {
        return Err(Error::Checkpoint(format!("manifest lists unknown tensor {extra}")));
    }
    Ok(net)
}

pub fn load_metrics(dir: &Path) -> Result<EvalReport> {
    EvalReport::from_document(&read(dir.join(METRICS_FILE))?)
}
