//! Checkpoints are two files: `<stem>.ckpt` holds the tensors back to back
//! in the tensor wire format, `<stem>.names` lists one `name kind shape` line
//! per tensor under a `model` header line.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::{EntryKind, ParamSet};

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("ckpt"), stem.with_extension("names"))
}

pub fn save(stem: &Path, model: &str, params: &ParamSet) -> Result<()> {
    let (bin, names) = paths(stem);
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut manifest = format!("model {model}\n");
    let f = fs::File::create(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut w = BufWriter::new(f);
    for e in params.entries() {
        let kind = match e.kind {
            EntryKind::Param => "param",
            EntryKind::Buffer => "buffer",
        };
        let dims: Vec<String> = e.value.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{} {kind} {}\n", e.name, dims.join("x")));
        e.value.write_to(&mut w).map_err(|err| Error::io(&bin, err))?;
    }
    w.flush().map_err(|e| Error::io(&bin, e))?;
    fs::write(&names, manifest).map_err(|e| Error::io(&names, e))
}

/// Overwrites `params` from a checkpoint written for the same layout.
pub fn load(stem: &Path, model: &str, params: &mut ParamSet) -> Result<()> {
    let (bin, names) = paths(stem);
    let err = |detail: String| Error::Checkpoint {
        path: stem.to_path_buf(),
        detail,
    };
    let manifest = fs::read_to_string(&names).map_err(|e| Error::io(&names, e))?;
    let mut lines = manifest.lines();
    let header = lines.next().unwrap_or("");
    if header != format!("model {model}") {
        return Err(err(format!("expected model {model:?}, found header {header:?}")));
    }
    let listed: Vec<&str> = lines.collect();
    if listed.len() != params.entries().len() {
        return Err(err(format!(
            "{} tensors listed, model has {}",
            listed.len(),
            params.entries().len()
        )));
    }
    let f = fs::File::open(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut r = BufReader::new(f);
    let ids: Vec<_> = params.ids().collect();
    for (id, line) in ids.into_iter().zip(listed) {
        let name = line.split_whitespace().next().unwrap_or("");
        if name != params.name(id) {
            return Err(err(format!("expected `{}`, found `{name}`", params.name(id))));
        }
        let t = Tensor::read_from(&mut r)?;
        if t.shape() != params.get(id).shape() {
            return Err(err(format!(
                "`{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                params.get(id).shape()
            )));
        }
        *params.get_mut(id) = t;
    }
    Ok(())
}

pub fn exists(stem: &Path) -> bool {
    let (bin, names) = paths(stem);
    bin.exists() && names.exists()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        let mut p = ParamSet::new();
        p.add_param("a/weight", Tensor::new([2, 2], vec![0.1, -3.5, f32::MIN_POSITIVE, 7.0]).unwrap());
        p.add_buffer("a/sn_u", Tensor::new([2], vec![0.6, 0.8]).unwrap());
        save(&stem, "toy", &p).unwrap();
        let mut q = p.clone();
        for id in q.ids().collect::<Vec<_>>() {
            q.get_mut(id).data_mut().fill(0.0);
        }
        load(&stem, "toy", &mut q).unwrap();
        for (a, b) in p.entries().iter().zip(q.entries()) {
            assert_eq!(a.value, b.value);
        }
        assert!(load(&stem, "other", &mut q).is_err());
        let mut r = ParamSet::new();
        r.add_param("a/weight", Tensor::zeros([4]));
        r.add_buffer("a/sn_u", Tensor::zeros([2]));
        assert!(matches!(load(&stem, "toy", &mut r), Err(Error::Checkpoint { .. })));
    }
}
