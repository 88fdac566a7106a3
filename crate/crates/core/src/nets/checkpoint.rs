//! Checkpoint files: model kind, the originating configuration, and a
//! named-array table.
//!
//! Layout: magic "CKPT", u32 version, u32 model-kind tag, u64 config-text
//! length + `key = value` bytes, u32 array count, then per array a u32 name
//! length, the name bytes, and the tensor in the tensor binary format.
//! Little-endian throughout.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::measurement::PhaseMatrix;
use crate::seeds::stream_rng;
use crate::tensor::Tensor;

use super::{ModelKind, UnrolledModel};

/// Stored arrays of a checkpoint, in file order.
pub type NamedTensors = Vec<(String, Tensor)>;

fn kind_tag(kind: ModelKind) -> u32 {
    match kind {
        ModelKind::Cista => 0,
        ModelKind::CistaPlus => 1,
        ModelKind::CnnCdl => 2,
    }
}

fn tag_kind(tag: u32) -> Result<ModelKind> {
    match tag {
        0 => Ok(ModelKind::Cista),
        1 => Ok(ModelKind::CistaPlus),
        2 => Ok(ModelKind::CnnCdl),
        other => Err(Error::arg("checkpoint", format!("unknown model kind tag {other}"))),
    }
}

/// Write a model checkpoint. `config` must carry enough keys to rebuild the
/// model shape on load: the scenario block plus `pilots`, `net_layers`, and
/// (for CNN-CDL) `net_width`.
pub fn save_checkpoint(path: &Path, model: &UnrolledModel, config: &KvConfig) -> Result<()> {
    save_checkpoint_with_extras(path, model, config, &[])
}

/// Checkpoint with additional named arrays (optimizer state for resuming);
/// extras are ignored by plain loads.
pub fn save_checkpoint_with_extras(
    path: &Path,
    model: &UnrolledModel,
    config: &KvConfig,
    extras: &[(String, Tensor)],
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    w.write_all(b"CKPT").map_err(io_err)?;
    w.write_all(&1u32.to_le_bytes()).map_err(io_err)?;
    w.write_all(&kind_tag(model.kind()).to_le_bytes()).map_err(io_err)?;
    let mut config = config.clone();
    config.set("net_layers", model.layers().to_string());
    config.set("net_width", model.width().to_string());
    let text = config.to_text();
    w.write_all(&(text.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(text.as_bytes()).map_err(io_err)?;
    let named = model.named_tensors();
    let total = named.len() + extras.len();
    w.write_all(&(total as u32).to_le_bytes()).map_err(io_err)?;
    for (name, tensor) in named
        .iter()
        .map(|(n, t)| (n.as_str(), *t))
        .chain(extras.iter().map(|(n, t)| (n.as_str(), t)))
    {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        tensor.write_to(&mut w).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Read a checkpoint back into a model plus its originating config.
pub fn load_checkpoint(path: &Path) -> Result<(UnrolledModel, KvConfig)> {
    let (model, config, _) = load_checkpoint_full(path)?;
    Ok((model, config))
}

/// Like [`load_checkpoint`], also returning every stored array (including
/// optimizer extras) by name.
pub fn load_checkpoint_full(path: &Path) -> Result<(UnrolledModel, KvConfig, NamedTensors)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != b"CKPT" {
        return Err(Error::format(path, "bad checkpoint magic".to_string()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io_err)?;
    let version = u32::from_le_bytes(b4);
    if version != 1 {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    r.read_exact(&mut b4).map_err(io_err)?;
    let kind = tag_kind(u32::from_le_bytes(b4))?;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(io_err)?;
    let text_len = u64::from_le_bytes(b8) as usize;
    let mut text = vec![0u8; text_len];
    r.read_exact(&mut text).map_err(io_err)?;
    let text = String::from_utf8(text)
        .map_err(|_| Error::format(path, "config block is not UTF-8".to_string()))?;
    let config = KvConfig::from_str_content(&text)?;
    r.read_exact(&mut b4).map_err(io_err)?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut b4).map_err(io_err)?;
        let name_len = u32::from_le_bytes(b4) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8".to_string()))?;
        let tensor = Tensor::read_from(&mut r).map_err(io_err)?;
        tensors.push((name, tensor));
    }

    let m1 = config.get_usize("m1")?.ok_or_else(|| Error::format(path, "missing key m1"))?;
    let m2 = config.get_usize("m2")?.ok_or_else(|| Error::format(path, "missing key m2"))?;
    let pilots =
        config.get_usize("pilots")?.ok_or_else(|| Error::format(path, "missing key pilots"))?;
    let layers = config
        .get_usize("net_layers")?
        .ok_or_else(|| Error::format(path, "missing key net_layers"))?;
    let width = config.get_usize("net_width")?.unwrap_or(0);
    // placeholder schedule: every stored tensor overwrites the init below
    let placeholder =
        PhaseMatrix { matrix: nalgebra::DMatrix::zeros(m1 * m2, pilots) };
    let mut model = UnrolledModel::init(
        kind,
        layers,
        width.max(1),
        &placeholder,
        &mut stream_rng(0, "checkpoint-load", 0),
    );
    model.apply_named(&tensors)?;
    Ok((model, config, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::gen_phase_matrix;

    #[test]
    fn checkpoint_round_trips_every_model_kind() {
        let mut rng = stream_rng(35, "ckpt", 0);
        let theta = gen_phase_matrix(8, 4, &mut rng);
        let dir = std::env::temp_dir().join(format!("ckpt-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut config = crate::channel::ScenarioConfig::desk().to_kv();
        config.set("m1", "4");
        config.set("m2", "2");
        config.set("pilots", "4");
        for kind in [ModelKind::Cista, ModelKind::CistaPlus, ModelKind::CnnCdl] {
            let model = UnrolledModel::init(kind, 2, 4, &theta, &mut rng);
            let path = dir.join(format!("{kind}.ckpt"));
            save_checkpoint(&path, &model, &config).unwrap();
            let (loaded, cfg) = load_checkpoint(&path).unwrap();
            assert_eq!(loaded.kind(), kind);
            assert_eq!(loaded, model);
            assert_eq!(cfg.get_usize("net_layers").unwrap(), Some(2));
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rejects_corrupt_magic() {
        let mut rng = stream_rng(35, "ckpt", 1);
        let theta = gen_phase_matrix(8, 4, &mut rng);
        let dir = std::env::temp_dir().join(format!("ckpt-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        let model = UnrolledModel::init(ModelKind::Cista, 2, 0, &theta, &mut rng);
        let mut config = KvConfig::new();
        config.set("m1", "4");
        config.set("m2", "2");
        config.set("pilots", "4");
        save_checkpoint(&path, &model, &config).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
