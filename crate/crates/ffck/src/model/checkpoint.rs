//! Bit-exact checkpoint IO.
//!
//! Layout: magic bytes `FFCK`, little-endian `u32` version (1), a
//! length-prefixed UTF-8 JSON config record, a tensor manifest
//! (name, shape, byte offset into the data section), then tensor data as
//! row-major 32-bit IEEE-754 little-endian floats in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{FfckError, Result};
use crate::model::{HeadWeights, LayerWeights, ModelBundle, ModelConfig};
use crate::tensor::{Matrix, Vector};

pub const MAGIC: &[u8; 4] = b"FFCK";
pub const VERSION: u32 = 1;

pub fn save_checkpoint(model: &ModelBundle, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(model: &ModelBundle, w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let config_json = serde_json::to_string(model.config())
        .map_err(|e| FfckError::Format(format!("config serialization: {e}")))?;
    let config_bytes = config_json.as_bytes();
    w.write_all(&(config_bytes.len() as u32).to_le_bytes())?;
    w.write_all(config_bytes)?;

    let tensors = model.tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    let mut offset: u64 = 0;
    for (name, shape, data) in &tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&offset.to_le_bytes())?;
        offset += (data.len() * 4) as u64;
    }
    for (_, _, data) in &tensors {
        for &v in *data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    read_checkpoint(&mut r)
}

struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

fn read_exact_field<R: Read>(r: &mut R, buf: &mut [u8], field: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| FfckError::Format(format!("truncated checkpoint while reading {field}")))
}

fn read_u32<R: Read>(r: &mut R, field: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_field(r, &mut b, field)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, field: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_field(r, &mut b, field)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<ModelBundle> {
    let mut magic = [0u8; 4];
    read_exact_field(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(FfckError::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(FfckError::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let config_len = read_u32(r, "config length")? as usize;
    if config_len > 1 << 20 {
        return Err(FfckError::Format(format!(
            "config record length {config_len} implausibly large"
        )));
    }
    let mut config_bytes = vec![0u8; config_len];
    read_exact_field(r, &mut config_bytes, "config record")?;
    let config: ModelConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| FfckError::Format(format!("config record: {e}")))?;
    config.validate()?;

    let n_tensors = read_u32(r, "tensor count")? as usize;
    let mut manifest = Vec::with_capacity(n_tensors);
    for i in 0..n_tensors {
        let name_len = read_u32(r, "tensor name length")? as usize;
        if name_len > 1 << 12 {
            return Err(FfckError::Format(format!(
                "tensor {i} name length {name_len} implausibly large"
            )));
        }
        let mut name_bytes = vec![0u8; name_len];
        read_exact_field(r, &mut name_bytes, "tensor name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| FfckError::Format(format!("tensor {i} name is not UTF-8")))?;
        let ndim = read_u32(r, "tensor rank")? as usize;
        if ndim > 4 {
            return Err(FfckError::Format(format!(
                "tensor {name} has rank {ndim}, expected <= 4"
            )));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(r, "tensor dim")? as usize);
        }
        let offset = read_u64(r, "tensor offset")?;
        manifest.push(ManifestEntry { name, shape, offset });
    }

    // Validate the manifest against the shapes the config dictates.
    let expected = expected_manifest(&config);
    if manifest.len() != expected.len() {
        return Err(FfckError::Format(format!(
            "manifest lists {} tensors, config requires {}",
            manifest.len(),
            expected.len()
        )));
    }
    let mut offset = 0u64;
    for (entry, (name, shape)) in manifest.iter().zip(expected.iter()) {
        if &entry.name != name {
            return Err(FfckError::Format(format!(
                "manifest tensor '{}' where '{}' was expected",
                entry.name, name
            )));
        }
        if &entry.shape != shape {
            return Err(FfckError::Format(format!(
                "tensor '{}' has shape {:?}, expected {:?}",
                entry.name, entry.shape, shape
            )));
        }
        if entry.offset != offset {
            return Err(FfckError::Format(format!(
                "tensor '{}' at offset {}, expected {}",
                entry.name, entry.offset, offset
            )));
        }
        offset += (shape.iter().product::<usize>() * 4) as u64;
    }

    let mut read_tensor = |shape: &[usize], name: &str| -> Result<Vec<f64>> {
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        read_exact_field(r, &mut bytes, &format!("tensor '{name}' data"))?;
        let mut out = Vec::with_capacity(n);
        for chunk in bytes.chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(FfckError::Format(format!(
                    "tensor '{name}' contains a non-finite value"
                )));
            }
            out.push(v as f64);
        }
        Ok(out)
    };

    let matrix = |rows: usize, cols: usize, data: Vec<f64>| Matrix::from_vec(rows, cols, data);

    let embedding = matrix(
        config.vocab_size,
        config.d_model,
        read_tensor(&[config.vocab_size, config.d_model], "embedding")?,
    )?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let mut heads = Vec::with_capacity(config.n_heads);
        for h in 0..config.n_heads {
            let base = format!("layers.{l}.heads.{h}");
            heads.push(HeadWeights {
                w_q: matrix(config.d_head, config.d_model, read_tensor(&[config.d_head, config.d_model], &format!("{base}.w_q"))?)?,
                w_k: matrix(config.d_head, config.d_model, read_tensor(&[config.d_head, config.d_model], &format!("{base}.w_k"))?)?,
                w_v: matrix(config.d_head, config.d_model, read_tensor(&[config.d_head, config.d_model], &format!("{base}.w_v"))?)?,
                w_o: matrix(config.d_model, config.d_head, read_tensor(&[config.d_model, config.d_head], &format!("{base}.w_o"))?)?,
            });
        }
        let attn_gain = Vector::from_vec(read_tensor(&[config.d_model], "attn_gain")?)?;
        let mlp_gain = Vector::from_vec(read_tensor(&[config.d_model], "mlp_gain")?)?;
        let w_gate = matrix(config.d_mlp, config.d_model, read_tensor(&[config.d_mlp, config.d_model], "w_gate")?)?;
        let w_up = matrix(config.d_mlp, config.d_model, read_tensor(&[config.d_mlp, config.d_model], "w_up")?)?;
        let w_down = matrix(config.d_model, config.d_mlp, read_tensor(&[config.d_model, config.d_mlp], "w_down")?)?;
        layers.push(LayerWeights {
            heads,
            attn_gain,
            mlp_gain,
            w_gate,
            w_up,
            w_down,
        });
    }
    let final_gain = Vector::from_vec(read_tensor(&[config.d_model], "final_gain")?)?;
    let unembed = matrix(
        config.vocab_size,
        config.d_model,
        read_tensor(&[config.vocab_size, config.d_model], "unembed")?,
    )?;

    ModelBundle::new(config, embedding, layers, final_gain, unembed)
}

fn expected_manifest(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    out.push(("embedding".to_string(), vec![config.vocab_size, config.d_model]));
    for l in 0..config.n_layers {
        for h in 0..config.n_heads {
            let base = format!("layers.{l}.heads.{h}");
            out.push((format!("{base}.w_q"), vec![config.d_head, config.d_model]));
            out.push((format!("{base}.w_k"), vec![config.d_head, config.d_model]));
            out.push((format!("{base}.w_v"), vec![config.d_head, config.d_model]));
            out.push((format!("{base}.w_o"), vec![config.d_model, config.d_head]));
        }
        out.push((format!("layers.{l}.attn_gain"), vec![config.d_model]));
        out.push((format!("layers.{l}.mlp_gain"), vec![config.d_model]));
        out.push((format!("layers.{l}.w_gate"), vec![config.d_mlp, config.d_model]));
        out.push((format!("layers.{l}.w_up"), vec![config.d_mlp, config.d_model]));
        out.push((format!("layers.{l}.w_down"), vec![config.d_model, config.d_mlp]));
    }
    out.push(("final_gain".to_string(), vec![config.d_model]));
    out.push(("unembed".to_string(), vec![config.vocab_size, config.d_model]));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::forward;

    #[test]
    fn roundtrip_is_byte_identical() {
        let m = ModelBundle::random(ModelConfig::micro(5)).unwrap();
        let mut first = Vec::new();
        write_checkpoint(&m, &mut first).unwrap();
        let loaded = read_checkpoint(&mut first.as_slice()).unwrap();
        let mut second = Vec::new();
        write_checkpoint(&loaded, &mut second).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn loaded_model_forwards_bitwise_identically() {
        let m = ModelBundle::random(ModelConfig::micro(6)).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&m, &mut bytes).unwrap();
        let loaded = read_checkpoint(&mut bytes.as_slice()).unwrap();
        let a = forward(&m, &[1, 2, 3, 4, 5]).unwrap();
        let b = forward(&loaded, &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(a.final_logits, b.final_logits);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let m = ModelBundle::random(ModelConfig::micro(7)).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&m, &mut bytes).unwrap();
        for cut in [3usize, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = read_checkpoint(&mut &bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, FfckError::Format(_)),
                "cut {cut} gave {err:?}"
            );
        }
    }

    #[test]
    fn bad_magic_and_version_are_named() {
        let m = ModelBundle::random(ModelConfig::micro(8)).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&m, &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = read_checkpoint(&mut bad.as_slice()).unwrap_err();
        assert!(err.to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        let err = read_checkpoint(&mut bad.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ffck");
        let m = ModelBundle::random(ModelConfig::micro(11)).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(&m, &loaded);
    }
}
