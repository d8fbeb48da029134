//! Binary parameter checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! b"INETCKPT"  u32 version  u32 layer_count
//! layer_count x (u32 rows, u32 cols)
//! per layer: rows*cols weights (row-major), then rows biases, as f64
//! ```
//!
//! The network and the classifier head are stored in separate files with the
//! same layout (the head is a single layer).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::hep::ClassifierHead;
use crate::linalg::DenseMatrix;
use crate::network::{EmbeddingConfig, EmbeddingNetwork, Layer};

pub const MAGIC: &[u8; 8] = b"INETCKPT";
pub const VERSION: u32 = 1;

pub fn write_layers<W: Write>(layers: &[Layer], mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(layers.len() as u32).to_le_bytes())?;
    for l in layers {
        out.write_all(&(l.outputs() as u32).to_le_bytes())?;
        out.write_all(&(l.inputs() as u32).to_le_bytes())?;
    }
    for l in layers {
        for v in l.weights.as_slice().iter().chain(&l.bias) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated data: {e}")))?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

pub fn read_layers<R: Read>(mut input: R) -> Result<Vec<Layer>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut input)? as usize;
    let shapes: Vec<(usize, usize)> = (0..count)
        .map(|_| Ok((read_u32(&mut input)? as usize, read_u32(&mut input)? as usize)))
        .collect::<Result<_>>()?;
    let mut layers = Vec::with_capacity(count);
    for (rows, cols) in shapes {
        if rows == 0 || cols == 0 {
            return Err(Error::Checkpoint(format!("empty layer shape {rows}x{cols}")));
        }
        let weights = DenseMatrix::from_vec(rows, cols, read_f64s(&mut input, rows * cols)?)?;
        let bias = read_f64s(&mut input, rows)?;
        layers.push(Layer { weights, bias });
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(layers)
}

/// Embedding config implied by a chain of layer shapes. Settings that do not
/// affect shapes (activation, init gain) take `template`'s values.
pub fn config_from_layers(layers: &[Layer], template: &EmbeddingConfig) -> Result<EmbeddingConfig> {
    let (first, last) = match (layers.first(), layers.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::Checkpoint("no layers".into())),
    };
    Ok(EmbeddingConfig {
        input_dim: first.inputs(),
        hidden_dims: layers[..layers.len() - 1].iter().map(Layer::outputs).collect(),
        embed_dim: last.outputs(),
        ..template.clone()
    })
}

pub fn save_network(net: &EmbeddingNetwork, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_layers(net.layers(), &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Loads a network; its shapes must match `config`.
pub fn load_network(path: &Path, config: &EmbeddingConfig) -> Result<EmbeddingNetwork> {
    let layers = read_layers(fs::read(path)?.as_slice())?;
    let found = config_from_layers(&layers, config)?;
    if found.widths() != config.widths() {
        return Err(Error::ShapeMismatch {
            expected: format!("layer widths {:?}", config.widths()),
            got: format!("{:?}", found.widths()),
        });
    }
    EmbeddingNetwork::from_layers(config.clone(), layers)
}

pub fn save_head(head: &ClassifierHead, path: &Path) -> Result<()> {
    let layer = Layer { weights: head.weights.clone(), bias: head.bias.clone() };
    let mut buf = Vec::new();
    write_layers(std::slice::from_ref(&layer), &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_head(path: &Path) -> Result<ClassifierHead> {
    let mut layers = read_layers(fs::read(path)?.as_slice())?;
    if layers.len() != 1 {
        return Err(Error::Checkpoint(format!("head file holds {} layers", layers.len())));
    }
    let Layer { weights, bias } = layers.pop().expect("one layer");
    Ok(ClassifierHead { weights, bias })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn net() -> EmbeddingNetwork {
        let cfg = EmbeddingConfig { input_dim: 5, hidden_dims: vec![7], embed_dim: 3, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut n = EmbeddingNetwork::new(cfg, &mut rng).unwrap();
        for l in n.layers_mut() {
            for b in &mut l.bias {
                *b = rng.random_range(-1.0..1.0);
            }
        }
        n
    }

    #[test]
    fn byte_layout() {
        let layer = Layer { weights: DenseMatrix::from_vec(1, 2, vec![1.0, -2.0]).unwrap(), bias: vec![0.5] };
        let mut buf = Vec::new();
        write_layers(&[layer], &mut buf).unwrap();
        assert_eq!(&buf[..8], b"INETCKPT");
        assert_eq!(&buf[8..12], &[1, 0, 0, 0]);
        assert_eq!(&buf[12..16], &[1, 0, 0, 0]);
        assert_eq!(&buf[16..24], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(buf.len(), 24 + 3 * 8);
        assert_eq!(&buf[24..32], &1.0f64.to_le_bytes());
        assert_eq!(&buf[40..48], &0.5f64.to_le_bytes());
    }

    #[test]
    fn network_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        let n = net();
        save_network(&n, &path).unwrap();
        let back = load_network(&path, n.config()).unwrap();
        assert_eq!(n, back);
        let bits = |n: &EmbeddingNetwork| n.parameters().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&n), bits(&back));
    }

    #[test]
    fn rejects_wrong_shape_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        let n = net();
        save_network(&n, &path).unwrap();
        let other = EmbeddingConfig { hidden_dims: vec![8], ..n.config().clone() };
        assert!(matches!(load_network(&path, &other), Err(Error::ShapeMismatch { .. })));

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(read_layers(bytes.as_slice()), Err(Error::Checkpoint(_))));
        bytes[0] = b'X';
        assert!(matches!(read_layers(bytes.as_slice()), Err(Error::Checkpoint(_))));
        let mut long = fs::read(&path).unwrap();
        long.push(0);
        assert!(matches!(read_layers(long.as_slice()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn head_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.bin");
        let head = ClassifierHead::new(11, 3, 0.2, &mut ChaCha8Rng::seed_from_u64(1));
        save_head(&head, &path).unwrap();
        assert_eq!(load_head(&path).unwrap(), head);
    }
}
