//! Binary model checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "LVLB" | u32 version
//! u32 n_layers | u32 d_model | u32 seq_len | u32 d_state | u32 mlp_ratio | u8 similarity
//! u8 layer kind × n_layers
//! u32 blob count, then per non-score parameter in declaration order:
//!     u32 rank | u32 dim × rank | f32 × numel
//! u32 n_layers, then one f32 score per layer (1 softmax, 0 linear, r for mixed)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::rc::Rc;

use super::{LayerKind, ModelConfig, ParamKind, ToyTransformer};
use crate::array::DenseArray;
use crate::attention::SimilarityScale;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"LVLB";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn put_f32s<T: Scalar>(w: &mut impl Write, xs: &[T]) -> Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 4);
    for x in xs {
        buf.extend_from_slice(&x.as_f32().to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("file is truncated".into())
    } else {
        Error::Io(e)
    }
}

pub(crate) fn get_bytes<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(b)
}

pub(crate) fn get_u32(r: &mut impl Read) -> Result<usize> {
    Ok(u32::from_le_bytes(get_bytes(r)?) as usize)
}

pub(crate) fn get_f32s<T: Scalar>(r: &mut impl Read, n: usize) -> Result<Vec<T>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect())
}

pub(crate) fn expect_end(r: &mut impl Read) -> Result<()> {
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => Ok(()),
        _ => Err(Error::Format("trailing bytes after the last section".into())),
    }
}

pub fn write_checkpoint<T: Scalar>(model: &ToyTransformer<T>, w: &mut impl Write) -> Result<()> {
    let c = model.config();
    w.write_all(MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION as usize)?;
    for v in [c.n_layers, c.d_model, c.seq_len, c.d_state, c.mlp_ratio] {
        put_u32(w, v)?;
    }
    let sim = match c.similarity {
        SimilarityScale::SqrtDim => 0u8,
        SimilarityScale::Dim => 1u8,
    };
    w.write_all(&[sim])?;
    let kinds = model.layer_kinds();
    w.write_all(&kinds.iter().map(|k| k.code()).collect::<Vec<_>>())?;
    let blobs: Vec<_> = model
        .params()
        .into_iter()
        .filter(|p| p.kind != ParamKind::Score)
        .collect();
    put_u32(w, blobs.len())?;
    for p in blobs {
        put_u32(w, p.value.rank())?;
        for &d in p.value.shape() {
            put_u32(w, d)?;
        }
        put_f32s(w, p.value.data())?;
    }
    put_u32(w, kinds.len())?;
    let scores: Vec<T> = kinds
        .iter()
        .zip(model.scores())
        .map(|(k, s)| match k {
            LayerKind::Softmax => T::one(),
            LayerKind::Linear => T::zero(),
            LayerKind::Mixed => s.unwrap_or(T::one()),
        })
        .collect();
    put_f32s(w, &scores)?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(r: &mut impl Read) -> Result<ToyTransformer<T>> {
    let magic: [u8; 4] = get_bytes(r)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = get_u32(r)? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = get_u32(r)?;
    }
    let [sim] = get_bytes::<1>(r)?;
    let similarity = match sim {
        0 => SimilarityScale::SqrtDim,
        1 => SimilarityScale::Dim,
        other => return Err(Error::Format(format!("unknown similarity code {other}"))),
    };
    let config = ModelConfig {
        n_layers: dims[0],
        d_model: dims[1],
        seq_len: dims[2],
        d_state: dims[3],
        mlp_ratio: dims[4],
        similarity,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if config.n_layers > 4096 {
        return Err(Error::Format(format!("implausible layer count {}", config.n_layers)));
    }
    let mut codes = vec![0u8; config.n_layers];
    r.read_exact(&mut codes).map_err(truncated)?;
    let kinds = codes
        .iter()
        .map(|&c| LayerKind::from_code(c).ok_or_else(|| Error::Format(format!("unknown layer kind {c}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut model = ToyTransformer::<T>::zeros(&config, &kinds)?;

    let count = get_u32(r)?;
    let mut targets: Vec<_> = model
        .params_mut()
        .into_iter()
        .filter(|p| p.kind != ParamKind::Score)
        .collect();
    if count != targets.len() {
        return Err(Error::Format(format!(
            "{count} parameter blobs for an architecture with {}",
            targets.len()
        )));
    }
    for p in targets.iter_mut() {
        let rank = get_u32(r)?;
        if rank > 8 {
            return Err(Error::Format(format!("implausible rank {rank} for {}", p.name)));
        }
        let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        if shape != p.value.shape() {
            return Err(Error::Format(format!(
                "{} has shape {:?}, header implies {:?}",
                p.name,
                shape,
                p.value.shape()
            )));
        }
        let data = get_f32s(r, p.value.len())?;
        p.value = Rc::new(DenseArray::new(&shape, data)?);
    }
    let n_scores = get_u32(r)?;
    if n_scores != config.n_layers {
        return Err(Error::Format(format!(
            "{n_scores} scores for {} layers",
            config.n_layers
        )));
    }
    let scores: Vec<T> = get_f32s(r, n_scores)?;
    for (i, (k, s)) in kinds.iter().zip(scores).enumerate() {
        if *k == LayerKind::Mixed {
            model.set_score(i, s)?;
        }
    }
    expect_end(r)?;
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &ToyTransformer<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ToyTransformer<T>> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    read_checkpoint(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::VelocityField;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> ToyTransformer<f32> {
        let c = ModelConfig {
            n_layers: 3,
            d_model: 8,
            seq_len: 4,
            d_state: 2,
            mlp_ratio: 2,
            similarity: SimilarityScale::Dim,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = ToyTransformer::softmax(&c, &mut rng).unwrap();
        m.set_layer_kind(1, LayerKind::Mixed, 0.3, &mut rng).unwrap();
        m.set_layer_kind(2, LayerKind::Linear, 0.0, &mut rng).unwrap();
        m
    }

    fn bytes(m: &ToyTransformer<f32>) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(m, &mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let buf = bytes(&m);
        let back: ToyTransformer<f32> = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.layer_kinds(), m.layer_kinds());
        assert_eq!(back.scores(), m.scores());
        for (a, b) in back.params().iter().zip(m.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DenseArray::randn(&[2, 4, 2], 1.0, &mut rng);
        assert_eq!(back.velocity(&x, &[0.3, 0.6]).unwrap(), m.velocity(&x, &[0.3, 0.6]).unwrap());
        assert_eq!(bytes(&back), buf);
    }

    #[test]
    fn rejects_corruption() {
        let buf = bytes(&model());
        let mut bad = buf.clone();
        bad[4] = 2;
        let e = read_checkpoint::<f32>(&mut bad.as_slice()).unwrap_err();
        assert!(e.to_string().contains("version 2"), "{e}");
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint::<f32>(&mut bad.as_slice()), Err(Error::Format(_))));
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(read_checkpoint::<f32>(&mut &cut[..]), Err(Error::Format(_))));
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_checkpoint::<f32>(&mut long.as_slice()), Err(Error::Format(_))));
        // header claims a wider model than the blobs hold
        let mut bad = buf;
        bad[12] = 16;
        assert!(matches!(read_checkpoint::<f32>(&mut bad.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_is_reported() {
        let e = load_checkpoint::<f32>(Path::new("/nonexistent/model.bin")).unwrap_err();
        assert!(matches!(e, Error::MissingInput(_)));
    }
}
