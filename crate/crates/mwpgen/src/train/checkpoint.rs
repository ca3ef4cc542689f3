//! Checkpoint file format.
//!
//! Layout: the 8-byte magic `MWPGEN1\n`, a little-endian `u64` header
//! length, a JSON header (format version, training step, config, vocabulary,
//! and per-store segment shapes), then every parameter, Adam first-moment,
//! and Adam second-moment buffer as little-endian `f32`, in header order.
//! Loading widens `f32 -> f64`, so saving a freshly loaded checkpoint
//! reproduces the file byte for byte.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::tensor::ParamStore;

use super::{Models, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MWPGEN1\n";
pub const CHECKPOINT_VERSION: u64 = 1;

/// Store order inside the file; fixed so payload offsets are reproducible.
const STORE_ORDER: [&str; 4] = ["generator", "selector", "consistency_parser", "eval_parser"];

#[derive(Debug, Serialize, Deserialize)]
struct SegmentHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreHeader {
    name: String,
    adam_steps: u64,
    segments: Vec<SegmentHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u64,
    step: u64,
    config: TrainConfig,
    vocab: Vocab,
    stores: Vec<StoreHeader>,
}

fn push_store(
    headers: &mut Vec<StoreHeader>,
    payload: &mut Vec<u8>,
    store: &ParamStore,
) {
    let mut segments = Vec::new();
    for (name, rows, cols, value, m, v) in store.segments() {
        segments.push(SegmentHeader {
            name: name.to_string(),
            rows,
            cols,
        });
        for buffer in [value, m, v] {
            for &x in buffer {
                payload.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    headers.push(StoreHeader {
        name: store.name().to_string(),
        adam_steps: store.step_count(),
        segments,
    });
}

/// Serializes the bundle and writes it atomically (temp sibling + rename).
pub fn save_checkpoint(path: &Path, models: &Models, step: u64) -> Result<()> {
    let mut stores = Vec::with_capacity(4);
    let mut payload = Vec::new();
    for store in [
        &models.generator_store,
        &models.selector_store,
        &models.consistency_store,
        &models.eval_store,
    ] {
        push_store(&mut stores, &mut payload, store);
    }
    debug_assert!(stores
        .iter()
        .map(|s| s.name.as_str())
        .eq(STORE_ORDER.iter().copied()));

    let header = Header {
        version: CHECKPOINT_VERSION,
        step,
        config: models.config.clone(),
        vocab: models.vocab.clone(),
        stores,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut bytes =
        Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + header_bytes.len() + payload.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    bytes.extend_from_slice(&payload);

    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    fs::write(tmp, &bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

fn data_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("checkpoint {}: {msg}", path.display()))
}

fn read_f32s(cursor: &mut &[u8], n: usize, path: &Path) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    cursor
        .read_exact(&mut buf)
        .map_err(|_| data_err(path, "payload shorter than the header promises"))?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Reads a checkpoint back into a model bundle plus its training step.
pub fn load_checkpoint(path: &Path) -> Result<(Models, u64)> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let rest = bytes
        .strip_prefix(CHECKPOINT_MAGIC)
        .ok_or_else(|| data_err(path, "bad magic (not a checkpoint file)"))?;
    if rest.len() < 8 {
        return Err(data_err(path, "truncated before the header length"));
    }
    let (len_bytes, rest) = rest.split_at(8);
    let header_len = u64::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
    if rest.len() < header_len {
        return Err(data_err(path, "truncated inside the header"));
    }
    let (header_bytes, payload) = rest.split_at(header_len);

    // version gate first, so a future format fails with a clear message
    // rather than a field error from the typed parse
    let raw: serde_json::Value = serde_json::from_slice(header_bytes)
        .map_err(|e| data_err(path, format!("unparseable header: {e}")))?;
    let version = raw.get("version").and_then(|v| v.as_u64());
    if version != Some(CHECKPOINT_VERSION) {
        return Err(data_err(
            path,
            format!(
                "format version {} is not supported (this build reads {CHECKPOINT_VERSION})",
                version.map_or("missing".to_string(), |v| v.to_string())
            ),
        ));
    }
    let header: Header = serde_json::from_value(raw)
        .map_err(|e| data_err(path, format!("malformed header: {e}")))?;
    if header.stores.len() != STORE_ORDER.len()
        || !header
            .stores
            .iter()
            .map(|s| s.name.as_str())
            .eq(STORE_ORDER.iter().copied())
    {
        let found: Vec<&str> = header.stores.iter().map(|s| s.name.as_str()).collect();
        return Err(data_err(
            path,
            format!("expected stores {STORE_ORDER:?}, found {found:?}"),
        ));
    }

    let mut cursor = payload;
    let mut stores = Vec::with_capacity(4);
    for sh in &header.stores {
        let mut segments = Vec::with_capacity(sh.segments.len());
        for seg in &sh.segments {
            let n = seg.rows * seg.cols;
            let value = read_f32s(&mut cursor, n, path)?;
            let m = read_f32s(&mut cursor, n, path)?;
            let v = read_f32s(&mut cursor, n, path)?;
            segments.push((seg.name.clone(), seg.rows, seg.cols, value, m, v));
        }
        stores.push(ParamStore::from_segments(&sh.name, sh.adam_steps, segments));
    }
    if !cursor.is_empty() {
        return Err(data_err(
            path,
            format!("{} trailing bytes after the payload", cursor.len()),
        ));
    }

    let mut it = stores.into_iter();
    let models = Models::from_parts(
        header.config,
        header.vocab,
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
    )?;
    Ok((models, header.step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, synth_corpus, StopList};
    use crate::model::DecoderConfig;
    use crate::rng;
    use crate::train::stage1_step;
    use crate::corpus::MaskedExample;

    fn tiny_models(seed: u64) -> Models {
        let corpus = synth_corpus(8, 1);
        let vocab = build_vocab(&corpus, 1, &StopList::builtin()).unwrap();
        let tiny = DecoderConfig {
            vocab_size: 0,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_seq: 96,
        };
        let config = TrainConfig {
            seed,
            generator: tiny.clone(),
            consistency_parser: tiny.clone(),
            eval_parser: tiny,
            ..TrainConfig::default()
        };
        Models::new(vocab, &config).unwrap()
    }

    fn all_values(models: &Models) -> Vec<f64> {
        [
            &models.generator_store,
            &models.selector_store,
            &models.consistency_store,
            &models.eval_store,
        ]
        .iter()
        .flat_map(|s| s.segments().flat_map(|(_, _, _, v, m, vv)| {
            v.iter().chain(m).chain(vv).copied().collect::<Vec<f64>>()
        }))
        .collect()
    }

    #[test]
    fn round_trip_restores_state_and_resaves_identically() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synth_corpus(8, 1);
        let mut models = tiny_models(3);
        // take a step so Adam moments and step counts are nontrivial
        let batch: Vec<&MaskedExample> = corpus.iter().take(4).collect();
        stage1_step(&mut models, &batch, &mut rng::substream(1, "ck")).unwrap();

        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &models, 17).unwrap();
        let first = fs::read(&path).unwrap();
        assert!(first.starts_with(CHECKPOINT_MAGIC));

        let (loaded, step) = load_checkpoint(&path).unwrap();
        assert_eq!(step, 17);
        assert_eq!(loaded.config, models.config);
        assert_eq!(loaded.vocab.len(), models.vocab.len());
        assert_eq!(
            loaded.generator_store.step_count(),
            models.generator_store.step_count()
        );
        // values agree to f32 precision
        for (a, b) in all_values(&loaded).iter().zip(all_values(&models)) {
            assert_eq!(*a, b as f32 as f64);
        }

        let path2 = dir.path().join("resave.ckpt");
        save_checkpoint(&path2, &loaded, step).unwrap();
        let second = fs::read(&path2).unwrap();
        assert_eq!(first, second, "resave is not byte-identical");
    }

    #[test]
    fn loaded_models_run_training_steps() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synth_corpus(8, 1);
        let models = tiny_models(4);
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &models, 0).unwrap();
        let (mut loaded, _) = load_checkpoint(&path).unwrap();
        let batch: Vec<&MaskedExample> = corpus.iter().take(2).collect();
        let losses = stage1_step(&mut loaded, &batch, &mut rng::substream(2, "go")).unwrap();
        assert!(losses.total.is_finite());
    }

    fn load_err(path: &Path) -> String {
        match load_checkpoint(path) {
            Ok(_) => panic!("load of {} unexpectedly succeeded", path.display()),
            Err(e) => e.to_string(),
        }
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let models = tiny_models(5);
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &models, 2).unwrap();
        let good = fs::read(&path).unwrap();

        let bad_magic = dir.path().join("magic.ckpt");
        fs::write(&bad_magic, b"NOTMWPGENxxxxxxxxxxx").unwrap();
        let err = load_err(&bad_magic);
        assert!(err.contains("magic"), "{err}");

        let truncated = dir.path().join("short.ckpt");
        fs::write(&truncated, &good[..good.len() - 9]).unwrap();
        let err = load_err(&truncated);
        assert!(err.contains("shorter"), "{err}");

        let trailing = dir.path().join("long.ckpt");
        let mut extra = good.clone();
        extra.extend_from_slice(&[0u8; 4]);
        fs::write(&trailing, &extra).unwrap();
        let err = load_err(&trailing);
        assert!(err.contains("trailing"), "{err}");
    }

    #[test]
    fn rejects_unknown_version_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let models = tiny_models(6);
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &models, 2).unwrap();
        let bytes = fs::read(&path).unwrap();

        // bump the version field inside the JSON header without reshaping it
        let header_len =
            u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: serde_json::Value =
            serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
        header["version"] = serde_json::json!(99);
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut patched = Vec::new();
        patched.extend_from_slice(CHECKPOINT_MAGIC);
        patched.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        patched.extend_from_slice(&new_header);
        patched.extend_from_slice(&bytes[16 + header_len..]);
        let bad = dir.path().join("v99.ckpt");
        fs::write(&bad, &patched).unwrap();

        let err = load_err(&bad);
        assert!(err.contains("99") && err.contains('1'), "{err}");
    }
}
