//! Binary artifact formats. Both are little-endian with a magic string, and
//! both are written in a fixed record order so write → read → write is
//! byte-identical.
//!
//! Checkpoint (`SNAPVIT1`): a count-prefixed table of named records — a
//! leading JSON-text record holding the model config, then one f64 tensor
//! record per weight. Record layout: name length (u64), UTF-8 name, dtype
//! code (u8: 0 = UTF-8 text, 1 = f64 tensor), rank (u64), dims (u64 each),
//! raw payload.
//!
//! Ranking (`SNAPRANK1`): a JSON-text provenance block (search settings plus
//! the full run configuration), then binary arrays — the ordered structure
//! ids, fused scores in rank order, unfused local scores in census order,
//! the winning per-unit factors, and the final search state (μ and the
//! log-covariance factor).

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{Result, SnapError};
use crate::pruner::{Provenance, StructureRanking};
use crate::ssl::SslHeadWeights;
use crate::tensor::Tensor;
use crate::vit::{LayerWeights, ModelWeights, StructureId, StructureKind, ViTConfig};

const CKPT_MAGIC: &[u8; 8] = b"SNAPVIT1";
const RANK_MAGIC: &[u8; 9] = b"SNAPRANK1";

const DTYPE_TEXT: u8 = 0;
const DTYPE_F64: u8 = 1;

struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8]) -> Writer {
        Writer { bytes: magic.to_vec() }
    }

    fn u64(&mut self, v: u64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn f64_slice(&mut self, vs: &[f64]) {
        for v in vs {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn text_record(&mut self, name: &str, text: &str) {
        self.u64(name.len() as u64);
        self.bytes.extend_from_slice(name.as_bytes());
        self.bytes.push(DTYPE_TEXT);
        self.u64(1);
        self.u64(text.len() as u64);
        self.bytes.extend_from_slice(text.as_bytes());
    }

    fn tensor_record(&mut self, name: &str, t: &Tensor) {
        self.u64(name.len() as u64);
        self.bytes.extend_from_slice(name.as_bytes());
        self.bytes.push(DTYPE_F64);
        self.u64(t.shape().len() as u64);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        self.f64_slice(t.data());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], magic: &[u8]) -> Result<Reader<'a>> {
        if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
            return Err(SnapError::Format("wrong or missing magic string".into()));
        }
        Ok(Reader { bytes, pos: magic.len() })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(SnapError::Format("truncated artifact".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

enum Record {
    Text(String),
    Tensor(Tensor),
}

fn read_record(r: &mut Reader) -> Result<(String, Record)> {
    let name_len = r.u64()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| SnapError::Format("record name is not UTF-8".into()))?;
    let dtype = r.take(1)?[0];
    let rank = r.u64()? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u64()? as usize);
    }
    let len: usize = dims.iter().product();
    match dtype {
        DTYPE_TEXT => {
            if rank != 1 {
                return Err(SnapError::Format(format!("text record {name} must be rank 1")));
            }
            let text = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| SnapError::Format(format!("record {name} is not UTF-8")))?;
            Ok((name, Record::Text(text)))
        }
        DTYPE_F64 => Ok((name, Record::Tensor(Tensor::from_vec(&dims, r.f64_vec(len)?)))),
        other => Err(SnapError::Format(format!("unknown dtype code {other} in record {name}"))),
    }
}

fn checkpoint_records(w: &ModelWeights) -> Result<Writer> {
    let mut out = Writer::new(CKPT_MAGIC);
    let mut n_records = 5 + 12 * w.layers.len();
    if w.cls_token.is_some() {
        n_records += 1;
    }
    if w.classifier.is_some() {
        n_records += 2;
    }
    if w.ssl_head.is_some() {
        n_records += 3;
    }
    out.u64(n_records as u64);
    let config_json = serde_json::to_string(&w.config)
        .map_err(|e| SnapError::Format(format!("config serialization failed: {e}")))?;
    out.text_record("config", &config_json);
    out.tensor_record("patch_embed", &w.patch_embed);
    out.tensor_record("pos_embed", &w.pos_embed);
    if let Some(cls) = &w.cls_token {
        out.tensor_record("cls_token", cls);
    }
    for (l, layer) in w.layers.iter().enumerate() {
        for (field, t) in [
            ("ln1_scale", &layer.ln1_scale),
            ("ln1_shift", &layer.ln1_shift),
            ("wq", &layer.wq),
            ("wk", &layer.wk),
            ("wv", &layer.wv),
            ("wo", &layer.wo),
            ("ln2_scale", &layer.ln2_scale),
            ("ln2_shift", &layer.ln2_shift),
            ("w_in", &layer.w_in),
            ("b_in", &layer.b_in),
            ("w_out", &layer.w_out),
            ("b_out", &layer.b_out),
        ] {
            out.tensor_record(&format!("layers.{l}.{field}"), t);
        }
    }
    out.tensor_record("final_ln_scale", &w.final_ln_scale);
    out.tensor_record("final_ln_shift", &w.final_ln_shift);
    if let Some((cw, cb)) = &w.classifier {
        out.tensor_record("classifier.weight", cw);
        out.tensor_record("classifier.bias", cb);
    }
    if let Some(head) = &w.ssl_head {
        out.tensor_record("ssl_head.proj", &head.proj);
        out.tensor_record("ssl_head.center", &head.center);
        out.tensor_record("ssl_head.tau", &Tensor::from_vec(&[2], vec![
            head.tau_teacher,
            head.tau_student,
        ]));
    }
    Ok(out)
}

/// Serialize model weights into checkpoint bytes.
pub fn checkpoint_to_bytes(w: &ModelWeights) -> Result<Vec<u8>> {
    Ok(checkpoint_records(w)?.bytes)
}

/// Parse checkpoint bytes back into model weights.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelWeights> {
    let mut r = Reader::new(bytes, CKPT_MAGIC)?;
    let n_records = r.u64()? as usize;
    let mut texts = std::collections::BTreeMap::new();
    let mut tensors = std::collections::BTreeMap::new();
    for _ in 0..n_records {
        let (name, rec) = read_record(&mut r)?;
        let duplicate = match rec {
            Record::Text(t) => texts.insert(name.clone(), t).is_some(),
            Record::Tensor(t) => tensors.insert(name.clone(), t).is_some(),
        };
        if duplicate {
            return Err(SnapError::Format(format!("duplicate record {name}")));
        }
    }
    if !r.done() {
        return Err(SnapError::Format("trailing bytes after checkpoint records".into()));
    }
    let config_json =
        texts.remove("config").ok_or_else(|| SnapError::Format("missing config record".into()))?;
    let config: ViTConfig = serde_json::from_str(&config_json)
        .map_err(|e| SnapError::Format(format!("bad config record: {e}")))?;
    fn take_tensor(
        map: &mut std::collections::BTreeMap<String, Tensor>,
        name: &str,
    ) -> Result<Tensor> {
        map.remove(name).ok_or_else(|| SnapError::Format(format!("missing record {name}")))
    }
    let patch_embed = take_tensor(&mut tensors, "patch_embed")?;
    let pos_embed = take_tensor(&mut tensors, "pos_embed")?;
    let cls_token =
        if config.cls_token { Some(take_tensor(&mut tensors, "cls_token")?) } else { None };
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        layers.push(LayerWeights {
            ln1_scale: take_tensor(&mut tensors, &format!("layers.{l}.ln1_scale"))?,
            ln1_shift: take_tensor(&mut tensors, &format!("layers.{l}.ln1_shift"))?,
            wq: take_tensor(&mut tensors, &format!("layers.{l}.wq"))?,
            wk: take_tensor(&mut tensors, &format!("layers.{l}.wk"))?,
            wv: take_tensor(&mut tensors, &format!("layers.{l}.wv"))?,
            wo: take_tensor(&mut tensors, &format!("layers.{l}.wo"))?,
            ln2_scale: take_tensor(&mut tensors, &format!("layers.{l}.ln2_scale"))?,
            ln2_shift: take_tensor(&mut tensors, &format!("layers.{l}.ln2_shift"))?,
            w_in: take_tensor(&mut tensors, &format!("layers.{l}.w_in"))?,
            b_in: take_tensor(&mut tensors, &format!("layers.{l}.b_in"))?,
            w_out: take_tensor(&mut tensors, &format!("layers.{l}.w_out"))?,
            b_out: take_tensor(&mut tensors, &format!("layers.{l}.b_out"))?,
        });
    }
    let final_ln_scale = take_tensor(&mut tensors, "final_ln_scale")?;
    let final_ln_shift = take_tensor(&mut tensors, "final_ln_shift")?;
    let classifier = if tensors.contains_key("classifier.weight") {
        Some((
            take_tensor(&mut tensors, "classifier.weight")?,
            take_tensor(&mut tensors, "classifier.bias")?,
        ))
    } else {
        None
    };
    let ssl_head = if tensors.contains_key("ssl_head.proj") {
        let proj = take_tensor(&mut tensors, "ssl_head.proj")?;
        let center = take_tensor(&mut tensors, "ssl_head.center")?;
        let tau = take_tensor(&mut tensors, "ssl_head.tau")?;
        if tau.len() != 2 {
            return Err(SnapError::Format("ssl_head.tau must hold two temperatures".into()));
        }
        Some(SslHeadWeights {
            proj,
            center,
            tau_teacher: tau.data()[0],
            tau_student: tau.data()[1],
        })
    } else {
        None
    };
    if let Some(name) = tensors.keys().next() {
        return Err(SnapError::Format(format!("unexpected record {name}")));
    }
    let weights = ModelWeights {
        config,
        patch_embed,
        pos_embed,
        cls_token,
        layers,
        final_ln_scale,
        final_ln_shift,
        classifier,
        ssl_head,
    };
    weights.validate()?;
    Ok(weights)
}

/// Write model weights to a checkpoint file.
pub fn write_checkpoint(path: &Path, w: &ModelWeights) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(w)?)?;
    Ok(())
}

/// Read model weights from a checkpoint file.
pub fn read_checkpoint(path: &Path) -> Result<ModelWeights> {
    checkpoint_from_bytes(&fs::read(path)?)
}

fn kind_code(kind: StructureKind) -> u8 {
    match kind {
        StructureKind::AttentionHead => 0,
        StructureKind::FfnNeuron => 1,
    }
}

/// Serialize a ranking (plus the run configuration that produced it) into
/// ranking-artifact bytes.
pub fn ranking_to_bytes(ranking: &StructureRanking, run_config: &Value) -> Result<Vec<u8>> {
    let n = ranking.order.len();
    if ranking.fused.len() != n || ranking.local.len() != n {
        return Err(SnapError::Contract("ranking arrays disagree on structure count".into()));
    }
    let b = ranking.c.len();
    if ranking.mu.len() != b || ranking.a.shape() != [b, b] {
        return Err(SnapError::Contract("search state disagrees on unit count".into()));
    }
    let provenance = serde_json::json!({
        "run_config": run_config,
        "search": &ranking.provenance,
    });
    let provenance_json = serde_json::to_string(&provenance)
        .map_err(|e| SnapError::Format(format!("provenance serialization failed: {e}")))?;
    let mut out = Writer::new(RANK_MAGIC);
    out.u64(provenance_json.len() as u64);
    out.bytes.extend_from_slice(provenance_json.as_bytes());
    out.u64(n as u64);
    for s in &ranking.order {
        out.u64(s.layer as u64);
        out.bytes.push(kind_code(s.kind));
        out.u64(s.index as u64);
    }
    out.f64_slice(&ranking.fused);
    out.f64_slice(&ranking.local);
    out.u64(b as u64);
    out.f64_slice(&ranking.c);
    out.f64_slice(&ranking.mu);
    out.f64_slice(ranking.a.data());
    Ok(out.bytes)
}

/// Parse ranking-artifact bytes into the ranking and the embedded run
/// configuration.
pub fn ranking_from_bytes(bytes: &[u8]) -> Result<(StructureRanking, Value)> {
    let mut r = Reader::new(bytes, RANK_MAGIC)?;
    let json_len = r.u64()? as usize;
    let provenance_json = String::from_utf8(r.take(json_len)?.to_vec())
        .map_err(|_| SnapError::Format("provenance block is not UTF-8".into()))?;
    let block: Value = serde_json::from_str(&provenance_json)
        .map_err(|e| SnapError::Format(format!("bad provenance block: {e}")))?;
    let run_config = block
        .get("run_config")
        .cloned()
        .ok_or_else(|| SnapError::Format("provenance block lacks run_config".into()))?;
    let search = block
        .get("search")
        .cloned()
        .ok_or_else(|| SnapError::Format("provenance block lacks search record".into()))?;
    let provenance: Provenance = serde_json::from_value(search)
        .map_err(|e| SnapError::Format(format!("bad search record: {e}")))?;
    let n = r.u64()? as usize;
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let layer = r.u64()? as usize;
        let kind = match r.take(1)?[0] {
            0 => StructureKind::AttentionHead,
            1 => StructureKind::FfnNeuron,
            other => return Err(SnapError::Format(format!("unknown structure kind {other}"))),
        };
        let index = r.u64()? as usize;
        order.push(StructureId { layer, kind, index });
    }
    let fused = r.f64_vec(n)?;
    let local = r.f64_vec(n)?;
    let b = r.u64()? as usize;
    let c = r.f64_vec(b)?;
    let mu = r.f64_vec(b)?;
    let a = Tensor::from_vec(&[b, b], r.f64_vec(b * b)?);
    if !r.done() {
        return Err(SnapError::Format("trailing bytes after ranking arrays".into()));
    }
    Ok((StructureRanking { order, fused, local, c, mu, a, provenance }, run_config))
}

/// Write a ranking artifact file.
pub fn write_ranking(path: &Path, ranking: &StructureRanking, run_config: &Value) -> Result<()> {
    fs::write(path, ranking_to_bytes(ranking, run_config)?)?;
    Ok(())
}

/// Read a ranking artifact file.
pub fn read_ranking(path: &Path) -> Result<(StructureRanking, Value)> {
    ranking_from_bytes(&fs::read(path)?)
}
