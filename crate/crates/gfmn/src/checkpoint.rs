//! Sectioned binary container for parameters, statistics and estimator state.
//!
//! Layout (little-endian): `GFMN`, version `u32`, section count `u32`, then
//! per section a 4-byte tag, name length `u32`, UTF-8 name, rank `u32`, `rank`
//! dims `u32`, and `prod(dims)` `f32` values. Sections named `@key=value`
//! carry text metadata and have a single zero dim.

use std::collections::BTreeMap;
use std::path::Path;

use gfmn_core::ama::{AdamMoments, AmaState, AmaTrack, MaState, MovingAverage};
use gfmn_core::moments::{LayerMoments, MomentStats};
use gfmn_core::nets::{
    build_generator, FeatureExtractor, ExtractorKind, GeneratorConfig, GeneratorNet, ImageShape, LayerSpec, Params,
};
use gfmn_core::trainer::{ResumeState, RngState};
use gfmn_core::Tensor;

use crate::error::{write_atomic, IoError, Result};

pub const MAGIC: &[u8; 4] = b"GFMN";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tag {
    /// Generator parameters and optimizer state.
    Genp,
    /// Real-data moments.
    Stat,
    /// Moving-average estimator state.
    Amas,
    /// Encoder / feature-extractor parameters.
    Encp,
}

impl Tag {
    pub fn bytes(self) -> &'static [u8; 4] {
        match self {
            Tag::Genp => b"GENP",
            Tag::Stat => b"STAT",
            Tag::Amas => b"AMAS",
            Tag::Encp => b"ENCP",
        }
    }

    fn from_bytes(b: &[u8]) -> Option<Self> {
        match b {
            b"GENP" => Some(Tag::Genp),
            b"STAT" => Some(Tag::Stat),
            b"AMAS" => Some(Tag::Amas),
            b"ENCP" => Some(Tag::Encp),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub tag: Tag,
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub sections: Vec<Section>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_tensor(&mut self, tag: Tag, name: &str, t: &Tensor) {
        self.sections.push(Section {
            tag,
            name: name.to_string(),
            dims: t.shape().iter().map(|&d| d as u32).collect(),
            data: t.data().to_vec(),
        });
    }

    pub fn push_vec(&mut self, tag: Tag, name: &str, v: &[f32]) {
        self.sections.push(Section {
            tag,
            name: name.to_string(),
            dims: vec![v.len() as u32],
            data: v.to_vec(),
        });
    }

    pub fn push_meta(&mut self, tag: Tag, key: &str, value: impl std::fmt::Display) {
        debug_assert!(!key.contains('='));
        self.sections.push(Section {
            tag,
            name: format!("@{key}={value}"),
            dims: vec![0],
            data: Vec::new(),
        });
    }

    pub fn meta(&self, tag: Tag, key: &str) -> Option<&str> {
        self.sections
            .iter()
            .filter(|s| s.tag == tag)
            .find_map(|s| s.name.strip_prefix('@')?.strip_prefix(key)?.strip_prefix('='))
    }

    pub(crate) fn require_meta(&self, tag: Tag, key: &str) -> std::result::Result<&str, String> {
        self.meta(tag, key)
            .ok_or_else(|| format!("missing {} metadata `{key}`", String::from_utf8_lossy(tag.bytes())))
    }

    pub(crate) fn parse_meta<T: std::str::FromStr>(&self, tag: Tag, key: &str) -> std::result::Result<T, String> {
        let raw = self.require_meta(tag, key)?;
        raw.parse().map_err(|_| format!("bad value `{raw}` for `{key}`"))
    }

    pub fn section(&self, tag: Tag, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.tag == tag && s.name == name)
    }

    pub fn tensor(&self, tag: Tag, name: &str) -> Option<Tensor> {
        let s = self.section(tag, name)?;
        let dims: Vec<usize> = s.dims.iter().map(|&d| d as usize).collect();
        Tensor::new(&dims, s.data.clone()).ok()
    }

    /// Non-metadata sections of one tag.
    pub fn tensors(&self, tag: Tag) -> impl Iterator<Item = &Section> {
        self.sections.iter().filter(move |s| s.tag == tag && !s.name.starts_with('@'))
    }

    pub fn has_tag(&self, tag: Tag) -> bool {
        self.sections.iter().any(|s| s.tag == tag)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(s.tag.bytes());
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&(s.dims.len() as u32).to_le_bytes());
            for d in &s.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a container; sections with unknown tags are skipped.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| "not a checkpoint (too short)".to_string())? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let count = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..count {
            let tag_bytes = r.take(4)?;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| "section name is not UTF-8".to_string())?
                .to_string();
            let rank = r.u32()? as usize;
            if rank.saturating_mul(4) > r.remaining() {
                return Err(format!("section `{name}` declares rank {rank} past end of file"));
            }
            let dims: Vec<u32> = (0..rank).map(|_| r.u32()).collect::<std::result::Result<_, _>>()?;
            let len = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| format!("section `{name}` dims {dims:?} overflow"))?;
            if len > r.remaining() {
                return Err(format!(
                    "section `{name}` declares {len} payload bytes but {} remain",
                    r.remaining()
                ));
            }
            let payload = r.take(len)?;
            let Some(tag) = Tag::from_bytes(tag_bytes) else {
                log::warn!(
                    "skipping section `{name}` with unknown tag {:?}",
                    String::from_utf8_lossy(tag_bytes)
                );
                continue;
            };
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            sections.push(Section { tag, name, dims, data });
        }
        if r.remaining() != 0 {
            return Err(format!("{} trailing bytes", r.remaining()));
        }
        Ok(Self { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| IoError::format(path, m))
    }
}

fn tensor_or(ck: &Checkpoint, tag: Tag, name: &str) -> std::result::Result<Tensor, String> {
    ck.tensor(tag, name).ok_or_else(|| format!("missing section `{name}`"))
}

fn vec_or(ck: &Checkpoint, tag: Tag, name: &str) -> std::result::Result<Vec<f32>, String> {
    Ok(tensor_or(ck, tag, name)?.into_data())
}

fn params_to(ck: &mut Checkpoint, tag: Tag, params: &Params) {
    for (name, t) in params.iter() {
        ck.push_tensor(tag, name, t);
    }
}

fn params_from(ck: &Checkpoint, tag: Tag, skip: impl Fn(&str) -> bool) -> std::result::Result<Params, String> {
    let mut p = Params::new();
    for s in ck.tensors(tag).filter(|s| !skip(&s.name)) {
        let t = tensor_or(ck, tag, &s.name)?;
        p.insert(s.name.clone(), t);
    }
    Ok(p)
}

const ADAM_M: &str = "adam.m/";
const ADAM_U: &str = "adam.u/";

pub fn put_generator(ck: &mut Checkpoint, g: &GeneratorNet) {
    let c = &g.config;
    ck.push_meta(Tag::Genp, "generator.kind", c.kind);
    ck.push_meta(Tag::Genp, "generator.n_z", c.latent_dim);
    ck.push_meta(Tag::Genp, "generator.image", c.image);
    ck.push_meta(Tag::Genp, "generator.width_divisor", c.width_divisor);
    ck.push_meta(Tag::Genp, "generator.batch_norm", c.batch_norm);
    ck.push_meta(Tag::Genp, "generator.seed", c.seed);
    params_to(ck, Tag::Genp, &g.params);
}

pub fn get_generator(ck: &Checkpoint) -> std::result::Result<GeneratorNet, String> {
    let cfg = GeneratorConfig {
        kind: ck.parse_meta(Tag::Genp, "generator.kind")?,
        latent_dim: ck.parse_meta(Tag::Genp, "generator.n_z")?,
        image: ck.parse_meta(Tag::Genp, "generator.image")?,
        width_divisor: ck.parse_meta(Tag::Genp, "generator.width_divisor")?,
        batch_norm: ck.parse_meta(Tag::Genp, "generator.batch_norm")?,
        seed: ck.parse_meta(Tag::Genp, "generator.seed")?,
    };
    let mut g = build_generator(&cfg).map_err(|e| e.to_string())?;
    let p = params_from(ck, Tag::Genp, |n| n.starts_with(ADAM_M) || n.starts_with(ADAM_U))?;
    if p.len() != g.params.len() {
        return Err(format!("checkpoint has {} generator tensors, expected {}", p.len(), g.params.len()));
    }
    g.params.load_from(&p).map_err(|e| e.to_string())?;
    Ok(g)
}

fn put_adam(ck: &mut Checkpoint, state: &BTreeMap<String, AdamMoments>) {
    for (name, s) in state {
        ck.push_vec(Tag::Genp, &format!("{ADAM_M}{name}"), &s.m);
        ck.push_vec(Tag::Genp, &format!("{ADAM_U}{name}"), &s.u);
        ck.push_meta(Tag::Genp, &format!("adam.t/{name}"), s.t);
        ck.push_meta(Tag::Genp, &format!("adam.consts/{name}"), format!("{}:{}:{}", s.beta1, s.beta2, s.eps));
    }
}

fn get_adam(ck: &Checkpoint) -> std::result::Result<BTreeMap<String, AdamMoments>, String> {
    let mut out = BTreeMap::new();
    for s in ck.tensors(Tag::Genp) {
        let Some(name) = s.name.strip_prefix(ADAM_M) else {
            continue;
        };
        let m = s.data.clone();
        let u = vec_or(ck, Tag::Genp, &format!("{ADAM_U}{name}"))?;
        let t = ck.parse_meta(Tag::Genp, &format!("adam.t/{name}"))?;
        let consts = ck.require_meta(Tag::Genp, &format!("adam.consts/{name}"))?;
        let c: Vec<f32> = consts
            .split(':')
            .map(|v| v.parse::<f32>().map_err(|_| format!("bad ADAM constants `{consts}`")))
            .collect::<std::result::Result<_, _>>()?;
        if c.len() != 3 || u.len() != m.len() {
            return Err(format!("inconsistent ADAM state for `{name}`"));
        }
        let mut a = AdamMoments::with_constants(m.len(), c[0], c[1], c[2]);
        a.m = m;
        a.u = u;
        a.t = t;
        out.insert(name.to_string(), a);
    }
    Ok(out)
}

fn put_tracks_ma(ck: &mut Checkpoint, prefix: &str, tracks: &[Vec<f32>]) {
    for (j, v) in tracks.iter().enumerate() {
        ck.push_vec(Tag::Amas, &format!("{prefix}.{j:02}.v"), v);
    }
}

fn put_tracks_ama(ck: &mut Checkpoint, prefix: &str, tracks: &[AmaTrack]) {
    for (j, t) in tracks.iter().enumerate() {
        ck.push_vec(Tag::Amas, &format!("{prefix}.{j:02}.v"), &t.v);
        ck.push_vec(Tag::Amas, &format!("{prefix}.{j:02}.m"), &t.adam.m);
        ck.push_vec(Tag::Amas, &format!("{prefix}.{j:02}.u"), &t.adam.u);
        ck.push_meta(Tag::Amas, &format!("{prefix}.{j:02}.t"), t.adam.t);
        ck.push_meta(
            Tag::Amas,
            &format!("{prefix}.{j:02}.consts"),
            format!("{}:{}:{}", t.adam.beta1, t.adam.beta2, t.adam.eps),
        );
    }
}

fn get_tracks_ma(ck: &Checkpoint, prefix: &str, n: usize) -> std::result::Result<Vec<Vec<f32>>, String> {
    (0..n).map(|j| vec_or(ck, Tag::Amas, &format!("{prefix}.{j:02}.v"))).collect()
}

fn get_tracks_ama(ck: &Checkpoint, prefix: &str, n: usize) -> std::result::Result<Vec<AmaTrack>, String> {
    (0..n)
        .map(|j| {
            let v = vec_or(ck, Tag::Amas, &format!("{prefix}.{j:02}.v"))?;
            let consts = ck.require_meta(Tag::Amas, &format!("{prefix}.{j:02}.consts"))?;
            let c: Vec<f32> = consts
                .split(':')
                .map(|x| x.parse::<f32>().map_err(|_| format!("bad constants `{consts}`")))
                .collect::<std::result::Result<_, _>>()?;
            if c.len() != 3 {
                return Err(format!("bad constants `{consts}`"));
            }
            let mut adam = AdamMoments::with_constants(v.len(), c[0], c[1], c[2]);
            adam.m = vec_or(ck, Tag::Amas, &format!("{prefix}.{j:02}.m"))?;
            adam.u = vec_or(ck, Tag::Amas, &format!("{prefix}.{j:02}.u"))?;
            adam.t = ck.parse_meta(Tag::Amas, &format!("{prefix}.{j:02}.t"))?;
            if adam.m.len() != v.len() || adam.u.len() != v.len() {
                return Err(format!("inconsistent widths in `{prefix}.{j:02}`"));
            }
            Ok(AmaTrack { v, adam })
        })
        .collect()
}

pub fn put_estimator(ck: &mut Checkpoint, est: &MovingAverage) {
    match est {
        MovingAverage::Ma(s) => {
            ck.push_meta(Tag::Amas, "kind", "ma");
            ck.push_meta(Tag::Amas, "alpha", s.alpha);
            ck.push_meta(Tag::Amas, "layers", s.mean.len());
            ck.push_meta(Tag::Amas, "has_var", s.var.is_some());
            put_tracks_ma(ck, "mean", &s.mean);
            if let Some(v) = &s.var {
                put_tracks_ma(ck, "var", v);
            }
        }
        MovingAverage::Ama(s) => {
            ck.push_meta(Tag::Amas, "kind", "ama");
            ck.push_meta(Tag::Amas, "alpha", s.alpha);
            ck.push_meta(Tag::Amas, "layers", s.mean.len());
            ck.push_meta(Tag::Amas, "has_var", s.var.is_some());
            put_tracks_ama(ck, "mean", &s.mean);
            if let Some(v) = &s.var {
                put_tracks_ama(ck, "var", v);
            }
        }
    }
}

pub fn get_estimator(ck: &Checkpoint) -> std::result::Result<Option<MovingAverage>, String> {
    if ck.meta(Tag::Amas, "kind").is_none() {
        return Ok(None);
    }
    let kind = ck.require_meta(Tag::Amas, "kind")?;
    let alpha: f32 = ck.parse_meta(Tag::Amas, "alpha")?;
    let n: usize = ck.parse_meta(Tag::Amas, "layers")?;
    let has_var: bool = ck.parse_meta(Tag::Amas, "has_var")?;
    Ok(Some(match kind {
        "ma" => MovingAverage::Ma(MaState {
            alpha,
            mean: get_tracks_ma(ck, "mean", n)?,
            var: if has_var { Some(get_tracks_ma(ck, "var", n)?) } else { None },
        }),
        "ama" => MovingAverage::Ama(AmaState {
            alpha,
            mean: get_tracks_ama(ck, "mean", n)?,
            var: if has_var { Some(get_tracks_ama(ck, "var", n)?) } else { None },
        }),
        other => return Err(format!("unknown estimator kind `{other}`")),
    }))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex32(s: &str) -> std::result::Result<[u8; 32], String> {
    if s.len() != 64 || !s.is_ascii() {
        return Err(format!("bad seed `{s}`"));
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| format!("bad seed `{s}`"))?;
    }
    Ok(out)
}

/// A complete training checkpoint.
pub fn training_checkpoint(state: &ResumeState) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.push_meta(Tag::Genp, "train.step", state.step);
    ck.push_meta(Tag::Genp, "rng.seed", hex(&state.rng.seed));
    ck.push_meta(Tag::Genp, "rng.stream", state.rng.stream);
    ck.push_meta(Tag::Genp, "rng.word_pos", state.rng.word_pos);
    put_generator(&mut ck, &state.generator);
    put_adam(&mut ck, &state.optimizer);
    if let Some(est) = &state.estimator {
        put_estimator(&mut ck, est);
    }
    ck
}

pub fn resume_state(ck: &Checkpoint) -> std::result::Result<ResumeState, String> {
    Ok(ResumeState {
        step: ck.parse_meta(Tag::Genp, "train.step")?,
        generator: get_generator(ck)?,
        optimizer: get_adam(ck)?,
        estimator: get_estimator(ck)?,
        rng: RngState {
            seed: unhex32(ck.require_meta(Tag::Genp, "rng.seed")?)?,
            stream: ck.parse_meta(Tag::Genp, "rng.stream")?,
            word_pos: ck.parse_meta(Tag::Genp, "rng.word_pos")?,
        },
    })
}

pub fn put_extractor(ck: &mut Checkpoint, e: &FeatureExtractor) {
    match e.kind() {
        ExtractorKind::Identity { width } => {
            ck.push_meta(Tag::Encp, "kind", "identity");
            ck.push_meta(Tag::Encp, "width", width);
        }
        ExtractorKind::Conv {
            image, layers, params, ..
        } => {
            ck.push_meta(Tag::Encp, "kind", "conv");
            ck.push_meta(Tag::Encp, "image", image);
            let spec: Vec<String> = layers.iter().map(LayerSpec::to_string).collect();
            ck.push_meta(Tag::Encp, "layers", spec.join(","));
            ck.push_meta(Tag::Encp, "frozen", e.is_frozen());
            params_to(ck, Tag::Encp, params);
        }
    }
}

pub fn get_extractor(ck: &Checkpoint) -> std::result::Result<FeatureExtractor, String> {
    match ck.require_meta(Tag::Encp, "kind")? {
        "identity" => Ok(FeatureExtractor::identity(ck.parse_meta(Tag::Encp, "width")?)),
        "conv" => {
            let image: ImageShape = ck.parse_meta(Tag::Encp, "image")?;
            let layers = ck
                .require_meta(Tag::Encp, "layers")?
                .split(',')
                .map(|l| l.parse::<LayerSpec>().map_err(|e| e.to_string()))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let frozen: bool = ck.parse_meta(Tag::Encp, "frozen")?;
            let params = params_from(ck, Tag::Encp, |_| false)?;
            FeatureExtractor::from_layers(image, layers, params, frozen).map_err(|e| e.to_string())
        }
        other => Err(format!("unknown extractor kind `{other}`")),
    }
}

pub fn put_stats(ck: &mut Checkpoint, s: &MomentStats) {
    ck.push_meta(Tag::Stat, "count", s.count);
    ck.push_meta(Tag::Stat, "fingerprint", format!("{:016x}", s.fingerprint));
    ck.push_meta(Tag::Stat, "layers", s.layers.len());
    for (j, l) in s.layers.iter().enumerate() {
        ck.push_vec(Tag::Stat, &format!("layer.{j:02}.mean"), &l.mean);
        if let Some(v) = &l.var {
            ck.push_vec(Tag::Stat, &format!("layer.{j:02}.var"), v);
        }
    }
}

pub fn get_stats(ck: &Checkpoint) -> std::result::Result<MomentStats, String> {
    let n: usize = ck.parse_meta(Tag::Stat, "layers")?;
    let fp = ck.require_meta(Tag::Stat, "fingerprint")?;
    let fingerprint = u64::from_str_radix(fp, 16).map_err(|_| format!("bad fingerprint `{fp}`"))?;
    let layers = (0..n)
        .map(|j| {
            let mean = vec_or(ck, Tag::Stat, &format!("layer.{j:02}.mean"))?;
            let var = ck.tensor(Tag::Stat, &format!("layer.{j:02}.var")).map(Tensor::into_data);
            if var.as_ref().is_some_and(|v| v.len() != mean.len()) {
                return Err(format!("layer {j}: variance width differs from mean width"));
            }
            Ok(LayerMoments { mean, var })
        })
        .collect::<std::result::Result<_, String>>()?;
    Ok(MomentStats {
        layers,
        count: ck.parse_meta(Tag::Stat, "count")?,
        fingerprint,
    })
}

/// Loads one kind of object from a checkpoint file.
pub fn load_with<T>(path: &Path, f: impl Fn(&Checkpoint) -> std::result::Result<T, String>) -> Result<T> {
    let ck = Checkpoint::load(path)?;
    f(&ck).map_err(|m| IoError::format(path, m))
}
