//! Binary checkpoints of a scoring model and classifier.
//!
//! Layout: magic `COUQCK\0\x01`, then tagged blocks `tag: u8, len: u64,
//! payload`. All integers and floats are little-endian; model weights are
//! `f32`, matrices row-major.
//!
//! | tag | block                                                         |
//! |-----|---------------------------------------------------------------|
//! | 1   | subspace: role u8 (0 old, 1 novel), class i32, dim u32, q u32, flags u8, n_fit u64, variance f64, mean, basis, [scale] |
//! | 2   | mapper: kind u8 (0 k-means, 1 shallow net, 2 constant), ids, centroids or network |
//! | 3   | classifier: ids, has_net u8, network                          |
//! | 4   | epsilon f64                                                   |

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::engine::Scorer;
use crate::error::{Error, Result};
use crate::learner::{ClassifierConfig, ContinualClassifier};
use crate::mapper::Mapper;
use crate::nn::Mlp;
use crate::subspace::ClassSubspace;
use crate::ClassId;

const MAGIC: &[u8; 8] = b"COUQCK\0\x01";

const TAG_SUBSPACE: u8 = 1;
const TAG_MAPPER: u8 = 2;
const TAG_CLASSIFIER: u8 = 3;
const TAG_EPSILON: u8 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub scorer: Scorer,
    pub classifier: Option<ContinualClassifier>,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f32>) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn f64_as_f32s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.0.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fn ids(&mut self, ids: &[ClassId]) {
        self.u32(ids.len());
        for c in ids {
            self.i32(*c);
        }
    }
    fn matrix(&mut self, m: &DMatrix<f64>) {
        self.u32(m.nrows());
        self.u32(m.ncols());
        for r in 0..m.nrows() {
            self.f64_as_f32s(m.row(r).iter());
        }
    }
    fn mlp(&mut self, net: &Mlp) {
        self.matrix(&net.w1);
        self.f64_as_f32s(net.b1.iter());
        self.matrix(&net.w2);
        self.f64_as_f32s(net.b2.iter());
    }
    fn block(&mut self, tag: u8, payload: Writer) {
        self.u8(tag);
        self.u64(payload.0.len());
        self.0.extend_from_slice(&payload.0);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("bad length".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn ids(&mut self) -> Result<Vec<ClassId>> {
        let n = self.u32()?;
        (0..n).map(|_| self.i32()).collect()
    }
    fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let r = self.u32()?;
        let c = self.u32()?;
        let v: Vec<f64> = self.f32s(r * c)?.into_iter().map(f64::from).collect();
        Ok(DMatrix::from_row_slice(r, c, &v))
    }
    fn vector(&mut self, n: usize) -> Result<DVector<f64>> {
        Ok(DVector::from_iterator(n, self.f32s(n)?.into_iter().map(f64::from)))
    }
    fn mlp(&mut self) -> Result<Mlp> {
        let w1 = self.matrix()?;
        let b1 = self.vector(w1.nrows())?;
        let w2 = self.matrix()?;
        if w2.ncols() != w1.nrows() {
            return Err(Error::Format("network layer shapes disagree".into()));
        }
        let b2 = self.vector(w2.nrows())?;
        Ok(Mlp { w1, b1, w2, b2 })
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn subspace_block(role: u8, s: &ClassSubspace) -> Writer {
    let mut w = Writer::default();
    w.u8(role);
    w.i32(s.class_id);
    w.u32(s.dim);
    w.u32(s.q);
    w.u8(u8::from(s.scale.is_some()) | (u8::from(s.degenerate) << 1));
    w.u64(s.n_fit);
    w.f64(s.variance_retained);
    w.f32s(&s.mean);
    w.f32s(&s.basis);
    if let Some(scale) = &s.scale {
        w.f32s(scale);
    }
    w
}

fn read_subspace(r: &mut Reader) -> Result<(u8, ClassSubspace)> {
    let role = r.u8()?;
    let class_id = r.i32()?;
    let dim = r.u32()?;
    let q = r.u32()?;
    let flags = r.u8()?;
    let n_fit = r.u64()?;
    let variance_retained = r.f64()?;
    let mean = r.f32s(dim)?;
    let basis = r.f32s(q * dim)?;
    let scale = if flags & 1 != 0 { Some(r.f32s(dim)?) } else { None };
    Ok((
        role,
        ClassSubspace {
            class_id,
            dim,
            q,
            mean,
            basis,
            scale,
            variance_retained,
            n_fit,
            degenerate: flags & 2 != 0,
        },
    ))
}

fn mapper_block(m: &Mapper) -> Writer {
    let mut w = Writer::default();
    match m {
        Mapper::Kmeans { class_ids, centroids } => {
            w.u8(0);
            w.ids(class_ids);
            w.u32(centroids.first().map_or(0, |c| c.len()));
            for c in centroids {
                w.f32s(c);
            }
        }
        Mapper::ShallowNet { class_ids, net } => {
            w.u8(1);
            w.ids(class_ids);
            w.mlp(net);
        }
        Mapper::Constant { class_id } => {
            w.u8(2);
            w.ids(&[*class_id]);
        }
    }
    w
}

fn read_mapper(r: &mut Reader) -> Result<Mapper> {
    let kind = r.u8()?;
    let class_ids = r.ids()?;
    match kind {
        0 => {
            let dim = r.u32()?;
            let centroids = (0..class_ids.len()).map(|_| r.f32s(dim)).collect::<Result<_>>()?;
            Ok(Mapper::Kmeans { class_ids, centroids })
        }
        1 => {
            let net = r.mlp()?;
            if net.output_dim() != class_ids.len() {
                return Err(Error::Format("mapper head does not match its class ids".into()));
            }
            Ok(Mapper::ShallowNet { class_ids, net })
        }
        2 if class_ids.len() == 1 => Ok(Mapper::Constant { class_id: class_ids[0] }),
        _ => Err(Error::Format(format!("unknown mapper kind {kind}"))),
    }
}

pub fn to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    let mut eps = Writer::default();
    eps.f64(ck.scorer.epsilon);
    w.block(TAG_EPSILON, eps);
    for s in &ck.scorer.old {
        w.block(TAG_SUBSPACE, subspace_block(0, s));
    }
    for s in ck.scorer.novel.values() {
        w.block(TAG_SUBSPACE, subspace_block(1, s));
    }
    if let Some(m) = &ck.scorer.mapper {
        w.block(TAG_MAPPER, mapper_block(m));
    }
    if let Some(clf) = &ck.classifier {
        let mut b = Writer::default();
        b.ids(&clf.class_ids);
        b.u8(u8::from(clf.net.is_some()));
        if let Some(net) = &clf.net {
            b.mlp(net);
        }
        w.block(TAG_CLASSIFIER, b);
    }
    w.0
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let mut scorer = Scorer {
        old: Vec::new(),
        novel: Default::default(),
        mapper: None,
        epsilon: 1e-8,
    };
    let mut classifier = None;
    while !r.done() {
        let tag = r.u8()?;
        let len = r.u64()?;
        let mut block = Reader {
            buf: r.take(len)?,
            pos: 0,
        };
        match tag {
            TAG_EPSILON => scorer.epsilon = block.f64()?,
            TAG_SUBSPACE => match read_subspace(&mut block)? {
                (0, s) => scorer.old.push(s),
                (1, s) => {
                    scorer.novel.insert(s.class_id, s);
                }
                (role, _) => return Err(Error::Format(format!("unknown subspace role {role}"))),
            },
            TAG_MAPPER => scorer.mapper = Some(read_mapper(&mut block)?),
            TAG_CLASSIFIER => {
                let class_ids = block.ids()?;
                let net = if block.u8()? != 0 { Some(block.mlp()?) } else { None };
                classifier = Some(ContinualClassifier {
                    net,
                    class_ids,
                    config: ClassifierConfig::default(),
                });
            }
            other => return Err(Error::Format(format!("unknown block tag {other}"))),
        }
        if !block.done() {
            return Err(Error::Format(format!("trailing bytes in block {tag}")));
        }
    }
    Ok(Checkpoint { scorer, classifier })
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    crate::evalkit::write_atomic(path, &to_bytes(ck))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
