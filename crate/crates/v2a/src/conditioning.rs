//! Frame-feature conditioning: per-frame embeddings concatenated into the
//! condition matrix, learnable positions added on top, and the cached-feature
//! file format used to ship precomputed frame features.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::nn::RngStream;

/// Ordered frame payloads at a fixed frame rate. The payload type depends on
/// where frames come from: synthetic tracks carry feature rows directly,
/// cached-feature files carry row indices.
#[derive(Debug, Clone)]
pub struct FrameSequence<P> {
    pub frames: Vec<P>,
    pub fps: u32,
}

impl<P> FrameSequence<P> {
    pub fn new(frames: Vec<P>, fps: u32) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument("frame sequence needs at least 1 frame".into()));
        }
        Ok(Self { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Center-of-interval timestamp of frame `k`: (k + 0.5) / fps seconds.
pub fn frame_timestamp(k: usize, fps: u32) -> f64 {
    (k as f64 + 0.5) / fps as f64
}

/// Frame count for a clip: round(duration * fps), at least 1.
pub fn frame_count(duration_seconds: f64, fps: u32) -> usize {
    ((duration_seconds * fps as f64).round() as usize).max(1)
}

/// The cross-attention context: one feature row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionMatrix {
    pub values: Array2<f64>,
}

impl ConditionMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::InvalidArgument("condition matrix needs at least 1 row".into()));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("condition matrix has non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Maps one frame payload to a fixed-dimension feature vector.
pub trait FrameEmbedder<P> {
    fn feature_dim(&self) -> usize;
    fn embed(&self, frame: &P) -> Result<Array1<f64>>;
}

/// Oracle embedder for synthetic data: the payload already is the feature row.
#[derive(Debug, Clone, Default)]
pub struct TrackEmbedder {
    pub dim: usize,
}

impl FrameEmbedder<Vec<f64>> for TrackEmbedder {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, frame: &Vec<f64>) -> Result<Array1<f64>> {
        if frame.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "feature row has {} entries, embedder expects {}",
                frame.len(),
                self.dim
            )));
        }
        Ok(Array1::from_vec(frame.clone()))
    }
}

/// Adapter for a real image backbone: features were computed offline and
/// stored in a cached-feature file; payloads are row indices.
#[derive(Debug, Clone)]
pub struct CachedFeatureEmbedder {
    features: Array2<f64>,
}

impl CachedFeatureEmbedder {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self { features: read_features(path)? })
    }

    pub fn from_matrix(features: Array2<f64>) -> Self {
        Self { features }
    }

    pub fn num_rows(&self) -> usize {
        self.features.nrows()
    }

    /// Frame sequence addressing every cached row in order.
    pub fn full_sequence(&self, fps: u32) -> Result<FrameSequence<usize>> {
        FrameSequence::new((0..self.num_rows()).collect(), fps)
    }
}

impl FrameEmbedder<usize> for CachedFeatureEmbedder {
    fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    fn embed(&self, frame: &usize) -> Result<Array1<f64>> {
        if *frame >= self.features.nrows() {
            return Err(Error::InvalidArgument(format!(
                "cached feature row {frame} out of range ({} rows)",
                self.features.nrows()
            )));
        }
        Ok(self.features.row(*frame).to_owned())
    }
}

/// Row i of the result is `embedder(frames[i])`.
pub fn extract_features<P>(
    frames: &FrameSequence<P>,
    embedder: &impl FrameEmbedder<P>,
) -> Result<ConditionMatrix> {
    let dim = embedder.feature_dim();
    let mut values = Array2::<f64>::zeros((frames.len(), dim));
    for (i, frame) in frames.frames.iter().enumerate() {
        let row = embedder
            .embed(frame)
            .map_err(|e| Error::InvalidArgument(format!("frame {i}: {e}")))?;
        if row.len() != dim {
            return Err(Error::InvalidArgument(format!(
                "frame {i}: embedder returned {} dims, declared {dim}",
                row.len()
            )));
        }
        values.row_mut(i).assign(&row);
    }
    ConditionMatrix::new(values)
}

/// Learnable positional table; rows are looked up by sequence index.
#[derive(Debug, Clone)]
pub struct PositionTable {
    pub table: Array2<f64>,
}

impl PositionTable {
    /// N(0, std^2) initialization.
    pub fn init(max_len: usize, dim: usize, std: f64, rng: &mut RngStream) -> Self {
        Self { table: rng.normal_mat(max_len, dim) * std }
    }

    pub fn max_len(&self) -> usize {
        self.table.nrows()
    }
}

/// Row i of the output is `c_i + table[i]`.
pub fn add_positions(c: &ConditionMatrix, table: ArrayView2<f64>) -> Result<ConditionMatrix> {
    let n = c.rows();
    if n > table.nrows() {
        return Err(Error::SequenceTooLong { len: n, max: table.nrows() });
    }
    if c.dim() != table.ncols() {
        return Err(Error::InvalidArgument(format!(
            "condition dim {} does not match position dim {}",
            c.dim(),
            table.ncols()
        )));
    }
    let values = &c.values + &table.slice(ndarray::s![..n, ..]);
    ConditionMatrix::new(values)
}

pub const FEATURE_MAGIC: &[u8; 8] = b"LOVAFEAT";
pub const FEATURE_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

/// Write the cached-feature container: magic, version u32, N u32, h_C u32,
/// dtype tag u8, then row-major f32 little-endian data.
pub fn write_features(path: &Path, features: &Array2<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(21 + features.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(features.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(features.ncols() as u32).to_le_bytes());
    buf.push(DTYPE_F32);
    for v in features.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 21 {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[0..8] != FEATURE_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let n = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let dtype = bytes[20];
    if dtype != DTYPE_F32 {
        return Err(Error::format(path, format!("unsupported dtype tag {dtype}")));
    }
    let expected = 21 + n * dim * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, expected {expected}", bytes.len()),
        ));
    }
    let mut data = Vec::with_capacity(n * dim);
    for chunk in bytes[21..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Array2::from_shape_vec((n, dim), data).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn track(n: usize, dim: usize) -> FrameSequence<Vec<f64>> {
        let frames = (0..n)
            .map(|i| (0..dim).map(|j| (i * dim + j) as f64 * 0.1).collect())
            .collect();
        FrameSequence::new(frames, 8).unwrap()
    }

    #[test]
    fn one_row_per_frame() {
        let frames = track(240, 4);
        let c = extract_features(&frames, &TrackEmbedder { dim: 4 }).unwrap();
        assert_eq!(c.rows(), 240);
        assert_eq!(c.dim(), 4);
    }

    #[test]
    fn constant_embedder_gives_identical_rows() {
        struct Constant;
        impl FrameEmbedder<Vec<f64>> for Constant {
            fn feature_dim(&self) -> usize {
                3
            }
            fn embed(&self, _: &Vec<f64>) -> Result<Array1<f64>> {
                Ok(Array1::from_vec(vec![1.0, 2.0, 3.0]))
            }
        }
        let c = extract_features(&track(5, 2), &Constant).unwrap();
        for row in c.values.rows() {
            assert_eq!(row.to_vec(), vec![1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn oracle_embedder_returns_track_verbatim() {
        let frames = track(7, 3);
        let c = extract_features(&frames, &TrackEmbedder { dim: 3 }).unwrap();
        for (i, row) in c.values.rows().into_iter().enumerate() {
            assert_eq!(row.to_vec(), frames.frames[i]);
        }
    }

    #[test]
    fn embedder_failure_names_the_frame() {
        struct FailAt2;
        impl FrameEmbedder<Vec<f64>> for FailAt2 {
            fn feature_dim(&self) -> usize {
                1
            }
            fn embed(&self, frame: &Vec<f64>) -> Result<Array1<f64>> {
                if frame[0] as usize == 4 {
                    Err(Error::InvalidArgument("boom".into()))
                } else {
                    Ok(Array1::from_vec(vec![frame[0]]))
                }
            }
        }
        let frames = FrameSequence::new(vec![vec![0.0], vec![4.0], vec![1.0]], 8).unwrap();
        let err = extract_features(&frames, &FailAt2).unwrap_err();
        assert!(err.to_string().contains("frame 1"), "{err}");
    }

    #[test]
    fn add_positions_boundaries() {
        let mut rng = RngStream::new(0, "pe");
        let pe = PositionTable::init(4, 2, 0.02, &mut rng);
        let c = ConditionMatrix::new(Array2::ones((4, 2))).unwrap();
        assert!(add_positions(&c, pe.table.view()).is_ok());
        let too_long = ConditionMatrix::new(Array2::ones((5, 2))).unwrap();
        match add_positions(&too_long, pe.table.view()) {
            Err(Error::SequenceTooLong { len, max }) => {
                assert_eq!((len, max), (5, 4));
            }
            other => panic!("expected SequenceTooLong, got {other:?}"),
        }
    }

    #[test]
    fn zero_table_is_identity_and_zero_condition_reads_table() {
        let c = ConditionMatrix::new(Array2::from_shape_fn((3, 2), |(i, j)| (i + j) as f64))
            .unwrap();
        let zero_table = Array2::<f64>::zeros((5, 2));
        assert_eq!(add_positions(&c, zero_table.view()).unwrap(), c);

        let mut rng = RngStream::new(1, "pe");
        let pe = PositionTable::init(5, 2, 0.02, &mut rng);
        let zero_c = ConditionMatrix::new(Array2::zeros((3, 2))).unwrap();
        let out = add_positions(&zero_c, pe.table.view()).unwrap();
        assert_eq!(out.values, pe.table.slice(ndarray::s![..3, ..]).to_owned());
    }

    #[test]
    fn feature_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.feat");
        let feats = Array2::from_shape_fn((6, 3), |(i, j)| (i as f64 - j as f64) * 0.25);
        write_features(&path, &feats).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back, feats); // values chosen exactly representable in f32

        // header checks
        let mut bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..8], FEATURE_MAGIC);
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_features(&path).is_err());
    }

    proptest! {
        #[test]
        fn add_positions_is_additive(seed in 0u64..1000) {
            let mut rng = RngStream::new(seed, "prop");
            let c1 = ConditionMatrix::new(rng.normal_mat(4, 3)).unwrap();
            let c2 = rng.normal_mat(4, 3);
            let pe = PositionTable::init(6, 3, 0.5, &mut rng);
            let lhs = add_positions(
                &ConditionMatrix::new(&c1.values + &c2).unwrap(),
                pe.table.view(),
            ).unwrap();
            let rhs = &add_positions(&c1, pe.table.view()).unwrap().values + &c2;
            for (a, b) in lhs.values.iter().zip(rhs.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn extraction_truncation_consistency(n in 2usize..20, k in 1usize..10) {
            let k = k.min(n);
            let frames = track(n, 3);
            let emb = TrackEmbedder { dim: 3 };
            let full = extract_features(&frames, &emb).unwrap();
            let head = FrameSequence::new(frames.frames[..k].to_vec(), frames.fps).unwrap();
            let part = extract_features(&head, &emb).unwrap();
            prop_assert_eq!(part.values, full.values.slice(ndarray::s![..k, ..]).to_owned());
        }

        #[test]
        fn extraction_concat_consistency(n1 in 1usize..8, n2 in 1usize..8) {
            let a = track(n1, 2);
            let b_frames: Vec<Vec<f64>> = (0..n2).map(|i| vec![i as f64, -1.0]).collect();
            let b = FrameSequence::new(b_frames.clone(), 8).unwrap();
            let emb = TrackEmbedder { dim: 2 };

            let mut joined = a.frames.clone();
            joined.extend(b_frames);
            let whole = extract_features(
                &FrameSequence::new(joined, 8).unwrap(), &emb).unwrap();
            let pa = extract_features(&a, &emb).unwrap();
            let pb = extract_features(&b, &emb).unwrap();
            prop_assert_eq!(whole.values.slice(ndarray::s![..n1, ..]).to_owned(), pa.values);
            prop_assert_eq!(whole.values.slice(ndarray::s![n1.., ..]).to_owned(), pb.values);
        }
    }
}
