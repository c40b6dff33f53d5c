//! Long-form evaluation harness: overlapping-window segmentation, Fréchet
//! audio distance, inception score, mean KL, and a splice-discontinuity score
//! measured on log-mel frames around concatenation points.
//!
//! Heavy pretrained audio classifiers are abstracted behind small traits;
//! the desk implementations are a fixed random-projection log-mel embedder
//! and a softmax classifier trained on the synthetic corpus.

use ndarray::{Array1, Array2, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::nn::RngStream;
use crate::wav::Waveform;

pub const EVAL_RATE: u32 = 16_000;
pub const MEL_BANDS: usize = 64;
pub const MEL_FRAME_SECONDS: f64 = 0.025;
pub const MEL_HOP_SECONDS: f64 = 0.010;
pub const PROB_FLOOR: f64 = 1e-10;
const COV_REGULARIZER: f64 = 1e-6;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Band-limited windowed-sinc resampling with kernels precomputed per
/// fractional phase. Same-rate input passes through bit-exactly; duration is
/// preserved within one sample.
pub fn resample(wav: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::InvalidArgument("target rate must be positive".into()));
    }
    if wav.rate == target_rate {
        return Ok(wav.clone());
    }
    let in_rate = wav.rate as f64;
    let out_rate = target_rate as f64;
    let in_len = wav.num_samples();
    let out_len = ((in_len as f64) * out_rate / in_rate).round().max(1.0) as usize;

    // cutoff below the tighter Nyquist, kernel widened when downsampling
    let cutoff = 0.45 * in_rate.min(out_rate);
    let half_width = (32.0 * (in_rate / out_rate).max(1.0)).ceil() as i64;
    let fc = cutoff / in_rate; // cycles per input sample
    let taps = (2 * half_width + 2) as usize;

    // output center positions repeat their fractional part with this period
    let g = gcd(wav.rate as u64, target_rate as u64);
    let period = (target_rate as u64 / g) as usize;
    let mut kernels = Vec::with_capacity(period);
    for p in 0..period {
        let frac = ((p as u64 * wav.rate as u64) % target_rate as u64) as f64 / out_rate;
        let mut h = vec![0.0; taps];
        let mut norm = 0.0;
        for (i, hv) in h.iter_mut().enumerate() {
            let u = (i as i64 - half_width) as f64 - frac;
            let x = u / (half_width as f64 + 1.0);
            if x.abs() >= 1.0 {
                continue;
            }
            let window = 0.42
                + 0.5 * (std::f64::consts::PI * x).cos()
                + 0.08 * (2.0 * std::f64::consts::PI * x).cos();
            let arg = 2.0 * std::f64::consts::PI * fc * u;
            let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
            *hv = 2.0 * fc * sinc * window;
            norm += *hv;
        }
        for hv in h.iter_mut() {
            *hv /= norm;
        }
        kernels.push(h);
    }

    let mut out = Array2::<f64>::zeros((out_len, wav.channels()));
    for j in 0..out_len {
        let num = j as u64 * wav.rate as u64;
        let floor = (num / target_rate as u64) as i64;
        let kernel = &kernels[j % period];
        for c in 0..wav.channels() {
            let mut acc = 0.0;
            for (i, hv) in kernel.iter().enumerate() {
                let k = floor + i as i64 - half_width;
                if k >= 0 && (k as usize) < in_len {
                    acc += wav.samples[[k as usize, c]] * hv;
                }
            }
            out[[j, c]] = acc;
        }
    }
    Waveform::new(out, target_rate)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Log-mel extractor with a precomputed filter bank.
pub struct MelSpectrogram {
    rate: u32,
    win: usize,
    hop: usize,
    fft_size: usize,
    window: Vec<f64>,
    /// [bands, fft_size/2 + 1]
    filters: Array2<f64>,
}

impl MelSpectrogram {
    pub fn new(rate: u32, bands: usize, frame_seconds: f64, hop_seconds: f64) -> Self {
        let win = (rate as f64 * frame_seconds).round() as usize;
        let hop = (rate as f64 * hop_seconds).round() as usize;
        let fft_size = win.next_power_of_two();
        let window: Vec<f64> = (0..win)
            .map(|i| {
                0.5 * (1.0
                    - (2.0 * std::f64::consts::PI * i as f64 / (win - 1) as f64).cos())
            })
            .collect();

        let bins = fft_size / 2 + 1;
        let mel_lo = hz_to_mel(0.0);
        let mel_hi = hz_to_mel(rate as f64 / 2.0);
        let points: Vec<f64> = (0..bands + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (bands + 1) as f64))
            .collect();
        let bin_hz = rate as f64 / fft_size as f64;
        let mut filters = Array2::<f64>::zeros((bands, bins));
        for b in 0..bands {
            let (lo, mid, hi) = (points[b], points[b + 1], points[b + 2]);
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let w = if f >= lo && f <= mid && mid > lo {
                    (f - lo) / (mid - lo)
                } else if f > mid && f <= hi && hi > mid {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                filters[[b, k]] = w;
            }
        }
        Self { rate, win, hop, fft_size, window, filters }
    }

    pub fn eval_default() -> Self {
        Self::new(EVAL_RATE, MEL_BANDS, MEL_FRAME_SECONDS, MEL_HOP_SECONDS)
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn win(&self) -> usize {
        self.win
    }

    pub fn rate(&self) -> u32 {
        self.rate
    }

    /// `[frames, bands]` log-mel energies of a mono signal.
    pub fn log_mel(&self, samples: &[f64]) -> Array2<f64> {
        let n = samples.len();
        let frames = if n >= self.win { (n - self.win) / self.hop + 1 } else { 0 };
        let bins = self.fft_size / 2 + 1;
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(self.fft_size);
        let mut out = Array2::<f64>::zeros((frames, self.filters.nrows()));
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        let mut power = vec![0.0; bins];
        for fr in 0..frames {
            let start = fr * self.hop;
            for i in 0..self.fft_size {
                let v = if i < self.win { samples[start + i] * self.window[i] } else { 0.0 };
                buf[i] = Complex::new(v, 0.0);
            }
            fft.process(&mut buf);
            for (k, p) in power.iter_mut().enumerate() {
                *p = buf[k].norm_sqr();
            }
            for b in 0..self.filters.nrows() {
                let e: f64 = self
                    .filters
                    .row(b)
                    .iter()
                    .zip(power.iter())
                    .map(|(w, p)| w * p)
                    .sum();
                out[[fr, b]] = (e + PROB_FLOOR).ln();
            }
        }
        out
    }
}

fn mono_mix(wav: &Waveform) -> Vec<f64> {
    wav.samples.rows().into_iter().map(|r| r.sum() / r.len() as f64).collect()
}

/// Fixed-length overlapping windows per the long-form evaluation policy.
#[derive(Debug, Clone)]
pub struct ClipSet {
    pub clips: Vec<Waveform>,
    /// Start sample of each clip in the source audio.
    pub starts: Vec<usize>,
    pub window_seconds: f64,
    pub hop_seconds: f64,
    /// True when the source was shorter than one window and zero-padded.
    pub padded: bool,
}

/// Starts at 0, hop, 2*hop, ... while a full window fits, plus a final window
/// snapped to end exactly at the audio's end when a tail would be uncovered.
pub fn segment_clips(wav: &Waveform, window_seconds: f64, hop_seconds: f64) -> Result<ClipSet> {
    if window_seconds <= 0.0 || hop_seconds <= 0.0 {
        return Err(Error::InvalidArgument("window and hop must be positive".into()));
    }
    let rate = wav.rate;
    let win = (window_seconds * rate as f64).round() as usize;
    let hop = (hop_seconds * rate as f64).round() as usize;
    let total = wav.num_samples();

    if total < win {
        let mut padded = Array2::<f64>::zeros((win, wav.channels()));
        padded.slice_mut(ndarray::s![..total, ..]).assign(&wav.samples);
        return Ok(ClipSet {
            clips: vec![Waveform::new(padded, rate)?],
            starts: vec![0],
            window_seconds,
            hop_seconds,
            padded: true,
        });
    }

    let mut starts = Vec::new();
    let mut s = 0usize;
    while s + win <= total {
        starts.push(s);
        s += hop;
    }
    let covered = starts.last().unwrap() + win;
    if covered < total {
        starts.push(total - win);
    }
    let clips = starts
        .iter()
        .map(|&st| {
            Waveform::new(wav.samples.slice(ndarray::s![st..st + win, ..]).to_owned(), rate)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClipSet { clips, starts, window_seconds, hop_seconds, padded: false })
}

/// One embedding vector per clip; long-form audio averages its clips.
pub trait ClipEmbedder {
    fn dim(&self) -> usize;
    fn embed_clip(&self, clip: &Waveform) -> Result<Array1<f64>>;
}

/// Per-clip class logits.
pub trait ClipClassifier {
    fn num_classes(&self) -> usize;
    fn logits(&self, clip: &Waveform) -> Result<Array1<f64>>;
}

/// Per-clip features: time-mean and time-max of each log-mel band. The max
/// channel keeps the carrier band visible even when most frames are silent.
fn mel_clip_features(mel: &MelSpectrogram, clip: &Waveform) -> Result<Array1<f64>> {
    let at_rate = resample(clip, mel.rate())?;
    let lm = mel.log_mel(&mono_mix(&at_rate));
    if lm.nrows() == 0 {
        return Err(Error::InvalidArgument("clip shorter than one mel frame".into()));
    }
    let bands = lm.ncols();
    let mut out = Array1::<f64>::zeros(2 * bands);
    for b in 0..bands {
        let col = lm.column(b);
        out[b] = col.sum() / col.len() as f64;
        out[bands + b] = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(out)
}

const CLIP_FEATURE_DIM: usize = 2 * MEL_BANDS;

/// Desk FAD embedder: time-averaged log-mel projected through a fixed seeded
/// random matrix.
pub struct MelProjectionEmbedder {
    mel: MelSpectrogram,
    projection: Array2<f64>,
}

impl MelProjectionEmbedder {
    pub fn new(out_dim: usize, seed: u64) -> Self {
        let mel = MelSpectrogram::eval_default();
        let mut rng = RngStream::new(seed, "embedder-projection");
        let projection =
            rng.normal_mat(CLIP_FEATURE_DIM, out_dim) / (CLIP_FEATURE_DIM as f64).sqrt();
        Self { mel, projection }
    }
}

impl ClipEmbedder for MelProjectionEmbedder {
    fn dim(&self) -> usize {
        self.projection.ncols()
    }

    fn embed_clip(&self, clip: &Waveform) -> Result<Array1<f64>> {
        Ok(mel_clip_features(&self.mel, clip)?.dot(&self.projection))
    }
}

/// Desk classifier: multinomial logistic regression on time-averaged log-mel
/// features, trained on the synthetic corpus labels.
pub struct MelSoftmaxClassifier {
    mel: MelSpectrogram,
    feat_mean: Array1<f64>,
    feat_std: Array1<f64>,
    weights: Array2<f64>,
    bias: Array1<f64>,
}

impl MelSoftmaxClassifier {
    pub fn train(examples: &[(&Waveform, usize)], num_classes: usize, seed: u64) -> Result<Self> {
        if examples.is_empty() || num_classes < 2 {
            return Err(Error::InvalidArgument(
                "classifier training needs examples and >= 2 classes".into(),
            ));
        }
        let mel = MelSpectrogram::eval_default();
        let mut feats = Array2::<f64>::zeros((examples.len(), CLIP_FEATURE_DIM));
        for (i, (wav, _)) in examples.iter().enumerate() {
            feats.row_mut(i).assign(&mel_clip_features(&mel, wav)?);
        }
        let feat_mean = feats.mean_axis(Axis(0)).unwrap();
        let feat_std = feats
            .map_axis(Axis(0), |col| {
                let m = col.sum() / col.len() as f64;
                (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64).sqrt()
            })
            .mapv(|v| v.max(1e-6));
        for mut row in feats.rows_mut() {
            row -= &feat_mean;
            row /= &feat_std;
        }

        let mut rng = RngStream::new(seed, "classifier-init");
        let mut w = rng.normal_mat(CLIP_FEATURE_DIM, num_classes) * 0.01;
        let mut b = Array1::<f64>::zeros(num_classes);
        let n = examples.len() as f64;
        let lr = 0.5;
        for _ in 0..300 {
            let logits = feats.dot(&w) + &b;
            let probs = crate::nn::layers::softmax_rows(&logits);
            let mut dlogits = probs;
            for (i, (_, label)) in examples.iter().enumerate() {
                dlogits[[i, *label]] -= 1.0;
            }
            dlogits /= n;
            let dw = feats.t().dot(&dlogits);
            let db = dlogits.sum_axis(Axis(0));
            w -= &(dw * lr);
            b -= &(db * lr);
        }
        Ok(Self { mel, feat_mean, feat_std, weights: w, bias: b })
    }
}

impl ClipClassifier for MelSoftmaxClassifier {
    fn num_classes(&self) -> usize {
        self.weights.ncols()
    }

    fn logits(&self, clip: &Waveform) -> Result<Array1<f64>> {
        let mut f = mel_clip_features(&self.mel, clip)?;
        f -= &self.feat_mean;
        f /= &self.feat_std;
        Ok(f.dot(&self.weights) + &self.bias)
    }
}

/// One feature row per audio (long-form rows are means over clip embeddings).
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub rows: Array2<f64>,
}

impl EmbeddingSet {
    pub fn from_rows(rows: Vec<Array1<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("embedding set needs rows".into()));
        }
        let dim = rows[0].len();
        let mut m = Array2::<f64>::zeros((rows.len(), dim));
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::InvalidArgument("ragged embedding rows".into()));
            }
            m.row_mut(i).assign(r);
        }
        Ok(Self { rows: m })
    }
}

/// Long-form embedding: average of per-clip embeddings over the window grid.
pub fn embed_long_form(
    embedder: &dyn ClipEmbedder,
    wav: &Waveform,
    window_seconds: f64,
    hop_seconds: f64,
) -> Result<Array1<f64>> {
    let clips = segment_clips(wav, window_seconds, hop_seconds)?;
    let mut acc = Array1::<f64>::zeros(embedder.dim());
    for clip in &clips.clips {
        acc += &embedder.embed_clip(clip)?;
    }
    Ok(acc / clips.clips.len() as f64)
}

/// Per-audio class probabilities: softmax of the mean of per-clip logits.
#[derive(Debug, Clone)]
pub struct LogitSummary {
    pub probs: Array1<f64>,
}

impl LogitSummary {
    pub fn from_mean_logits(mean_logits: &Array1<f64>) -> Self {
        let row = mean_logits.clone().insert_axis(Axis(0));
        let sm = crate::nn::layers::softmax_rows(&row);
        Self { probs: sm.row(0).to_owned() }
    }

    pub fn from_probs(probs: Array1<f64>) -> Result<Self> {
        let sum: f64 = probs.sum();
        if (sum - 1.0).abs() > 1e-6 || probs.iter().any(|p| *p < 0.0) {
            return Err(Error::InvalidArgument("probabilities must be a distribution".into()));
        }
        Ok(Self { probs })
    }
}

pub fn classify_long_form(
    classifier: &dyn ClipClassifier,
    wav: &Waveform,
    window_seconds: f64,
    hop_seconds: f64,
) -> Result<LogitSummary> {
    let clips = segment_clips(wav, window_seconds, hop_seconds)?;
    let mut acc = Array1::<f64>::zeros(classifier.num_classes());
    for clip in &clips.clips {
        acc += &classifier.logits(clip)?;
    }
    acc /= clips.clips.len() as f64;
    Ok(LogitSummary::from_mean_logits(&acc))
}

fn sym_eigen(m: &nalgebra::DMatrix<f64>) -> (nalgebra::DVector<f64>, nalgebra::DMatrix<f64>) {
    let se = nalgebra::SymmetricEigen::new(m.clone());
    (se.eigenvalues, se.eigenvectors)
}

fn sqrtm_psd(m: &nalgebra::DMatrix<f64>) -> nalgebra::DMatrix<f64> {
    let (vals, vecs) = sym_eigen(m);
    let d = nalgebra::DMatrix::from_diagonal(&vals.map(|v| v.max(0.0).sqrt()));
    &vecs * d * vecs.transpose()
}

fn mean_and_cov(set: &EmbeddingSet) -> Result<(Array1<f64>, nalgebra::DMatrix<f64>)> {
    let n = set.rows.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument("need >= 2 rows to fit a Gaussian".into()));
    }
    if !set.rows.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite embedding values".into()));
    }
    let d = set.rows.ncols();
    let mean = set.rows.mean_axis(Axis(0)).unwrap();
    let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
    for row in set.rows.rows() {
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in 0..d {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    cov /= (n - 1) as f64;
    for i in 0..d {
        cov[(i, i)] += COV_REGULARIZER;
    }
    Ok((mean, cov))
}

/// Fréchet distance between Gaussians fitted to the two embedding sets:
/// ||mu_g - mu_r||^2 + Tr(S_g + S_r - 2 (S_g S_r)^{1/2}).
pub fn fad(generated: &EmbeddingSet, reference: &EmbeddingSet) -> Result<f64> {
    if generated.rows.ncols() != reference.rows.ncols() {
        return Err(Error::InvalidArgument("embedding dims differ".into()));
    }
    let (mu_g, cov_g) = mean_and_cov(generated)?;
    let (mu_r, cov_r) = mean_and_cov(reference)?;

    let mean_term: f64 = mu_g
        .iter()
        .zip(mu_r.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();

    // Tr((S_g S_r)^{1/2}) via the symmetrized product A S_r A, A = sqrt(S_g)
    let a = sqrtm_psd(&cov_g);
    let mut s = &a * &cov_r * &a;
    let st = s.transpose();
    s = (s + st) * 0.5;
    let (vals, _) = sym_eigen(&s);
    let tr_sqrt: f64 = vals.iter().map(|v| v.max(0.0).sqrt()).sum();

    Ok((mean_term + cov_g.trace() + cov_r.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// KL(p || q) with probabilities floored before the logs.
pub fn kl_divergence(p: &Array1<f64>, q: &Array1<f64>) -> f64 {
    p.iter()
        .zip(q.iter())
        .map(|(pi, qi)| {
            let pf = pi.max(PROB_FLOOR);
            let qf = qi.max(PROB_FLOOR);
            pi * (pf.ln() - qf.ln())
        })
        .sum()
}

/// exp(mean KL(p(y|x) || marginal)) over the generated set.
pub fn inception_score(summaries: &[LogitSummary]) -> Result<f64> {
    if summaries.is_empty() {
        return Err(Error::InvalidArgument("inception score needs >= 1 audio".into()));
    }
    let k = summaries[0].probs.len();
    if k < 2 {
        return Err(Error::InvalidArgument("inception score needs >= 2 classes".into()));
    }
    let mut marginal = Array1::<f64>::zeros(k);
    for s in summaries {
        marginal += &s.probs;
    }
    marginal /= summaries.len() as f64;
    let mean_kl = summaries
        .iter()
        .map(|s| kl_divergence(&s.probs, &marginal))
        .sum::<f64>()
        / summaries.len() as f64;
    Ok(mean_kl.exp())
}

/// Mean over pairs of KL(reference || generated).
pub fn mkl(generated: &[LogitSummary], reference: &[LogitSummary]) -> Result<f64> {
    if generated.len() != reference.len() || generated.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "mkl needs equally sized paired sets, got {} and {}",
            generated.len(),
            reference.len()
        )));
    }
    let total: f64 = generated
        .iter()
        .zip(reference.iter())
        .map(|(g, r)| kl_divergence(&r.probs, &g.probs))
        .sum();
    Ok(total / generated.len() as f64)
}

/// Spectral jump across claimed splice points, relative to the signal's own
/// same-gap frame distances: mean over boundaries of ||mel_right - mel_left||
/// minus the median distance at non-boundary positions. A continuous signal
/// scores about zero.
pub fn boundary_discontinuity(wav: &Waveform, boundaries: &[usize]) -> Result<f64> {
    if boundaries.is_empty() {
        return Ok(0.0);
    }
    let at_eval = resample(wav, EVAL_RATE)?;
    let mel = MelSpectrogram::eval_default();
    let lm = mel.log_mel(&mono_mix(&at_eval));
    let frames = lm.nrows();
    let (win, hop) = (mel.win(), mel.hop());
    let scale = EVAL_RATE as f64 / wav.rate as f64;

    // frame index pairs (left fully before b, right fully after b)
    let gap = win.div_ceil(hop); // index distance of the first fully-right frame
    let mut boundary_frames = Vec::new();
    for &b in boundaries {
        if b == 0 || b >= wav.num_samples() {
            return Err(Error::InvalidArgument(format!(
                "boundary {b} not strictly inside the waveform"
            )));
        }
        let b_eval = (b as f64 * scale).round() as usize;
        let left = if b_eval >= win { (b_eval - win) / hop } else { usize::MAX };
        let right = b_eval.div_ceil(hop);
        if left == usize::MAX || right + 1 > frames || right <= left {
            eprintln!("warning: boundary at sample {b} too close to the edges, skipped");
            continue;
        }
        boundary_frames.push((left, right));
    }
    if boundary_frames.is_empty() {
        return Ok(0.0);
    }

    let frame_dist = |a: usize, b: usize| -> f64 {
        lm.row(a)
            .iter()
            .zip(lm.row(b).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };

    // same-gap baseline away from any boundary
    let mut baseline = Vec::new();
    'outer: for j in 0..frames.saturating_sub(gap) {
        for &(l, r) in &boundary_frames {
            // exclude windows that straddle a splice
            if j + gap >= l && j <= r {
                continue 'outer;
            }
        }
        baseline.push(frame_dist(j, j + gap));
    }
    if baseline.is_empty() {
        return Err(Error::InvalidArgument(
            "no non-boundary frames available for the baseline".into(),
        ));
    }
    baseline.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = baseline[baseline.len() / 2];

    let mean_excess = boundary_frames
        .iter()
        .map(|&(l, r)| frame_dist(l, r) - median)
        .sum::<f64>()
        / boundary_frames.len() as f64;
    Ok(mean_excess.max(0.0))
}

/// Per-audio rows backing the report CSV.
#[derive(Debug, Clone)]
pub struct PerAudioMetrics {
    pub id: String,
    pub clips: usize,
    /// KL(reference || generated) for this pair.
    pub kl: f64,
    pub discontinuity: f64,
    pub num_inferences: Option<usize>,
}

/// One evaluation run: metric values plus full provenance of the windowing.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub config_hash: String,
    pub window_seconds: f64,
    pub hop_seconds: f64,
    pub num_audios: usize,
    pub total_clips: usize,
    pub fad: f64,
    pub inception_score: f64,
    pub mkl: f64,
    pub mean_discontinuity: f64,
    pub num_inferences: Option<f64>,
    pub per_audio: Vec<PerAudioMetrics>,
}

impl MetricReport {
    /// Structured key-value document, one line per field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("config_hash {}\n", self.config_hash));
        s.push_str(&format!("window_seconds {}\n", self.window_seconds));
        s.push_str(&format!("hop_seconds {}\n", self.hop_seconds));
        s.push_str(&format!("num_audios {}\n", self.num_audios));
        s.push_str(&format!("total_clips {}\n", self.total_clips));
        s.push_str(&format!("fad {}\n", self.fad));
        s.push_str(&format!("inception_score {}\n", self.inception_score));
        s.push_str(&format!("mkl {}\n", self.mkl));
        s.push_str(&format!("mean_discontinuity {}\n", self.mean_discontinuity));
        match self.num_inferences {
            Some(n) => s.push_str(&format!("num_inferences {n}\n")),
            None => s.push_str("num_inferences unknown\n"),
        }
        s
    }

    pub fn per_audio_csv(&self) -> String {
        let mut s = String::from("id,clips,kl,discontinuity,num_inferences\n");
        for row in &self.per_audio {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                row.id,
                row.clips,
                row.kl,
                row.discontinuity,
                row.num_inferences.map(|n| n.to_string()).unwrap_or_default()
            ));
        }
        s
    }
}

/// Evaluate a directory of generated WAVs against the reference corpus they
/// were conditioned on. Generated files are matched to manifest ids by name;
/// sidecar `<id>.wav.json` files, when present, contribute splice boundaries
/// and inference counts.
pub fn evaluate_directories(
    generated_dir: &std::path::Path,
    reference_dir: &std::path::Path,
    config: &crate::config::RunConfig,
) -> Result<MetricReport> {
    use crate::inference::{split_boundaries, Provenance};
    use crate::synth::CorpusManifest;

    let manifest = CorpusManifest::load(&reference_dir.join("manifest.csv"))?;
    if manifest.entries.is_empty() {
        return Err(Error::InvalidArgument("reference manifest is empty".into()));
    }
    let (window, hop) = (config.eval_window, config.eval_hop);

    // desk classifier trained on the reference corpus's own labelled clips
    let mut ref_wavs = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        ref_wavs.push(crate::wav::read_wav(&reference_dir.join(&e.wav_path))?);
    }
    let mut train_clips: Vec<(Waveform, usize)> = Vec::new();
    for (e, wav) in manifest.entries.iter().zip(&ref_wavs) {
        for clip in segment_clips(wav, window, hop)?.clips {
            train_clips.push((clip, e.class));
        }
    }
    let borrowed: Vec<(&Waveform, usize)> =
        train_clips.iter().map(|(w, c)| (w, *c)).collect();
    let classifier =
        MelSoftmaxClassifier::train(&borrowed, config.num_classes, config.seed ^ 0xC1A55)?;
    let embedder = MelProjectionEmbedder::new(config.embed_dim, config.seed ^ 0xE4BED);

    let mut gen_embeddings = Vec::new();
    let mut ref_embeddings = Vec::new();
    let mut gen_logits = Vec::new();
    let mut ref_logits = Vec::new();
    let mut per_audio = Vec::new();
    let mut total_clips = 0usize;

    for (e, ref_wav) in manifest.entries.iter().zip(&ref_wavs) {
        let gen_path = generated_dir.join(format!("{}.wav", e.id));
        if !gen_path.exists() {
            return Err(Error::InvalidArgument(format!(
                "no generated audio for id {} at {}",
                e.id,
                gen_path.display()
            )));
        }
        let gen_wav = crate::wav::read_wav(&gen_path)?;
        let clips = segment_clips(&gen_wav, window, hop)?.clips.len();
        total_clips += clips;

        gen_embeddings.push(embed_long_form(&embedder, &gen_wav, window, hop)?);
        ref_embeddings.push(embed_long_form(&embedder, ref_wav, window, hop)?);
        let g = classify_long_form(&classifier, &gen_wav, window, hop)?;
        let r = classify_long_form(&classifier, ref_wav, window, hop)?;

        // sidecar: splice boundaries and inference count, when generated here
        let sidecar = gen_path.with_extension("wav.json");
        let (boundaries, num_inf) = if sidecar.exists() {
            let text = std::fs::read_to_string(&sidecar)
                .map_err(|err| Error::io(&sidecar, err))?;
            let prov: Provenance = serde_json::from_str(&text)
                .map_err(|err| Error::format(&sidecar, err.to_string()))?;
            let b = prov
                .split_plan
                .as_ref()
                .map(|p| split_boundaries(p, gen_wav.rate))
                .unwrap_or_default();
            (b, Some(prov.num_inferences))
        } else {
            (Vec::new(), None)
        };
        let discontinuity = boundary_discontinuity(&gen_wav, &boundaries)?;

        per_audio.push(PerAudioMetrics {
            id: e.id.clone(),
            clips,
            kl: kl_divergence(&r.probs, &g.probs),
            discontinuity,
            num_inferences: num_inf,
        });
        gen_logits.push(g);
        ref_logits.push(r);
    }

    let fad_value = fad(
        &EmbeddingSet::from_rows(gen_embeddings)?,
        &EmbeddingSet::from_rows(ref_embeddings)?,
    )?;
    let is_value = inception_score(&gen_logits)?;
    let mkl_value = mkl(&gen_logits, &ref_logits)?;
    let mean_disc = per_audio.iter().map(|p| p.discontinuity).sum::<f64>()
        / per_audio.len() as f64;
    let counted: Vec<f64> = per_audio
        .iter()
        .filter_map(|p| p.num_inferences.map(|n| n as f64))
        .collect();
    let num_inferences = if counted.is_empty() {
        None
    } else {
        Some(counted.iter().sum::<f64>() / counted.len() as f64)
    };

    Ok(MetricReport {
        config_hash: config.hash(),
        window_seconds: window,
        hop_seconds: hop,
        num_audios: per_audio.len(),
        total_clips,
        fad: fad_value,
        inception_score: is_value,
        mkl: mkl_value,
        mean_discontinuity: mean_disc,
        num_inferences,
        per_audio,
    })
}
