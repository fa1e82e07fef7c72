//! Dense prediction maps and the two late-fusion combiners.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::spec::{OverlayMode, ProportionalMode};
use crate::error::{Error, Result};
use crate::nn::loss::{check_scores, logsumexp2, softmax2};
use crate::nn::{NON_TRIP, TRIP};
use crate::tensor::{Real, Tensor};

pub const PREDICTION_SCHEMA_VERSION: u32 = 1;

/// Per-pixel two-class scores and probabilities for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap {
    /// `2 x H x W` pre-softmax scores (log-probabilities for proportional
    /// fusion output).
    pub scores: Tensor<f32>,
    /// `2 x H x W` softmax of `scores`.
    pub probabilities: Tensor<f32>,
    /// Id of the network (or fusion) that produced the map.
    pub source: String,
    pub frame_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredictionSidecar {
    schema_version: u32,
    shape: Vec<usize>,
    layout: Vec<String>,
    source: String,
    frame_id: String,
}

impl PredictionMap {
    pub fn from_scores(scores: Tensor<f32>, source: &str, frame_id: &str) -> Result<Self> {
        let (_, h, w) = scores.chw()?;
        check_scores(&scores, h * w, "prediction")?;
        let n = h * w;
        let mut probs = Tensor::zeros(scores.shape());
        {
            let s = scores.data();
            let p = probs.data_mut();
            for i in 0..n {
                let (pt, pn) = softmax2(s[TRIP * n + i] as f64, s[NON_TRIP * n + i] as f64);
                p[TRIP * n + i] = pt as f32;
                p[NON_TRIP * n + i] = pn as f32;
            }
        }
        Ok(Self {
            scores,
            probabilities: probs,
            source: source.to_string(),
            frame_id: frame_id.to_string(),
        })
    }

    /// Builds a map from trip probabilities; scores are their logarithms.
    pub fn from_trip_probabilities(p_trip: &[f64], height: usize, width: usize, source: &str, frame_id: &str) -> Result<Self> {
        let n = height * width;
        if p_trip.len() != n {
            return Err(Error::Shape(format!("{} probabilities for a {height}x{width} map", p_trip.len())));
        }
        let mut scores = Tensor::zeros(&[2, height, width]);
        let mut probs = Tensor::zeros(&[2, height, width]);
        let floor = f64::from(f32::MIN_POSITIVE);
        for (i, &p) in p_trip.iter().enumerate() {
            let p = p.clamp(0.0, 1.0);
            scores.data_mut()[TRIP * n + i] = p.max(floor).ln() as f32;
            scores.data_mut()[NON_TRIP * n + i] = (1.0 - p).max(floor).ln() as f32;
            probs.data_mut()[TRIP * n + i] = p as f32;
            probs.data_mut()[NON_TRIP * n + i] = (1.0 - p) as f32;
        }
        Ok(Self {
            scores,
            probabilities: probs,
            source: source.to_string(),
            frame_id: frame_id.to_string(),
        })
    }

    pub fn height(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.scores.shape()[2]
    }

    pub fn trip_probability(&self) -> &[f32] {
        self.probabilities.plane(TRIP)
    }

    /// Argmax mask: true where the trip score beats the background score.
    pub fn argmax_mask(&self) -> Vec<bool> {
        let n = self.height() * self.width();
        let s = self.scores.data();
        (0..n).map(|i| s[TRIP * n + i] > s[NON_TRIP * n + i]).collect()
    }

    /// Writes `<stem>.bin` (little-endian f32 scores then probabilities)
    /// and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let mut bytes = Vec::with_capacity(8 * self.scores.len());
        for v in self.scores.data().iter().chain(self.probabilities.data()) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(dir) = bin.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let side = PredictionSidecar {
            schema_version: PREDICTION_SCHEMA_VERSION,
            shape: self.scores.shape().to_vec(),
            layout: vec!["scores".into(), "probabilities".into()],
            source: self.source.clone(),
            frame_id: self.frame_id.clone(),
        };
        crate::json::write_json(&json, &side)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let side: PredictionSidecar = serde_json::from_str(&text).map_err(|e| Error::json(&json, e))?;
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let n: usize = side.shape.iter().product();
        if bytes.len() != 8 * n {
            return Err(Error::Shape(format!(
                "{} holds {} bytes, expected {} for shape {:?}",
                bin.display(),
                bytes.len(),
                8 * n,
                side.shape
            )));
        }
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            scores: Tensor::from_vec(&side.shape, vals[..n].to_vec())?,
            probabilities: Tensor::from_vec(&side.shape, vals[n..].to_vec())?,
            source: side.source,
            frame_id: side.frame_id,
        })
    }
}

fn same_dims(a: &PredictionMap, b: &PredictionMap) -> Result<()> {
    if a.scores.shape() != b.scores.shape() {
        return Err(Error::Shape(format!(
            "prediction maps differ in shape: {:?} vs {:?}",
            a.scores.shape(),
            b.scores.shape()
        )));
    }
    Ok(())
}

/// Adds the second network's scores to the colour network's where depth is
/// valid; elsewhere the colour prediction is returned untouched.
pub fn late_overlay(rgb: &PredictionMap, other: &PredictionMap, depth_valid: &[bool], mode: OverlayMode) -> Result<PredictionMap> {
    same_dims(rgb, other)?;
    let n = rgb.height() * rgb.width();
    if depth_valid.len() != n {
        return Err(Error::Shape(format!(
            "depth validity mask has {} pixels, maps have {n}",
            depth_valid.len()
        )));
    }
    let mut out = rgb.clone();
    out.source = format!("late_overlay({},{})", rgb.source, other.source);
    let (rs, os) = (rgb.scores.data(), other.scores.data());
    let (ra, oa) = (rgb.argmax_mask(), other.argmax_mask());
    for i in (0..n).filter(|&i| depth_valid[i]) {
        let (t, b) = match mode {
            OverlayMode::Scores => (rs[TRIP * n + i] + os[TRIP * n + i], rs[NON_TRIP * n + i] + os[NON_TRIP * n + i]),
            OverlayMode::HardMask => {
                let hot = |trip: bool| if trip { (1.0, 0.0) } else { (0.0, 1.0) };
                let (a, c) = (hot(ra[i]), hot(oa[i]));
                (a.0 + c.0, a.1 + c.1)
            }
        };
        let (pt, pb) = softmax2(t as f64, b as f64);
        out.scores.data_mut()[TRIP * n + i] = t;
        out.scores.data_mut()[NON_TRIP * n + i] = b;
        out.probabilities.data_mut()[TRIP * n + i] = pt as f32;
        out.probabilities.data_mut()[NON_TRIP * n + i] = pb as f32;
    }
    Ok(out)
}

/// Per-pixel occupation weights and fused probabilities of two networks.
#[derive(Debug, Clone)]
pub struct Proportional<T> {
    /// Weight of each network at each pixel (`[w_a, w_b]`, summing to 1).
    pub weights: Vec<[T; 2]>,
    /// Fused trip probability per pixel.
    pub p_trip: Vec<T>,
    /// Per network, per pixel: softmax probabilities `(trip, non_trip)`.
    component_probs: [Vec<(T, T)>; 2],
    /// Per network, per pixel: class index giving the confidence.
    argmax: [Vec<usize>; 2],
}

fn confidences<T: Real>(s: &[T], n: usize) -> (Vec<T>, Vec<usize>) {
    (0..n)
        .map(|i| {
            let (t, b) = (s[TRIP * n + i], s[NON_TRIP * n + i]);
            // ties go to the lower class index
            if b > t {
                (b, NON_TRIP)
            } else {
                (t, TRIP)
            }
        })
        .unzip()
}

/// Occupation weights `w_k = softmax_k(c_k)` where `c_k` is the maximum class
/// score of network `k`, then fused probabilities `Σ_k w_k softmax(s_k)`.
pub fn proportional<T: Real>(a: &Tensor<T>, b: &Tensor<T>, mode: ProportionalMode) -> Result<Proportional<T>> {
    let (_, h, w) = a.chw()?;
    let n = check_scores(a, h * w, "proportional fusion")?;
    check_scores(b, n, "proportional fusion")?;
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "proportional fusion inputs differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ca, aa) = confidences(a.data(), n);
    let (cb, ab) = confidences(b.data(), n);
    let weight = |x: T, y: T| {
        let (wa, wb) = softmax2(x, y);
        [wa, wb]
    };
    let weights: Vec<[T; 2]> = match mode {
        ProportionalMode::PerPixel => ca.iter().zip(&cb).map(|(&x, &y)| weight(x, y)).collect(),
        ProportionalMode::PerImage => {
            let nn = T::from_usize(n).expect("pixel count");
            let ma = ca.iter().fold(T::zero(), |s, &v| s + v) / nn;
            let mb = cb.iter().fold(T::zero(), |s, &v| s + v) / nn;
            vec![weight(ma, mb); n]
        }
    };
    let probs = |s: &[T]| -> Vec<(T, T)> { (0..n).map(|i| softmax2(s[TRIP * n + i], s[NON_TRIP * n + i])).collect() };
    let pa = probs(a.data());
    let pb = probs(b.data());
    // a convex combination can overshoot 1 by an ulp
    let p_trip = (0..n)
        .map(|i| (weights[i][0] * pa[i].0 + weights[i][1] * pb[i].0).min(T::one()))
        .collect();
    Ok(Proportional {
        weights,
        p_trip,
        component_probs: [pa, pb],
        argmax: [aa, ab],
    })
}

/// Proportional fusion of two prediction maps.
pub fn late_proportional(maps: [&PredictionMap; 2], mode: ProportionalMode) -> Result<PredictionMap> {
    same_dims(maps[0], maps[1])?;
    let a = maps[0].scores.cast::<f64>();
    let b = maps[1].scores.cast::<f64>();
    let fused = proportional(&a, &b, mode)?;
    PredictionMap::from_trip_probabilities(
        &fused.p_trip,
        maps[0].height(),
        maps[0].width(),
        &format!("late_proportional({},{})", maps[0].source, maps[1].source),
        &maps[0].frame_id,
    )
}

/// Summed negative log-likelihood of the fused mixture and its gradient
/// with respect to both networks' scores.
pub struct MixtureLoss<T> {
    pub loss: T,
    pub grads: [Tensor<T>; 2],
    /// Confidence class of each network at each pixel; changes in these are
    /// the loss's non-smooth points.
    pub argmax: [Vec<usize>; 2],
}

pub fn mixture_nll<T: Real>(a: &Tensor<T>, b: &Tensor<T>, target: &[bool], mode: ProportionalMode) -> Result<MixtureLoss<T>> {
    let fused = proportional(a, b, mode)?;
    let n = fused.p_trip.len();
    if target.len() != n {
        return Err(Error::Shape(format!("target has {} pixels, scores have {n}", target.len())));
    }
    let scores = [a.data(), b.data()];
    let mut grads = [Tensor::zeros(a.shape()), Tensor::zeros(b.shape())];
    let mut loss = T::zero();
    // d loss / d c_k, accumulated over pixels for per-image weights
    let mut dconf = [T::zero(), T::zero()];
    for i in 0..n {
        let t = if target[i] { TRIP } else { NON_TRIP };
        let mut log_joint = [T::zero(); 2];
        for k in 0..2 {
            let s = scores[k];
            let lse = logsumexp2(s[TRIP * n + i], s[NON_TRIP * n + i]);
            log_joint[k] = fused.weights[i][k].ln() + (s[t * n + i] - lse);
        }
        let log_p = logsumexp2(log_joint[0], log_joint[1]);
        loss = loss - log_p;
        for k in 0..2 {
            let r = (log_joint[k] - log_p).exp();
            let (pt, pb) = fused.component_probs[k][i];
            let g = grads[k].data_mut();
            let pc = [pt, pb];
            for j in [TRIP, NON_TRIP] {
                let delta = if j == t { T::one() } else { T::zero() };
                g[j * n + i] = g[j * n + i] - r * (delta - pc[j]);
            }
            let dc = -(r - fused.weights[i][k]);
            match mode {
                ProportionalMode::PerPixel => {
                    let a_k = fused.argmax[k][i];
                    g[a_k * n + i] = g[a_k * n + i] + dc;
                }
                ProportionalMode::PerImage => dconf[k] = dconf[k] + dc,
            }
        }
    }
    if mode == ProportionalMode::PerImage {
        let nn = T::from_usize(n).expect("pixel count");
        for k in 0..2 {
            let share = dconf[k] / nn;
            let g = grads[k].data_mut();
            for i in 0..n {
                let a_k = fused.argmax[k][i];
                g[a_k * n + i] = g[a_k * n + i] + share;
            }
        }
    }
    Ok(MixtureLoss {
        loss,
        grads,
        argmax: fused.argmax,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(pairs: &[(f32, f32)]) -> PredictionMap {
        let n = pairs.len();
        let mut d = vec![0.0; 2 * n];
        for (i, &(t, b)) in pairs.iter().enumerate() {
            d[i] = t;
            d[n + i] = b;
        }
        PredictionMap::from_scores(Tensor::from_vec(&[2, 1, n], d).unwrap(), "net", "f0").unwrap()
    }

    #[test]
    fn overlay_without_depth_is_rgb() {
        let rgb = map(&[(2.0, 1.0), (-1.0, 0.3)]);
        let other = map(&[(5.0, -5.0), (0.0, 9.0)]);
        let out = late_overlay(&rgb, &other, &[false, false], OverlayMode::Scores).unwrap();
        assert_eq!(out.scores, rgb.scores);
        assert_eq!(out.probabilities, rgb.probabilities);
    }

    #[test]
    fn overlay_adds_scores_where_valid() {
        let rgb = map(&[(2.0, 1.0)]);
        let other = map(&[(0.5, 3.0)]);
        let out = late_overlay(&rgb, &other, &[true], OverlayMode::Scores).unwrap();
        assert_eq!(out.scores.data(), &[2.5, 4.0]);
        assert_eq!(out.argmax_mask(), vec![false]);
    }

    #[test]
    fn overlay_zero_other_is_identity() {
        let rgb = map(&[(2.0, 1.0), (0.1, 0.2)]);
        let zero = map(&[(0.0, 0.0), (0.0, 0.0)]);
        let out = late_overlay(&rgb, &zero, &[true, true], OverlayMode::Scores).unwrap();
        assert_eq!(out.scores, rgb.scores);
    }

    #[test]
    fn overlay_hard_mask_mode() {
        let rgb = map(&[(2.0, 1.0)]);
        let other = map(&[(0.5, 3.0)]);
        let out = late_overlay(&rgb, &other, &[true], OverlayMode::HardMask).unwrap();
        assert_eq!(out.scores.data(), &[1.0, 1.0]);
    }

    #[test]
    fn overlay_dimension_mismatch() {
        let a = map(&[(0.0, 0.0)]);
        let b = map(&[(0.0, 0.0), (1.0, 1.0)]);
        assert!(late_overlay(&a, &b, &[true], OverlayMode::Scores).is_err());
        assert!(late_proportional([&a, &b], ProportionalMode::PerPixel).is_err());
    }

    #[test]
    fn proportional_worked_example() {
        let a = map(&[(4.0, 0.0)]);
        let b = map(&[(1.0, 0.5)]);
        let fused = proportional(&a.scores.cast::<f64>(), &b.scores.cast::<f64>(), ProportionalMode::PerPixel).unwrap();
        let wa = 4f64.exp() / (4f64.exp() + 1f64.exp());
        assert!((fused.weights[0][0] - wa).abs() < 1e-12);
        assert!((wa - 0.9526).abs() < 1e-4);
        let expect = wa * (1.0 / (1.0 + (-4f64).exp())) + (1.0 - wa) * (1.0 / (1.0 + (-0.5f64).exp()));
        assert!((fused.p_trip[0] - expect).abs() < 1e-12);
        assert!((fused.p_trip[0] - 0.965).abs() < 5e-4);
        let out = late_proportional([&a, &b], ProportionalMode::PerPixel).unwrap();
        assert!((out.trip_probability()[0] as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn proportional_identical_components() {
        let a = map(&[(0.3, -1.2), (2.0, 2.5), (-4.0, 1.0)]);
        let out = late_proportional([&a, &a], ProportionalMode::PerPixel).unwrap();
        for (x, y) in out.probabilities.data().iter().zip(a.probabilities.data()) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(out.argmax_mask(), a.argmax_mask());
    }

    #[test]
    fn proportional_limit_selects_confident_network() {
        let a = map(&[(60.0, 20.0)]);
        let b = map(&[(0.0, 1.0)]);
        let out = late_proportional([&a, &b], ProportionalMode::PerPixel).unwrap();
        assert!((out.trip_probability()[0] - a.trip_probability()[0]).abs() < 1e-6);
    }

    #[test]
    fn shifting_one_component_moves_only_its_weight() {
        // softmax is shift invariant but the confidence is not
        let a = map(&[(1.0, 0.0)]);
        let shifted = map(&[(3.0, 2.0)]);
        let b = map(&[(0.0, 0.5)]);
        let p0 = proportional(&a.scores, &b.scores, ProportionalMode::PerPixel).unwrap();
        let p1 = proportional(&shifted.scores, &b.scores, ProportionalMode::PerPixel).unwrap();
        assert!((a.trip_probability()[0] - shifted.trip_probability()[0]).abs() < 1e-6);
        let odds0 = p0.weights[0][0] / p0.weights[0][1];
        let odds1 = p1.weights[0][0] / p1.weights[0][1];
        assert!((odds1 / odds0 - 2f32.exp()).abs() < 1e-3);
    }

    #[test]
    fn per_image_weights_are_shared() {
        let a = map(&[(3.0, 0.0), (0.0, 0.0)]);
        let b = map(&[(0.0, 1.0), (0.0, 2.0)]);
        let p = proportional(&a.scores, &b.scores, ProportionalMode::PerImage).unwrap();
        assert_eq!(p.weights[0], p.weights[1]);
        let wa = softmax2(1.5f32, 1.5).0;
        assert!((p.weights[0][0] - wa).abs() < 1e-6);
    }

    fn finite_diff(mode: ProportionalMode) {
        let a = Tensor::<f64>::from_vec(&[2, 1, 3], vec![0.3, -1.0, 2.0, 0.1, 0.5, -0.2]).unwrap();
        let b = Tensor::<f64>::from_vec(&[2, 1, 3], vec![-0.4, 1.2, 0.7, 0.9, -0.3, 0.2]).unwrap();
        let target = [true, false, true];
        let base = mixture_nll(&a, &b, &target, mode).unwrap();
        let eps = 1e-6;
        for k in 0..2 {
            for e in 0..6 {
                let mut pa = a.clone();
                let mut pb = b.clone();
                let mut ma = a.clone();
                let mut mb = b.clone();
                if k == 0 {
                    pa.data_mut()[e] += eps;
                    ma.data_mut()[e] -= eps;
                } else {
                    pb.data_mut()[e] += eps;
                    mb.data_mut()[e] -= eps;
                }
                let lp = mixture_nll(&pa, &pb, &target, mode).unwrap().loss;
                let lm = mixture_nll(&ma, &mb, &target, mode).unwrap().loss;
                let num = (lp - lm) / (2.0 * eps);
                let ana = base.grads[k].data()[e];
                assert!((num - ana).abs() < 1e-6, "k={k} e={e} num={num} ana={ana}");
            }
        }
    }

    #[test]
    fn mixture_gradient_per_pixel() {
        finite_diff(ProportionalMode::PerPixel);
    }

    #[test]
    fn mixture_gradient_per_image() {
        finite_diff(ProportionalMode::PerImage);
    }

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = map(&[(0.25, -3.5), (1.0, 2.0)]);
        let stem = dir.path().join("pred");
        m.save(&stem).unwrap();
        assert_eq!(PredictionMap::load(&stem).unwrap(), m);
        let bytes = std::fs::read(stem.with_extension("bin")).unwrap();
        assert_eq!(&bytes[..4], &0.25f32.to_le_bytes());
    }
}
