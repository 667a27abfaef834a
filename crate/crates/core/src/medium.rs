//! Water medium: per-channel attenuation and backscatter predicted by an
//! MLP from encoded depth and camera position, the affine colour correction
//! applied to every Gaussian, and the pixel-wise image formation model used
//! to synthesize and invert degraded photographs.

use std::io::{Read, Write};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Image, Plane};
use crate::scene::{logit, sigmoid};

pub const HIDDEN_WIDTH: usize = 64;
pub const DEFAULT_LAYERS: usize = 5;
pub const SHALLOW_LAYERS: usize = 2;
pub const DEFAULT_PE_FREQS: usize = 4;
/// Raw network outputs: 3 attenuation, 3 backscatter, 3 veiling light.
pub const OUTPUTS: usize = 9;

const CHECKPOINT_MAGIC: &[u8; 4] = b"AQMD";
const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MediumSample {
    pub beta_d: [f64; 3],
    pub beta_b: [f64; 3],
    pub b_inf: [f64; 3],
}

impl MediumSample {
    pub fn clear_water() -> Self {
        Self {
            beta_d: [0.0; 3],
            beta_b: [0.0; 3],
            b_inf: [0.0; 3],
        }
    }

    pub fn is_valid(&self) -> bool {
        self.beta_d.iter().chain(&self.beta_b).all(|b| b.is_finite() && *b >= 0.0)
            && self.b_inf.iter().all(|b| (0.0..=1.0).contains(b))
    }
}

/// How the additive colour `b` of the correction is formed for a Gaussian.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BackscatterMode {
    /// Learned per-Gaussian colour only.
    PerGaussian,
    /// Network veiling light only.
    Global,
    /// Mean of the per-Gaussian colour and the network veiling light.
    #[default]
    Blend,
}

impl BackscatterMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BackscatterMode::PerGaussian => "per-gaussian",
            BackscatterMode::Global => "global",
            BackscatterMode::Blend => "blend",
        }
    }

    fn code(self) -> u8 {
        match self {
            BackscatterMode::PerGaussian => 0,
            BackscatterMode::Global => 1,
            BackscatterMode::Blend => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(BackscatterMode::PerGaussian),
            1 => Some(BackscatterMode::Global),
            2 => Some(BackscatterMode::Blend),
            _ => None,
        }
    }

    /// `b` and its partials w.r.t. the Gaussian's colour and the veiling light.
    #[inline]
    pub fn combine(self, gaussian: f64, veiling: f64) -> (f64, f64, f64) {
        match self {
            BackscatterMode::PerGaussian => (gaussian, 1.0, 0.0),
            BackscatterMode::Global => (veiling, 0.0, 1.0),
            BackscatterMode::Blend => (0.5 * (gaussian + veiling), 0.5, 0.5),
        }
    }
}

impl std::str::FromStr for BackscatterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-gaussian" => Ok(BackscatterMode::PerGaussian),
            "global" => Ok(BackscatterMode::Global),
            "blend" => Ok(BackscatterMode::Blend),
            other => Err(Error::Config(format!("unknown backscatter mode `{other}`"))),
        }
    }
}

/// Learnable uncertainty weight of one interpolated frame; `gamma = exp(gamma_logparam)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameWeight {
    pub gamma_logparam: f64,
    pub frame_id: String,
}

impl FrameWeight {
    pub fn neutral(frame_id: impl Into<String>) -> Self {
        Self {
            gamma_logparam: 0.0,
            frame_id: frame_id.into(),
        }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma_logparam.exp()
    }
}

/// Fully connected layer; `weights` is `outputs x inputs`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn kaiming_uniform(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound) as f32)
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let mut acc = self.bias[o] as f64;
            for (w, v) in row.iter().zip(x) {
                acc += *w as f64 * v;
            }
            out.push(acc);
        }
    }
}

/// Sinusoidal encoding of already-normalized depth and camera position:
/// for each of the four inputs, `[sin(2^k pi u), cos(2^k pi u)]` for `k < pe_freqs`.
pub fn encode_inputs(depth_norm: f64, cam_pos_norm: &Vector3<f64>, pe_freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(8 * pe_freqs);
    for u in [depth_norm, cam_pos_norm.x, cam_pos_norm.y, cam_pos_norm.z] {
        for k in 0..pe_freqs {
            let a = (1u64 << k) as f64 * std::f64::consts::PI * u;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// Forward activations of one MLP evaluation, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpTape {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation outputs of each layer.
    pre: Vec<Vec<f64>>,
}

/// Medium coefficients for one Gaussian plus what is needed to differentiate them.
#[derive(Clone, Debug)]
pub struct MediumEval {
    pub sample: MediumSample,
    raw: [f64; OUTPUTS],
    tape: Option<MlpTape>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MediumNet {
    pub layers: Vec<Dense>,
    pub pe_freqs: usize,
    /// Depth divided by this before encoding.
    pub depth_scale: f64,
    /// Camera position divided by this before encoding.
    pub position_scale: f64,
    /// Separate coefficients per colour channel; otherwise red's are shared.
    pub decouple: bool,
    pub backscatter_mode: BackscatterMode,
    /// Pass-through medium: every transmission is 1.
    pub identity: bool,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl MediumNet {
    /// Hidden layers Kaiming-uniform, output layer zero, so the untrained
    /// medium gives `beta = ln 2` and `b_inf = 0.5` everywhere.
    pub fn new(num_layers: usize, pe_freqs: usize, seed: u64) -> Self {
        assert!(num_layers >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = 8 * pe_freqs;
        let mut layers = Vec::with_capacity(num_layers);
        let mut width = input;
        for _ in 0..num_layers - 1 {
            layers.push(Dense::kaiming_uniform(width, HIDDEN_WIDTH, &mut rng));
            width = HIDDEN_WIDTH;
        }
        layers.push(Dense::zeros(width, OUTPUTS));
        Self {
            layers,
            pe_freqs,
            depth_scale: 1.0,
            position_scale: 1.0,
            decouple: true,
            backscatter_mode: BackscatterMode::Blend,
            identity: false,
        }
    }

    pub fn default_depth(seed: u64) -> Self {
        Self::new(DEFAULT_LAYERS, DEFAULT_PE_FREQS, seed)
    }

    /// Transmissions forced to 1; colours pass through unchanged.
    pub fn identity() -> Self {
        Self {
            identity: true,
            ..Self::new(DEFAULT_LAYERS, DEFAULT_PE_FREQS, 0)
        }
    }

    /// A network whose output is `sample` for every input: zero output
    /// weights and biases set through the inverse heads.
    pub fn constant(sample: &MediumSample, num_layers: usize, pe_freqs: usize, seed: u64) -> Self {
        let mut net = Self::new(num_layers, pe_freqs, seed);
        let last = net.layers.last_mut().expect("at least one layer");
        last.weights.iter_mut().for_each(|w| *w = 0.0);
        for ch in 0..3 {
            last.bias[ch] = inverse_softplus(sample.beta_d[ch]) as f32;
            last.bias[3 + ch] = inverse_softplus(sample.beta_b[ch]) as f32;
            last.bias[6 + ch] = logit(sample.b_inf[ch].clamp(1e-6, 1.0 - 1e-6)) as f32;
        }
        net
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// Weights then bias, layer by layer.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.iter().map(|&w| w as f64));
            out.extend(l.bias.iter().map(|&b| b as f64));
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = *it.next().expect("flat parameter vector too short") as f32;
            }
        }
    }

    pub fn encode(&self, depth_z: f64, cam_pos: &Vector3<f64>) -> Vec<f64> {
        encode_inputs(depth_z / self.depth_scale, &(cam_pos / self.position_scale), self.pe_freqs)
    }

    fn run(&self, input: Vec<f64>, keep_tape: bool) -> ([f64; OUTPUTS], Option<MlpTape>) {
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(if keep_tape { n } else { 0 });
        let mut pre = Vec::with_capacity(if keep_tape { n } else { 0 });
        let mut x = input;
        let mut y = Vec::with_capacity(HIDDEN_WIDTH);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward(&x, &mut y);
            if keep_tape {
                pre.push(y.clone());
                inputs.push(std::mem::take(&mut x));
            }
            if i + 1 < n {
                x = y.iter().map(|v| v.max(0.0)).collect();
            }
        }
        let mut raw = [0.0; OUTPUTS];
        raw.copy_from_slice(&y);
        (raw, keep_tape.then_some(MlpTape { inputs, pre }))
    }

    fn head(&self, raw: &[f64; OUTPUTS]) -> MediumSample {
        let pick = |base: usize, ch: usize| if self.decouple { base + ch } else { base };
        MediumSample {
            beta_d: [0, 1, 2].map(|ch| softplus(raw[pick(0, ch)])),
            beta_b: [0, 1, 2].map(|ch| softplus(raw[pick(3, ch)])),
            b_inf: [0, 1, 2].map(|ch| sigmoid(raw[6 + ch])),
        }
    }

    /// Medium coefficients at camera-space depth `depth_z` seen from `cam_pos`.
    pub fn sample(&self, depth_z: f64, cam_pos: &Vector3<f64>) -> Result<MediumSample> {
        Ok(self.evaluate(depth_z, cam_pos, false)?.sample)
    }

    pub fn evaluate(&self, depth_z: f64, cam_pos: &Vector3<f64>, keep_tape: bool) -> Result<MediumEval> {
        if self.identity {
            return Ok(MediumEval {
                sample: MediumSample::clear_water(),
                raw: [0.0; OUTPUTS],
                tape: None,
            });
        }
        let (raw, tape) = self.run(self.encode(depth_z, cam_pos), keep_tape);
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "medium network output at depth {depth_z}"
            )));
        }
        Ok(MediumEval {
            sample: self.head(&raw),
            raw,
            tape,
        })
    }

    /// Signs of every hidden pre-activation; the network is smooth in its
    /// weights wherever this pattern does not change.
    pub fn relu_pattern(&self, depth_z: f64, cam_pos: &Vector3<f64>) -> Vec<bool> {
        if self.identity {
            return Vec::new();
        }
        let (_, tape) = self.run(self.encode(depth_z, cam_pos), true);
        let tape = tape.expect("tape requested");
        let hidden = self.layers.len() - 1;
        tape.pre[..hidden].iter().flatten().map(|&v| v > 0.0).collect()
    }

    /// Backpropagate gradients on the sample through the heads and the MLP.
    ///
    /// Parameter gradients are added into `grad` (same layout as
    /// [`params_flat`](Self::params_flat)); returns `dL/d depth_z` through the encoding.
    pub fn backward(&self, eval: &MediumEval, d_sample: &MediumSample, depth_z: f64, grad: &mut [f64]) -> f64 {
        if self.identity {
            return 0.0;
        }
        let tape = eval.tape.as_ref().expect("medium evaluated without tape");
        let mut d_raw = [0.0; OUTPUTS];
        for ch in 0..3 {
            let id = if self.decouple { ch } else { 0 };
            d_raw[id] += d_sample.beta_d[ch] * sigmoid(eval.raw[id]);
            let ib = if self.decouple { 3 + ch } else { 3 };
            d_raw[ib] += d_sample.beta_b[ch] * sigmoid(eval.raw[ib]);
            let s = sigmoid(eval.raw[6 + ch]);
            d_raw[6 + ch] += d_sample.b_inf[ch] * s * (1.0 - s);
        }

        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.param_count();
        }

        let mut d_y: Vec<f64> = d_raw.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i + 1 < self.layers.len() {
                for (d, p) in d_y.iter_mut().zip(&tape.pre[i]) {
                    if *p <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let x = &tape.inputs[i];
            let base = offsets[i];
            let mut d_x = vec![0.0; layer.inputs];
            for o in 0..layer.outputs {
                let g = d_y[o];
                if g == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                let grow = &mut grad[base + o * layer.inputs..base + (o + 1) * layer.inputs];
                for k in 0..layer.inputs {
                    grow[k] += g * x[k];
                    d_x[k] += g * row[k] as f64;
                }
                grad[base + layer.weights.len() + o] += g;
            }
            d_y = d_x;
        }

        // d_y is now the gradient w.r.t. the encoding; only the depth block depends on z.
        let u = depth_z / self.depth_scale;
        let mut d_u = 0.0;
        for k in 0..self.pe_freqs {
            let f = (1u64 << k) as f64 * std::f64::consts::PI;
            let a = f * u;
            d_u += d_y[2 * k] * f * a.cos() - d_y[2 * k + 1] * f * a.sin();
        }
        d_u / self.depth_scale
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&[CHECKPOINT_VERSION])?;
        let flags = u8::from(self.decouple) | (u8::from(self.identity) << 1);
        w.write_all(&[flags, self.backscatter_mode.code()])?;
        w.write_all(&(self.pe_freqs as u32).to_le_bytes())?;
        w.write_all(&self.depth_scale.to_le_bytes())?;
        w.write_all(&self.position_scale.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&(l.inputs as u32).to_le_bytes())?;
            w.write_all(&(l.outputs as u32).to_le_bytes())?;
            for v in l.weights.iter().chain(&l.bias) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_checkpoint(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::Unsupported(format!("medium checkpoint: {m}"));
        let io = |e: std::io::Error| bad(&e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut b = [0u8; 3];
        r.read_exact(&mut b).map_err(io)?;
        if b[0] != CHECKPOINT_VERSION {
            return Err(bad(&format!("version {}", b[0])));
        }
        let mode = BackscatterMode::from_code(b[2]).ok_or_else(|| bad("backscatter mode"))?;
        let mut u4 = [0u8; 4];
        let mut u8b = [0u8; 8];
        r.read_exact(&mut u4).map_err(io)?;
        let pe_freqs = u32::from_le_bytes(u4) as usize;
        r.read_exact(&mut u8b).map_err(io)?;
        let depth_scale = f64::from_le_bytes(u8b);
        r.read_exact(&mut u8b).map_err(io)?;
        let position_scale = f64::from_le_bytes(u8b);
        r.read_exact(&mut u4).map_err(io)?;
        let n = u32::from_le_bytes(u4) as usize;
        if n == 0 || n > 64 {
            return Err(bad(&format!("{n} layers")));
        }
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u4).map_err(io)?;
            let inputs = u32::from_le_bytes(u4) as usize;
            r.read_exact(&mut u4).map_err(io)?;
            let outputs = u32::from_le_bytes(u4) as usize;
            if inputs == 0 || outputs == 0 || inputs * outputs > 1 << 24 {
                return Err(bad("layer shape"));
            }
            let mut read_vec = |len: usize| -> Result<Vec<f32>> {
                let mut buf = vec![0u8; len * 4];
                r.read_exact(&mut buf).map_err(io)?;
                Ok(buf
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect())
            };
            let weights = read_vec(inputs * outputs)?;
            let bias = read_vec(outputs)?;
            if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("medium checkpoint weights".into()));
            }
            layers.push(Dense {
                inputs,
                outputs,
                weights,
                bias,
            });
        }
        if layers[0].inputs != 8 * pe_freqs || layers[n - 1].outputs != OUTPUTS {
            return Err(bad("layer widths do not match the encoding"));
        }
        Ok(Self {
            layers,
            pe_freqs,
            depth_scale,
            position_scale,
            decouple: b[1] & 1 != 0,
            identity: b[1] & 2 != 0,
            backscatter_mode: mode,
        })
    }
}

/// Direct and backscatter transmissions `exp(-beta z)` per channel.
pub fn transmission(sample: &MediumSample, z: f64) -> ([f64; 3], [f64; 3]) {
    (
        sample.beta_d.map(|b| (-b * z).exp()),
        sample.beta_b.map(|b| (-b * z).exp()),
    )
}

/// Affine per-channel correction `T_d c + (1 - T_b) b`, clamped to [0, 1].
pub fn correct_colour(c: [f64; 3], t_d: [f64; 3], t_b: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|ch| (t_d[ch] * c[ch] + (1.0 - t_b[ch]) * b[ch]).clamp(0.0, 1.0))
}

/// Apply the image formation model `I = J T_d + B_inf (1 - T_b)` pixel-wise.
pub fn degrade_image(clean: &Image, depth: &Plane, sample: &MediumSample) -> Result<Image> {
    depth.ensure_matches(clean.width, clean.height)?;
    let mut out = clean.clone();
    for (p, &z) in out.data.chunks_exact_mut(3).zip(&depth.data) {
        let (t_d, t_b) = transmission(sample, z);
        for ch in 0..3 {
            p[ch] = p[ch] * t_d[ch] + sample.b_inf[ch] * (1.0 - t_b[ch]);
        }
    }
    Ok(out)
}

/// Analytic inverse of [`degrade_image`], with the medium sampled per pixel.
pub fn restore_image_with<F>(degraded: &Image, depth: &Plane, mut sample_at: F) -> Result<Image>
where
    F: FnMut(f64) -> Result<MediumSample>,
{
    depth.ensure_matches(degraded.width, degraded.height)?;
    let mut out = degraded.clone();
    for (p, &z) in out.data.chunks_exact_mut(3).zip(&depth.data) {
        let s = sample_at(z)?;
        let (t_d, t_b) = transmission(&s, z);
        for ch in 0..3 {
            p[ch] = (p[ch] - s.b_inf[ch] * (1.0 - t_b[ch])) / t_d[ch];
        }
    }
    Ok(out)
}

pub fn restore_image(degraded: &Image, depth: &Plane, sample: &MediumSample) -> Result<Image> {
    restore_image_with(degraded, depth, |_| Ok(*sample))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn sample(bd: [f64; 3], bb: [f64; 3], binf: [f64; 3]) -> MediumSample {
        MediumSample {
            beta_d: bd,
            beta_b: bb,
            b_inf: binf,
        }
    }

    #[test]
    fn encoding_zero_inputs() {
        let e = encode_inputs(0.0, &Vector3::zeros(), 1);
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(encode_inputs(0.3, &Vector3::new(1.0, 2.0, 3.0), 4).len(), 32);
    }

    #[test]
    fn depth_encoding_is_injective_over_normalized_range() {
        let mut net = MediumNet::default_depth(0);
        net.depth_scale = 7.5;
        let steps = 2000;
        let feats: Vec<Vec<f64>> = (0..=steps)
            .map(|i| net.encode(7.5 * i as f64 / steps as f64, &Vector3::zeros())[..8].to_vec())
            .collect();
        for i in 0..feats.len() {
            for j in i + 1..feats.len() {
                let d: f64 = feats[i].iter().zip(&feats[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-6, "{i} and {j} collide");
            }
        }
    }

    #[test]
    fn zero_output_layer_gives_neutral_medium() {
        let net = MediumNet::default_depth(3);
        let s = net.sample(1.7, &Vector3::new(0.2, -1.0, 3.0)).unwrap();
        for ch in 0..3 {
            assert!((s.beta_d[ch] - 2f64.ln()).abs() < 1e-12);
            assert!((s.beta_b[ch] - std::f64::consts::LN_2).abs() < 1e-6);
            assert_eq!(s.b_inf[ch], 0.5);
        }
        assert_eq!(net.sample(1.7, &Vector3::new(0.2, -1.0, 3.0)).unwrap(), s);
    }

    #[test]
    fn constant_net_reproduces_sample() {
        let target = sample([0.4, 0.15, 0.1], [0.3, 0.2, 0.15], [0.1, 0.3, 0.4]);
        let net = MediumNet::constant(&target, 5, 4, 1);
        let s = net.sample(2.0, &Vector3::new(1.0, 0.0, 0.0)).unwrap();
        for ch in 0..3 {
            assert!((s.beta_d[ch] - target.beta_d[ch]).abs() < 1e-6);
            assert!((s.beta_b[ch] - target.beta_b[ch]).abs() < 1e-6);
            assert!((s.b_inf[ch] - target.b_inf[ch]).abs() < 1e-6);
        }
    }

    fn scalar_of(s: &MediumSample) -> f64 {
        let w = [0.3, -0.8, 1.1];
        (0..3)
            .map(|c| w[c] * s.beta_d[c] - 0.5 * w[2 - c] * s.beta_b[c] + (c as f64 + 0.5) * s.b_inf[c])
            .sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        for decouple in [true, false] {
            let mut net = MediumNet::default_depth(11);
            net.decouple = decouple;
            net.depth_scale = 3.0;
            // give the output layer some weight so hidden gradients are nonzero
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut flat = net.params_flat();
            for v in flat.iter_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
            net.set_params_flat(&flat);
            let flat = net.params_flat();
            let cam = Vector3::new(0.3, -0.4, 1.2);
            let z = 1.37;
            let eval = net.evaluate(z, &cam, true).unwrap();
            let d = sample([0.3, -0.8, 1.1], [-0.55, 0.4, -0.15], [0.5, 1.5, 2.5]);
            let mut grad = vec![0.0; net.param_count()];
            let dz = net.backward(&eval, &d, z, &mut grad);
            let h = 1e-3;
            let f = |n: &MediumNet, z: f64| scalar_of(&n.sample(z, &cam).unwrap());
            let fd_z = (f(&net, z + 1e-6) - f(&net, z - 1e-6)) / 2e-6;
            assert!((fd_z - dz).abs() < 1e-6 * fd_z.abs().max(1.0), "{fd_z} vs {dz}");
            let mut checked = 0;
            for k in (0..flat.len()).step_by(37) {
                let mut a = net.clone();
                let mut b = net.clone();
                let (mut fa, mut fb) = (flat.clone(), flat.clone());
                fa[k] += h;
                fb[k] -= h;
                a.set_params_flat(&fa);
                b.set_params_flat(&fb);
                let step = (fa[k] as f32 as f64) - (fb[k] as f32 as f64);
                let fd = (f(&a, z) - f(&b, z)) / step;
                let err = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-4);
                assert!(err < 1e-3, "param {k}: fd {fd} analytic {}", grad[k]);
                checked += 1;
            }
            assert!(checked > 100);
        }
    }

    #[test]
    fn transmission_values() {
        let s = sample([0.1, 0.2, 0.3], [2f64.ln(), 0.0, 1.0], [0.0; 3]);
        let (td, tb) = transmission(&s, 0.0);
        assert_eq!((td, tb), ([1.0; 3], [1.0; 3]));
        let (td, _) = transmission(&s, 2.0);
        assert!((td[0] - 0.81873).abs() < 1e-5);
        assert!((td[1] - 0.67032).abs() < 1e-5);
        assert!((td[2] - 0.54881).abs() < 1e-5);
        let (_, tb) = transmission(&s, 1.0);
        assert!((tb[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn correction_values() {
        let c = [0.8, 0.3, 0.1];
        assert_eq!(correct_colour(c, [1.0; 3], [1.0; 3], [0.9; 3]), c);
        assert_eq!(correct_colour(c, [0.0; 3], [0.0; 3], [0.2, 0.4, 0.6]), [0.2, 0.4, 0.6]);
        let m = correct_colour([0.8; 3], [0.5; 3], [0.25; 3], [0.2; 3]);
        assert!((m[0] - 0.55).abs() < 1e-15);
    }

    #[test]
    fn degrade_values() {
        let clean = Image::filled(2, 2, [0.9; 3]);
        let s = sample([0.5; 3], [0.4; 3], [0.3; 3]);
        let zero = degrade_image(&clean, &Plane::new(2, 2), &s).unwrap();
        assert_eq!(zero, clean);
        let out = degrade_image(&clean, &Plane::filled(2, 2, 1.0), &s).unwrap();
        let expect = 0.9 * (-0.5f64).exp() + 0.3 * (1.0 - (-0.4f64).exp());
        assert!((out.data[0] - expect).abs() < 1e-12);
        // the quoted 0.64480 rounds the first term to 0.54590; the exact value is 0.644782
        assert!((out.data[0] - 0.64480).abs() < 5e-5);
        let veil = sample([1.0; 3], [1e6; 3], [0.1, 0.2, 0.3]);
        let v = degrade_image(&Image::new(2, 2), &Plane::filled(2, 2, 1.0), &veil).unwrap();
        assert_eq!(v.get(1, 1), [0.1, 0.2, 0.3]);
        assert!(degrade_image(&clean, &Plane::new(3, 2), &s).is_err());
    }

    #[test]
    fn red_attenuation_only_touches_red() {
        let base = sample([0.2, 0.3, 0.4], [0.1, 0.1, 0.1], [0.2, 0.3, 0.4]);
        let mut red = base;
        red.beta_d[0] = 1.3;
        let c = [0.6, 0.5, 0.4];
        let (a_d, a_b) = transmission(&base, 2.0);
        let (b_d, b_b) = transmission(&red, 2.0);
        let a = correct_colour(c, a_d, a_b, base.b_inf);
        let b = correct_colour(c, b_d, b_b, red.b_inf);
        assert_ne!(a[0], b[0]);
        assert_eq!(a[1].to_bits(), b[1].to_bits());
        assert_eq!(a[2].to_bits(), b[2].to_bits());
    }

    #[test]
    fn checkpoint_round_trip_and_rejects_garbage() {
        let mut net = MediumNet::new(SHALLOW_LAYERS, 3, 9);
        net.depth_scale = 4.25;
        net.decouple = false;
        net.backscatter_mode = BackscatterMode::Global;
        let bytes = net.to_checkpoint_bytes();
        assert_eq!(&bytes[..4], b"AQMD");
        let back = MediumNet::read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back, net);
        assert!(MediumNet::read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(MediumNet::read_checkpoint(&bad[..]).is_err());
    }

    proptest! {
        #[test]
        fn transmission_decreases_with_distance(
            b in 0.01f64..3.0, z1 in 0.0f64..10.0, dz in 0.001f64..5.0,
        ) {
            let s = sample([b; 3], [b; 3], [0.5; 3]);
            let (t1, _) = transmission(&s, z1);
            let (t2, _) = transmission(&s, z1 + dz);
            prop_assert!(t2[0] < t1[0]);
            prop_assert!(t1[0] <= 1.0 && t2[0] > 0.0);
        }

        #[test]
        fn correction_is_affine_in_colour(
            c1 in prop::array::uniform3(0.0f64..1.0),
            c2 in prop::array::uniform3(0.0f64..1.0),
            lam in 0.0f64..1.0,
            td in prop::array::uniform3(0.0f64..1.0),
            tb in prop::array::uniform3(0.0f64..1.0),
            b in prop::array::uniform3(0.0f64..1.0),
        ) {
            let f = |c: [f64; 3], ch: usize| td[ch] * c[ch] + (1.0 - tb[ch]) * b[ch];
            for ch in 0..3 {
                let mix = [0, 1, 2].map(|k| lam * c1[k] + (1.0 - lam) * c2[k]);
                let lhs = f(mix, ch);
                let rhs = lam * f(c1, ch) + (1.0 - lam) * f(c2, ch);
                prop_assert!((lhs - rhs).abs() < 1e-12);
            }
        }

        #[test]
        fn restore_inverts_degrade(
            seed in 0u64..1000,
            bd in prop::array::uniform3(0.0f64..1.0),
            bb in prop::array::uniform3(0.0f64..1.0),
            binf in prop::array::uniform3(0.0f64..1.0),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let clean = Image::from_data(4, 3, (0..36).map(|_| rng.random::<f64>()).collect()).unwrap();
            let depth = Plane::from_data(4, 3, (0..12).map(|_| rng.random_range(0.0..5.0)).collect()).unwrap();
            let s = sample(bd, bb, binf);
            let back = restore_image(&degrade_image(&clean, &depth, &s).unwrap(), &depth, &s).unwrap();
            for (a, b) in back.data.iter().zip(&clean.data) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn uniform_depth_equal_beta_is_global_affine(
            beta in 0.0f64..2.0, bb in 0.0f64..2.0, z in 0.0f64..5.0, v in 0.0f64..1.0,
        ) {
            let s = sample([beta; 3], [bb; 3], [0.4, 0.4, 0.4]);
            let clean = Image::from_data(2, 1, vec![0.1, 0.5, 0.9, v, 0.0, 1.0]).unwrap();
            let out = degrade_image(&clean, &Plane::filled(2, 1, z), &s).unwrap();
            let gain = (-beta * z).exp();
            let offset = 0.4 * (1.0 - (-bb * z).exp());
            for (o, c) in out.data.iter().zip(&clean.data) {
                prop_assert_eq!(*o, c * gain + offset);
            }
        }
    }
}
