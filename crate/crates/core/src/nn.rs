//! Minimal feed-forward network engine.
//!
//! Batches are column matrices: a batch of `n` inputs of width `d` is a
//! `d × n` matrix, so every layer is one GEMM. Weight matrices are stored
//! `out × in`.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
    Tanh,
}

impl Activation {
    fn apply(self, z: &mut DMatrix<f64>) {
        match self {
            Activation::Relu => z.apply(|v| *v = v.max(0.0)),
            Activation::Tanh => z.apply(|v| *v = v.tanh()),
            Activation::None => {}
        }
    }

    /// Multiplies `grad` in place by the derivative, given the activation output.
    fn backprop(self, out: &DMatrix<f64>, grad: &mut DMatrix<f64>) {
        match self {
            Activation::Relu => grad.zip_apply(out, |g, a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => grad.zip_apply(out, |g, a| *g *= 1.0 - a * a),
            Activation::None => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, output_activation: Activation) -> Result<Self> {
        let spec = MlpSpec {
            layer_widths,
            hidden_activation: Activation::Relu,
            output_activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::Config(format!(
                "an MLP needs at least 2 layer widths, got {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::Config(format!(
                "MLP layer widths must be positive, got {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.layer_widths.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 2 == self.layer_widths.len() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }
}

/// Weights and biases of one affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Layer {
    fn zeros(input: usize, output: usize) -> Self {
        Layer {
            w: DMatrix::zeros(output, input),
            b: DVector::zeros(output),
        }
    }

    fn fill(&mut self, v: f64) {
        self.w.fill(v);
        self.b.fill(v);
    }
}

/// Activation record of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<DMatrix<f64>>,
}

impl Tape {
    pub fn output(&self) -> &DMatrix<f64> {
        self.acts.last().unwrap()
    }

    pub fn batch_size(&self) -> usize {
        self.acts[0].ncols()
    }
}

/// An MLP together with its gradient and Adam moment buffers.
#[derive(Debug, Clone)]
pub struct MlpBundle {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
    pub grads: Vec<Layer>,
    moment1: Vec<Layer>,
    moment2: Vec<Layer>,
    adam_steps: u64,
    /// Bumped on every parameter change; tapes from older versions are rejected.
    version: u64,
}

fn zero_layers(spec: &MlpSpec) -> Vec<Layer> {
    spec.layer_widths
        .windows(2)
        .map(|w| Layer::zeros(w[0], w[1]))
        .collect()
}

/// Fan-in scaled uniform weights `U(−1/√fan_in, 1/√fan_in)`, zero biases.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Result<MlpBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = zero_layers(spec);
    for layer in &mut layers {
        let bound = 1.0 / (layer.w.ncols() as f64).sqrt();
        // row-major draw order, independent of the storage layout
        for r in 0..layer.w.nrows() {
            for c in 0..layer.w.ncols() {
                layer.w[(r, c)] = rng.random_range(-bound..=bound);
            }
        }
    }
    Ok(MlpBundle::from_layers(spec.clone(), layers))
}

impl MlpBundle {
    fn from_layers(spec: MlpSpec, layers: Vec<Layer>) -> Self {
        MlpBundle {
            grads: zero_layers(&spec),
            moment1: zero_layers(&spec),
            moment2: zero_layers(&spec),
            spec,
            layers,
            adam_steps: 0,
            version: 0,
        }
    }

    pub fn num_params(&self) -> usize {
        self.spec.num_params()
    }

    /// Batched forward pass over the columns of `input`.
    pub fn forward_batch(&self, input: DMatrix<f64>) -> Result<Tape> {
        if input.nrows() != self.spec.input_width() {
            return Err(Error::Dimension {
                context: "MLP input",
                expected: self.spec.input_width(),
                actual: input.nrows(),
            });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input);
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.w * acts.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &layer.b;
            }
            self.spec.activation(l).apply(&mut z);
            acts.push(z);
        }
        Ok(Tape {
            version: self.version,
            acts,
        })
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let tape = self.forward_batch(DMatrix::from_column_slice(input.len(), 1, input))?;
        Ok((tape.output().as_slice().to_vec(), tape))
    }

    /// Reverse pass: accumulates parameter gradients and returns the gradient
    /// with respect to the input batch.
    pub fn backward_batch(&mut self, tape: &Tape, output_grad: DMatrix<f64>) -> Result<DMatrix<f64>> {
        if tape.version != self.version {
            return Err(Error::StaleTape {
                tape: tape.version,
                params: self.version,
            });
        }
        let out = tape.output();
        if output_grad.shape() != out.shape() {
            return Err(Error::Dimension {
                context: "MLP output gradient",
                expected: out.len(),
                actual: output_grad.len(),
            });
        }
        let mut grad = output_grad;
        for l in (0..self.layers.len()).rev() {
            self.spec.activation(l).backprop(&tape.acts[l + 1], &mut grad);
            let x = &tape.acts[l];
            let g = &mut self.grads[l];
            g.w.gemm(1.0, &grad, &x.transpose(), 1.0);
            for col in grad.column_iter() {
                g.b += col;
            }
            grad = self.layers[l].w.transpose() * &grad;
        }
        Ok(grad)
    }

    pub fn backward(&mut self, tape: &Tape, output_grad: &[f64]) -> Result<Vec<f64>> {
        let rows = output_grad.len() / tape.batch_size().max(1);
        let g = DMatrix::from_column_slice(rows, tape.batch_size(), output_grad);
        Ok(self.backward_batch(tape, g)?.as_slice().to_vec())
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.w *= factor;
            g.b *= factor;
        }
    }

    /// Adam update with bias correction; clears the gradient buffers.
    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.adam_steps += 1;
        let c1 = 1.0 - B1.powi(self.adam_steps as i32);
        let c2 = 1.0 - B2.powi(self.adam_steps as i32);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
            }
        };
        for l in 0..self.layers.len() {
            let (p, g) = (&mut self.layers[l], &self.grads[l]);
            let (m, v) = (&mut self.moment1[l], &mut self.moment2[l]);
            update(p.w.as_mut_slice(), g.w.as_slice(), m.w.as_mut_slice(), v.w.as_mut_slice());
            update(p.b.as_mut_slice(), g.b.as_slice(), m.b.as_mut_slice(), v.b.as_mut_slice());
        }
        self.version += 1;
        self.zero_grads();
        if !self.params_flat().iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite(format!(
                "parameter became non-finite after Adam step {}",
                self.adam_steps
            )));
        }
        Ok(())
    }

    /// Parameters in a fixed order: per layer, weights (column-major) then biases.
    pub fn params_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn grads_flat(&self) -> Vec<f64> {
        flatten(&self.grads)
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension {
                context: "flat parameter vector",
                expected: self.num_params(),
                actual: flat.len(),
            });
        }
        let mut off = 0;
        for layer in &mut self.layers {
            for s in [layer.w.as_mut_slice(), layer.b.as_mut_slice()] {
                s.copy_from_slice(&flat[off..off + s.len()]);
                off += s.len();
            }
        }
        self.version += 1;
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads_flat().iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn param_norm(&self) -> f64 {
        self.params_flat().iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.w.iter().chain(l.b.iter()).copied())
        .collect()
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"RRBCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    meta: serde_json::Value,
    bundles: Vec<BundleEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleEntry {
    name: String,
    spec: MlpSpec,
    params: usize,
}

/// Named networks plus free-form metadata, as stored on disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub bundles: Vec<(String, MlpBundle)>,
}

impl Checkpoint {
    pub fn bundle(&self, name: &str) -> Option<&MlpBundle> {
        self.bundles.iter().find(|(n, _)| n == name).map(|(_, b)| b)
    }
}

/// Layout: magic, `u32` version, `u64` header length, JSON header, then the
/// parameters of every bundle as little-endian `f64` in header order.
pub fn encode_checkpoint(meta: &serde_json::Value, bundles: &[(&str, &MlpBundle)]) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        meta: meta.clone(),
        bundles: bundles
            .iter()
            .map(|(name, b)| BundleEntry {
                name: name.to_string(),
                spec: b.spec.clone(),
                params: b.num_params(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 8 * bundles.iter().map(|b| b.1.num_params()).sum::<usize>() + 20);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
    out.write_u64::<LittleEndian>(json.len() as u64).unwrap();
    out.extend_from_slice(&json);
    for (_, b) in bundles {
        for p in b.params_flat() {
            out.write_f64::<LittleEndian>(p).unwrap();
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let err = |m: String| Error::Checkpoint(m);
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic)
        .map_err(|_| err("file too short for a checkpoint header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(err("not a checkpoint file (bad magic bytes)".into()));
    }
    let version = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| err("truncated before the format version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(err(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let len = cur
        .read_u64::<LittleEndian>()
        .map_err(|_| err("truncated before the header length".into()))? as usize;
    let start = cur.position() as usize;
    let json = bytes
        .get(start..start.saturating_add(len))
        .ok_or_else(|| err("truncated inside the JSON header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(json)
        .map_err(|e| err(format!("malformed checkpoint header: {e}")))?;
    let mut body = &bytes[start + len..];
    let expected: usize = header.bundles.iter().map(|b| b.params * 8).sum();
    if body.len() != expected {
        return Err(err(format!(
            "parameter block has {} bytes, header announces {expected} ({})",
            body.len(),
            if body.len() < expected { "truncated file" } else { "trailing data" }
        )));
    }
    let mut bundles = Vec::with_capacity(header.bundles.len());
    for entry in header.bundles {
        entry.spec.validate()?;
        if entry.spec.num_params() != entry.params {
            return Err(err(format!(
                "bundle '{}' announces {} parameters but its spec implies {}",
                entry.name,
                entry.params,
                entry.spec.num_params()
            )));
        }
        let flat: Vec<f64> = (0..entry.params)
            .map(|_| body.read_f64::<LittleEndian>().unwrap())
            .collect();
        let mut b = MlpBundle::from_layers(entry.spec.clone(), zero_layers(&entry.spec));
        b.set_params_flat(&flat)?;
        b.version = 0;
        bundles.push((entry.name, b));
    }
    Ok(Checkpoint {
        meta: header.meta,
        bundles,
    })
}

pub fn save_checkpoint(path: &Path, meta: &serde_json::Value, bundles: &[(&str, &MlpBundle)]) -> Result<()> {
    let bytes = encode_checkpoint(meta, bundles)?;
    let mut f = fs::File::create(path)
        .map_err(|e| Error::io(format!("creating checkpoint {}", path.display()), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Denominator floor for gradient checks. Central differences with h = 1e-5
/// carry roughly 1e-9 of rounding noise at typical loss magnitudes, so smaller
/// gradients are effectively compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Relative disagreement between an analytic and a finite-difference gradient.
pub fn gradient_relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn spec(widths: &[usize], out: Activation) -> MlpSpec {
        MlpSpec::new(widths.to_vec(), out).unwrap()
    }

    #[test]
    fn init_shapes_and_determinism() {
        let s = spec(&[2, 3], Activation::None);
        let a = init_params(&s, 9).unwrap();
        assert_eq!(a.layers.len(), 1);
        assert_eq!(a.layers[0].w.shape(), (3, 2));
        assert_eq!(a.layers[0].b.len(), 3);
        assert!(a.layers[0].b.iter().all(|&b| b == 0.0));
        assert_eq!(a.params_flat(), init_params(&s, 9).unwrap().params_flat());
        assert_ne!(a.params_flat(), init_params(&s, 10).unwrap().params_flat());
        let bound = 1.0 / 2f64.sqrt();
        assert!(a.layers[0].w.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn invalid_specs() {
        assert!(MlpSpec::new(vec![3], Activation::None).is_err());
        assert!(MlpSpec::new(vec![3, 0, 2], Activation::None).is_err());
    }

    #[test]
    fn forward_examples() {
        let s = spec(&[3, 4, 2], Activation::None);
        let mut b = init_params(&s, 1).unwrap();
        b.set_params_flat(&vec![0.0; s.num_params()]).unwrap();
        assert_eq!(b.forward(&[1.0, 2.0, 3.0]).unwrap().0, vec![0.0, 0.0]);

        let mut id = init_params(&spec(&[3, 3], Activation::None), 1).unwrap();
        id.layers[0].w = DMatrix::identity(3, 3);
        assert_eq!(id.forward(&[1.5, -2.0, 0.25]).unwrap().0, vec![1.5, -2.0, 0.25]);

        let t = init_params(&spec(&[3, 8, 4], Activation::Tanh), 4).unwrap();
        let (out, _) = t.forward(&[50.0, -80.0, 3.0]).unwrap();
        assert!(out.iter().all(|v| v.abs() <= 1.0));
        assert!(matches!(t.forward(&[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backward_linear_case() {
        let mut b = init_params(&spec(&[3, 1], Activation::None), 2).unwrap();
        let x = [0.5, -1.0, 2.0];
        let (_, tape) = b.forward(&x).unwrap();
        let gx = b.backward(&tape, &[1.0]).unwrap();
        assert_eq!(b.grads[0].w.as_slice(), &x);
        assert_eq!(b.grads[0].b[0], 1.0);
        assert_eq!(gx, b.layers[0].w.as_slice().to_vec());

        b.zero_grads();
        let (_, tape) = b.forward(&x).unwrap();
        b.backward(&tape, &[0.0]).unwrap();
        assert!(b.grads_flat().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut b = init_params(&spec(&[2, 2], Activation::None), 2).unwrap();
        let (_, tape) = b.forward(&[1.0, 1.0]).unwrap();
        b.backward(&tape, &[1.0, 1.0]).unwrap();
        b.adam_step(1e-3).unwrap();
        assert!(matches!(b.backward(&tape, &[1.0, 1.0]), Err(Error::StaleTape { .. })));
    }

    #[test]
    fn adam_examples() {
        let mut b = init_params(&spec(&[2, 3, 1], Activation::None), 3).unwrap();
        let before = b.params_flat();
        b.adam_step(1e-3).unwrap();
        assert_eq!(b.params_flat(), before);

        // constant gradient: the step approaches lr
        let mut b = init_params(&spec(&[2, 3, 1], Activation::None), 3).unwrap();
        let lr = 1e-3;
        let mut prev = b.params_flat();
        let mut last_step = 0.0;
        for _ in 0..200 {
            b.grads.iter_mut().for_each(|g| g.fill(0.3));
            b.adam_step(lr).unwrap();
            let now = b.params_flat();
            last_step = (prev[0] - now[0]).abs();
            prev = now;
        }
        assert!((last_step - lr).abs() < 1e-6 * lr.max(1.0), "{last_step}");
        assert!(b.grads_flat().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn adam_flags_non_finite() {
        let mut b = init_params(&spec(&[1, 1], Activation::None), 3).unwrap();
        b.grads[0].w[(0, 0)] = f64::NAN;
        assert!(matches!(b.adam_step(1e-3), Err(Error::NonFinite(_))));
    }

    #[test]
    fn batched_forward_matches_single() {
        let b = init_params(&spec(&[3, 5, 2], Activation::Tanh), 6).unwrap();
        let xs = [[0.1, 0.2, -0.3], [1.0, -2.0, 0.5]];
        let batch = DMatrix::from_fn(3, 2, |r, c| xs[c][r]);
        let tape = b.forward_batch(batch).unwrap();
        for (c, x) in xs.iter().enumerate() {
            let (single, _) = b.forward(x).unwrap();
            assert_eq!(tape.output().column(c).as_slice(), single.as_slice());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let s1 = spec(&[4, 6, 3], Activation::Tanh);
        let s2 = spec(&[3, 2], Activation::None);
        let a = init_params(&s1, 1).unwrap();
        let b = init_params(&s2, 2).unwrap();
        let meta = serde_json::json!({"seed": 5});
        let bytes = encode_checkpoint(&meta, &[("a", &a), ("b", &b)]).unwrap();
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.meta, meta);
        let la = ck.bundle("a").unwrap();
        assert_eq!(la.spec, s1);
        let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(la.params_flat()), bits(a.params_flat()));
        assert_eq!(bits(ck.bundle("b").unwrap().params_flat()), bits(b.params_flat()));

        for cut in [3, 15, bytes.len() - 1] {
            match decode_checkpoint(&bytes[..cut]) {
                Err(Error::Checkpoint(_)) => {}
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[8] = 9;
        let msg = decode_checkpoint(&bad).unwrap_err().to_string();
        assert!(msg.contains("version"), "{msg}");
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let a = init_params(&spec(&[2, 2], Activation::None), 1).unwrap();
        save_checkpoint(&path, &serde_json::Value::Null, &[("a", &a)]).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.bundles[0].1.params_flat(), a.params_flat());
    }

    /// Sum of `c · output` as a scalar loss, for finite differences.
    fn loss(b: &MlpBundle, x: &[f64], c: &[f64]) -> f64 {
        let (y, _) = b.forward(x).unwrap();
        y.iter().zip(c).map(|(a, b)| a * b).sum()
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn gradients_match_central_differences(
            widths in prop::collection::vec(1usize..=8, 2..=4),
            out_tanh in any::<bool>(),
            seed in any::<u64>(),
            xs in prop::collection::vec(-2.0f64..2.0, 8),
            cs in prop::collection::vec(-1.0f64..1.0, 8),
        ) {
            let out = if out_tanh { Activation::Tanh } else { Activation::None };
            let mut b = init_params(&spec(&widths, out), seed).unwrap();
            let x = &xs[..widths[0]];
            let c = &cs[..*widths.last().unwrap()];
            let (_, tape) = b.forward(x).unwrap();
            let gx = b.backward(&tape, c).unwrap();
            let analytic = b.grads_flat();
            let p0 = b.params_flat();
            let h = 1e-5;
            for i in 0..p0.len() {
                let mut p = p0.clone();
                p[i] += h;
                b.set_params_flat(&p).unwrap();
                let up = loss(&b, x, c);
                p[i] -= 2.0 * h;
                b.set_params_flat(&p).unwrap();
                let down = loss(&b, x, c);
                let num = (up - down) / (2.0 * h);
                // a ReLU kink inside the stencil makes the difference meaningless
                let kink = is_kink(up, loss_at(&mut b, &p0, x, c), down);
                prop_assert!(kink || rel_err(analytic[i], num) <= 1e-4 || (analytic[i] - num).abs() < 1e-9,
                    "param {}: analytic {} numeric {}", i, analytic[i], num);
            }
            b.set_params_flat(&p0).unwrap();
            for i in 0..x.len() {
                let mut xp = x.to_vec();
                xp[i] += h;
                let up = loss(&b, &xp, c);
                xp[i] -= 2.0 * h;
                let down = loss(&b, &xp, c);
                let num = (up - down) / (2.0 * h);
                let kink = is_kink(up, loss(&b, x, c), down);
                prop_assert!(kink || rel_err(gx[i], num) <= 1e-4 || (gx[i] - num).abs() < 1e-9,
                    "input {}: analytic {} numeric {}", i, gx[i], num);
            }
        }

        #[test]
        fn forward_is_deterministic(seed in any::<u64>(), xs in prop::collection::vec(-5.0f64..5.0, 6)) {
            let b = init_params(&spec(&[6, 8, 8, 3], Activation::Tanh), seed).unwrap();
            prop_assert_eq!(b.forward(&xs).unwrap().0, b.forward(&xs).unwrap().0);
        }
    }

    /// Zero biases put pre-activations of dead units exactly on the ReLU kink;
    /// there the one-sided slopes differ and central differences are meaningless.
    fn is_kink(up: f64, mid: f64, down: f64) -> bool {
        (up - 2.0 * mid + down).abs() > 1e-8 + 1e-2 * (up - down).abs()
    }

    fn loss_at(b: &mut MlpBundle, p: &[f64], x: &[f64], c: &[f64]) -> f64 {
        b.set_params_flat(p).unwrap();
        loss(b, x, c)
    }
}
