//! Conditioning encoder: per-modality projections, visual cross-attention
//! fusion and a transformer over the observed steps.
//!
//! All methods take batched graph variables. Kinematic inputs are
//! `[B, τ, 30]` in the [`crate::target`] layout, visual input is `[B, 128]`,
//! and the output is the flattened `[B, τ·d]` conditioning feature.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{StateWindow, VISUAL_DIM};
use crate::numerics::{Graph, ParameterStore, Tensor, Var};
use crate::target::{observed_tensor, visual_tensor, ARM_SLICE, FEATURE_DIM, GAZE_SLICE, HEAD_SLICE};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub latent_dim: usize,
    pub visual_dim: usize,
    pub n_heads: usize,
    /// The visual vector is split into this many key/value tokens.
    pub visual_tokens: usize,
    /// Observed steps τ.
    pub observed: usize,
    /// Transformer blocks in the temporal encoder.
    pub layers: usize,
    /// Feed-forward width as a multiple of `latent_dim`.
    pub ff_mult: usize,
    /// Add the attention query back onto the attended value. With a single
    /// visual token the plain attention output ignores the query entirely.
    pub residual: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            visual_dim: VISUAL_DIM,
            n_heads: 4,
            visual_tokens: 1,
            observed: 10,
            layers: 1,
            ff_mult: 2,
            residual: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.latent_dim == 0 || self.n_heads == 0 || self.latent_dim % self.n_heads != 0 {
            return fail(format!(
                "latent_dim {} must be a positive multiple of n_heads {}",
                self.latent_dim, self.n_heads
            ));
        }
        if self.visual_dim != VISUAL_DIM {
            return fail(format!("visual_dim is fixed at {VISUAL_DIM}, got {}", self.visual_dim));
        }
        if self.visual_tokens == 0 || self.visual_dim % self.visual_tokens != 0 {
            return fail(format!(
                "visual_dim {} is not divisible by visual_tokens {}",
                self.visual_dim, self.visual_tokens
            ));
        }
        if self.observed == 0 || self.ff_mult == 0 {
            return fail("observed and ff_mult must be positive".into());
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.observed * self.latent_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    cfg: EncoderConfig,
    prefix: String,
}

/// `x · W + b` with parameters `{name}.weight`, `{name}.bias`.
pub(crate) fn linear(g: &mut Graph, store: &ParameterStore, x: Var, name: &str) -> Result<Var> {
    let w = g.param(store, &format!("{name}.weight"))?;
    let b = g.param(store, &format!("{name}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_broadcast(y, b)
}

fn layer_norm_affine(g: &mut Graph, store: &ParameterStore, x: Var, name: &str) -> Result<Var> {
    let gain = g.param(store, &format!("{name}.gain"))?;
    let bias = g.param(store, &format!("{name}.bias"))?;
    let n = g.layer_norm(x)?;
    let scaled = g.mul_broadcast(n, gain)?;
    g.add_broadcast(scaled, bias)
}

fn init_layer_norm(store: &mut ParameterStore, name: &str, dim: usize) {
    store.insert(format!("{name}.gain"), Tensor::full(&[dim], 1.0));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[dim]));
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            prefix: prefix.to_string(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn output_dim(&self) -> usize {
        self.cfg.output_dim()
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) {
        let d = self.cfg.latent_dim;
        let token = self.cfg.visual_dim / self.cfg.visual_tokens;
        store.init_linear(&self.name("head"), HEAD_SLICE.len(), d, rng);
        store.init_linear(&self.name("gaze"), GAZE_SLICE.len(), d, rng);
        store.init_linear(&self.name("arm"), ARM_SLICE.len(), d, rng);
        store.init_linear(&self.name("proj"), 3 * d, 2 * d, rng);
        for branch in ["attn_hg", "attn_hga"] {
            store.init_linear(&self.name(&format!("{branch}.query")), 2 * d, d, rng);
            store.init_linear(&self.name(&format!("{branch}.key")), token, d, rng);
            store.init_linear(&self.name(&format!("{branch}.value")), token, d, rng);
        }
        store.init_uniform(&self.name("visual_pos"), &[self.cfg.visual_tokens, token], 0.1, rng);
        store.init_uniform(&self.name("pos"), &[self.cfg.observed, d], 0.1, rng);
        for l in 0..self.cfg.layers {
            let p = |s: &str| self.name(&format!("layer{l}.{s}"));
            init_layer_norm(store, &p("norm1"), d);
            for s in ["query", "key", "value", "out"] {
                store.init_linear(&p(s), d, d, rng);
            }
            init_layer_norm(store, &p("norm2"), d);
            store.init_linear(&p("ff1"), d, self.cfg.ff_mult * d, rng);
            store.init_linear(&p("ff2"), self.cfg.ff_mult * d, d, rng);
        }
        init_layer_norm(store, &self.name("norm_out"), d);
    }

    /// Projects `[.., 30]` inputs to head, gaze and arm latents `[.., d]`.
    pub fn encode_modalities(&self, g: &mut Graph, store: &ParameterStore, states: Var) -> Result<(Var, Var, Var)> {
        let mut project = |range: std::ops::Range<usize>, part: &str| -> Result<Var> {
            let x = g.slice_last(states, range.start, range.end)?;
            let y = linear(g, store, x, &self.name(part))?;
            g.gelu(y)
        };
        let head = project(HEAD_SLICE, "head")?;
        let gaze = project(GAZE_SLICE, "gaze")?;
        let arm = project(ARM_SLICE, "arm")?;
        Ok((head, gaze, arm))
    }

    /// Single-head attention of `query` `[B, τ, 2d]` over the visual tokens
    /// `[B, n, 128/n]`. Token positions enter through the keys only, so a
    /// zero visual feature still yields zero values.
    fn cross_attend(&self, g: &mut Graph, store: &ParameterStore, query: Var, tokens: Var, branch: &str) -> Result<Var> {
        let q = linear(g, store, query, &self.name(&format!("{branch}.query")))?;
        let pos = g.param(store, &self.name("visual_pos"))?;
        let keyed = g.add_broadcast(tokens, pos)?;
        let k = linear(g, store, keyed, &self.name(&format!("{branch}.key")))?;
        let v = linear(g, store, tokens, &self.name(&format!("{branch}.value")))?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (self.cfg.latent_dim as f64).sqrt())?;
        let weights = g.softmax(scores)?;
        let attended = g.bmm(weights, v, false)?;
        if self.cfg.residual {
            g.add(attended, q)
        } else {
            Ok(attended)
        }
    }

    /// Cross-attends the head+gaze and head+gaze+arm latents to the visual
    /// feature and sums the two results: `[B, τ, d]`.
    pub fn fuse(&self, g: &mut Graph, store: &ParameterStore, head: Var, gaze: Var, arm: Var, visual: Var) -> Result<Var> {
        let batch = g.value(visual).shape()[0];
        let n = self.cfg.visual_tokens;
        let tokens = g.reshape(visual, &[batch, n, self.cfg.visual_dim / n])?;
        let hg = g.concat(&[head, gaze])?;
        let hga = g.concat(&[head, gaze, arm])?;
        let hga = linear(g, store, hga, &self.name("proj"))?;
        let a = self.cross_attend(g, store, hg, tokens, "attn_hg")?;
        let b = self.cross_attend(g, store, hga, tokens, "attn_hga")?;
        g.add(a, b)
    }

    fn self_attention(&self, g: &mut Graph, store: &ParameterStore, x: Var, layer: usize) -> Result<Var> {
        let p = |s: &str| self.name(&format!("layer{layer}.{s}"));
        let q = linear(g, store, x, &p("query"))?;
        let k = linear(g, store, x, &p("key"))?;
        let v = linear(g, store, x, &p("value"))?;
        let dh = self.cfg.latent_dim / self.cfg.n_heads;
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_last(q, lo, hi)?;
            let kh = g.slice_last(k, lo, hi)?;
            let vh = g.slice_last(v, lo, hi)?;
            let s = g.bmm(qh, kh, true)?;
            let s = g.scale(s, 1.0 / (dh as f64).sqrt())?;
            let w = g.softmax(s)?;
            heads.push(g.bmm(w, vh, false)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { g.concat(&heads)? };
        linear(g, store, joined, &p("out"))
    }

    /// Pre-norm transformer over `[B, τ, d]`, flattened to `[B, τ·d]`.
    pub fn temporal_encode(&self, g: &mut Graph, store: &ParameterStore, fused: Var) -> Result<Var> {
        let shape = g.value(fused).shape().to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.latent_dim {
            return Err(Error::Shape {
                op: "temporal_encode",
                lhs: shape,
                rhs: vec![self.cfg.observed, self.cfg.latent_dim],
            });
        }
        let (batch, steps) = (shape[0], shape[1]);
        let pos = g.param(store, &self.name("pos"))?;
        let pos = if steps == self.cfg.observed {
            pos
        } else if steps < self.cfg.observed {
            // Shorter sequences use the leading rows of the table.
            let table = g.reshape(pos, &[1, self.cfg.observed * self.cfg.latent_dim])?;
            let head = g.slice_last(table, 0, steps * self.cfg.latent_dim)?;
            g.reshape(head, &[steps, self.cfg.latent_dim])?
        } else {
            return Err(Error::invalid(format!(
                "sequence of {steps} steps exceeds the {} position embeddings",
                self.cfg.observed
            )));
        };
        let mut x = g.add_broadcast(fused, pos)?;
        for l in 0..self.cfg.layers {
            let p = |s: &str| self.name(&format!("layer{l}.{s}"));
            let h = layer_norm_affine(g, store, x, &p("norm1"))?;
            let a = self.self_attention(g, store, h, l)?;
            x = g.add(x, a)?;
            let h = layer_norm_affine(g, store, x, &p("norm2"))?;
            let h = linear(g, store, h, &p("ff1"))?;
            let h = g.gelu(h)?;
            let h = linear(g, store, h, &p("ff2"))?;
            x = g.add(x, h)?;
        }
        let out = layer_norm_affine(g, store, x, &self.name("norm_out"))?;
        g.reshape(out, &[batch, steps * self.cfg.latent_dim])
    }

    /// Full conditioning path: `[B, τ, 30]`, `[B, 128]` to `[B, τ·d]`.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, observed: Var, visual: Var) -> Result<Var> {
        let shape = g.value(observed).shape();
        if shape.len() != 3 || shape[1] != self.cfg.observed || shape[2] != FEATURE_DIM {
            return Err(Error::Shape {
                op: "encoder input",
                lhs: shape.to_vec(),
                rhs: vec![self.cfg.observed, FEATURE_DIM],
            });
        }
        let (head, gaze, arm) = self.encode_modalities(g, store, observed)?;
        let fused = self.fuse(g, store, head, gaze, arm, visual)?;
        self.temporal_encode(g, store, fused)
    }

    /// Adds the batch inputs for `windows` to `g` and runs [`forward`](Self::forward).
    pub fn forward_windows(&self, g: &mut Graph, store: &ParameterStore, windows: &[&StateWindow]) -> Result<Var> {
        let obs = g.constant(observed_tensor(windows)?);
        let vis = g.constant(visual_tensor(windows)?);
        self.forward(g, store, obs, vis)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, slice_windows, SyntheticConfig, TrajectoryRecord, WindowConfig};
    use crate::kinematics::{axis_angle, Se3Pose, Vec3};
    use crate::numerics::gradcheck::{check_coordinates, sample_coordinates};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: EncoderConfig, seed: u64) -> (Encoder, ParameterStore) {
        let enc = Encoder::new(cfg, "enc").unwrap();
        let mut store = ParameterStore::new();
        enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        (enc, store)
    }

    fn records() -> Vec<TrajectoryRecord> {
        generate_synthetic(&SyntheticConfig {
            n_trajectories: 3,
            length: 40,
            seed: 11,
            ..Default::default()
        })
        .unwrap()
    }

    fn windows() -> Vec<StateWindow> {
        records()
            .iter()
            .flat_map(|r| slice_windows(r, &WindowConfig::default()).unwrap())
            .collect()
    }

    fn encode(enc: &Encoder, store: &ParameterStore, ws: &[StateWindow]) -> Tensor {
        let refs: Vec<&StateWindow> = ws.iter().collect();
        let mut g = Graph::new();
        let out = enc.forward_windows(&mut g, store, &refs).unwrap();
        g.value(out).clone()
    }

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn output_is_tau_times_d() {
        let (enc, store) = setup(EncoderConfig::default(), 1);
        let ws = windows();
        let out = encode(&enc, &store, &ws);
        assert_eq!(out.shape(), &[ws.len(), 640]);
        assert!(out.is_finite());
    }

    #[test]
    fn zero_parameters_give_zero_modalities() {
        let (enc, mut store) = setup(EncoderConfig::default(), 2);
        let names: Vec<String> = store.names().cloned().collect();
        for n in names {
            store.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let x = g.constant(random_tensor(&[2, 10, FEATURE_DIM], &mut ChaCha8Rng::seed_from_u64(3)));
        let (h, ga, a) = enc.encode_modalities(&mut g, &store, x).unwrap();
        for v in [h, ga, a] {
            assert_eq!(g.value(v).shape(), &[2, 10, 64]);
            assert!(g.value(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn single_token_attention_ignores_query() {
        let cfg = EncoderConfig {
            residual: false,
            ..Default::default()
        };
        let (enc, store) = setup(cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let visual = random_tensor(&[1, VISUAL_DIM], &mut rng);
        let fused: Vec<Tensor> = (0..2)
            .map(|_| {
                let mut g = Graph::new();
                let x = g.constant(random_tensor(&[1, 10, FEATURE_DIM], &mut rng));
                let v = g.constant(visual.clone());
                let (h, ga, a) = enc.encode_modalities(&mut g, &store, x).unwrap();
                let f = enc.fuse(&mut g, &store, h, ga, a, v).unwrap();
                g.value(f).clone()
            })
            .collect();
        let diff: f64 = fused[0].data().iter().zip(fused[1].data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn zero_visual_and_value_bias_fuse_to_zero() {
        let cfg = EncoderConfig {
            residual: false,
            ..Default::default()
        };
        let (enc, mut store) = setup(cfg, 6);
        for b in ["enc.attn_hg.value.bias", "enc.attn_hga.value.bias"] {
            store.get_mut(b).unwrap().data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let x = g.constant(random_tensor(&[3, 10, FEATURE_DIM], &mut ChaCha8Rng::seed_from_u64(7)));
        let v = g.constant(Tensor::zeros(&[3, VISUAL_DIM]));
        let (h, ga, a) = enc.encode_modalities(&mut g, &store, x).unwrap();
        let f = enc.fuse(&mut g, &store, h, ga, a, v).unwrap();
        assert!(g.value(f).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn permuting_visual_tokens_changes_fusion() {
        let cfg = EncoderConfig {
            visual_tokens: 8,
            ..Default::default()
        };
        let (enc, store) = setup(cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&[1, 10, FEATURE_DIM], &mut rng);
        let visual = random_tensor(&[1, VISUAL_DIM], &mut rng);
        let mut swapped = visual.clone();
        // Swap tokens 0 and 5 (16 values each).
        let data = swapped.data_mut();
        for i in 0..16 {
            data.swap(i, 5 * 16 + i);
        }
        let run = |vis: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let v = g.constant(vis.clone());
            let (h, ga, a) = enc.encode_modalities(&mut g, &store, xv).unwrap();
            let f = enc.fuse(&mut g, &store, h, ga, a, v).unwrap();
            g.value(f).clone()
        };
        let (a, b) = (run(&visual), run(&swapped));
        let diff: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum();
        assert!(diff > 1e-6, "{diff}");
    }

    #[test]
    fn temporal_single_step_and_row_order() {
        let (enc, store) = setup(EncoderConfig::default(), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let one = g.constant(random_tensor(&[1, 1, 64], &mut rng));
        let out = enc.temporal_encode(&mut g, &store, one).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 64]);

        let seq = random_tensor(&[1, 10, 64], &mut rng);
        let mut rows: Vec<&[f64]> = seq.data().chunks(64).collect();
        rows.swap(0, 7);
        let permuted = Tensor::new(vec![1, 10, 64], rows.concat()).unwrap();
        let mut g = Graph::new();
        let a = g.constant(seq);
        let b = g.constant(permuted);
        let oa = enc.temporal_encode(&mut g, &store, a).unwrap();
        let ob = enc.temporal_encode(&mut g, &store, b).unwrap();
        // Undo the permutation on the output and compare: position
        // embeddings make the result differ.
        let ra: Vec<&[f64]> = g.value(oa).data().chunks(64).collect();
        let mut rb: Vec<&[f64]> = g.value(ob).data().chunks(64).collect();
        rb.swap(0, 7);
        let diff: f64 = ra.concat().iter().zip(rb.concat()).map(|(p, q)| (p - q).abs()).sum();
        assert!(diff > 1e-6, "{diff}");
    }

    #[test]
    fn invariant_to_global_rigid_motion_of_raw_data() {
        let (enc, store) = setup(EncoderConfig::default(), 12);
        let raw = records();
        let pose = Se3Pose::new(Vec3::new(0.7, -1.3, 0.4), axis_angle(&Vec3::new(0.2, 1.0, -0.5), 73.0)).unwrap();
        for r in &raw {
            let mut moved = r.clone();
            for s in &mut moved.states {
                *s = s.transformed(&pose);
            }
            let wa = slice_windows(r, &WindowConfig::default()).unwrap();
            let wb = slice_windows(&moved, &WindowConfig::default()).unwrap();
            let (a, b) = (encode(&enc, &store, &wa), encode(&enc, &store, &wb));
            let diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-6, "{diff}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = EncoderConfig {
            visual_tokens: 4,
            ..Default::default()
        };
        let (enc, mut store) = setup(cfg, 13);
        let ws: Vec<StateWindow> = windows().into_iter().take(3).collect();
        let refs: Vec<&StateWindow> = ws.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let probe = random_tensor(&[refs.len(), 640], &mut rng);
        let loss_of = |s: &ParameterStore| -> Result<(Graph, Var)> {
            let mut g = Graph::new();
            let c = enc.forward_windows(&mut g, s, &refs)?;
            let p = g.constant(probe.clone());
            let prod = g.mul(c, p)?;
            let sq = g.square(prod)?;
            let l = g.mean(sq)?;
            Ok((g, l))
        };
        let (g, l) = loss_of(&store).unwrap();
        let grads = g.backward(l).unwrap();
        let coords = sample_coordinates(&store, 30, &mut rng);
        let probes = check_coordinates(&mut store, &grads, &coords, 1e-5, |s| {
            let (g, l) = loss_of(s)?;
            Ok(g.value(l).data()[0])
        })
        .unwrap();
        for p in probes {
            assert!(p.relative_error(1e-6) < 1e-4, "{p:?}");
        }
    }
}
