//! Synthetic, seedable alternating-attention backbone: configurable
//! interleaving of frame and global layers, the per-frame token layout
//! (patch tokens plus camera/register specials), deterministic weights, and
//! the forward pass with reduction hooks.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    frame_attention, global_attention, global_attention_unreduced, AttentionLayerParams, LayerKind,
};
use crate::config::{ReductionConfig, ResolvedReduction};
use crate::error::{Error, Result};
use crate::kernels::Matrix;
use crate::kvpath::KvReducer;
use crate::qpath::QueryReducer;

/// Per-frame special tokens: one camera token plus four register tokens.
pub const SPECIAL_TOKENS_PER_FRAME: usize = 5;

/// Within-frame token layout: `p_patch` patch tokens first, then the five
/// special tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLayout {
    pub p_patch: usize,
}

impl FrameLayout {
    pub fn tokens_per_frame(&self) -> usize {
        self.p_patch + SPECIAL_TOKENS_PER_FRAME
    }
}

// ── TokenTensor ────────────────────────────────────────────────────────────

/// The per-forward token state: `S` frames of `P` tokens with `d` features,
/// stored row-major as `S * P` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTensor {
    s: usize,
    layout: FrameLayout,
    d: usize,
    data: Vec<f64>,
}

impl TokenTensor {
    pub fn zeros(s: usize, layout: FrameLayout, d: usize) -> Self {
        let n = s * layout.tokens_per_frame();
        TokenTensor { s, layout, d, data: vec![0.0; n * d] }
    }

    /// Reinterpret a flattened `S*P x d` matrix as a token tensor.
    pub fn from_matrix(s: usize, layout: FrameLayout, m: &Matrix) -> Result<Self> {
        let p = layout.tokens_per_frame();
        if m.rows() != s * p {
            return Err(Error::rejected(format!(
                "matrix has {} rows, expected {s} frames x {p} tokens",
                m.rows()
            )));
        }
        Ok(TokenTensor { s, layout, d: m.cols(), data: m.data().to_vec() })
    }

    /// Flatten to an `S*P x d` matrix (copies the buffer).
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.n_tokens(), self.d, self.data.clone())
            .expect("token tensor buffer is consistent by construction")
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn p(&self) -> usize {
        self.layout.tokens_per_frame()
    }

    pub fn layout(&self) -> FrameLayout {
        self.layout
    }

    pub fn n_tokens(&self) -> usize {
        self.s * self.p()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// All features of frame `f`, `P * d` values.
    pub fn frame(&self, f: usize) -> &[f64] {
        let stride = self.p() * self.d;
        &self.data[f * stride..(f + 1) * stride]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Relative L2 divergence of `x` from `reference`, measured over patch
/// tokens only (special tokens excluded).
pub fn patch_divergence(x: &TokenTensor, reference: &TokenTensor) -> f64 {
    assert_eq!(x.s, reference.s, "frame count mismatch");
    assert_eq!(x.layout, reference.layout, "layout mismatch");
    assert_eq!(x.d, reference.d, "feature dim mismatch");
    let d = x.d;
    let mut num = 0.0;
    let mut den = 0.0;
    for f in 0..x.s {
        let xa = x.frame(f);
        let xb = reference.frame(f);
        // Patch tokens come first within each frame.
        for t in 0..x.layout.p_patch * d {
            let diff = xa[t] - xb[t];
            num += diff * diff;
            den += xb[t] * xb[t];
        }
    }
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    }
}

// ── Synthetic sequences ────────────────────────────────────────────────────

/// How synthetic token sequences evolve across frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SequenceMode {
    /// Independent unit-Gaussian tokens everywhere.
    Iid,
    /// Frame `f+1` = frame `f` + `sigma` * noise: the temporal redundancy of
    /// video features, at about `sigma` of the token norm per step.
    SmoothWalk { sigma: f64 },
}

/// Deterministic synthetic token sequence for the given mode and seed.
pub fn gen_synthetic_sequence(
    s: usize,
    p_patch: usize,
    d: usize,
    mode: SequenceMode,
    seed: u64,
) -> TokenTensor {
    let layout = FrameLayout { p_patch };
    let p = layout.tokens_per_frame();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut out = TokenTensor::zeros(s, layout, d);
    let stride = p * d;
    for f in 0..s {
        for t in 0..stride {
            let noise: f64 = normal.sample(&mut rng);
            out.data[f * stride + t] = match (mode, f) {
                (SequenceMode::Iid, _) | (SequenceMode::SmoothWalk { .. }, 0) => noise,
                (SequenceMode::SmoothWalk { sigma }, _) => {
                    out.data[(f - 1) * stride + t] + sigma * noise
                }
            };
        }
    }
    out
}

// ── Backbone spec and model ────────────────────────────────────────────────

/// Synthetic model description: layer count and kinds, dims, RNG seed, and
/// the global layers excluded from sensitivity probing (the register
/// attention analogue).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub n_layers: usize,
    pub layer_kinds: Vec<LayerKind>,
    pub d: usize,
    pub p_patch: usize,
    pub seed: u64,
    #[serde(default)]
    pub excluded_global_layers: BTreeSet<usize>,
}

impl BackboneSpec {
    /// Default desk-scale backbone: 8 layers alternating frame/global,
    /// d = 32, 16 patch tokens per frame.
    pub fn default_alternating(seed: u64) -> Self {
        let layer_kinds = (0..8)
            .map(|i| if i % 2 == 0 { LayerKind::Frame } else { LayerKind::Global })
            .collect();
        BackboneSpec {
            n_layers: 8,
            layer_kinds,
            d: 32,
            p_patch: 16,
            seed,
            excluded_global_layers: BTreeSet::new(),
        }
    }

    pub fn layout(&self) -> FrameLayout {
        FrameLayout { p_patch: self.p_patch }
    }

    /// Indices of global attention layers, ascending.
    pub fn global_layers(&self) -> Vec<usize> {
        self.layer_kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == LayerKind::Global)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_kinds.len() != self.n_layers {
            return Err(Error::config(format!(
                "n_layers is {} but {} layer kinds given",
                self.n_layers,
                self.layer_kinds.len()
            )));
        }
        if self.d == 0 {
            return Err(Error::config("feature dim must be >= 1".to_string()));
        }
        for &i in &self.excluded_global_layers {
            if self.layer_kinds.get(i) != Some(&LayerKind::Global) {
                return Err(Error::config(format!(
                    "excluded layer {i} is not a global attention layer"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::schedule::save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: BackboneSpec = crate::schedule::load_json(path)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// An initialized model: the spec plus per-layer projection weights.
#[derive(Debug, Clone)]
pub struct Backbone {
    spec: BackboneSpec,
    layers: Vec<AttentionLayerParams>,
}

/// Draw deterministic weights for the spec; entries are Gaussian scaled by
/// `1/sqrt(d)` so layer outputs stay O(1).
pub fn init_backbone(spec: &BackboneSpec) -> Result<Backbone> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scale = 1.0 / (spec.d as f64).sqrt();
    let normal = StandardNormal;
    let draw = |rng: &mut ChaCha8Rng| -> Matrix {
        let data = (0..spec.d * spec.d)
            .map(|_| {
                let z: f64 = normal.sample(rng);
                z * scale
            })
            .collect();
        Matrix::from_vec(spec.d, spec.d, data).expect("square weight buffer")
    };
    let layers = (0..spec.n_layers)
        .map(|_| {
            AttentionLayerParams::new(
                draw(&mut rng),
                draw(&mut rng),
                draw(&mut rng),
                draw(&mut rng),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Backbone { spec: spec.clone(), layers })
}

/// Per-layer record of what the forward pass actually did.
#[derive(Debug, Clone)]
pub struct LayerRunStats {
    pub index: usize,
    pub kind: LayerKind,
    pub r_q: usize,
    pub r_kv: usize,
    /// Query rows fed to SDPA (per frame for frame layers).
    pub nq: usize,
    /// KV rows fed to SDPA (per frame for frame layers).
    pub nkv: usize,
    pub q_comparisons: u64,
    pub kv_comparisons: u64,
    pub merged_pairs: u64,
}

/// Aggregated forward-pass statistics.
#[derive(Debug, Clone, Default)]
pub struct RunStats {
    pub layers: Vec<LayerRunStats>,
}

impl RunStats {
    pub fn total_q_comparisons(&self) -> u64 {
        self.layers.iter().map(|l| l.q_comparisons).sum()
    }

    pub fn total_kv_comparisons(&self) -> u64 {
        self.layers.iter().map(|l| l.kv_comparisons).sum()
    }
}

impl Backbone {
    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn layer(&self, i: usize) -> &AttentionLayerParams {
        &self.layers[i]
    }

    /// Replace one layer's weights (test fixtures).
    pub fn set_layer(&mut self, i: usize, params: AttentionLayerParams) {
        self.layers[i] = params;
    }

    fn check_input(&self, x: &TokenTensor) -> Result<()> {
        if x.d() != self.spec.d || x.layout() != self.spec.layout() {
            return Err(Error::rejected(format!(
                "input shape (p_patch {}, d {}) does not match spec (p_patch {}, d {})",
                x.layout().p_patch,
                x.d(),
                self.spec.p_patch,
                self.spec.d
            )));
        }
        Ok(())
    }

    /// Run the model under a reduction config. Frame layers are never
    /// reduced; global layers apply the resolved query and per-layer KV
    /// reductions. Deterministic given weights, input, and config.
    pub fn forward(&self, x: &TokenTensor, cfg: &ReductionConfig) -> Result<(TokenTensor, RunStats)> {
        let resolved = cfg.resolve(&self.spec.layer_kinds, &self.spec.excluded_global_layers, x.s())?;
        self.forward_span(0, x.clone(), &resolved, None)
    }

    /// Like [`Backbone::forward`] but with the reduction already resolved.
    pub fn forward_resolved(
        &self,
        x: &TokenTensor,
        resolved: &ResolvedReduction,
    ) -> Result<(TokenTensor, RunStats)> {
        self.forward_span(0, x.clone(), resolved, None)
    }

    /// Forward pass that also returns the input of every layer, so probing
    /// can resume from a cached activation.
    pub fn forward_traced(
        &self,
        x: &TokenTensor,
        resolved: &ResolvedReduction,
    ) -> Result<(TokenTensor, Vec<TokenTensor>, RunStats)> {
        let mut trace = Vec::with_capacity(self.spec.n_layers);
        let (out, stats) = self.forward_span(0, x.clone(), resolved, Some(&mut trace))?;
        Ok((out, trace, stats))
    }

    /// Apply layers `start..n_layers` to `x` under the resolved reduction.
    pub fn forward_span(
        &self,
        start: usize,
        mut x: TokenTensor,
        resolved: &ResolvedReduction,
        mut trace: Option<&mut Vec<TokenTensor>>,
    ) -> Result<(TokenTensor, RunStats)> {
        self.check_input(&x)?;
        let mut stats = RunStats::default();
        for i in start..self.spec.n_layers {
            if let Some(trace) = trace.as_deref_mut() {
                trace.push(x.clone());
            }
            let params = &self.layers[i];
            match self.spec.layer_kinds[i] {
                LayerKind::Frame => {
                    x = frame_attention(&x, params)?;
                    stats.layers.push(LayerRunStats {
                        index: i,
                        kind: LayerKind::Frame,
                        r_q: 1,
                        r_kv: 1,
                        nq: x.p(),
                        nkv: x.p(),
                        q_comparisons: 0,
                        kv_comparisons: 0,
                        merged_pairs: 0,
                    });
                }
                LayerKind::Global => {
                    let assign = resolved.per_layer_kv.get(&i).ok_or_else(|| {
                        Error::config(format!("resolved reduction is missing global layer {i}"))
                    })?;
                    let qr = QueryReducer::new(resolved.r_q, resolved.group_size)?;
                    let kvr =
                        KvReducer::new(assign.r_kv, assign.mode, resolved.seed.wrapping_add(i as u64))?;
                    let out = global_attention(&x, params, &qr, &kvr)?;
                    stats.layers.push(LayerRunStats {
                        index: i,
                        kind: LayerKind::Global,
                        r_q: resolved.r_q,
                        r_kv: assign.r_kv,
                        nq: out.nq,
                        nkv: out.nkv,
                        q_comparisons: out.q_stats.comparisons,
                        kv_comparisons: out.kv_comparisons,
                        merged_pairs: out.q_stats.pair_count,
                    });
                    x = out.tokens;
                }
            }
        }
        Ok((x, stats))
    }

    /// Unreduced reference forward: the same layers with no reducer
    /// machinery at all.
    pub fn reference_forward(&self, x: &TokenTensor) -> Result<TokenTensor> {
        self.check_input(x)?;
        let mut x = x.clone();
        for (kind, params) in self.spec.layer_kinds.iter().zip(&self.layers) {
            x = match kind {
                LayerKind::Frame => frame_attention(&x, params)?,
                LayerKind::Global => global_attention_unreduced(&x, params)?,
            };
        }
        Ok(x)
    }
}
