//! The full summarizer: query encoder, visual gates, mutual attention and the
//! frame classifier, with a hand-written backward pass through all of it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::booster::{
    booster_backward, booster_encode, bow_backward, bow_encode, BoosterForward, BoosterParams,
    BowParams,
};
use crate::dataset::FEATURE_DIM;
use crate::error::{Error, Result};
use crate::fusion::{
    broadcast_rows, classify_frames, mutual_attention, pool_segment_logits,
    pool_segment_logits_backward, visual_attention, FusionParams, MutualOutput,
};
use crate::nn::ops::{self, cross_entropy, gate_backward, linear_backward, softmax_rows};
use crate::nn::Parameters;
use crate::tensor::Tensor2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of visual features, of the fused representation and of the query vector.
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub max_query_len: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub mutual_attention: bool,
    pub semantics_booster: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: FEATURE_DIM,
            embed_dim: FEATURE_DIM,
            max_query_len: 64,
            ffn_mult: 4,
            vocab_size: 1,
            num_classes: 5,
            mutual_attention: true,
            semantics_booster: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 || self.embed_dim == 0 || self.ffn_mult == 0 {
            return Err(Error::invalid(format!("degenerate model widths {self:?}")));
        }
        if self.num_classes < 2 || self.vocab_size == 0 || self.max_query_len == 0 {
            return Err(Error::invalid(format!("degenerate model sizes {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QueryEncoder {
    Booster(Box<BoosterParams>),
    BagOfWords(BowParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub query: QueryEncoder,
    /// Query vector used for videos without a query.
    pub null_query: Tensor2,
    pub fusion: FusionParams,
}

impl Parameters for ModelParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor2)) {
        match &self.query {
            QueryEncoder::Booster(b) => b.visit(f),
            QueryEncoder::BagOfWords(b) => b.visit(f),
        }
        f("query.null", &self.null_query);
        self.fusion.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor2)) {
        match &mut self.query {
            QueryEncoder::Booster(b) => b.visit_mut(f),
            QueryEncoder::BagOfWords(b) => b.visit_mut(f),
        }
        f("query.null", &mut self.null_query);
        self.fusion.visit_mut(f);
    }
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.feature_dim;
        let query = if config.semantics_booster {
            QueryEncoder::Booster(Box::new(BoosterParams::init(
                config.vocab_size,
                config.embed_dim,
                d,
                config.max_query_len,
                config.ffn_mult * d,
                &mut rng,
            )))
        } else {
            QueryEncoder::BagOfWords(BowParams::init(config.vocab_size, d, &mut rng))
        };
        let fusion = FusionParams::init(d, config.num_classes, config.mutual_attention, &mut rng);
        Ok(Self {
            query,
            null_query: Tensor2::filled(1, d, 1.0),
            fusion,
        })
    }

    /// Names of the head blocks, the only ones trained when the trunk is frozen.
    pub fn head_block_names() -> [&'static str; 2] {
        ["head.w_c", "head.b_c"]
    }
}

/// One video as seen by the model, already length-equalized.
#[derive(Debug, Clone, Copy)]
pub struct VideoInput<'a> {
    /// `[M × d]` frame features after frame repeat.
    pub frames: &'a Tensor2,
    /// `[S × d]` segment features.
    pub segments: &'a Tensor2,
    /// Segment index of each of the `M` frames.
    pub segment_of: &'a [usize],
    pub tokens: &'a [u32],
}

/// Supervision for one video; class ids are `1..=C`.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Frames(&'a [usize]),
    Segments(&'a [usize]),
}

#[derive(Debug, Clone)]
enum QueryForward {
    Booster(Box<BoosterForward>),
    BagOfWords(Tensor2),
    Null,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    query: QueryForward,
    pub z_ta: Vec<f64>,
    pub z_as: Tensor2,
    gate_s: Tensor2,
    pub z_ast: Tensor2,
    gate_st: Tensor2,
    z_ast_frames: Tensor2,
    pub mutual: MutualOutput,
    /// `[M × C]`
    pub logits: Tensor2,
}

impl ModelParams {
    pub fn encode_query(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        Ok(self.run_query(tokens)?.1)
    }

    fn run_query(&self, tokens: &[u32]) -> Result<(QueryForward, Vec<f64>)> {
        if tokens.is_empty() {
            return Ok((QueryForward::Null, self.null_query.as_slice().to_vec()));
        }
        match &self.query {
            QueryEncoder::Booster(p) => {
                let fwd = booster_encode(tokens, p)?;
                let z = fwd.z_ta.clone();
                Ok((QueryForward::Booster(Box::new(fwd)), z))
            }
            QueryEncoder::BagOfWords(p) => {
                let (counts, z) = bow_encode(tokens, p)?;
                Ok((QueryForward::BagOfWords(counts), z))
            }
        }
    }

    pub fn forward(&self, input: VideoInput<'_>) -> Result<ForwardPass> {
        let d = self.fusion.dim();
        if input.frames.cols() != d || input.segments.cols() != d {
            return Err(Error::shape(
                "model feature width",
                d,
                format!("{} / {}", input.frames.cols(), input.segments.cols()),
            ));
        }
        if input.segment_of.len() != input.frames.rows() {
            return Err(Error::shape(
                "segment assignment",
                input.frames.rows(),
                input.segment_of.len(),
            ));
        }
        let (query, z_ta) = self.run_query(input.tokens)?;
        let (z_as, gate_s) = visual_attention(input.frames, &self.fusion.w_s, &self.fusion.b_s)?;
        let (z_ast, gate_st) =
            visual_attention(input.segments, &self.fusion.w_st, &self.fusion.b_st)?;
        let z_ast_frames = broadcast_rows(&z_ast, input.segment_of)?;
        let mutual = mutual_attention(&z_ta, &z_as, &z_ast_frames, self.fusion.mutual.as_ref())?;
        let logits = classify_frames(&mutual.z_ma, &self.fusion.w_c, &self.fusion.b_c)?;
        Ok(ForwardPass {
            query,
            z_ta,
            z_as,
            gate_s,
            z_ast,
            gate_st,
            z_ast_frames,
            mutual,
            logits,
        })
    }

    /// Per-frame class distributions `[M × C]`.
    pub fn frame_probabilities(&self, input: VideoInput<'_>) -> Result<Tensor2> {
        Ok(softmax_rows(&self.forward(input)?.logits))
    }

    /// Logits the loss is computed on: frame logits, or their per-segment means.
    fn target_logits(fwd: &ForwardPass, input: VideoInput<'_>, target: Target<'_>) -> Result<Tensor2> {
        match target {
            Target::Frames(_) => Ok(fwd.logits.clone()),
            Target::Segments(labels) => {
                pool_segment_logits(&fwd.logits, input.segment_of, labels.len())
            }
        }
    }

    pub fn loss(&self, input: VideoInput<'_>, target: Target<'_>) -> Result<f64> {
        let fwd = self.forward(input)?;
        let logits = Self::target_logits(&fwd, input, target)?;
        Ok(cross_entropy(&logits, target.labels())?.0)
    }

    /// Cross-entropy loss and its gradient with respect to every parameter block.
    pub fn loss_and_grad(&self, input: VideoInput<'_>, target: Target<'_>) -> Result<(f64, ModelParams)> {
        let fwd = self.forward(input)?;
        let logits = Self::target_logits(&fwd, input, target)?;
        let (loss, d_target) = cross_entropy(&logits, target.labels())?;
        let d_logits = match target {
            Target::Frames(_) => d_target,
            Target::Segments(_) => pool_segment_logits_backward(&d_target, input.segment_of),
        };
        let grads = self.backward(input, &fwd, &d_logits)?;
        Ok((loss, grads))
    }

    /// Gradients of all parameters given `∂L/∂logits`.
    pub fn backward(&self, input: VideoInput<'_>, fwd: &ForwardPass, d_logits: &Tensor2) -> Result<ModelParams> {
        let mut grads = self.zeroed();
        let f = &self.fusion;

        let head = linear_backward(&f.w_c, &fwd.mutual.z_ma, d_logits)?;
        grads.fusion.w_c.add_assign(&head.weight)?;
        ops::accumulate(grads.fusion.b_c.as_mut_slice(), &head.bias);

        let d_product = match (&f.mutual, &fwd.mutual.gate, &mut grads.fusion.mutual) {
            (Some(m), Some(g), Some(gm)) => {
                let gb = gate_backward(&m.w_m, &fwd.mutual.product, g, &head.input)?;
                gm.w_m.add_assign(&gb.weight)?;
                ops::accumulate(gm.b_m.as_mut_slice(), &gb.bias);
                gb.input
            }
            _ => head.input,
        };

        // H = z_ta ⊙ Z_as ⊙ Z_ast_frames
        let (m, d) = d_product.shape();
        let mut d_z_ta = vec![0.0; d];
        let mut d_z_as = Tensor2::zeros(m, d);
        let mut d_z_ast = Tensor2::zeros(fwd.z_ast.rows(), d);
        for i in 0..m {
            let s = input.segment_of[i];
            let (dh, a, st) = (d_product.row(i), fwd.z_as.row(i), fwd.z_ast_frames.row(i));
            for j in 0..d {
                d_z_ta[j] += dh[j] * a[j] * st[j];
                d_z_as[(i, j)] = dh[j] * fwd.z_ta[j] * st[j];
                d_z_ast[(s, j)] += dh[j] * fwd.z_ta[j] * a[j];
            }
        }

        let gs = gate_backward(&f.w_s, input.frames, &fwd.gate_s, &d_z_as)?;
        grads.fusion.w_s.add_assign(&gs.weight)?;
        ops::accumulate(grads.fusion.b_s.as_mut_slice(), &gs.bias);
        let gst = gate_backward(&f.w_st, input.segments, &fwd.gate_st, &d_z_ast)?;
        grads.fusion.w_st.add_assign(&gst.weight)?;
        ops::accumulate(grads.fusion.b_st.as_mut_slice(), &gst.bias);

        match (&fwd.query, &self.query, &mut grads.query) {
            (QueryForward::Null, _, _) => {
                ops::accumulate(grads.null_query.as_mut_slice(), &d_z_ta);
            }
            (QueryForward::Booster(bf), QueryEncoder::Booster(p), QueryEncoder::Booster(g)) => {
                booster_backward(p, bf, &d_z_ta, g)?;
            }
            (QueryForward::BagOfWords(c), QueryEncoder::BagOfWords(p), QueryEncoder::BagOfWords(g)) => {
                bow_backward(p, c, &d_z_ta, g)?;
            }
            _ => unreachable!("forward cache always matches the encoder variant"),
        }
        Ok(grads)
    }
}

impl Target<'_> {
    pub fn labels(&self) -> &[usize] {
        match self {
            Target::Frames(l) | Target::Segments(l) => l,
        }
    }
}

/// Model configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }
}
