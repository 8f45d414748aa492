//! The neural pipeline: conv backbone with pyramid fusion, ROI feature
//! extraction, multi-scale decoder inputs, the group-query primitive
//! segmenter with implicit query-position updates, the primitive predictor,
//! and the order decoder.

pub mod checkpoint;

use ndarray::{Array2, Array3, ArrayD};
use serde::{Deserialize, Serialize};

use crate::data::RoiSpec;
use crate::error::{Error, Result};
use crate::geom::{
    assemble_polygon, OrderedPrimitiveSet, PolygonRing, Primitive, PrimitiveKind,
};
use crate::nn::layers::{Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::nn::params::{xavier_init, zeros, ParamId, ParamStore};
use crate::nn::{pe, Tape, Var};
use crate::util::{rng_for, tag};

/// Stride of the backbone output feature map, in pixels.
pub const FEATURE_STRIDE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Primitive kind; fixes n, the points per primitive.
    pub kind: PrimitiveKind,
    /// Feature width C.
    pub channels: usize,
    /// Primitive queries per building, N.
    pub queries: usize,
    /// ROI-Align output size S (pixels of the instance feature grid).
    pub roi_size: usize,
    /// Number of decoder input scales (fixed at 3).
    pub scales: usize,
    pub decoder_blocks: usize,
    /// Cyclic order classes N_order.
    pub order_classes: usize,
    /// Self-attention layers in the order decoder, L.
    pub order_layers: usize,
    pub heads: usize,
    /// Foreground probability threshold for keeping primitives.
    pub score_threshold: f64,
    /// Internal width of the backbone convolutions.
    pub backbone_channels: usize,
    /// Ablation: give each point its own query position embedding instead of
    /// one shared embedding per primitive.
    pub per_point_query_pos: bool,
    /// Ablation: apply the implicit query-position update after each block.
    pub update_query_pos: bool,
    /// Ablation: feed [query, query position] to the coordinate MLP instead
    /// of the query alone.
    pub predict_with_query_pos: bool,
    /// Ablation: feed the full-resolution tokens to every decoder block.
    pub single_scale: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: PrimitiveKind::Corner,
            channels: 64,
            queries: 30,
            roi_size: 32,
            scales: 3,
            decoder_blocks: 3,
            order_classes: 36,
            order_layers: 3,
            heads: 4,
            score_threshold: 0.5,
            backbone_channels: 32,
            per_point_query_pos: false,
            update_query_pos: true,
            predict_with_query_pos: true,
            single_scale: false,
        }
    }
}

impl ModelConfig {
    pub fn points_per_primitive(&self) -> usize {
        self.kind.points_per_primitive()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales != 3 {
            return Err(Error::Shape("scale count is fixed at 3".into()));
        }
        if self.roi_size % (1 << self.scales) != 0 {
            return Err(Error::Shape(format!(
                "roi_size {} not divisible by 2^{}",
                self.roi_size, self.scales
            )));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::Shape("heads must divide channels".into()));
        }
        if self.channels % 4 != 0 {
            return Err(Error::Shape("channels must be divisible by 4".into()));
        }
        if self.queries == 0 || self.order_classes < 3 || self.decoder_blocks == 0 {
            return Err(Error::Shape("degenerate model configuration".into()));
        }
        Ok(())
    }

    /// Spatial sizes of the decoder inputs, smallest first (block order).
    pub fn decoder_scale_sizes(&self) -> Vec<usize> {
        let s = self.roi_size;
        if self.single_scale {
            vec![s; self.decoder_blocks]
        } else {
            (0..self.decoder_blocks)
                .map(|l| {
                    let idx = l.min(self.scales - 1);
                    s >> (self.scales - 1 - idx)
                })
                .collect()
        }
    }

    /// Token counts per decoder block.
    pub fn decoder_token_counts(&self) -> Vec<usize> {
        self.decoder_scale_sizes().iter().map(|s| s * s).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    fn new(
        store: &mut ParamStore,
        rng: &mut rand_chacha::ChaCha8Rng,
        name: &str,
        k: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            xavier_init(rng, &[k, k, c_in, c_out], k * k * c_in, k * k * c_out),
        );
        let b = store.add(&format!("{name}.b"), zeros(&[c_out]));
        Self { w, b, stride, pad: k / 2 }
    }

    fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
struct Backbone {
    stem1: ConvLayer,
    stem2: ConvLayer,
    hi: ConvLayer,
    mid: ConvLayer,
    lo: ConvLayer,
    fuse_mid: ConvLayer,
    out: ConvLayer,
}

#[derive(Debug, Clone, Copy)]
struct DecoderBlock {
    ln1: LayerNorm,
    ca: MultiHeadAttention,
    ln2: LayerNorm,
    sa: MultiHeadAttention,
    offset: FeedForward,
}

#[derive(Debug, Clone, Copy)]
struct OrderLayer {
    ln1: LayerNorm,
    sa: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct Predictor {
    mlp1: Linear,
    mlp2: Linear,
    mlp3: Linear,
    fuse: Linear,
    score: Linear,
}

/// The full model: parameters plus the wiring to run them on a tape.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    backbone: Backbone,
    down1: ConvLayer,
    down2: ConvLayer,
    query_feat: Embedding,
    query_pos: Embedding,
    blocks: Vec<DecoderBlock>,
    predictor: Predictor,
    order_layers: Vec<OrderLayer>,
    order_head: Linear,
    /// Fixed sine encodings per decoder scale size.
    pe_cache: Vec<(usize, Array2<f64>)>,
}

/// Everything the decoder produces for one ROI, as tape variables.
pub struct RoiForward {
    /// N x 2n coordinates in [0, 1].
    pub coords: Var,
    /// N x C fused primitive queries.
    pub q_prim: Var,
    /// N x 2 class logits (background, foreground).
    pub score_logits: Var,
    /// N x N_order.
    pub order_logits: Var,
    /// Final-block cross-attention probabilities, one (N*n x tokens) matrix
    /// per head.
    pub ca_probs: Vec<Var>,
}

/// Plain-array snapshot of a prediction for one ROI.
#[derive(Debug, Clone)]
pub struct PrimitivePrediction {
    pub coords: Array2<f64>,
    pub q_prim: Array2<f64>,
    pub score_logits: Array2<f64>,
    pub order_logits: Array2<f64>,
}

impl PrimitivePrediction {
    /// Foreground probability per query (2-way softmax).
    pub fn foreground_probs(&self) -> Vec<f64> {
        (0..self.score_logits.nrows())
            .map(|i| {
                let bg = self.score_logits[[i, 0]];
                let fg = self.score_logits[[i, 1]];
                let m = bg.max(fg);
                let eb = (bg - m).exp();
                let ef = (fg - m).exp();
                ef / (eb + ef)
            })
            .collect()
    }

    /// Argmax order class per query (first maximum on ties).
    pub fn predicted_orders(&self) -> Vec<usize> {
        (0..self.order_logits.nrows())
            .map(|i| {
                let row = self.order_logits.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// A polygon recovered from one ROI's prediction.
#[derive(Debug, Clone)]
pub struct InferredPolygon {
    pub ring: PolygonRing,
    /// Mean foreground probability of the surviving primitives.
    pub score: f64,
    pub orders: Vec<usize>,
    pub kept: usize,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, &[tag("model-init")]);
        let mut store = ParamStore::new();
        let c = cfg.channels;
        let cb = cfg.backbone_channels;
        let n = cfg.points_per_primitive();

        let backbone = Backbone {
            stem1: ConvLayer::new(&mut store, &mut rng, "backbone.stem1", 3, 1, cb, 2),
            stem2: ConvLayer::new(&mut store, &mut rng, "backbone.stem2", 3, cb, cb, 2),
            hi: ConvLayer::new(&mut store, &mut rng, "backbone.hi", 3, cb, cb, 1),
            mid: ConvLayer::new(&mut store, &mut rng, "backbone.mid", 3, cb, cb, 2),
            lo: ConvLayer::new(&mut store, &mut rng, "backbone.lo", 3, cb, cb, 2),
            fuse_mid: ConvLayer::new(&mut store, &mut rng, "backbone.fuse_mid", 3, cb, cb, 1),
            out: ConvLayer::new(&mut store, &mut rng, "backbone.out", 3, cb, c, 1),
        };
        let down1 = ConvLayer::new(&mut store, &mut rng, "decoder.down1", 3, c, c, 2);
        let down2 = ConvLayer::new(&mut store, &mut rng, "decoder.down2", 3, c, c, 2);

        let query_feat =
            Embedding::new(&mut store, &mut rng, "queries.feat", cfg.queries * n, c, 0.02);
        let pos_rows = if cfg.per_point_query_pos { cfg.queries * n } else { cfg.queries };
        let query_pos = Embedding::new(&mut store, &mut rng, "queries.pos", pos_rows, c, 0.02);

        let blocks = (0..cfg.decoder_blocks)
            .map(|l| {
                let base = format!("decoder.block{l}");
                DecoderBlock {
                    ln1: LayerNorm::new(&mut store, &format!("{base}.ln1"), c),
                    ca: MultiHeadAttention::new(
                        &mut store,
                        &mut rng,
                        &format!("{base}.ca"),
                        c,
                        cfg.heads,
                    ),
                    ln2: LayerNorm::new(&mut store, &format!("{base}.ln2"), c),
                    sa: MultiHeadAttention::new(
                        &mut store,
                        &mut rng,
                        &format!("{base}.sa"),
                        c,
                        cfg.heads,
                    ),
                    offset: FeedForward::new_zero_out(
                        &mut store,
                        &mut rng,
                        &format!("{base}.offset"),
                        c,
                        2 * c,
                    ),
                }
            })
            .collect();

        let pred_in = if cfg.predict_with_query_pos { 2 * c } else { c };
        let predictor = Predictor {
            mlp1: Linear::new(&mut store, &mut rng, "predictor.mlp1", pred_in, 2 * c),
            mlp2: Linear::new(&mut store, &mut rng, "predictor.mlp2", 2 * c, 2 * c),
            mlp3: Linear::new_scaled(&mut store, &mut rng, "predictor.mlp3", 2 * c, 2, 0.1),
            fuse: Linear::new(&mut store, &mut rng, "predictor.fuse", n * c, c),
            score: Linear::new_scaled(&mut store, &mut rng, "predictor.score", c, 2, 0.1),
        };

        let order_layers = (0..cfg.order_layers)
            .map(|l| {
                let base = format!("order.layer{l}");
                OrderLayer {
                    ln1: LayerNorm::new(&mut store, &format!("{base}.ln1"), c),
                    sa: MultiHeadAttention::new(
                        &mut store,
                        &mut rng,
                        &format!("{base}.sa"),
                        c,
                        cfg.heads,
                    ),
                    ln2: LayerNorm::new(&mut store, &format!("{base}.ln2"), c),
                    ffn: FeedForward::new(&mut store, &mut rng, &format!("{base}.ffn"), c, 2 * c),
                }
            })
            .collect();
        let order_head =
            Linear::new_scaled(&mut store, &mut rng, "order.head", c, cfg.order_classes, 0.1);

        let mut pe_cache: Vec<(usize, Array2<f64>)> = Vec::new();
        for s in cfg.decoder_scale_sizes() {
            if !pe_cache.iter().any(|(sz, _)| *sz == s) {
                pe_cache.push((s, pe::sine_grid(s, c)));
            }
        }

        Ok(Self {
            cfg,
            params: store,
            backbone,
            down1,
            down2,
            query_feat,
            query_pos,
            blocks,
            predictor,
            order_layers,
            order_head,
            pe_cache,
        })
    }

    fn pe_for(&self, size: usize) -> &Array2<f64> {
        &self
            .pe_cache
            .iter()
            .find(|(s, _)| *s == size)
            .expect("positional encoding cached for every decoder scale")
            .1
    }

    /// Run the backbone on a [0,1] grayscale image; returns the stride-4
    /// feature map variable of shape (ceil16(H)/4, ceil16(W)/4, C).
    pub fn backbone_on_tape(&self, tape: &mut Tape, image: &Array2<f64>) -> Result<Var> {
        let (h, w) = image.dim();
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!("image {h}x{w} not divisible by 4")));
        }
        // The fusion pyramid needs two extra halvings; pad up to it.
        let ph = h.next_multiple_of(16);
        let pw = w.next_multiple_of(16);
        let mut arr = Array3::<f64>::zeros((ph, pw, 1));
        for y in 0..h {
            for x in 0..w {
                arr[[y, x, 0]] = image[[y, x]];
            }
        }
        let x = tape.constant(arr.into_dyn());
        let s1 = self.backbone.stem1.apply(tape, x);
        let s1 = tape.gelu(s1);
        let s2 = self.backbone.stem2.apply(tape, s1);
        let s2 = tape.gelu(s2);
        let hi = self.backbone.hi.apply(tape, s2);
        let hi = tape.gelu(hi);
        let mid = self.backbone.mid.apply(tape, hi);
        let mid = tape.gelu(mid);
        let lo = self.backbone.lo.apply(tape, mid);
        let lo = tape.gelu(lo);
        let lo_up = tape.upsample2x(lo);
        let mid_sum = tape.add(mid, lo_up);
        let mid2 = self.backbone.fuse_mid.apply(tape, mid_sum);
        let mid2 = tape.gelu(mid2);
        let mid_up = tape.upsample2x(mid2);
        let hi_sum = tape.add(hi, mid_up);
        Ok(self.backbone.out.apply(tape, hi_sum))
    }

    /// Bilinear sample grid (feature index space) for an ROI, row-major.
    fn roi_grid(&self, roi: &RoiSpec) -> Vec<(f64, f64)> {
        let s = self.cfg.roi_size;
        let stride = FEATURE_STRIDE as f64;
        let bw = roi.bbox.width() / s as f64;
        let bh = roi.bbox.height() / s as f64;
        let mut grid = Vec::with_capacity(s * s);
        for i in 0..s {
            let py = roi.bbox.y0 + (i as f64 + 0.5) * bh;
            let fy = py / stride - 0.5;
            for j in 0..s {
                let px = roi.bbox.x0 + (j as f64 + 0.5) * bw;
                let fx = px / stride - 0.5;
                grid.push((fy, fx));
            }
        }
        grid
    }

    /// Crop an ROI from the feature map: S x S bilinear samples.
    pub fn roi_extract(&self, tape: &mut Tape, feature: Var, roi: &RoiSpec) -> Result<Var> {
        let dims = tape.value(feature).shape().to_vec();
        let (fh, fw) = (dims[0], dims[1]);
        let extent_x = (fw * FEATURE_STRIDE) as f64;
        let extent_y = (fh * FEATURE_STRIDE) as f64;
        if roi.bbox.x1 <= 0.0
            || roi.bbox.y1 <= 0.0
            || roi.bbox.x0 >= extent_x
            || roi.bbox.y0 >= extent_y
            || roi.bbox.area() <= 0.0
        {
            return Err(Error::DegenerateBox(format!(
                "ROI {:?} outside feature extent {extent_x}x{extent_y}",
                roi.bbox
            )));
        }
        Ok(tape.roi_align(feature, self.roi_grid(roi), self.cfg.roi_size))
    }

    /// Multi-scale token sequences (with their positional encodings), one per
    /// decoder block, smallest scale first.
    pub fn build_decoder_inputs(&self, tape: &mut Tape, instance: Var) -> Vec<(Var, Var)> {
        let c = self.cfg.channels;
        let s = self.cfg.roi_size;
        let d1 = self.down1.apply(tape, instance);
        let d1 = tape.gelu(d1);
        let d2 = self.down2.apply(tape, d1);
        let d2 = tape.gelu(d2);
        let flat = |tape: &mut Tape, v: Var, side: usize| tape.reshape(v, &[side * side, c]);
        let t_small = flat(tape, d2, s / 4);
        let t_mid = flat(tape, d1, s / 2);
        let t_big = flat(tape, instance, s);
        let by_size = move |size: usize| {
            if size == s {
                t_big
            } else if size == s / 2 {
                t_mid
            } else {
                t_small
            }
        };
        self.cfg
            .decoder_scale_sizes()
            .into_iter()
            .map(|size| {
                let tokens = by_size(size);
                let pe_const = tape.constant2(self.pe_for(size).clone());
                (tokens, pe_const)
            })
            .collect()
    }

    /// Initial query state: (Q, expanded Q_pos), both (N*n) x C.
    pub fn init_queries(&self, tape: &mut Tape) -> (Var, Var) {
        let n = self.cfg.points_per_primitive();
        let q = self.query_feat.apply(tape);
        let pos = self.query_pos.apply(tape);
        let q_pos = if self.cfg.per_point_query_pos { pos } else { tape.repeat_rows(pos, n) };
        (q, q_pos)
    }

    /// Plain-array snapshot of the initial query state.
    pub fn init_query_state(&self) -> (Array2<f64>, Array2<f64>) {
        let mut tape = Tape::new(&self.params);
        let (q, q_pos) = self.init_queries(&mut tape);
        (tape.value2(q).to_owned(), tape.value2(q_pos).to_owned())
    }

    /// One primitive decoder block. Returns the updated state and the
    /// cross-attention probabilities per head.
    pub fn decoder_block(
        &self,
        tape: &mut Tape,
        block: usize,
        q: Var,
        q_pos: Var,
        tokens: Var,
        token_pe: Var,
    ) -> (Var, Var, Vec<Var>) {
        let blk = &self.blocks[block];
        // Cross attention: query = norm(Q) + Q_pos, keys carry encodings,
        // values do not.
        let qn = blk.ln1.apply(tape, q);
        let q_attn = tape.add(qn, q_pos);
        let keys = tape.add(tokens, token_pe);
        let (ca_out, ca_probs) = blk.ca.apply(tape, q_attn, keys, tokens);
        let q1 = tape.add(q, ca_out);
        // Self attention among query rows.
        let q1n = blk.ln2.apply(tape, q1);
        let qk = tape.add(q1n, q_pos);
        let (sa_out, _) = blk.sa.apply(tape, qk, qk, q1n);
        let q2 = tape.add(q1, sa_out);
        // Implicit query-position update.
        let q_pos_next = if self.cfg.update_query_pos {
            let off = blk.offset.apply(tape, q2);
            tape.add(q_pos, off)
        } else {
            q_pos
        };
        (q2, q_pos_next, ca_probs)
    }

    /// Coordinate/score heads on the final query state.
    pub fn primitive_predictor(&self, tape: &mut Tape, q: Var, q_pos: Var) -> (Var, Var, Var) {
        let cfg = &self.cfg;
        let n = cfg.points_per_primitive();
        let input = if cfg.predict_with_query_pos {
            tape.concat_cols(&[q, q_pos])
        } else {
            q
        };
        let h = self.predictor.mlp1.apply(tape, input);
        let h = tape.gelu(h);
        let h = self.predictor.mlp2.apply(tape, h);
        let h = tape.gelu(h);
        let raw = self.predictor.mlp3.apply(tape, h); // (N*n, 2)
        let squashed = tape.sigmoid(raw);
        let coords = tape.reshape(squashed, &[cfg.queries, 2 * n]);
        let q_grouped = tape.reshape(q, &[cfg.queries, n * cfg.channels]);
        let q_prim = self.predictor.fuse.apply(tape, q_grouped);
        let score = self.predictor.score.apply(tape, q_prim);
        (coords, q_prim, score)
    }

    /// Order classification over the fused primitive queries. No positional
    /// encodings: order must be inferred from content.
    pub fn order_decoder(&self, tape: &mut Tape, q_prim: Var) -> Var {
        let mut x = q_prim;
        for layer in &self.order_layers {
            let h = layer.ln1.apply(tape, x);
            let (a, _) = layer.sa.apply(tape, h, h, h);
            x = tape.add(x, a);
            let h2 = layer.ln2.apply(tape, x);
            let f = layer.ffn.apply(tape, h2);
            x = tape.add(x, f);
        }
        self.order_head.apply(tape, x)
    }

    /// Decode one ROI from the shared feature map.
    pub fn decode_roi(&self, tape: &mut Tape, feature: Var, roi: &RoiSpec) -> Result<RoiForward> {
        self.decode_roi_full(tape, feature, roi, false).map(|(f, _)| f)
    }

    /// Decode one ROI; with `with_aux` the heads also run on every
    /// intermediate block state (experimental auxiliary supervision).
    pub fn decode_roi_full(
        &self,
        tape: &mut Tape,
        feature: Var,
        roi: &RoiSpec,
        with_aux: bool,
    ) -> Result<(RoiForward, Vec<RoiForward>)> {
        let instance = self.roi_extract(tape, feature, roi)?;
        let inputs = self.build_decoder_inputs(tape, instance);
        let (mut q, mut q_pos) = self.init_queries(tape);
        let mut ca_probs = Vec::new();
        let mut aux = Vec::new();
        for (l, (tokens, pe_c)) in inputs.iter().enumerate() {
            let (q2, p2, probs) = self.decoder_block(tape, l, q, q_pos, *tokens, *pe_c);
            q = q2;
            q_pos = p2;
            ca_probs = probs;
            if with_aux && l + 1 < inputs.len() {
                let (coords, q_prim, score_logits) = self.primitive_predictor(tape, q, q_pos);
                let order_logits = self.order_decoder(tape, q_prim);
                aux.push(RoiForward {
                    coords,
                    q_prim,
                    score_logits,
                    order_logits,
                    ca_probs: Vec::new(),
                });
            }
        }
        let (coords, q_prim, score_logits) = self.primitive_predictor(tape, q, q_pos);
        let order_logits = self.order_decoder(tape, q_prim);
        Ok((RoiForward { coords, q_prim, score_logits, order_logits, ca_probs }, aux))
    }

    /// Full forward for one image and its ROIs; plain-array outputs.
    pub fn forward(&self, image: &Array2<f64>, rois: &[RoiSpec]) -> Result<Vec<PrimitivePrediction>> {
        if rois.is_empty() {
            return Err(Error::Input("forward needs at least one ROI".into()));
        }
        let mut tape = Tape::new(&self.params);
        let feature = self.backbone_on_tape(&mut tape, image)?;
        let mut out = Vec::with_capacity(rois.len());
        for roi in rois {
            let f = self.decode_roi(&mut tape, feature, roi)?;
            out.push(self.snapshot(&tape, &f));
        }
        Ok(out)
    }

    /// Forward plus the final-block cross-attention maps averaged over heads
    /// (one row per query point, one column per token of the final scale).
    pub fn forward_with_attention(
        &self,
        image: &Array2<f64>,
        roi: &RoiSpec,
    ) -> Result<(PrimitivePrediction, Array2<f64>)> {
        let mut tape = Tape::new(&self.params);
        let feature = self.backbone_on_tape(&mut tape, image)?;
        let f = self.decode_roi(&mut tape, feature, roi)?;
        let pred = self.snapshot(&tape, &f);
        let mut avg: Option<Array2<f64>> = None;
        for p in &f.ca_probs {
            let v = tape.value2(*p).to_owned();
            avg = Some(match avg {
                None => v,
                Some(acc) => acc + v,
            });
        }
        let mut attn = avg.expect("at least one attention head");
        attn /= f.ca_probs.len() as f64;
        Ok((pred, attn))
    }

    pub fn snapshot(&self, tape: &Tape, f: &RoiForward) -> PrimitivePrediction {
        PrimitivePrediction {
            coords: tape.value2(f.coords).to_owned(),
            q_prim: tape.value2(f.q_prim).to_owned(),
            score_logits: tape.value2(f.score_logits).to_owned(),
            order_logits: tape.value2(f.order_logits).to_owned(),
        }
    }

    /// Threshold, map back to pixels, and assemble a polygon.
    ///
    /// Fewer than 3 surviving primitives (or degenerate assembly) is a
    /// rejection, surfaced as an error for the caller to count.
    pub fn infer_polygons(
        &self,
        pred: &PrimitivePrediction,
        roi: &RoiSpec,
    ) -> Result<InferredPolygon> {
        let kind = self.cfg.kind;
        let n = self.cfg.points_per_primitive();
        let probs = pred.foreground_probs();
        let orders_all = pred.predicted_orders();
        let mut prims = Vec::new();
        let mut orders = Vec::new();
        let mut scores = Vec::new();
        for i in 0..self.cfg.queries {
            if probs[i] < self.cfg.score_threshold {
                continue;
            }
            let mut points = Vec::with_capacity(n);
            for j in 0..n {
                points.push(crate::data::denormalize_point(
                    roi,
                    pred.coords[[i, 2 * j]],
                    pred.coords[[i, 2 * j + 1]],
                ));
            }
            prims.push(Primitive::from_points(kind, &points)?);
            orders.push(orders_all[i]);
            scores.push(probs[i]);
        }
        if prims.len() < 3 {
            return Err(Error::InsufficientPrimitives(prims.len()));
        }
        let kept = prims.len();
        let score = scores.iter().sum::<f64>() / kept as f64;
        let set = OrderedPrimitiveSet::with_scores(prims, orders.clone(), scores)?;
        let ring = assemble_polygon(&set, kind)?;
        Ok(InferredPolygon { ring, score, orders, kept })
    }

    /// Convenience wrapper computing losses needs tape access; expose the
    /// parameter gradient layout.
    pub fn zero_grads(&self) -> Vec<Option<ArrayD<f64>>> {
        self.params.zero_grads()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BBox;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            channels: 8,
            queries: 4,
            roi_size: 8,
            backbone_channels: 8,
            ..Default::default()
        }
    }

    #[test]
    fn default_shapes_match_contract() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.decoder_token_counts(), vec![64, 256, 1024]);
        assert_eq!(cfg.points_per_primitive(), 3);
        let single = ModelConfig { single_scale: true, ..Default::default() };
        assert_eq!(single.decoder_token_counts(), vec![1024, 1024, 1024]);
        let s16 = ModelConfig { roi_size: 16, ..Default::default() };
        assert_eq!(s16.decoder_token_counts(), vec![16, 64, 256]);
    }

    #[test]
    fn query_state_group_structure() {
        let model = Model::new(ModelConfig::default(), 7).unwrap();
        let (q, q_pos) = model.init_query_state();
        assert_eq!(q.dim(), (90, 64));
        assert_eq!(q_pos.dim(), (90, 64));
        for i in 0..30 {
            for k in 1..3 {
                assert_eq!(q_pos.row(3 * i), q_pos.row(3 * i + k));
            }
        }
        let vertex = Model::new(
            ModelConfig { kind: PrimitiveKind::Vertex, ..Default::default() },
            7,
        )
        .unwrap();
        let (qv, qpv) = vertex.init_query_state();
        assert_eq!(qv.dim(), (30, 64));
        assert_eq!(qpv.dim(), (30, 64));
    }

    #[test]
    fn different_seeds_give_different_queries() {
        let a = Model::new(tiny_cfg(), 1).unwrap();
        let b = Model::new(tiny_cfg(), 2).unwrap();
        let (qa, _) = a.init_query_state();
        let (qb, _) = b.init_query_state();
        assert_ne!(qa, qb);
    }

    #[test]
    fn backbone_output_shape_and_determinism() {
        let model = Model::new(tiny_cfg(), 3).unwrap();
        let image = Array2::from_shape_fn((32, 32), |(y, x)| ((y * 31 + x * 7) % 97) as f64 / 97.0);
        let mut t1 = Tape::new(&model.params);
        let f1 = model.backbone_on_tape(&mut t1, &image).unwrap();
        assert_eq!(t1.value(f1).shape(), &[8, 8, 8]);
        let mut t2 = Tape::new(&model.params);
        let f2 = model.backbone_on_tape(&mut t2, &image).unwrap();
        assert_eq!(t1.value(f1), t2.value(f2));

        let odd = Array2::<f64>::zeros((30, 32));
        let mut t3 = Tape::new(&model.params);
        assert!(model.backbone_on_tape(&mut t3, &odd).is_err());
    }

    #[test]
    fn zero_image_zero_final_layer_gives_zero_map() {
        let mut model = Model::new(tiny_cfg(), 3).unwrap();
        let out_w = model.backbone.out.w;
        model.params.value_mut(out_w).fill(0.0);
        let image = Array2::<f64>::zeros((32, 32));
        let mut tape = Tape::new(&model.params);
        let f = model.backbone_on_tape(&mut tape, &image).unwrap();
        assert!(tape.value(f).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_duplicated_roi_gives_identical_predictions() {
        let model = Model::new(tiny_cfg(), 5).unwrap();
        let image = Array2::from_shape_fn((32, 32), |(y, x)| ((y + x) % 11) as f64 / 11.0);
        let roi = RoiSpec { bbox: BBox::new(4.0, 4.0, 24.0, 24.0), expansion: 1.1 };
        let preds = model.forward(&image, &[roi, roi]).unwrap();
        assert_eq!(preds.len(), 2);
        assert_eq!(preds[0].coords, preds[1].coords);
        assert_eq!(preds[0].order_logits, preds[1].order_logits);
    }

    #[test]
    fn predictor_coords_match_line_width() {
        let cfg = ModelConfig { kind: PrimitiveKind::Line, ..tiny_cfg() };
        let model = Model::new(cfg, 5).unwrap();
        let image = Array2::from_shape_fn((32, 32), |(y, x)| ((y * x) % 13) as f64 / 13.0);
        let roi = RoiSpec { bbox: BBox::new(2.0, 2.0, 30.0, 30.0), expansion: 1.0 };
        let preds = model.forward(&image, &[roi]).unwrap();
        assert_eq!(preds[0].coords.dim(), (4, 4));
        assert!(preds[0].coords.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn roi_outside_feature_extent_is_rejected() {
        let model = Model::new(tiny_cfg(), 5).unwrap();
        let image = Array2::<f64>::zeros((32, 32));
        let roi = RoiSpec { bbox: BBox::new(40.0, 40.0, 50.0, 50.0), expansion: 1.0 };
        assert!(model.forward(&image, &[roi]).is_err());
    }
}
