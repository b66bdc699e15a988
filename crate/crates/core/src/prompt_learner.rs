//! Prompt embeddings derived from an anomaly map, and the prompt record
//! handed to an external language model.
//!
//! `E_prompt` stacks `n1` learned base rows over `n2` rows produced from the
//! map by two 4x4/stride-4 convolutions (224 -> 56 -> 14, ReLU after each)
//! and a linear head that mixes the 14x14 positions into `n2` tokens.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::INPUT_SIZE;
use crate::math::Grid2D;
use crate::prompts::CategoryDescription;

const KERNEL: usize = 4;
const MID: usize = INPUT_SIZE / KERNEL;
const TOKENS_SIDE: usize = MID / KERNEL;

pub const DEFAULT_QUESTION: &str = "Is there any anomaly in the image?";
pub const IMG_PLACEHOLDER: &str = "<IMG_EMB>";
pub const PROMPT_PLACEHOLDER: &str = "<PROMPT_EMB>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptLearnerConfig {
    pub n1: usize,
    pub n2: usize,
    pub emb_dim: usize,
    /// Channels after the first convolution.
    pub hidden_channels: usize,
    pub seed: u64,
}

impl Default for PromptLearnerConfig {
    fn default() -> Self {
        Self {
            n1: 4,
            n2: 16,
            emb_dim: 4096,
            hidden_channels: 8,
            seed: 0,
        }
    }
}

impl PromptLearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n1 == 0 || self.n2 == 0 || self.hidden_channels == 0 {
            return Err(Error::Config("n1, n2 and hidden_channels must be at least 1".into()));
        }
        if self.emb_dim < 8 {
            return Err(Error::Config(format!("emb_dim must be at least 8, got {}", self.emb_dim)));
        }
        Ok(())
    }
}

/// Row-major dense matrix of embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Embeddings {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptLearnerParams {
    pub n1: usize,
    pub n2: usize,
    pub emb_dim: usize,
    pub hidden_channels: usize,
    /// `n1 x emb_dim`.
    pub base: Vec<f64>,
    /// `hidden x 16` (single input channel).
    pub conv1_weight: Vec<f64>,
    pub conv1_bias: Vec<f64>,
    /// `emb_dim x (hidden * 16)`.
    pub conv2_weight: Vec<f64>,
    pub conv2_bias: Vec<f64>,
    /// `n2 x 196`, mixing spatial positions into tokens.
    pub head_weight: Vec<f64>,
    /// `emb_dim`, shared by every token row.
    pub head_bias: Vec<f64>,
}

impl PromptLearnerParams {
    pub fn zeros(cfg: &PromptLearnerConfig) -> Result<Self> {
        cfg.validate()?;
        let k2 = KERNEL * KERNEL;
        Ok(Self {
            n1: cfg.n1,
            n2: cfg.n2,
            emb_dim: cfg.emb_dim,
            hidden_channels: cfg.hidden_channels,
            base: vec![0.0; cfg.n1 * cfg.emb_dim],
            conv1_weight: vec![0.0; cfg.hidden_channels * k2],
            conv1_bias: vec![0.0; cfg.hidden_channels],
            conv2_weight: vec![0.0; cfg.emb_dim * cfg.hidden_channels * k2],
            conv2_bias: vec![0.0; cfg.emb_dim],
            head_weight: vec![0.0; cfg.n2 * TOKENS_SIDE * TOKENS_SIDE],
            head_bias: vec![0.0; cfg.emb_dim],
        })
    }

    /// Seeded random initialization: weights `N(0, 1/fan_in)`, base rows
    /// `N(0, 0.02^2)`, zero biases.
    pub fn init(cfg: &PromptLearnerConfig) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut fill = |v: &mut [f64], std: f64| {
            let d = Normal::new(0.0, std).expect("valid std");
            v.iter_mut().for_each(|x| *x = d.sample(&mut rng));
        };
        let k2 = (KERNEL * KERNEL) as f64;
        fill(&mut p.base, 0.02);
        fill(&mut p.conv1_weight, (1.0 / k2).sqrt());
        fill(&mut p.conv2_weight, (1.0 / (k2 * cfg.hidden_channels as f64)).sqrt());
        fill(&mut p.head_weight, (1.0 / (TOKENS_SIDE * TOKENS_SIDE) as f64).sqrt());
        Ok(p)
    }

    pub fn rows(&self) -> usize {
        self.n1 + self.n2
    }
}

/// `W^T f + b` with `W` row-major `in_dim x out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageProjection {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ImageProjection {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::mismatch(
                "image projection shape",
                format!("{in_dim}x{out_dim}"),
                format!("{} weights, {} biases", weight.len(), bias.len()),
            ));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    pub fn init(in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, (1.0 / in_dim.max(1) as f64).sqrt()).expect("valid std");
        let weight = (0..in_dim * out_dim).map(|_| d.sample(&mut rng)).collect();
        Self::new(in_dim, out_dim, weight, vec![0.0; out_dim])
    }
}

pub fn image_embed(final_feature: &[f32], linear: &ImageProjection) -> Result<Vec<f64>> {
    if final_feature.len() != linear.in_dim {
        return Err(Error::mismatch("final feature dim", linear.in_dim, final_feature.len()));
    }
    let mut out = linear.bias.clone();
    for (k, &f) in final_feature.iter().enumerate() {
        let row = &linear.weight[k * linear.out_dim..(k + 1) * linear.out_dim];
        for (o, w) in out.iter_mut().zip(row) {
            *o += f as f64 * w;
        }
    }
    Ok(out)
}

/// `E_prompt = [E_base; E_dec]`, `(n1 + n2) x emb_dim`.
pub fn prompt_forward(map: &Grid2D, params: &PromptLearnerParams) -> Result<Embeddings> {
    if map.dims() != (INPUT_SIZE, INPUT_SIZE) {
        return Err(Error::mismatch(
            "anomaly map dims",
            format!("{INPUT_SIZE}x{INPUT_SIZE}"),
            format!("{}x{}", map.height(), map.width()),
        ));
    }
    let hid = params.hidden_channels;
    let emb = params.emb_dim;
    let k2 = KERNEL * KERNEL;
    let m = map.values();

    // conv1: 1 -> hid channels, 224 -> 56; stored position-major
    let mut a1 = vec![0.0; MID * MID * hid];
    let mut patch = [0.0; KERNEL * KERNEL];
    for r in 0..MID {
        for c in 0..MID {
            for dr in 0..KERNEL {
                for dc in 0..KERNEL {
                    patch[dr * KERNEL + dc] = m[(r * KERNEL + dr) * INPUT_SIZE + c * KERNEL + dc];
                }
            }
            let out = &mut a1[(r * MID + c) * hid..(r * MID + c + 1) * hid];
            for (h, o) in out.iter_mut().enumerate() {
                let w = &params.conv1_weight[h * k2..(h + 1) * k2];
                let v = params.conv1_bias[h] + w.iter().zip(&patch).map(|(a, b)| a * b).sum::<f64>();
                *o = v.max(0.0);
            }
        }
    }

    // conv2: hid -> emb channels, 56 -> 14
    let fan = hid * k2;
    let positions = TOKENS_SIDE * TOKENS_SIDE;
    let mut a2 = vec![0.0; positions * emb];
    let mut window = vec![0.0; fan];
    for r in 0..TOKENS_SIDE {
        for c in 0..TOKENS_SIDE {
            // window layout: (h, dr, dc)
            for dr in 0..KERNEL {
                for dc in 0..KERNEL {
                    let src = ((r * KERNEL + dr) * MID + c * KERNEL + dc) * hid;
                    for h in 0..hid {
                        window[h * k2 + dr * KERNEL + dc] = a1[src + h];
                    }
                }
            }
            let out = &mut a2[(r * TOKENS_SIDE + c) * emb..(r * TOKENS_SIDE + c + 1) * emb];
            for (e, o) in out.iter_mut().enumerate() {
                let w = &params.conv2_weight[e * fan..(e + 1) * fan];
                let v = params.conv2_bias[e] + w.iter().zip(&window).map(|(a, b)| a * b).sum::<f64>();
                *o = v.max(0.0);
            }
        }
    }

    let rows = params.rows();
    let mut data = Vec::with_capacity(rows * emb);
    data.extend_from_slice(&params.base);
    for j in 0..params.n2 {
        let mut row = params.head_bias.clone();
        let w = &params.head_weight[j * positions..(j + 1) * positions];
        for (s, &ws) in w.iter().enumerate() {
            if ws == 0.0 {
                continue;
            }
            for (o, x) in row.iter_mut().zip(&a2[s * emb..(s + 1) * emb]) {
                *o += ws * x;
            }
        }
        data.extend_from_slice(&row);
    }
    Ok(Embeddings {
        rows,
        cols: emb,
        data,
    })
}

/// Prompt text with embeddings carried alongside as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptRecord {
    pub text: String,
    pub image_embedding: Vec<f32>,
    pub prompt_rows: usize,
    pub prompt_embeddings: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncodedMatrix {
    rows: usize,
    cols: usize,
    dtype: String,
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncodedRecord {
    text: String,
    image_embedding: EncodedMatrix,
    prompt_embeddings: EncodedMatrix,
}

fn encode(rows: usize, cols: usize, vals: &[f32]) -> EncodedMatrix {
    let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
    EncodedMatrix {
        rows,
        cols,
        dtype: "f32le".into(),
        data: B64.encode(bytes),
    }
}

fn decode(m: &EncodedMatrix, what: &str) -> Result<Vec<f32>> {
    if m.dtype != "f32le" {
        return Err(Error::Config(format!("{what}: unsupported dtype {}", m.dtype)));
    }
    let bytes = B64
        .decode(&m.data)
        .map_err(|e| Error::Config(format!("{what}: bad base64: {e}")))?;
    if bytes.len() != 4 * m.rows * m.cols {
        return Err(Error::mismatch(what, 4 * m.rows * m.cols, bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

impl PromptRecord {
    pub fn emb_dim(&self) -> usize {
        self.image_embedding.len()
    }

    pub fn to_json(&self) -> Result<String> {
        let enc = EncodedRecord {
            text: self.text.clone(),
            image_embedding: encode(1, self.emb_dim(), &self.image_embedding),
            prompt_embeddings: encode(self.prompt_rows, self.emb_dim(), &self.prompt_embeddings),
        };
        Ok(serde_json::to_string(&enc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let enc: EncodedRecord = serde_json::from_str(s)?;
        if enc.image_embedding.rows != 1 || enc.image_embedding.cols != enc.prompt_embeddings.cols {
            return Err(Error::mismatch(
                "prompt record embedding width",
                enc.image_embedding.cols,
                enc.prompt_embeddings.cols,
            ));
        }
        Ok(Self {
            text: enc.text,
            image_embedding: decode(&enc.image_embedding, "image_embedding")?,
            prompt_rows: enc.prompt_embeddings.rows,
            prompt_embeddings: decode(&enc.prompt_embeddings, "prompt_embeddings")?,
        })
    }
}

/// `### Human: <Img><IMG_EMB></Img><PROMPT_EMB>[description ]question###Assistant:`
pub fn prompt_text(description: Option<&CategoryDescription>, question: &str) -> String {
    let mut s = format!("### Human: <Img>{IMG_PLACEHOLDER}</Img>{PROMPT_PLACEHOLDER}");
    if let Some(d) = description {
        s.push_str(&d.description);
        s.push(' ');
    }
    s.push_str(question);
    s.push_str("###Assistant:");
    s
}

pub fn assemble_prompt_record(
    image_embedding: &[f64],
    prompt: &Embeddings,
    description: Option<&CategoryDescription>,
    question: &str,
) -> Result<PromptRecord> {
    if question.trim().is_empty() {
        return Err(Error::Config("question must not be empty".into()));
    }
    if image_embedding.len() != prompt.cols {
        return Err(Error::mismatch("image embedding dim", prompt.cols, image_embedding.len()));
    }
    Ok(PromptRecord {
        text: prompt_text(description, question),
        image_embedding: image_embedding.iter().map(|&v| v as f32).collect(),
        prompt_rows: prompt.rows,
        prompt_embeddings: prompt.data.iter().map(|&v| v as f32).collect(),
    })
}
