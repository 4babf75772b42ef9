//! Closed-vocabulary prompt grammar and the toy text encoder.
//!
//! Prompts describe one scene as a list of subject clauses plus an
//! optional background, e.g. `"a S1* circle spin, and a S2* square bounce
//! on grass"`. A clause names an optional identity token (`S1*`..`S8*`),
//! a shape category, and an optional action. Composite prompts split into
//! one single-clause prompt per subject (plus a background-only prompt),
//! which is what routes conditioning to regions during generation.
//!
//! The encoder is a 2-layer transformer over learned token and position
//! embeddings, 64 wide, 16 tokens long, with a separate learned sequence
//! that stands in for the absent prompt in classifier-free guidance.

use crate::error::{Error, Result};
use crate::lora::Linear;
use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor};
use serde::{Deserialize, Serialize};

/// Embedding width of the text encoder.
pub const D_TEXT: usize = 64;
/// Fixed token sequence length; prompts that tokenize longer are rejected.
pub const TEXT_LEN: usize = 16;
/// Number of reserved identity tokens S1*..S8*.
pub const RARE_COUNT: u8 = 8;

const MLP_HIDDEN: usize = 4 * D_TEXT;
const LN_EPS: f32 = 1e-5;
const MASK_BIAS: f32 = -1e4;

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $($variant,)+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant,)+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text,)+
                }
            }

            pub fn parse(s: &str) -> Option<$name> {
                match s {
                    $($text => Some($name::$variant),)+
                    _ => None,
                }
            }

            /// Stable index within [`Self::ALL`].
            pub fn index(self) -> usize {
                Self::ALL.iter().position(|&v| v == self).unwrap()
            }
        }
    };
}

word_enum!(ShapeWord {
    Circle => "circle",
    Square => "square",
    Triangle => "triangle",
    Star => "star",
});

word_enum!(ActionWord {
    SlideRight => "slide-right",
    Bounce => "bounce",
    Spin => "spin",
    Grow => "grow",
    Still => "still",
    SlideLeft => "slide-left",
});

word_enum!(BackgroundWord {
    Grass => "grass",
    Beach => "beach",
    Sky => "sky",
    Plain => "plain",
});

/// Identity token `S1*`..`S8*` binding a clause to a learned subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RareId(u8);

impl RareId {
    pub fn new(n: u8) -> Result<RareId> {
        if n == 0 || n > RARE_COUNT {
            return Err(Error::Vocab(format!(
                "identity token number {n} outside 1..={RARE_COUNT}"
            )));
        }
        Ok(RareId(n))
    }

    pub fn number(self) -> u8 {
        self.0
    }

    pub fn as_string(self) -> String {
        format!("S{}*", self.0)
    }

    pub fn parse(s: &str) -> Option<RareId> {
        let inner = s.strip_prefix('S')?.strip_suffix('*')?;
        let n: u8 = inner.parse().ok()?;
        RareId::new(n).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubjectClause {
    pub identity: Option<RareId>,
    pub shape: ShapeWord,
    pub action: Option<ActionWord>,
}

/// Parsed prompt: ordered subject clauses and an optional background.
/// Clause order is meaningful; it matches left-to-right region order
/// during region-routed generation. A prompt may be background-only
/// (no clauses), which is how the background region of a split composite
/// prompt is conditioned.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptAst {
    pub clauses: Vec<SubjectClause>,
    pub background: Option<BackgroundWord>,
}

impl PromptAst {
    pub fn validate(&self) -> Result<()> {
        if self.clauses.is_empty() && self.background.is_none() {
            return Err(Error::Parse("prompt has no clauses and no background".into()));
        }
        let mut seen = [false; RARE_COUNT as usize];
        for c in &self.clauses {
            if let Some(id) = c.identity {
                let i = (id.number() - 1) as usize;
                if seen[i] {
                    return Err(Error::Parse(format!(
                        "identity token {} appears twice",
                        id.as_string()
                    )));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }

    /// Canonical text form; [`parse_prompt`] inverts this exactly.
    pub fn render(&self) -> String {
        let mut parts = Vec::with_capacity(self.clauses.len());
        for c in &self.clauses {
            let mut words = vec!["a".to_string()];
            if let Some(id) = c.identity {
                words.push(id.as_string());
            }
            words.push(c.shape.as_str().to_string());
            if let Some(a) = c.action {
                words.push(a.as_str().to_string());
            }
            parts.push(words.join(" "));
        }
        let mut out = parts.join(", and ");
        if let Some(bg) = self.background {
            if out.is_empty() {
                out = format!("on {}", bg.as_str());
            } else {
                out = format!("{out} on {}", bg.as_str());
            }
        }
        out
    }

    pub fn single(clause: SubjectClause) -> PromptAst {
        PromptAst {
            clauses: vec![clause],
            background: None,
        }
    }

    pub fn background_only(bg: BackgroundWord) -> PromptAst {
        PromptAst {
            clauses: vec![],
            background: Some(bg),
        }
    }
}

fn parse_clause(text: &str) -> Result<SubjectClause> {
    let words: Vec<&str> = text.split(' ').filter(|w| !w.is_empty()).collect();
    if words.first() != Some(&"a") {
        return Err(Error::Parse(format!(
            "clause {text:?} does not start with \"a\""
        )));
    }
    let mut rest = &words[1..];
    let identity = match rest.first().and_then(|w| RareId::parse(w)) {
        Some(id) => {
            rest = &rest[1..];
            Some(id)
        }
        None => None,
    };
    let Some(&shape_word) = rest.first() else {
        return Err(Error::Parse(format!("clause {text:?} is missing a shape")));
    };
    let shape = ShapeWord::parse(shape_word)
        .ok_or_else(|| Error::Vocab(format!("unknown word {shape_word:?}")))?;
    rest = &rest[1..];
    let action = match rest.first() {
        None => None,
        Some(&w) => {
            let a = ActionWord::parse(w)
                .ok_or_else(|| Error::Vocab(format!("unknown word {w:?}")))?;
            Some(a)
        }
    };
    if rest.len() > 1 {
        return Err(Error::Parse(format!(
            "unexpected trailing words in clause {text:?}"
        )));
    }
    Ok(SubjectClause {
        identity,
        shape,
        action,
    })
}

/// Parse `clause (", and " clause)* (" on " background)?` where a clause
/// is `"a" [S*] shape [action]`. A background-only prompt (`"on grass"`)
/// is also accepted.
pub fn parse_prompt(text: &str) -> Result<PromptAst> {
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::Parse("empty prompt".into()));
    }
    let (clause_part, background) = match text.rsplit_once(" on ") {
        Some((left, bg_word)) => {
            let bg = BackgroundWord::parse(bg_word.trim())
                .ok_or_else(|| Error::Vocab(format!("unknown background {bg_word:?}")))?;
            (left.trim(), Some(bg))
        }
        None => match text.strip_prefix("on ") {
            Some(bg_word) => {
                let bg = BackgroundWord::parse(bg_word.trim())
                    .ok_or_else(|| Error::Vocab(format!("unknown background {bg_word:?}")))?;
                ("", Some(bg))
            }
            None => (text, None),
        },
    };
    let mut clauses = Vec::new();
    if !clause_part.is_empty() {
        for piece in clause_part.split(", and ") {
            clauses.push(parse_clause(piece.trim())?);
        }
    }
    let ast = PromptAst {
        clauses,
        background,
    };
    ast.validate()?;
    Ok(ast)
}

/// Break a composite prompt into one single-clause prompt per subject,
/// in clause order, plus a background-only prompt when a background is
/// present.
pub fn split_composite(p: &PromptAst) -> (Vec<PromptAst>, Option<PromptAst>) {
    let per_subject = p
        .clauses
        .iter()
        .map(|c| PromptAst::single(*c))
        .collect();
    let background = p.background.map(PromptAst::background_only);
    (per_subject, background)
}

/// Token string -> id table. Ids are fixed by construction order and are
/// part of the checkpoint format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
}

pub const PAD_ID: usize = 0;
pub const NULL_ID: usize = 1;

impl Vocabulary {
    pub fn standard() -> Vocabulary {
        let mut words = vec!["<pad>".to_string(), "<null>".to_string()];
        words.push("a".into());
        words.push("and".into());
        words.push("on".into());
        for s in ShapeWord::ALL {
            words.push(s.as_str().into());
        }
        for a in ActionWord::ALL {
            words.push(a.as_str().into());
        }
        for b in BackgroundWord::ALL {
            words.push(b.as_str().into());
        }
        for n in 1..=RARE_COUNT {
            words.push(format!("S{n}*"));
        }
        Vocabulary { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::Vocab(format!("unknown word {word:?}")))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocab(format!("id {id} out of range")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.words).expect("string list always serializes")
    }

    pub fn from_json(s: &str) -> Result<Vocabulary> {
        let words: Vec<String> = serde_json::from_str(s)?;
        if words.len() < 2 {
            return Err(Error::Vocab("vocabulary too small".into()));
        }
        Ok(Vocabulary { words })
    }

    /// Word ids of a prompt, unpadded. Errors when the prompt does not
    /// fit the fixed sequence length; nothing is ever silently dropped.
    pub fn tokenize(&self, p: &PromptAst) -> Result<Vec<usize>> {
        p.validate()?;
        let mut ids = Vec::new();
        for (i, c) in p.clauses.iter().enumerate() {
            if i > 0 {
                ids.push(self.id("and")?);
            }
            ids.push(self.id("a")?);
            if let Some(r) = c.identity {
                ids.push(self.id(&r.as_string())?);
            }
            ids.push(self.id(c.shape.as_str())?);
            if let Some(a) = c.action {
                ids.push(self.id(a.as_str())?);
            }
        }
        if let Some(bg) = p.background {
            ids.push(self.id("on")?);
            ids.push(self.id(bg.as_str())?);
        }
        if ids.len() > TEXT_LEN {
            return Err(Error::Parse(format!(
                "prompt {:?} needs {} tokens, limit is {TEXT_LEN}",
                p.render(),
                ids.len()
            )));
        }
        Ok(ids)
    }
}

/// Pad to the fixed length; the mask holds 1.0 on real tokens.
pub fn pad_tokens(ids: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let mut padded = vec![PAD_ID; TEXT_LEN];
    let mut mask = vec![0.0f32; TEXT_LEN];
    for (i, &id) in ids.iter().enumerate() {
        padded[i] = id;
        mask[i] = 1.0;
    }
    (padded, mask)
}

pub struct EncoderLayer {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl EncoderLayer {
    fn init(rng: &mut RngStream) -> EncoderLayer {
        let proj = |rng: &mut RngStream, din: usize, dout: usize| {
            let std = 1.0 / (din as f32).sqrt();
            let w = Tensor::new(
                rng.fill_normal(din * dout).iter().map(|v| v * std).collect(),
                &[din, dout],
            )
            .unwrap()
            .trainable();
            let b = Tensor::zeros(&[dout]).trainable();
            Linear::new(w, Some(b))
        };
        EncoderLayer {
            ln1_g: Tensor::full(&[D_TEXT], 1.0).trainable(),
            ln1_b: Tensor::zeros(&[D_TEXT]).trainable(),
            q: proj(rng, D_TEXT, D_TEXT),
            k: proj(rng, D_TEXT, D_TEXT),
            v: proj(rng, D_TEXT, D_TEXT),
            o: proj(rng, D_TEXT, D_TEXT),
            ln2_g: Tensor::full(&[D_TEXT], 1.0).trainable(),
            ln2_b: Tensor::zeros(&[D_TEXT]).trainable(),
            mlp_in: proj(rng, D_TEXT, MLP_HIDDEN),
            mlp_out: proj(rng, MLP_HIDDEN, D_TEXT),
        }
    }

    fn forward(&self, g: &mut Graph, x: &Tensor, key_bias: &Tensor) -> Result<Tensor> {
        // Pre-norm self-attention with padded keys masked out.
        let xn = g.group_norm(x, 1, &self.ln1_g, &self.ln1_b, LN_EPS)?;
        let q = self.q.forward(g, &xn)?;
        let k = self.k.forward(g, &xn)?;
        let v = self.v.forward(g, &xn)?;
        let kt = g.transpose(&k)?;
        let scores_raw = g.matmul(&q, &kt)?;
        let scores_scaled = g.scale(&scores_raw, 1.0 / (D_TEXT as f32).sqrt())?;
        let scores = g.add(&scores_scaled, key_bias)?;
        let probs = g.softmax_last(&scores)?;
        let ctx = g.matmul(&probs, &v)?;
        let attn_out = self.o.forward(g, &ctx)?;
        let x = g.add(x, &attn_out)?;
        // Pre-norm MLP.
        let xn2 = g.group_norm(&x, 1, &self.ln2_g, &self.ln2_b, LN_EPS)?;
        let h = self.mlp_in.forward(g, &xn2)?;
        let h = g.gelu(&h)?;
        let h = self.mlp_out.forward(g, &h)?;
        g.add(&x, &h)
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.ln1.g"), &mut self.ln1_g);
        f(format!("{prefix}.ln1.b"), &mut self.ln1_b);
        self.q.visit_params_mut(&format!("{prefix}.q"), f);
        self.k.visit_params_mut(&format!("{prefix}.k"), f);
        self.v.visit_params_mut(&format!("{prefix}.v"), f);
        self.o.visit_params_mut(&format!("{prefix}.o"), f);
        f(format!("{prefix}.ln2.g"), &mut self.ln2_g);
        f(format!("{prefix}.ln2.b"), &mut self.ln2_b);
        self.mlp_in.visit_params_mut(&format!("{prefix}.mlp_in"), f);
        self.mlp_out.visit_params_mut(&format!("{prefix}.mlp_out"), f);
    }
}

/// Learned map from prompts to conditioning sequences of shape
/// `[TEXT_LEN, D_TEXT]`.
pub struct TextEncoder {
    pub vocab: Vocabulary,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub null_seq: Tensor,
    pub layers: Vec<EncoderLayer>,
    pub ln_f_g: Tensor,
    pub ln_f_b: Tensor,
}

impl TextEncoder {
    pub fn init(rng: &mut RngStream) -> TextEncoder {
        let vocab = Vocabulary::standard();
        let emb = |rng: &mut RngStream, rows: usize| {
            Tensor::new(
                rng.fill_normal(rows * D_TEXT).iter().map(|v| v * 0.02).collect(),
                &[rows, D_TEXT],
            )
            .unwrap()
            .trainable()
        };
        TextEncoder {
            tok_emb: emb(rng, vocab.len()),
            pos_emb: emb(rng, TEXT_LEN),
            null_seq: emb(rng, TEXT_LEN),
            layers: vec![EncoderLayer::init(rng), EncoderLayer::init(rng)],
            ln_f_g: Tensor::full(&[D_TEXT], 1.0).trainable(),
            ln_f_b: Tensor::zeros(&[D_TEXT]).trainable(),
            vocab,
        }
    }

    /// Encode a prompt to its conditioning sequence. Gradients flow into
    /// the encoder parameters when the graph is recording.
    pub fn encode(&self, g: &mut Graph, p: &PromptAst) -> Result<Tensor> {
        let ids = self.vocab.tokenize(p)?;
        let (padded, mask) = pad_tokens(&ids);
        let key_bias = Tensor::new(
            mask.iter().map(|&m| if m > 0.0 { 0.0 } else { MASK_BIAS }).collect(),
            &[TEXT_LEN],
        )?;
        let tok = g.embedding(&self.tok_emb, &padded)?;
        let mut x = g.add(&tok, &self.pos_emb)?;
        for layer in &self.layers {
            x = layer.forward(g, &x, &key_bias)?;
        }
        g.group_norm(&x, 1, &self.ln_f_g, &self.ln_f_b, LN_EPS)
    }

    /// The learned stand-in sequence for "no prompt". Returned directly
    /// (not passed through the encoder stack), so it is identical across
    /// calls and trainable wherever it is used on a recording graph.
    pub fn encode_null(&self) -> Tensor {
        self.null_seq.clone()
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.tok_emb"), &mut self.tok_emb);
        f(format!("{prefix}.pos_emb"), &mut self.pos_emb);
        f(format!("{prefix}.null_seq"), &mut self.null_seq);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params_mut(&format!("{prefix}.l{i}"), f);
        }
        f(format!("{prefix}.ln_f.g"), &mut self.ln_f_g);
        f(format!("{prefix}.ln_f.b"), &mut self.ln_f_b);
    }

    /// Attach adapters to the attention projections of every layer.
    pub fn attach_lora(&mut self, rank: usize, alpha: f32, rng: &mut RngStream) -> Result<()> {
        for layer in &mut self.layers {
            for lin in [&mut layer.q, &mut layer.k, &mut layer.v, &mut layer.o] {
                lin.attach_lora(rank, alpha, rng)?;
            }
        }
        Ok(())
    }

    /// Fold all adapters into the base weights and detach them.
    pub fn merge_lora(&mut self) {
        for layer in &mut self.layers {
            for lin in [&mut layer.q, &mut layer.k, &mut layer.v, &mut layer.o] {
                lin.merge_lora();
                lin.clear_lora();
            }
        }
    }
}
