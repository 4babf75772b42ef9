//! Corpus generation: stratified scene sampling for pretraining, and the
//! benchmark specification of held-out subjects and prompt sets.
//!
//! Stratification is by index, not by chance: shape, action, and
//! background cycle at coprime strides so any contiguous index range is
//! close to balanced, and a fixed seed makes the whole corpus a pure
//! function of the config. Held-out subject triples (shape, base color,
//! accent color) never appear, which is what makes them usable as
//! customization targets later.

use crate::error::{Error, Result};
use crate::layout::RegionLayout;
use crate::rng::{RngStream, Stream};
use crate::scene::io::{write_item, write_manifest, CorpusManifest, ItemMeta};
use crate::scene::{ActionSpec, ScenePlacement, SceneSpec, SubjectSpec, SUBJECT_COLORS};
use crate::text::{ActionWord, BackgroundWord, PromptAst, RareId, ShapeWord};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub type HeldOutTriple = (ShapeWord, [u8; 3], [u8; 3]);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub items: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Subject triples that must never appear in the corpus.
    pub held_out: Vec<HeldOutTriple>,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.items == 0 {
            return Err(Error::Config("corpus item count must be positive".into()));
        }
        if self.frames == 0 || self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "corpus geometry {}x{}x{} too small",
                self.frames, self.height, self.width
            )));
        }
        Ok(())
    }
}

impl ActionSpec {
    /// Like `standard` but with slide velocity halved (at least one pixel
    /// per frame). Used for crowded scenes where full-speed travel would
    /// leave no room to place two subjects apart.
    pub fn gentle(action: ActionWord, width: usize) -> ActionSpec {
        let mut spec = ActionSpec::standard(action, width);
        if matches!(action, ActionWord::SlideRight | ActionWord::SlideLeft) {
            spec.velocity = (width as f32 / 32.0).round().max(1.0);
        }
        spec
    }
}

/// Start-coordinate interval (inclusive, integer pixels) keeping the
/// subject in frame for the whole clip. Returns (x_lo, x_hi, y_lo, y_hi).
fn start_range(
    action: &ActionSpec,
    r_support: f32,
    frames: usize,
    h: usize,
    w: usize,
) -> (f32, f32, f32, f32) {
    let travel = action.velocity * (frames.max(1) - 1) as f32;
    let (mut x_lo, mut x_hi) = (r_support, w as f32 - r_support);
    match action.action {
        ActionWord::SlideRight => x_hi -= travel,
        ActionWord::SlideLeft => x_lo += travel,
        _ => {}
    }
    let mut y_lo = r_support;
    let y_hi = h as f32 - r_support;
    if action.action == ActionWord::Bounce {
        y_lo += action.amplitude;
    }
    (x_lo, x_hi, y_lo, y_hi)
}

fn sample_int(lo: f32, hi: f32, rng: &mut RngStream) -> Result<f32> {
    let lo_i = lo.ceil() as i64;
    let hi_i = hi.floor() as i64;
    if hi_i < lo_i {
        return Err(Error::Scene(format!("empty start range [{lo}, {hi}]")));
    }
    Ok((lo_i + rng.below((hi_i - lo_i + 1) as usize) as i64) as f32)
}

/// Draw colors for a shape, rejecting held-out triples. Falls back to a
/// deterministic scan if rejection keeps missing (tiny palettes).
fn sample_colors(
    shape: ShapeWord,
    held_out: &[HeldOutTriple],
    rng: &mut RngStream,
) -> ([u8; 3], [u8; 3]) {
    let excluded = |b: [u8; 3], a: [u8; 3]| {
        b == a || held_out.iter().any(|&(s, hb, ha)| s == shape && hb == b && ha == a)
    };
    for _ in 0..64 {
        let base = SUBJECT_COLORS[rng.below(SUBJECT_COLORS.len())];
        let accent = SUBJECT_COLORS[rng.below(SUBJECT_COLORS.len())];
        if !excluded(base, accent) {
            return (base, accent);
        }
    }
    for base in SUBJECT_COLORS {
        for accent in SUBJECT_COLORS {
            if !excluded(base, accent) {
                return (base, accent);
            }
        }
    }
    unreachable!("palette has more pairs than any held-out list");
}

/// The scene for corpus item `index`: a pure function of config, index,
/// and seed. Roughly 30% of items have two subjects.
pub fn generate_scene(cfg: &CorpusConfig, index: usize, seed: u64) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = RngStream::item(seed, Stream::Data, index as u64);
    let shape = ShapeWord::ALL[index % 4];
    let action_word = ActionWord::ALL[(index / 4) % 6];
    let background = BackgroundWord::ALL[(index / 24) % 4];
    let two = index % 10 >= 7;

    let scene = if !two {
        let (base, accent) = sample_colors(shape, &cfg.held_out, &mut rng);
        let size = 0.3 + 0.05 * rng.below(4) as f32;
        let subject = SubjectSpec {
            shape,
            base_color: base,
            accent_color: accent,
            size,
            identity: None,
        };
        let action = ActionSpec::standard(action_word, cfg.width);
        let r = size * cfg.height.min(cfg.width) as f32 / 2.0 * action.max_scale();
        let (x_lo, x_hi, y_lo, y_hi) = start_range(&action, r, cfg.frames, cfg.height, cfg.width);
        let x = sample_int(x_lo, x_hi, &mut rng)?;
        let y = sample_int(y_lo, y_hi, &mut rng)?;
        SceneSpec {
            placements: vec![ScenePlacement {
                subject,
                action,
                start: (x, y),
            }],
            background,
            frames: cfg.frames,
            height: cfg.height,
            width: cfg.width,
        }
    } else {
        let shape2 = ShapeWord::ALL[(index / 4 + 1) % 4];
        let action2_word = ActionWord::ALL[(index / 4 + 3) % 6];
        let size = 0.24;
        let mut placements = Vec::with_capacity(2);
        for (k, (sh, aw)) in [(shape, action_word), (shape2, action2_word)].iter().enumerate() {
            let (base, accent) = sample_colors(*sh, &cfg.held_out, &mut rng);
            let action = ActionSpec::gentle(*aw, cfg.width);
            let r = size * cfg.height.min(cfg.width) as f32 / 2.0 * action.max_scale();
            let (x_lo, x_hi, y_lo, y_hi) =
                start_range(&action, r, cfg.frames, cfg.height, cfg.width);
            // Push the two subjects to opposite horizontal extremes so
            // the initial-separation requirement always holds.
            let x = if k == 0 { x_lo.ceil() } else { x_hi.floor() };
            let y = sample_int(y_lo, y_hi, &mut rng)?;
            placements.push(ScenePlacement {
                subject: SubjectSpec {
                    shape: *sh,
                    base_color: base,
                    accent_color: accent,
                    size,
                    identity: None,
                },
                action,
                start: (x, y),
            });
        }
        SceneSpec {
            placements,
            background,
            frames: cfg.frames,
            height: cfg.height,
            width: cfg.width,
        }
    };
    scene.validate()?;
    Ok(scene)
}

/// Render and write the whole corpus. Returns the manifest.
pub fn gen_corpus(root: &Path, cfg: &CorpusConfig, seed: u64) -> Result<CorpusManifest> {
    cfg.validate()?;
    for index in 0..cfg.items {
        let scene = generate_scene(cfg, index, seed)?;
        let meta = ItemMeta {
            caption: scene.caption_ast().render(),
            scene,
            seed,
        };
        write_item(root, index, &meta)?;
    }
    let manifest = CorpusManifest {
        items: cfg.items,
        frames: cfg.frames,
        height: cfg.height,
        width: cfg.width,
        seed,
    };
    write_manifest(root, &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCombo {
    /// Indices into the benchmark subject list.
    pub subjects: Vec<usize>,
    /// Rendered composite prompts, clause k describing subject k.
    pub prompts: Vec<String>,
}

/// Held-out subjects and the prompt sets used to compare customization
/// arms on scenes the pretraining corpus never contained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub subjects: Vec<SubjectSpec>,
    pub combos: Vec<BenchCombo>,
    pub seeds: Vec<u64>,
}

impl BenchmarkSpec {
    /// Four held-out subjects, four two-subject combos with eight prompts
    /// each, one three-subject combo, two seeds.
    pub fn standard() -> BenchmarkSpec {
        let mk = |shape, base, accent, id| SubjectSpec {
            shape,
            base_color: base,
            accent_color: accent,
            size: 0.4,
            identity: Some(RareId::new(id).expect("small fixed index")),
        };
        let subjects = vec![
            mk(ShapeWord::Circle, [220, 50, 47], [250, 250, 250], 1),
            mk(ShapeWord::Square, [38, 139, 210], [240, 200, 40], 2),
            mk(ShapeWord::Triangle, [64, 180, 80], [211, 54, 130], 3),
            mk(ShapeWord::Star, [240, 200, 40], [38, 139, 210], 4),
        ];
        use ActionWord::*;
        let pair_actions = [
            (SlideRight, Still),
            (Still, SlideLeft),
            (Bounce, Still),
            (Still, Spin),
            (Grow, Still),
            (SlideRight, SlideLeft),
            (Spin, Bounce),
            (Still, Still),
        ];
        let render_prompt = |ids: &[usize], actions: &[ActionWord], bg: BackgroundWord| {
            let subjects = &subjects;
            PromptAst {
                clauses: ids
                    .iter()
                    .zip(actions)
                    .map(|(&i, &a)| subjects[i].clause(Some(a)))
                    .collect(),
                background: Some(bg),
            }
            .render()
        };
        let pair_combo = |ids: [usize; 2]| BenchCombo {
            subjects: ids.to_vec(),
            prompts: pair_actions
                .iter()
                .enumerate()
                .map(|(k, &(a, b))| {
                    render_prompt(&ids, &[a, b], BackgroundWord::ALL[k % 4])
                })
                .collect(),
        };
        let triple_actions = [
            [Still, SlideRight, Still],
            [Bounce, Still, Spin],
            [Still, Still, Grow],
            [SlideLeft, Still, Still],
        ];
        let triple = BenchCombo {
            subjects: vec![0, 1, 2],
            prompts: triple_actions
                .iter()
                .enumerate()
                .map(|(k, acts)| render_prompt(&[0, 1, 2], acts, BackgroundWord::ALL[k % 4]))
                .collect(),
        };
        let combos = vec![
            pair_combo([0, 1]),
            pair_combo([2, 3]),
            pair_combo([0, 2]),
            pair_combo([1, 3]),
            triple,
        ];
        BenchmarkSpec {
            subjects,
            combos,
            seeds: vec![101, 202],
        }
    }

    /// Subject triples the pretraining corpus must exclude.
    pub fn held_out_triples(&self) -> Vec<HeldOutTriple> {
        self.subjects
            .iter()
            .map(|s| (s.shape, s.base_color, s.accent_color))
            .collect()
    }

    /// Region layout used for a combo of `n` subjects, both at
    /// customization and at generation time.
    pub fn layout_for(n: usize) -> Result<RegionLayout> {
        if n <= 2 {
            RegionLayout::uniform(n)
        } else {
            RegionLayout::quad(n)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() || self.combos.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("benchmark needs subjects, combos, seeds".into()));
        }
        let mut ids: Vec<String> = self
            .subjects
            .iter()
            .map(|s| {
                s.identity
                    .map(|i| i.as_string())
                    .ok_or_else(|| Error::Config("benchmark subjects need identity tokens".into()))
            })
            .collect::<Result<_>>()?;
        ids.sort();
        ids.dedup();
        if ids.len() != self.subjects.len() {
            return Err(Error::Config("benchmark identity tokens must be unique".into()));
        }
        for (c, combo) in self.combos.iter().enumerate() {
            if combo.subjects.len() < 2 || combo.prompts.is_empty() {
                return Err(Error::Config(format!(
                    "combo {c} needs at least two subjects and one prompt"
                )));
            }
            for &s in &combo.subjects {
                if s >= self.subjects.len() {
                    return Err(Error::Config(format!("combo {c} references subject {s}")));
                }
            }
            for (p, prompt) in combo.prompts.iter().enumerate() {
                let ast = crate::text::parse_prompt(prompt)?;
                if ast.clauses.len() != combo.subjects.len() {
                    return Err(Error::Config(format!(
                        "combo {c} prompt {p} has {} clauses for {} subjects",
                        ast.clauses.len(),
                        combo.subjects.len()
                    )));
                }
                for (k, clause) in ast.clauses.iter().enumerate() {
                    let subject = &self.subjects[combo.subjects[k]];
                    if clause.identity != subject.identity || clause.shape != subject.shape {
                        return Err(Error::Config(format!(
                            "combo {c} prompt {p} clause {k} does not describe subject {}",
                            combo.subjects[k]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<BenchmarkSpec> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("missing benchmark spec {path:?}: {e}")))?;
        let spec: BenchmarkSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }
}
