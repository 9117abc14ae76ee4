//! Deterministic synthetic image-caption corpus with QA pairs, class
//! labels and entailment triples, plus the MLM/ITM batch builders.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::scene::{Color, PlacedShape, ShapeKind, SyntheticScene, COLORS, SHAPES};
use crate::tensor::Tensor;
use crate::vocab::{TokenSequence, Vocabulary, MASK};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntailLabel {
    Entailment,
    Neutral,
    Contradiction,
}

impl EntailLabel {
    pub fn name(self) -> &'static str {
        match self {
            EntailLabel::Entailment => "entailment",
            EntailLabel::Neutral => "neutral",
            EntailLabel::Contradiction => "contradiction",
        }
    }

    pub const ALL: [EntailLabel; 3] = [
        EntailLabel::Entailment,
        EntailLabel::Neutral,
        EntailLabel::Contradiction,
    ];
}

/// One synthetic example: a rendered scene, its caption, and optional
/// task annotations. Captions are truthful by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedExample {
    pub scene: SyntheticScene,
    /// [3, H, W] pixels in [0, 1].
    pub image: Tensor<f32>,
    pub caption: String,
    pub caption_tokens: TokenSequence,
    /// (question, answer)
    pub qa: Option<(String, String)>,
    /// "<color> <shape>" of the scene's first shape.
    pub class_label: Option<String>,
    /// (hypothesis, label)
    pub entailment: Option<(String, EntailLabel)>,
}

/// Probability of populating each optional task field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskMix {
    pub qa: f64,
    pub classification: f64,
    pub entailment: f64,
}

impl Default for TaskMix {
    fn default() -> Self {
        TaskMix {
            qa: 1.0,
            classification: 1.0,
            entailment: 1.0,
        }
    }
}

const RELATIONS: [&str; 4] = ["above", "below", "left", "right"];
const COUNT_WORDS: [&str; 3] = ["one", "two", "three"];
/// Attributes the renderer never draws; hypotheses using them are neutral.
const NEUTRAL_ADJS: [&str; 4] = ["shiny", "small", "large", "bright"];
const PROMPT_WORDS: [&str; 6] = ["answer", ":", "photo", "of", "relationship", "the"];
const QUESTION_WORDS: [&str; 7] = ["what", "color", "shape", "is", "how", "many", "shapes"];

/// Every word the generator can ever emit, including prompt and label words.
pub fn lexicon() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = Vec::new();
    words.push("a");
    words.extend(COLORS.iter().map(|c| c.name()));
    words.extend(SHAPES.iter().map(|s| s.name()));
    words.extend(RELATIONS);
    words.extend(COUNT_WORDS);
    words.extend(NEUTRAL_ADJS);
    words.extend(PROMPT_WORDS);
    words.extend(QUESTION_WORDS);
    words.extend(EntailLabel::ALL.iter().map(|l| l.name()));
    words
}

/// Vocabulary over the full closed lexicon.
pub fn build_vocab() -> Vocabulary {
    Vocabulary::build(lexicon()).expect("lexicon is non-empty")
}

/// All "<color> <shape>" class names, the label set for classification.
pub fn class_names() -> Vec<String> {
    let mut names = Vec::new();
    for c in COLORS {
        for s in SHAPES {
            names.push(alloc::format!("{} {}", c.name(), s.name()));
        }
    }
    names
}

/// Everything a QA answer can be: colors, shapes, count words.
pub fn answer_inventory() -> Vec<String> {
    let mut inv: Vec<String> = Vec::new();
    inv.extend(COLORS.iter().map(|c| c.name().to_string()));
    inv.extend(SHAPES.iter().map(|s| s.name().to_string()));
    inv.extend(COUNT_WORDS.iter().map(|w| w.to_string()));
    inv.sort();
    inv
}

fn relation_word(a: &PlacedShape, b: &PlacedShape) -> &'static str {
    if a.row < b.row {
        "above"
    } else if a.row > b.row {
        "below"
    } else if a.col < b.col {
        "left"
    } else {
        "right"
    }
}

fn describe(s: &PlacedShape) -> String {
    alloc::format!("a {} {}", s.color.name(), s.shape.name())
}

fn caption_for(scene: &SyntheticScene) -> String {
    match scene.shapes.len() {
        1 => describe(&scene.shapes[0]),
        2 => {
            let (a, b) = (&scene.shapes[0], &scene.shapes[1]);
            let rel = relation_word(a, b);
            match rel {
                "left" | "right" => alloc::format!("{} {} of {}", describe(a), rel, describe(b)),
                _ => alloc::format!("{} {} {}", describe(a), rel, describe(b)),
            }
        }
        _ => unreachable!("generator emits 1 or 2 shapes"),
    }
}

/// Verify a caption against a scene by re-deriving it. The generator's own
/// consistency oracle.
pub fn caption_matches_scene(caption: &str, scene: &SyntheticScene) -> bool {
    caption == caption_for(scene)
}

fn sample_scene(rng: &mut Rng) -> SyntheticScene {
    let mut scene = SyntheticScene::new(32, 32, 8);
    let two = rng.bernoulli(0.5);
    let n = if two { 2 } else { 1 };
    let mut used_cells: Vec<(usize, usize)> = Vec::new();
    let mut used_descr: Vec<(Color, ShapeKind)> = Vec::new();
    while scene.shapes.len() < n {
        let row = rng.below(scene.grid_rows());
        let col = rng.below(scene.grid_cols());
        let color = COLORS[rng.below(COLORS.len())];
        let shape = SHAPES[rng.below(SHAPES.len())];
        if used_cells.contains(&(row, col)) || used_descr.contains(&(color, shape)) {
            continue;
        }
        used_cells.push((row, col));
        used_descr.push((color, shape));
        scene.shapes.push(PlacedShape {
            shape,
            color,
            row,
            col,
        });
    }
    scene
}

fn sample_qa(scene: &SyntheticScene, rng: &mut Rng) -> (String, String) {
    loop {
        match rng.below(3) {
            0 => {
                // shape kind must be unique in the scene for the question
                // to have one truthful answer
                let s = &scene.shapes[rng.below(scene.shapes.len())];
                if scene.shapes.iter().filter(|p| p.shape == s.shape).count() == 1 {
                    return (
                        alloc::format!("what color is the {}", s.shape.name()),
                        s.color.name().to_string(),
                    );
                }
            }
            1 => {
                let s = &scene.shapes[rng.below(scene.shapes.len())];
                if scene.shapes.iter().filter(|p| p.color == s.color).count() == 1 {
                    return (
                        alloc::format!("what shape is {}", s.color.name()),
                        s.shape.name().to_string(),
                    );
                }
            }
            _ => {
                return (
                    "how many shapes".to_string(),
                    COUNT_WORDS[scene.shapes.len() - 1].to_string(),
                );
            }
        }
    }
}

fn sample_entailment(scene: &SyntheticScene, rng: &mut Rng) -> (String, EntailLabel) {
    let s = &scene.shapes[rng.below(scene.shapes.len())];
    match rng.below(3) {
        0 => (describe(s), EntailLabel::Entailment),
        1 => {
            let adj = NEUTRAL_ADJS[rng.below(NEUTRAL_ADJS.len())];
            (
                alloc::format!("a {} {} {}", adj, s.color.name(), s.shape.name()),
                EntailLabel::Neutral,
            )
        }
        _ => {
            // flip the color to one absent from the scene
            let absent: Vec<Color> = COLORS
                .iter()
                .copied()
                .filter(|c| scene.shapes.iter().all(|p| p.color != *c))
                .collect();
            let c = absent[rng.below(absent.len())];
            (
                alloc::format!("a {} {}", c.name(), s.shape.name()),
                EntailLabel::Contradiction,
            )
        }
    }
}

/// Generate one example; reproducibility is keyed on (seed, index).
pub fn generate_example(seed: u64, index: u64, mix: TaskMix, vocab: &Vocabulary) -> PairedExample {
    let mut rng = Rng::new(seed).derive(index);
    let scene = sample_scene(&mut rng);
    let caption = caption_for(&scene);
    let image = scene.render().expect("generator places shapes in-canvas");
    let caption_tokens = vocab
        .tokenize(&caption)
        .expect("captions use lexicon words only");
    let qa = if rng.bernoulli(mix.qa) {
        Some(sample_qa(&scene, &mut rng))
    } else {
        None
    };
    let class_label = if rng.bernoulli(mix.classification) {
        let s = &scene.shapes[0];
        Some(alloc::format!("{} {}", s.color.name(), s.shape.name()))
    } else {
        None
    };
    let entailment = if rng.bernoulli(mix.entailment) {
        Some(sample_entailment(&scene, &mut rng))
    } else {
        None
    };
    PairedExample {
        scene,
        image,
        caption,
        caption_tokens,
        qa,
        class_label,
        entailment,
    }
}

pub fn generate_corpus(
    seed: u64,
    n_examples: usize,
    mix: TaskMix,
    vocab: &Vocabulary,
) -> Result<Vec<PairedExample>> {
    if n_examples == 0 {
        return Err(CoreError::invalid("corpus size must be >= 1"));
    }
    Ok((0..n_examples)
        .map(|i| generate_example(seed, i as u64, mix, vocab))
        .collect())
}

/// A caption with some tokens replaced by [MASK] and the original ids
/// recorded per masked position.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmSample {
    pub seq: TokenSequence,
    /// (position, original token id)
    pub targets: Vec<(usize, u32)>,
}

/// Independently mask each content token with probability `mask_prob`.
/// Specials ([CLS]/[SEP]/[PAD]) are never maskable; a masked token is
/// always replaced by [MASK].
pub fn make_mlm_batch(
    seqs: &[TokenSequence],
    mask_prob: f64,
    rng: &mut Rng,
) -> Result<Vec<MlmSample>> {
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(CoreError::invalid("mask_prob must lie in [0, 1]"));
    }
    let mut out = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let mut masked = seq.clone();
        let mut targets = Vec::new();
        for (pos, id) in seq.ids.iter().enumerate() {
            if Vocabulary::is_special(*id) {
                continue;
            }
            if rng.bernoulli(mask_prob) {
                masked.ids[pos] = MASK;
                masked.mask_positions.push(pos);
                targets.push((pos, *id));
            }
        }
        out.push(MlmSample {
            seq: masked,
            targets,
        });
    }
    Ok(out)
}

/// One (image index, text index, matched?) tuple for the ITM loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItmPair {
    pub image_idx: usize,
    pub text_idx: usize,
    pub matched: bool,
}

/// 1:1 positives and negatives over a batch. Each negative swaps either
/// the image or the text (equal probability) with a different example.
pub fn make_itm_batch(batch_size: usize, rng: &mut Rng) -> Result<Vec<ItmPair>> {
    if batch_size < 2 {
        return Err(CoreError::invalid(
            "ITM needs a batch of >= 2 to draw negatives",
        ));
    }
    let mut pairs = Vec::with_capacity(batch_size * 2);
    for i in 0..batch_size {
        pairs.push(ItmPair {
            image_idx: i,
            text_idx: i,
            matched: true,
        });
        let mut j = rng.below(batch_size - 1);
        if j >= i {
            j += 1;
        }
        let swap_image = rng.bernoulli(0.5);
        pairs.push(if swap_image {
            ItmPair {
                image_idx: j,
                text_idx: i,
                matched: false,
            }
        } else {
            ItmPair {
                image_idx: i,
                text_idx: j,
                matched: false,
            }
        });
    }
    Ok(pairs)
}

/// Top-M answers by training frequency (ties lexicographic) plus the full
/// distinct answer inventory. A test question is out-domain iff its answer
/// is missing from the in-domain list.
pub fn build_answer_lists(
    train_examples: &[PairedExample],
    list_size: usize,
) -> Result<(Vec<String>, Vec<String>)> {
    if list_size == 0 {
        return Err(CoreError::invalid("answer list size must be >= 1"));
    }
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for ex in train_examples {
        if let Some((_, a)) = &ex.qa {
            *freq.entry(a.as_str()).or_insert(0) += 1;
        }
    }
    if list_size > freq.len() {
        return Err(CoreError::invalid(alloc::format!(
            "answer list size {} exceeds {} distinct answers",
            list_size,
            freq.len()
        )));
    }
    // BTreeMap iteration is lexicographic, so a stable sort by descending
    // count leaves ties in lexicographic order.
    let mut by_count: Vec<(&str, usize)> = freq.iter().map(|(k, v)| (*k, *v)).collect();
    by_count.sort_by(|a, b| b.1.cmp(&a.1));
    let in_domain = by_count
        .iter()
        .take(list_size)
        .map(|(w, _)| w.to_string())
        .collect();
    let inventory = freq.keys().map(|w| w.to_string()).collect();
    Ok((in_domain, inventory))
}
