//! Shapes world: scenes of up to three colored shapes on a `G×G` grid,
//! rendered to patch features and described by a small template grammar.

use std::collections::HashSet;
use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::digest::json_digest;
use crate::encoders::ImageInput;
use crate::error::{Error, Result};
use crate::textgen::{mix64, tokenize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.word() == w)
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Blue, Color::Green, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Yellow => "yellow",
        }
    }

    fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == w)
    }
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    pub fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Relation::LeftOf => Relation::RightOf,
            Relation::RightOf => Relation::LeftOf,
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
        }
    }

    /// Whether `a` stands in this relation to `b`: same row for left/right,
    /// same column for above/below, row 0 at the top.
    pub fn holds(self, a: (usize, usize), b: (usize, usize)) -> bool {
        match self {
            Relation::LeftOf => a.0 == b.0 && a.1 < b.1,
            Relation::RightOf => a.0 == b.0 && a.1 > b.1,
            Relation::Above => a.1 == b.1 && a.0 < b.0,
            Relation::Below => a.1 == b.1 && a.0 > b.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub cell: (usize, usize),
}

impl Object {
    fn phrase(&self) -> String {
        format!("a {} {}", self.color.word(), self.shape.word())
    }
}

/// One to three objects; `relation` links the first object to the second.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<Object>,
    #[serde(default)]
    pub relation: Option<Relation>,
}

impl SceneSpec {
    pub fn validate(&self, grid: usize) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > 3 {
            return Err(Error::InvalidScene(format!("{} objects", self.objects.len())));
        }
        let mut cells = HashSet::new();
        let mut kinds = HashSet::new();
        for o in &self.objects {
            if o.cell.0 >= grid || o.cell.1 >= grid {
                return Err(Error::InvalidScene(format!("cell {:?} outside a {grid}x{grid} grid", o.cell)));
            }
            if !cells.insert(o.cell) {
                return Err(Error::CellCollision(o.cell));
            }
            if !kinds.insert((o.color, o.shape)) {
                return Err(Error::InvalidScene(format!("two {} objects", o.phrase())));
            }
        }
        if let Some(rel) = self.relation {
            if self.objects.len() < 2 {
                return Err(Error::InvalidScene("relation needs two objects".into()));
            }
            if !rel.holds(self.objects[0].cell, self.objects[1].cell) {
                return Err(Error::InvalidScene(format!(
                    "{:?} does not hold between {:?} and {:?}",
                    rel, self.objects[0].cell, self.objects[1].cell
                )));
            }
        }
        Ok(())
    }

    /// Content hash used to keep evaluation scenes out of the training split.
    pub fn hash(&self) -> u64 {
        json_digest(self).expect("scene serializes")
    }

    /// Scenes reserved for evaluation: `Σ (row + col + shape + color) ≡ 0 (mod 4)`
    /// over objects. The sum is unchanged by color swaps and relation flips, so
    /// counterfactual twins share a split; every zero-shot class keeps four of
    /// its sixteen cells on a 4×4 grid.
    pub fn held_out(&self) -> bool {
        let total: usize = self
            .objects
            .iter()
            .map(|o| o.cell.0 + o.cell.1 + o.shape as usize + o.color as usize)
            .sum();
        total % 4 == 0
    }

    /// The same layout with the colors of the first two objects exchanged.
    pub fn color_swapped(&self) -> Self {
        let mut out = self.clone();
        let (c0, c1) = (out.objects[0].color, out.objects[1].color);
        out.objects[0].color = c1;
        out.objects[1].color = c0;
        out
    }

    /// The first two objects trade cells, so the declared relation flips.
    pub fn relation_flipped(&self) -> Self {
        let mut out = self.clone();
        let (a, b) = (out.objects[0].cell, out.objects[1].cell);
        out.objects[0].cell = b;
        out.objects[1].cell = a;
        out.relation = self.relation.map(Relation::flipped);
        out
    }
}

impl fmt::Display for SceneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&caption(self))
    }
}

/// Template caption. The grammar is deterministic, so no randomness is needed.
pub fn caption(scene: &SceneSpec) -> String {
    let mut parts = vec![scene.objects[0].phrase()];
    let mut rest = &scene.objects[1..];
    if let (Some(rel), Some(second)) = (scene.relation, scene.objects.get(1)) {
        parts.push(rel.phrase().to_string());
        parts.push(second.phrase());
        rest = &scene.objects[2..];
    }
    for o in rest {
        parts.push("and".into());
        parts.push(o.phrase());
    }
    parts.join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct ParsedCaption {
    objects: Vec<(Color, Shape)>,
    relation: Option<Relation>,
}

fn parse_caption(text: &str) -> Option<ParsedCaption> {
    let tokens = tokenize(text);
    let mut at = 0;
    let mut objects = Vec::new();
    let mut relation = None;
    let object = |at: &mut usize| -> Option<(Color, Shape)> {
        let (a, c, s) = (tokens.get(*at)?, tokens.get(*at + 1)?, tokens.get(*at + 2)?);
        if a != "a" {
            return None;
        }
        *at += 3;
        Some((Color::from_word(c)?, Shape::from_word(s)?))
    };
    objects.push(object(&mut at)?);
    while at < tokens.len() {
        let word = tokens[at].as_str();
        let rel = match (word, tokens.get(at + 1).map(String::as_str)) {
            ("left", Some("of")) => Some((Relation::LeftOf, 2)),
            ("right", Some("of")) => Some((Relation::RightOf, 2)),
            ("above", _) => Some((Relation::Above, 1)),
            ("below", _) => Some((Relation::Below, 1)),
            ("and", _) => None,
            _ => return None,
        };
        match rel {
            Some((r, width)) if objects.len() == 1 => {
                relation = Some(r);
                at += width;
            }
            Some(_) => return None,
            None => at += 1,
        }
        objects.push(object(&mut at)?);
    }
    Some(ParsedCaption { objects, relation })
}

/// Whether `text` is a true and complete description of `scene`: it names
/// exactly the scene's objects and any stated relation holds.
pub fn describes(scene: &SceneSpec, text: &str) -> bool {
    let Some(parsed) = parse_caption(text) else {
        return false;
    };
    if parsed.objects.len() != scene.objects.len() {
        return false;
    }
    let mut cells = Vec::with_capacity(parsed.objects.len());
    for &(color, shape) in &parsed.objects {
        match scene.objects.iter().find(|o| o.color == color && o.shape == shape) {
            Some(o) if !cells.contains(&o.cell) => cells.push(o.cell),
            _ => return false,
        }
    }
    match parsed.relation {
        Some(rel) => rel.holds(cells[0], cells[1]),
        None => true,
    }
}

/// Feature width per patch: one-hot shape, one-hot color, row and column.
pub const D_IN: usize = 3 + 4 + 2;

/// Rasterizes a scene into `G²` patch rows with seeded Gaussian noise on every entry.
pub fn render(scene: &SceneSpec, grid: usize, noise_seed: u64, sigma: f64) -> Result<ImageInput> {
    scene.validate(grid)?;
    let patches = grid * grid;
    let mut features = vec![0.0f32; patches * D_IN];
    for o in &scene.objects {
        let row = &mut features[(o.cell.0 * grid + o.cell.1) * D_IN..][..D_IN];
        row[o.shape as usize] = 1.0;
        row[3 + o.color as usize] = 1.0;
        row[7] = o.cell.0 as f32 / grid as f32;
        row[8] = o.cell.1 as f32 / grid as f32;
    }
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        for x in &mut features {
            *x += normal.sample(&mut rng) as f32;
        }
    }
    Ok(ImageInput {
        patches,
        d_in: D_IN,
        features,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub grid: usize,
    pub sigma: f64,
    pub train_size: usize,
    pub suite_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid: 4,
            sigma: 0.05,
            train_size: 2000,
            suite_size: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// One row of the dataset JSONL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub scene: SceneSpec,
    pub caption: String,
    pub split: Split,
    pub noise_seed: u64,
}

impl Sample {
    pub fn render(&self, grid: usize, sigma: f64) -> Result<ImageInput> {
        render(&self.scene, grid, self.noise_seed, sigma)
    }
}

fn random_kinds<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<(Color, Shape)> {
    let mut all: Vec<(Color, Shape)> = Color::ALL
        .iter()
        .flat_map(|&c| Shape::ALL.iter().map(move |&s| (c, s)))
        .collect();
    all.shuffle(rng);
    all.truncate(n);
    all
}

/// Two cells in the given relation.
fn related_cells<R: Rng + ?Sized>(rng: &mut R, grid: usize, rel: Relation) -> ((usize, usize), (usize, usize)) {
    let line = rng.random_range(0..grid);
    let mut ends = rand::seq::index::sample(rng, grid, 2).into_vec();
    ends.sort_unstable();
    let (lo, hi) = (ends[0], ends[1]);
    match rel {
        Relation::LeftOf => ((line, lo), (line, hi)),
        Relation::RightOf => ((line, hi), (line, lo)),
        Relation::Above => ((lo, line), (hi, line)),
        Relation::Below => ((hi, line), (lo, line)),
    }
}

/// A random valid scene with `n` objects (1..=3); scenes with two or more
/// objects always state a relation between the first two.
pub fn random_scene<R: Rng + ?Sized>(rng: &mut R, grid: usize, n: usize) -> SceneSpec {
    assert!((1..=3).contains(&n) && grid >= 2);
    let kinds = random_kinds(rng, n);
    let make = |(color, shape): (Color, Shape), cell| Object { shape, color, cell };
    if n == 1 {
        let cell = (rng.random_range(0..grid), rng.random_range(0..grid));
        return SceneSpec {
            objects: vec![make(kinds[0], cell)],
            relation: None,
        };
    }
    let rel = *Relation::ALL.choose(rng).expect("relations");
    let (a, b) = related_cells(rng, grid, rel);
    let mut objects = vec![make(kinds[0], a), make(kinds[1], b)];
    if n == 3 {
        let free: Vec<(usize, usize)> = (0..grid * grid)
            .map(|i| (i / grid, i % grid))
            .filter(|c| *c != a && *c != b)
            .collect();
        objects.push(make(kinds[2], *free.choose(rng).expect("free cell")));
    }
    SceneSpec {
        objects,
        relation: Some(rel),
    }
}

/// Object-count mix of the training split: 20% one, 50% two, 30% three.
fn training_object_count<R: Rng + ?Sized>(rng: &mut R) -> usize {
    match rng.random_range(0..10) {
        0..=1 => 1,
        2..=6 => 2,
        _ => 3,
    }
}

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(tag)))
}

const TRAIN_STREAM: u64 = 1;
const SUITE_STREAM: u64 = 2;

/// The training split: `cfg.train_size` random scenes with their captions,
/// none of them held out.
pub fn make_training_set(cfg: &SynthConfig, seed: u64) -> Vec<Sample> {
    let mut rng = stream(seed, TRAIN_STREAM);
    (0..cfg.train_size)
        .map(|_| {
            let n = training_object_count(&mut rng);
            let scene = loop {
                let s = random_scene(&mut rng, cfg.grid, n);
                if !s.held_out() {
                    break s;
                }
            };
            Sample {
                caption: caption(&scene),
                scene,
                split: Split::Train,
                noise_seed: rng.random(),
            }
        })
        .collect()
}

/// Image with one correct and one minimally perturbed caption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompI2tItem {
    pub scene: SceneSpec,
    pub noise_seed: u64,
    pub caption: String,
    pub negative: String,
}

/// Two counterfactual scenes and their captions; image `i` matches caption `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompGroupItem {
    pub scenes: [SceneSpec; 2],
    pub noise_seeds: [u64; 2],
    pub captions: [String; 2],
}

/// Single-object image labeled with its index into [`zs_classes`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZsItem {
    pub scene: SceneSpec,
    pub noise_seed: u64,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalItem {
    pub scene: SceneSpec,
    pub noise_seed: u64,
    pub caption: String,
}

/// One JSONL record of an evaluation suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SuiteItem {
    CompI2t(CompI2tItem),
    CompGroup(CompGroupItem),
    Zs(ZsItem),
    Retrieval(RetrievalItem),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalSuites {
    pub comp_i2t: Vec<CompI2tItem>,
    pub comp_group: Vec<CompGroupItem>,
    pub zs: Vec<ZsItem>,
    pub retrieval: Vec<RetrievalItem>,
}

impl EvalSuites {
    pub fn items(&self) -> Vec<SuiteItem> {
        let mut out = Vec::new();
        out.extend(self.comp_i2t.iter().cloned().map(SuiteItem::CompI2t));
        out.extend(self.comp_group.iter().cloned().map(SuiteItem::CompGroup));
        out.extend(self.zs.iter().cloned().map(SuiteItem::Zs));
        out.extend(self.retrieval.iter().cloned().map(SuiteItem::Retrieval));
        out
    }

    pub fn from_items(items: impl IntoIterator<Item = SuiteItem>) -> Self {
        let mut s = Self::default();
        for item in items {
            match item {
                SuiteItem::CompI2t(x) => s.comp_i2t.push(x),
                SuiteItem::CompGroup(x) => s.comp_group.push(x),
                SuiteItem::Zs(x) => s.zs.push(x),
                SuiteItem::Retrieval(x) => s.retrieval.push(x),
            }
        }
        s
    }

    pub fn is_empty(&self) -> bool {
        self.comp_i2t.is_empty() && self.comp_group.is_empty() && self.zs.is_empty() && self.retrieval.is_empty()
    }

    /// Retrieval pairs as dataset rows of the eval split.
    pub fn eval_samples(&self) -> Vec<Sample> {
        self.retrieval
            .iter()
            .map(|r| Sample {
                scene: r.scene.clone(),
                caption: r.caption.clone(),
                split: Split::Eval,
                noise_seed: r.noise_seed,
            })
            .collect()
    }
}

/// The twelve zero-shot classes in a fixed order.
pub fn zs_classes() -> Vec<(Color, Shape)> {
    Color::ALL
        .iter()
        .flat_map(|&c| Shape::ALL.iter().map(move |&s| (c, s)))
        .collect()
}

pub fn zs_prompt(color: Color, shape: Shape) -> String {
    format!("a photo of a {} {}", color.word(), shape.word())
}

struct SceneSource {
    rng: ChaCha8Rng,
    grid: usize,
}

impl SceneSource {
    fn draw(&mut self, n: usize, accept: impl Fn(&SceneSpec) -> bool) -> SceneSpec {
        loop {
            let scene = random_scene(&mut self.rng, self.grid, n);
            if scene.held_out() && accept(&scene) {
                return scene;
            }
        }
    }

    fn noise(&mut self) -> u64 {
        self.rng.random()
    }
}

/// Builds the four suites with `n` items each from held-out scenes only.
///
/// Compositional items come in mirrored pairs (a scene and its counterfactual
/// swap each other's captions), so a scorer that ignores the image gets
/// exactly half of each pair right.
pub fn make_eval_suites(cfg: &SynthConfig, n: usize, seed: u64) -> Result<EvalSuites> {
    if n == 0 {
        return Err(Error::InvalidInput("suite size must be at least 1".into()));
    }
    let mut src = SceneSource {
        rng: stream(seed, SUITE_STREAM),
        grid: cfg.grid,
    };
    let distinct_colors = |s: &SceneSpec| s.objects[0].color != s.objects[1].color;
    let mut suites = EvalSuites::default();

    while suites.comp_i2t.len() < n {
        let attribute = suites.comp_i2t.len() % 4 == 0;
        let base = src.draw(2, |s| distinct_colors(s));
        let twin = if attribute {
            base.color_swapped()
        } else {
            base.relation_flipped()
        };
        let (c0, c1) = (caption(&base), caption(&twin));
        for (scene, pos, neg) in [(base, c0.clone(), c1.clone()), (twin, c1, c0)] {
            if suites.comp_i2t.len() < n {
                suites.comp_i2t.push(CompI2tItem {
                    noise_seed: src.noise(),
                    scene,
                    caption: pos,
                    negative: neg,
                });
            }
        }
    }

    while suites.comp_group.len() < n {
        let a = src.draw(2, |s| distinct_colors(s));
        let b = a.color_swapped();
        let captions = [caption(&a), caption(&b)];
        let grid_ok = describes(&a, &captions[0])
            && describes(&b, &captions[1])
            && !describes(&a, &captions[1])
            && !describes(&b, &captions[0]);
        if !grid_ok {
            continue;
        }
        suites.comp_group.push(CompGroupItem {
            noise_seeds: [src.noise(), src.noise()],
            scenes: [a, b],
            captions,
        });
    }

    let classes = zs_classes();
    while suites.zs.len() < n {
        let label = suites.zs.len() % classes.len();
        let (color, shape) = classes[label];
        let scene = src.draw(1, |s| s.objects[0].color == color && s.objects[0].shape == shape);
        let noise_seed = src.noise();
        suites.zs.push(ZsItem {
            scene,
            noise_seed,
            label,
        });
    }

    let mut seen = HashSet::new();
    while suites.retrieval.len() < n {
        let count = [2, 3][suites.retrieval.len() % 2];
        let scene = src.draw(count, |_| true);
        let text = caption(&scene);
        if !seen.insert(text.clone()) {
            continue;
        }
        let noise_seed = src.noise();
        suites.retrieval.push(RetrievalItem {
            scene,
            noise_seed,
            caption: text,
        });
    }
    Ok(suites)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textgen::Lexicon;

    fn obj(shape: Shape, color: Color, cell: (usize, usize)) -> Object {
        Object { shape, color, cell }
    }

    fn pair() -> SceneSpec {
        SceneSpec {
            objects: vec![obj(Shape::Circle, Color::Red, (1, 0)), obj(Shape::Square, Color::Blue, (1, 3))],
            relation: Some(Relation::LeftOf),
        }
    }

    #[test]
    fn captions_follow_template() {
        let single = SceneSpec {
            objects: vec![obj(Shape::Circle, Color::Red, (0, 0))],
            relation: None,
        };
        assert_eq!(caption(&single), "a red circle");
        assert_eq!(caption(&pair()), "a red circle left of a blue square");
        let mut triple = pair();
        triple.objects.push(obj(Shape::Triangle, Color::Green, (3, 3)));
        assert_eq!(caption(&triple), "a red circle left of a blue square and a green triangle");
    }

    #[test]
    fn captions_are_in_lexicon() {
        let lex = Lexicon::shipped();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in [1, 2, 3, 2, 3, 3] {
            lex.tag(&caption(&random_scene(&mut rng, 4, n))).unwrap();
        }
        lex.tag(&zs_prompt(Color::Yellow, Shape::Triangle)).unwrap();
    }

    #[test]
    fn validation_rejects_bad_scenes() {
        let mut s = pair();
        s.objects[1].cell = (1, 0);
        assert!(matches!(s.validate(4), Err(Error::CellCollision((1, 0)))));
        let mut s = pair();
        s.relation = Some(Relation::Above);
        assert!(s.validate(4).is_err());
        let mut s = pair();
        s.objects[1].cell = (1, 4);
        assert!(s.validate(4).is_err());
        assert!(render(&s, 4, 0, 0.0).is_err());
    }

    #[test]
    fn render_without_noise_marks_one_patch() {
        let s = SceneSpec {
            objects: vec![obj(Shape::Circle, Color::Red, (0, 0))],
            relation: None,
        };
        let img = render(&s, 4, 3, 0.0).unwrap();
        let nonzero: Vec<usize> = (0..16)
            .filter(|p| img.features[p * D_IN..(p + 1) * D_IN].iter().any(|&x| x != 0.0))
            .collect();
        assert_eq!(nonzero, vec![0]);
        assert_eq!(&img.features[..D_IN], &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn render_is_deterministic_with_calibrated_noise() {
        let s = pair();
        let a = render(&s, 4, 11, 0.1).unwrap();
        assert_eq!(a, render(&s, 4, 11, 0.1).unwrap());
        assert_ne!(a, render(&s, 4, 12, 0.1).unwrap());
        let clean = render(&s, 4, 11, 0.0).unwrap();
        let deltas: Vec<f64> = a.features.iter().zip(&clean.features).map(|(x, y)| f64::from(x - y)).collect();
        let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
        let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (deltas.len() - 1) as f64;
        assert!((var.sqrt() - 0.1).abs() < 0.015, "std {}", var.sqrt());
    }

    #[test]
    fn describes_checks_objects_and_relation() {
        let s = pair();
        assert!(describes(&s, "a red circle left of a blue square"));
        assert!(describes(&s, "a blue square right of a red circle"));
        assert!(describes(&s, "a red circle and a blue square"));
        assert!(!describes(&s, "a blue circle left of a red square"));
        assert!(!describes(&s, "a red circle right of a blue square"));
        assert!(!describes(&s, "a red circle"));
        assert!(!describes(&s, "a photo of a red circle"));
    }

    #[test]
    fn counterfactual_twins_share_a_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let s = random_scene(&mut rng, 4, 2);
            assert_eq!(s.held_out(), s.color_swapped().held_out());
            assert_eq!(s.held_out(), s.relation_flipped().held_out());
        }
    }

    #[test]
    fn counterfactuals() {
        let s = pair();
        assert_eq!(caption(&s.color_swapped()), "a blue circle left of a red square");
        let f = s.relation_flipped();
        f.validate(4).unwrap();
        assert_eq!(caption(&f), "a red circle right of a blue square");
    }

    #[test]
    fn random_scenes_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..500 {
            let s = random_scene(&mut rng, 4, 1 + i % 3);
            s.validate(4).unwrap();
            assert!(describes(&s, &caption(&s)));
        }
    }

    #[test]
    fn training_set_is_seeded() {
        let cfg = SynthConfig {
            train_size: 200,
            ..SynthConfig::default()
        };
        let a = make_training_set(&cfg, 4);
        assert_eq!(a, make_training_set(&cfg, 4));
        assert_ne!(a, make_training_set(&cfg, 5));
        let singles = a.iter().filter(|s| s.scene.objects.len() == 1).count();
        assert!((20..=60).contains(&singles));
    }

    #[test]
    fn suites_are_disjoint_balanced_and_consistent() {
        let cfg = SynthConfig::default();
        let train = make_training_set(&cfg, 1);
        let exclude: HashSet<u64> = train.iter().map(|s| s.scene.hash()).collect();
        let suites = make_eval_suites(&cfg, 60, 2).unwrap();
        assert_eq!(suites, make_eval_suites(&cfg, 60, 2).unwrap());
        assert_eq!(suites.comp_i2t.len(), 60);
        assert_eq!(suites.comp_group.len(), 60);
        assert_eq!(suites.zs.len(), 60);
        assert_eq!(suites.retrieval.len(), 60);
        let mut scenes: Vec<&SceneSpec> = Vec::new();
        scenes.extend(suites.comp_i2t.iter().map(|x| &x.scene));
        scenes.extend(suites.comp_group.iter().flat_map(|x| x.scenes.iter()));
        scenes.extend(suites.zs.iter().map(|x| &x.scene));
        scenes.extend(suites.retrieval.iter().map(|x| &x.scene));
        assert!(scenes.iter().all(|s| !exclude.contains(&s.hash())));
        for item in &suites.comp_i2t {
            assert!(describes(&item.scene, &item.caption));
            assert!(!describes(&item.scene, &item.negative));
        }
        for pair in suites.comp_i2t.chunks(2) {
            assert_eq!(pair[0].caption, pair[1].negative);
            assert_eq!(pair[1].caption, pair[0].negative);
        }
        let mut counts = [0usize; 12];
        for z in &suites.zs {
            counts[z.label] += 1;
            let (c, s) = zs_classes()[z.label];
            assert_eq!((z.scene.objects[0].color, z.scene.objects[0].shape), (c, s));
        }
        assert!(counts.iter().all(|&c| c == 5));
        let captions: HashSet<&String> = suites.retrieval.iter().map(|r| &r.caption).collect();
        assert_eq!(captions.len(), 60);
    }

    #[test]
    fn suite_items_round_trip_through_json() {
        let suites = make_eval_suites(&SynthConfig::default(), 3, 9).unwrap();
        let lines: Vec<String> = suites.items().iter().map(|i| serde_json::to_string(i).unwrap()).collect();
        assert!(lines[0].contains(r#""kind":"comp_i2t""#));
        let back = EvalSuites::from_items(lines.iter().map(|l| serde_json::from_str(l).unwrap()));
        assert_eq!(back, suites);
    }

    #[test]
    fn attribute_swap_negative_matches_worked_example() {
        let s = pair();
        let item_neg = caption(&s.color_swapped());
        assert_eq!(item_neg, "a blue circle left of a red square");
    }
}
