//! Procedural garment-on-body images with captions, masks and editing tasks.
//!
//! Images are 16×16 RGB in `[-1, 1]`. A fixed body template is shifted
//! horizontally by a seeded jitter of up to two columns.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionClass, Factorization, GaussianMixtureModel};
use crate::error::{Error, Result};
use crate::masknet::{EditMask, MaskInput};
use crate::prompt::{PromptEncoder, PromptText};
use crate::rng::{self, Rng};
use crate::tensor::{Grid, LatentImage};

pub const SIZE: usize = 16;
pub const DISPLAY_SCALE: usize = 4;
pub const NUM_PARTS: usize = 6;
pub const MAX_JITTER: i32 = 2;

const SKIN: [f64; 3] = [0.8, 0.3, 0.0];
const BACKGROUND: [f64; 3] = [0.3, 0.3, 0.35];
const ACCENT: [f64; 3] = [0.8, 0.8, 0.8];

macro_rules! word_enum {
    ($name:ident { $($var:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($var),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$var => $word),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($name::$var),)+
                    _ => Err(Error::format(format!("unknown {} '{s}'", stringify!($name).to_lowercase()))),
                }
            }
        }
    };
}

word_enum!(GarmentKind { TShirt => "t-shirt", Dress => "dress", Pants => "pants" });
word_enum!(Color {
    Black => "black",
    Red => "red",
    Yellow => "yellow",
    Blue => "blue",
    Green => "green",
    Purple => "purple",
    Orange => "orange",
});
word_enum!(SleeveLength { None => "sleeveless", Short => "short", Long => "long" });
word_enum!(Collar { Round => "round", V => "v" });
word_enum!(Pattern { Solid => "solid", Striped => "striped", Dotted => "dotted" });

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Black => [-0.9, -0.9, -0.9],
            Color::Red => [0.9, -0.8, -0.8],
            Color::Yellow => [0.9, 0.9, -0.8],
            Color::Blue => [-0.8, -0.6, 0.9],
            Color::Green => [-0.8, 0.8, -0.8],
            Color::Purple => [0.5, -0.8, 0.7],
            Color::Orange => [0.9, 0.1, -0.8],
        }
    }
}

impl GarmentKind {
    pub fn has_top(self) -> bool {
        self != GarmentKind::Pants
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Kind,
    Color,
    Sleeve,
    Collar,
    Pattern,
}

/// Garment description. Pants always carry `sleeve = None, collar = Round`
/// and their captions omit both.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GarmentSpec {
    pub kind: GarmentKind,
    pub color: Color,
    pub sleeve: SleeveLength,
    pub collar: Collar,
    pub pattern: Pattern,
}

impl GarmentSpec {
    pub fn new(
        kind: GarmentKind,
        color: Color,
        sleeve: SleeveLength,
        collar: Collar,
        pattern: Pattern,
    ) -> Result<Self> {
        let spec = Self {
            kind,
            color,
            sleeve,
            collar,
            pattern,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == GarmentKind::Pants
            && (self.sleeve != SleeveLength::None || self.collar != Collar::Round)
        {
            return Err(Error::param("pants take no sleeve or collar"));
        }
        Ok(())
    }

    /// Every valid spec of the grammar.
    pub fn all() -> Vec<GarmentSpec> {
        let mut out = Vec::new();
        for &kind in GarmentKind::ALL {
            for &color in Color::ALL {
                for &pattern in Pattern::ALL {
                    if kind.has_top() {
                        for &sleeve in SleeveLength::ALL {
                            for &collar in Collar::ALL {
                                out.push(GarmentSpec {
                                    kind,
                                    color,
                                    sleeve,
                                    collar,
                                    pattern,
                                });
                            }
                        }
                    } else {
                        out.push(GarmentSpec {
                            kind,
                            color,
                            sleeve: SleeveLength::None,
                            collar: Collar::Round,
                            pattern,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn random(rng: &mut Rng, kind: GarmentKind) -> Self {
        let color = *Color::ALL.choose(rng).expect("nonempty");
        let pattern = *Pattern::ALL.choose(rng).expect("nonempty");
        let (sleeve, collar) = if kind.has_top() {
            (
                *SleeveLength::ALL.choose(rng).expect("nonempty"),
                *Collar::ALL.choose(rng).expect("nonempty"),
            )
        } else {
            (SleeveLength::None, Collar::Round)
        };
        Self {
            kind,
            color,
            sleeve,
            collar,
            pattern,
        }
    }

    pub fn caption(&self) -> String {
        let mut words = vec!["a".to_string(), self.color.word().to_string()];
        if self.kind.has_top() {
            words.push(match self.sleeve {
                SleeveLength::None => "sleeveless".into(),
                s => format!("{} sleeve", s.word()),
            });
            words.push(format!("{} neck", self.collar.word()));
        }
        words.push(self.pattern.word().into());
        words.push(self.kind.word().into());
        words.join(" ")
    }

    /// Attributes on which `self` and `other` differ.
    pub fn diff(&self, other: &GarmentSpec) -> Vec<Attribute> {
        let mut d = Vec::new();
        if self.kind != other.kind {
            d.push(Attribute::Kind);
        }
        if self.color != other.color {
            d.push(Attribute::Color);
        }
        if self.sleeve != other.sleeve {
            d.push(Attribute::Sleeve);
        }
        if self.collar != other.collar {
            d.push(Attribute::Collar);
        }
        if self.pattern != other.pattern {
            d.push(Attribute::Pattern);
        }
        d
    }

    /// Specs differing from `self` in exactly one attribute (kind excluded).
    pub fn single_variants(&self) -> Vec<GarmentSpec> {
        let mut out = Vec::new();
        for &c in Color::ALL.iter().filter(|c| **c != self.color) {
            out.push(GarmentSpec { color: c, ..*self });
        }
        for &p in Pattern::ALL.iter().filter(|p| **p != self.pattern) {
            out.push(GarmentSpec {
                pattern: p,
                ..*self
            });
        }
        if self.kind.has_top() {
            for &s in SleeveLength::ALL.iter().filter(|s| **s != self.sleeve) {
                out.push(GarmentSpec { sleeve: s, ..*self });
            }
            for &c in Collar::ALL.iter().filter(|c| **c != self.collar) {
                out.push(GarmentSpec { collar: c, ..*self });
            }
        }
        out
    }
}

impl fmt::Display for GarmentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}-{}-{}-{}-{}",
            self.kind, self.color, self.sleeve, self.collar, self.pattern
        )
    }
}

impl FromStr for GarmentSpec {
    type Err = Error;

    /// Parses the `kind-color-sleeve-collar-pattern` id form.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = if let Some(r) = s.strip_prefix("t-shirt-") {
            (GarmentKind::TShirt, r)
        } else {
            let (k, r) = s
                .split_once('-')
                .ok_or_else(|| Error::format(format!("bad spec id '{s}'")))?;
            (k.parse()?, r)
        };
        let parts: Vec<&str> = rest.split('-').collect();
        let [color, sleeve, collar, pattern] = parts[..] else {
            return Err(Error::format(format!("bad spec id '{s}'")));
        };
        GarmentSpec::new(
            kind,
            color.parse()?,
            sleeve.parse()?,
            collar.parse()?,
            pattern.parse()?,
        )
        .map_err(|e| Error::format(e.to_string()))
    }
}

/// Recovers the spec from a caption produced by [`GarmentSpec::caption`].
pub fn parse_caption(caption: &str) -> Result<GarmentSpec> {
    let text = PromptText::new(caption);
    let toks: Vec<&str> = text.tokens().iter().map(String::as_str).collect();
    let bad = || {
        Error::format(format!(
            "caption '{caption}' does not follow the garment grammar"
        ))
    };
    let mut it = toks.iter().copied().peekable();
    if it.next() != Some("a") {
        return Err(bad());
    }
    let color: Color = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let mut sleeve = None;
    let mut collar = None;
    match it.peek().copied() {
        Some("sleeveless") => {
            it.next();
            sleeve = Some(SleeveLength::None);
        }
        Some(w @ ("short" | "long")) => {
            it.next();
            if it.next() != Some("sleeve") {
                return Err(bad());
            }
            sleeve = Some(w.parse()?);
        }
        _ => {}
    }
    if let Some(w @ ("round" | "v")) = it.peek().copied() {
        it.next();
        if it.next() != Some("neck") {
            return Err(bad());
        }
        collar = Some(w.parse()?);
    }
    let pattern: Pattern = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let kind: GarmentKind = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    if it.next().is_some() {
        return Err(bad());
    }
    let spec = match (kind.has_top(), sleeve, collar) {
        (true, Some(s), Some(c)) => GarmentSpec::new(kind, color, s, c, pattern)?,
        (false, None, None) => {
            GarmentSpec::new(kind, color, SleeveLength::None, Collar::Round, pattern)?
        }
        _ => return Err(bad()),
    };
    Ok(spec)
}

/// Target garment for a free-form prompt: attributes the prompt names
/// override those of `src`. Full captions parse exactly.
pub fn resolve_prompt(src: &GarmentSpec, prompt: &str) -> Result<GarmentSpec> {
    if let Ok(spec) = parse_caption(prompt) {
        return Ok(spec);
    }
    let text = PromptText::new(prompt);
    let toks: Vec<&str> = text.tokens().iter().map(String::as_str).collect();
    let (mut kind, mut color, mut sleeve, mut collar, mut pattern) = (None, None, None, None, None);
    for (i, w) in toks.iter().enumerate() {
        let next = toks.get(i + 1).copied();
        if let Ok(k) = w.parse::<GarmentKind>() {
            kind = Some(k);
        } else if let Ok(c) = w.parse::<Color>() {
            color = Some(c);
        } else if let Ok(p) = w.parse::<Pattern>() {
            pattern = Some(p);
        } else if *w == "sleeveless" {
            sleeve = Some(SleeveLength::None);
        } else if matches!(*w, "short" | "long")
            && matches!(next, Some("sleeve" | "sleeves" | "sleeved"))
        {
            sleeve = Some(w.parse()?);
        } else if matches!(*w, "round" | "v") && matches!(next, Some("neck" | "collar")) {
            collar = Some(w.parse()?);
        }
    }
    if [
        kind.is_some(),
        color.is_some(),
        sleeve.is_some(),
        collar.is_some(),
        pattern.is_some(),
    ] == [false; 5]
    {
        return Err(Error::format(format!(
            "prompt '{prompt}' names no garment attribute"
        )));
    }
    let kind = kind.unwrap_or(src.kind);
    let (sleeve, collar) = match (kind.has_top(), src.kind.has_top()) {
        (false, _) => (SleeveLength::None, Collar::Round),
        (true, true) => (sleeve.unwrap_or(src.sleeve), collar.unwrap_or(src.collar)),
        (true, false) => (
            sleeve.unwrap_or(SleeveLength::Short),
            collar.unwrap_or(Collar::Round),
        ),
    };
    GarmentSpec::new(
        kind,
        color.unwrap_or(src.color),
        sleeve,
        collar,
        pattern.unwrap_or(src.pattern),
    )
}

/// Task type implied by the attributes that change.
pub fn classify_edit(src: &GarmentSpec, tgt: &GarmentSpec) -> Result<TaskType> {
    let d = src.diff(tgt);
    let only = |allowed: &[Attribute]| d.iter().all(|a| allowed.contains(a));
    Ok(match d.as_slice() {
        [] => return Err(Error::param("target garment equals the source")),
        [Attribute::Color] => TaskType::Color,
        [Attribute::Pattern] => TaskType::Material,
        _ if only(&[Attribute::Sleeve, Attribute::Collar]) => TaskType::Detail,
        _ => TaskType::Comprehensive,
    })
}

/// Body-part label in the unshifted template: 0 background, 1 head,
/// 2 torso, 3/4 left/right arm, 5/6 left/right leg.
fn template_part(y: usize, bx: i32) -> u8 {
    let y = y as i32;
    match (y, bx) {
        (0..=2, 6..=9) | (3, 7..=8) => 1,
        (4..=9, 5..=10) => 2,
        (4..=10, 3..=4) => 3,
        (4..=10, 11..=12) => 4,
        (10..=15, 5..=7) => 5,
        (10..=15, 8..=10) => 6,
        _ => 0,
    }
}

fn sleeve_zone(y: usize, bx: i32) -> bool {
    matches!(template_part(y, bx), 3 | 4)
}

fn collar_zone(y: usize, bx: i32) -> bool {
    matches!((y, bx), (4..=5, 6..=9))
}

fn collar_cut(collar: Collar, y: usize, bx: i32) -> bool {
    match collar {
        Collar::Round => y == 4 && (7..=8).contains(&bx),
        Collar::V => (y == 4 && (6..=9).contains(&bx)) || (y == 5 && (7..=8).contains(&bx)),
    }
}

fn covers(spec: &GarmentSpec, y: usize, bx: i32) -> bool {
    let part = template_part(y, bx);
    let top = || part == 2 && !collar_cut(spec.collar, y, bx);
    let sleeve = || {
        matches!(part, 3 | 4)
            && match spec.sleeve {
                SleeveLength::None => false,
                SleeveLength::Short => (4..=5).contains(&y),
                SleeveLength::Long => true,
            }
    };
    match spec.kind {
        GarmentKind::TShirt => top() || sleeve(),
        GarmentKind::Dress => {
            top() || sleeve() || ((10..=12).contains(&y) && (5..=10).contains(&bx))
        }
        GarmentKind::Pants => (y == 9 && (5..=10).contains(&bx)) || matches!(part, 5 | 6),
    }
}

fn accent(pattern: Pattern, y: usize, bx: i32) -> bool {
    match pattern {
        Pattern::Solid => false,
        Pattern::Striped => y % 2 == 1,
        Pattern::Dotted => y.is_multiple_of(2) && bx.rem_euclid(2) == 0,
    }
}

/// Garment raster with everything needed downstream.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub spec: GarmentSpec,
    pub jitter: i32,
    pub image: LatentImage,
    pub caption: PromptText,
    pub cloth_mask: EditMask,
    pub foreground: Grid,
    pub parts: Vec<u8>,
}

impl Sample {
    pub fn mask_input(&self, prompt: &PromptText, enc: &PromptEncoder) -> Result<MaskInput> {
        MaskInput::new(
            self.foreground.clone(),
            self.parts.clone(),
            enc.mask_embedding(prompt),
        )
    }
}

pub fn jitter_for(body_seed: u64) -> i32 {
    rng::rng_for(body_seed, "body").gen_range(-MAX_JITTER..=MAX_JITTER)
}

/// Renders `spec` on the body selected by `body_seed`.
pub fn render(spec: &GarmentSpec, body_seed: u64) -> Result<Sample> {
    render_jittered(spec, jitter_for(body_seed))
}

pub fn render_jittered(spec: &GarmentSpec, jitter: i32) -> Result<Sample> {
    spec.validate()?;
    if jitter.abs() > MAX_JITTER {
        return Err(Error::param(format!(
            "jitter {jitter} beyond ±{MAX_JITTER}"
        )));
    }
    let n = SIZE * SIZE;
    let mut image = vec![0.0; 3 * n];
    let mut cloth = vec![0.0; n];
    let mut fg = vec![0.0; n];
    let mut parts = vec![0u8; n];
    for y in 0..SIZE {
        for x in 0..SIZE {
            let bx = x as i32 - jitter;
            let s = y * SIZE + x;
            let part = template_part(y, bx);
            let rgb = if covers(spec, y, bx) {
                cloth[s] = 1.0;
                if accent(spec.pattern, y, bx) {
                    ACCENT
                } else {
                    spec.color.rgb()
                }
            } else if part > 0 {
                SKIN
            } else {
                BACKGROUND
            };
            if part > 0 {
                fg[s] = 1.0;
            }
            parts[s] = part;
            for c in 0..3 {
                image[c * n + s] = rgb[c];
            }
        }
    }
    Ok(Sample {
        spec: *spec,
        jitter,
        image: LatentImage::from_vec(3, SIZE, SIZE, image)?,
        caption: PromptText::new(spec.caption()),
        cloth_mask: EditMask::binary(Grid::from_vec(SIZE, SIZE, cloth)?),
        foreground: Grid::from_vec(SIZE, SIZE, fg)?,
        parts,
    })
}

/// Nearest-neighbour upscale used for human-facing output only.
pub fn display_render(image: &LatentImage) -> LatentImage {
    let (c, h, w) = image.shape();
    let (hh, ww) = (h * DISPLAY_SCALE, w * DISPLAY_SCALE);
    let data = (0..c)
        .flat_map(|ch| (0..hh).flat_map(move |y| (0..ww).map(move |x| (ch, y, x))))
        .map(|(ch, y, x)| image.get(ch, y / DISPLAY_SCALE, x / DISPLAY_SCALE))
        .collect();
    LatentImage::from_vec(c, hh, ww, data).expect("finite input")
}

/// Sites that must change to turn `src` into `tgt` on the body with
/// `jitter`: the whole target garment, plus the whole source garment when
/// colour or pattern changes, plus source pixels in the sleeve or collar zone
/// when those change.
pub fn editing_region(src: &GarmentSpec, tgt: &GarmentSpec, jitter: i32) -> Result<EditMask> {
    let changed = src.diff(tgt);
    if changed.is_empty() {
        return Err(Error::param("source and target specs are identical"));
    }
    let whole = changed
        .iter()
        .any(|a| matches!(a, Attribute::Color | Attribute::Pattern | Attribute::Kind));
    let grid = Grid::from_fn(SIZE, SIZE, |y, x| {
        let bx = x as i32 - jitter;
        let in_src = covers(src, y, bx);
        let hit = covers(tgt, y, bx)
            || (in_src && whole)
            || (in_src && changed.contains(&Attribute::Sleeve) && sleeve_zone(y, bx))
            || (in_src && changed.contains(&Attribute::Collar) && collar_zone(y, bx));
        hit as u8 as f64
    });
    Ok(EditMask::binary(grid))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Color,
    Detail,
    Material,
    Comprehensive,
}

impl TaskType {
    pub const ALL: [TaskType; 4] = [
        TaskType::Color,
        TaskType::Detail,
        TaskType::Material,
        TaskType::Comprehensive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskType::Color => "color",
            TaskType::Detail => "detail",
            TaskType::Material => "material",
            TaskType::Comprehensive => "comprehensive",
        }
    }

    pub fn applies_to(self, kind: GarmentKind) -> bool {
        self != TaskType::Detail || kind.has_top()
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TaskType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::format(format!("unknown task type '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTruth {
    pub spec: GarmentSpec,
    pub region: EditMask,
    pub changed: Vec<Attribute>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditTask {
    pub id: String,
    pub task_type: TaskType,
    pub input: Sample,
    pub target_prompt: PromptText,
    pub truth: TaskTruth,
}

impl EditTask {
    /// Builds a task editing `src` into `tgt` on the body with `jitter`.
    pub fn new(
        id: impl Into<String>,
        task_type: TaskType,
        src: GarmentSpec,
        tgt: GarmentSpec,
        jitter: i32,
    ) -> Result<Self> {
        let input = render_jittered(&src, jitter)?;
        tgt.validate()?;
        Ok(Self {
            id: id.into(),
            task_type,
            target_prompt: PromptText::new(tgt.caption()),
            truth: TaskTruth {
                spec: tgt,
                region: editing_region(&src, &tgt, jitter)?,
                changed: src.diff(&tgt),
            },
            input,
        })
    }

    /// The target spec rendered on the input's body.
    pub fn target_render(&self) -> Sample {
        render_jittered(&self.truth.spec, self.input.jitter).expect("validated spec")
    }
}

fn other<T: Copy + PartialEq>(rng: &mut Rng, all: &[T], current: T) -> T {
    let pool: Vec<T> = all.iter().copied().filter(|v| *v != current).collect();
    *pool.choose(rng).expect("at least two values")
}

/// Random `(source, target)` pair for `task_type` on a garment of `kind`.
fn random_edit(
    rng: &mut Rng,
    task_type: TaskType,
    kind: GarmentKind,
) -> (GarmentSpec, GarmentSpec) {
    let src = GarmentSpec::random(rng, kind);
    let mut tgt = src;
    let shape_change = |rng: &mut Rng, tgt: &mut GarmentSpec, allow_collar: bool| {
        if allow_collar && rng.gen_bool(0.5) {
            tgt.collar = other(rng, Collar::ALL, src.collar);
        } else {
            tgt.sleeve = other(rng, SleeveLength::ALL, src.sleeve);
        }
    };
    match task_type {
        TaskType::Color => tgt.color = other(rng, Color::ALL, src.color),
        TaskType::Material => tgt.pattern = other(rng, Pattern::ALL, src.pattern),
        TaskType::Detail => shape_change(rng, &mut tgt, true),
        TaskType::Comprehensive => {
            tgt.color = other(rng, Color::ALL, src.color);
            if kind.has_top() {
                shape_change(rng, &mut tgt, false);
            } else {
                tgt.pattern = other(rng, Pattern::ALL, src.pattern);
            }
        }
    }
    (src, tgt)
}

/// One MaskNet training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTriple {
    pub input: MaskInput,
    pub target: EditMask,
    pub prompt: PromptText,
    pub source: GarmentSpec,
    pub task_type: TaskType,
    pub jitter: i32,
}

/// `n` independent training triples. The garment kind is drawn uniformly,
/// then a task type applicable to it.
pub fn gen_training_set(n: usize, seed: u64, enc: &PromptEncoder) -> Result<Vec<TrainingTriple>> {
    if n == 0 {
        return Err(Error::param("training set size must be at least 1"));
    }
    (0..n)
        .map(|i| {
            let mut rng = rng::rng_from(rng::derive_indexed(seed, "datagen/train", i as u64));
            let kind = *GarmentKind::ALL.choose(&mut rng).expect("nonempty");
            let types: Vec<TaskType> = TaskType::ALL
                .into_iter()
                .filter(|t| t.applies_to(kind))
                .collect();
            let task_type = *types.choose(&mut rng).expect("nonempty");
            let (src, tgt) = random_edit(&mut rng, task_type, kind);
            let jitter = rng.gen_range(-MAX_JITTER..=MAX_JITTER);
            let sample = render_jittered(&src, jitter)?;
            let prompt = PromptText::new(tgt.caption());
            Ok(TrainingTriple {
                input: sample.mask_input(&prompt, enc)?,
                target: editing_region(&src, &tgt, jitter)?,
                prompt,
                source: src,
                task_type,
                jitter,
            })
        })
        .collect()
}

/// `n_per_task` tasks of each type, ids `"{type}-{index:04}"`, ordered by id.
pub fn gen_eval_set(n_per_task: usize, seed: u64) -> Result<Vec<EditTask>> {
    if n_per_task == 0 {
        return Err(Error::param("need at least one task per type"));
    }
    let mut tasks = Vec::with_capacity(4 * n_per_task);
    for task_type in TaskType::ALL {
        for i in 0..n_per_task {
            let mut rng = rng::rng_from(rng::derive_indexed(
                seed,
                &format!("datagen/eval/{task_type}"),
                i as u64,
            ));
            let kinds: Vec<GarmentKind> = GarmentKind::ALL
                .iter()
                .copied()
                .filter(|k| task_type.applies_to(*k))
                .collect();
            let kind = *kinds.choose(&mut rng).expect("nonempty");
            let (src, tgt) = random_edit(&mut rng, task_type, kind);
            let jitter = rng.gen_range(-MAX_JITTER..=MAX_JITTER);
            tasks.push(EditTask::new(
                format!("{task_type}-{i:04}"),
                task_type,
                src,
                tgt,
                jitter,
            )?);
        }
    }
    tasks.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(tasks)
}

/// Best-matching `(spec, jitter)` for a 16×16 image and its squared error.
pub fn infer_sample(image: &LatentImage) -> Result<(Sample, f64)> {
    if image.shape() != (3, SIZE, SIZE) {
        return Err(Error::format(format!(
            "expected a 3×{SIZE}×{SIZE} image, got {:?}",
            image.shape()
        )));
    }
    let mut best: Option<(Sample, f64)> = None;
    for jitter in -MAX_JITTER..=MAX_JITTER {
        for spec in GarmentSpec::all() {
            let s = render_jittered(&spec, jitter)?;
            let d: f64 = s.image.sub(image).as_slice().iter().map(|v| v * v).sum();
            if best.as_ref().is_none_or(|(_, b)| d < *b) {
                best = Some((s, d));
            }
        }
    }
    Ok(best.expect("grammar is nonempty"))
}

/// Per-site mixture for editing `src` into `tgt`: one component per
/// single-attribute variant of the target, the target itself and the
/// source, all rendered on the same body. Unconditionally the components
/// are uniform; under `target_key` the target carries weight `fidelity`
/// and the rest share `1 - fidelity`.
pub fn task_mixture(
    src: &GarmentSpec,
    tgt: &GarmentSpec,
    jitter: i32,
    target_key: crate::prompt::PromptEmbedding,
    fidelity: f64,
    sigma0: f64,
) -> Result<(GaussianMixtureModel, Vec<String>)> {
    if !(fidelity > 0.0 && fidelity < 1.0) {
        return Err(Error::param("fidelity must lie in (0, 1)"));
    }
    let mut specs = vec![*tgt];
    for v in tgt.single_variants() {
        if !specs.contains(&v) {
            specs.push(v);
        }
    }
    if !specs.contains(src) {
        specs.push(*src);
    }
    let means = specs
        .iter()
        .map(|s| render_jittered(s, jitter).map(|r| r.image))
        .collect::<Result<Vec<_>>>()?;
    let k = specs.len();
    let rest = (1.0 - fidelity) / (k - 1) as f64;
    let members = (0..k)
        .map(|i| (i, if i == 0 { fidelity } else { rest }))
        .collect();
    let gmm = GaussianMixtureModel::uniform(means, sigma0)?
        .with_factorization(Factorization::PerSite)
        .with_class(ConditionClass {
            name: tgt.caption(),
            key: target_key,
            members,
        })?;
    let ids = specs.iter().map(|s| format!("{s}@{jitter}")).collect();
    Ok((gmm, ids))
}

/// Inverse of the prototype ids produced by [`task_mixture`].
pub fn resolve_prototype(id: &str) -> Result<LatentImage> {
    let (spec, jitter) = id
        .rsplit_once('@')
        .ok_or_else(|| Error::format(format!("prototype id '{id}' lacks '@jitter'")))?;
    let jitter: i32 = jitter
        .parse()
        .map_err(|_| Error::format(format!("bad jitter in '{id}'")))?;
    Ok(render_jittered(&spec.parse()?, jitter)?.image)
}

pub fn skin_rgb() -> [f64; 3] {
    SKIN
}

pub fn accent_rgb() -> [f64; 3] {
    ACCENT
}

pub fn background_rgb() -> [f64; 3] {
    BACKGROUND
}
